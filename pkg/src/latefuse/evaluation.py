"""Retrieval metrics, batch evaluation, and layer sweeps.

Metrics are computed from full rankings produced by the scoring engine.
Recall@k divides by min(k, number of relevant) so short relevant sets can
still reach 1.0. NDCG@k uses linear gains over log2(rank+1) with 1-indexed
ranks and the ideal ordering from the same gain multiset.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import AbstractSet, Mapping, Sequence

import numpy as np

from .embeddings import Mode, SequenceEmbedding
from .errors import EmptyRelevantSet, MissingLayer, MissingQrels
from .scoring import ScoringConfig, prepare_corpus, rank_prepared

LAST_LAYER = "last"


@dataclass(frozen=True)
class Qrels:
    """Graded judgments: query id -> {candidate id -> integer gain >= 0}.

    Entries with gain 0 are recorded but never count as relevant. Every
    query must have at least one positive-gain candidate.
    """

    by_query: Mapping[int, Mapping[int, int]]

    def __post_init__(self):
        frozen = {}
        for qid, entries in self.by_query.items():
            cleaned = {int(c): int(g) for c, g in entries.items()}
            if any(g < 0 for g in cleaned.values()):
                raise ValueError(f"query {qid}: gains must be non-negative")
            if not any(g > 0 for g in cleaned.values()):
                raise EmptyRelevantSet(f"query {qid} has no relevant candidate")
            frozen[int(qid)] = cleaned
        object.__setattr__(self, "by_query", frozen)

    @classmethod
    def from_text(cls, path: str | Path) -> "Qrels":
        """Parse whitespace-separated lines: query_id candidate_id [gain].

        A missing gain defaults to 1; blank lines and #-comments are skipped.
        """
        table: dict[int, dict[int, int]] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected 'query candidate [gain]'")
            qid, cid = int(parts[0]), int(parts[1])
            gain = int(parts[2]) if len(parts) == 3 else 1
            table.setdefault(qid, {})[cid] = gain
        return cls(by_query=table)

    def gains_for(self, query_id: int) -> Mapping[int, int]:
        if query_id not in self.by_query:
            raise MissingQrels(query_id)
        return self.by_query[query_id]

    def relevant_for(self, query_id: int) -> set[int]:
        return {c for c, g in self.gains_for(query_id).items() if g > 0}


def recall_at_k(ranked_ids: Sequence[int], relevant: AbstractSet[int], k: int) -> float:
    """|top-k intersect relevant| / min(k, |relevant|)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise EmptyRelevantSet("recall undefined without relevant candidates")
    hits = sum(1 for cid in ranked_ids[:k] if cid in relevant)
    return hits / min(k, len(relevant))


def ndcg_at_k(ranked_ids: Sequence[int], gains: Mapping[int, int], k: int) -> float:
    """DCG over the ideal DCG, both truncated at k, linear gains."""
    if k < 1:
        raise ValueError("k must be >= 1")
    positive = sorted((g for g in gains.values() if g > 0), reverse=True)
    if not positive:
        raise EmptyRelevantSet("ndcg undefined without positive gains")
    dcg = 0.0
    for i, cid in enumerate(ranked_ids[:k], start=1):
        gain = gains.get(cid, 0)
        if gain:
            dcg += gain / np.log2(i + 1)
    idcg = sum(g / np.log2(i + 1) for i, g in enumerate(positive[:k], start=1))
    return dcg / idcg


@dataclass(frozen=True)
class MetricSpec:
    name: str  # "recall" | "ndcg"
    k: int

    @classmethod
    def parse(cls, text: str) -> "MetricSpec":
        try:
            name, k_text = text.split("@", 1)
            k = int(k_text)
        except ValueError as exc:
            raise ValueError(f"bad metric spec {text!r}, expected name@k") from exc
        name = name.strip().lower()
        if name not in ("recall", "ndcg"):
            raise ValueError(f"unknown metric {name!r}")
        if k < 1:
            raise ValueError("metric cutoff must be >= 1")
        return cls(name=name, k=k)

    def __str__(self) -> str:
        return f"{self.name}@{self.k}"


@dataclass(frozen=True)
class EvalReport:
    mode: Mode
    metric_names: tuple[str, ...]
    per_query: Mapping[str, Mapping[int, float]]
    macro: Mapping[str, float]

    def to_records(self) -> list[dict]:
        rows = []
        for metric in self.metric_names:
            for qid in sorted(self.per_query[metric]):
                rows.append(
                    {
                        "type": "query",
                        "query_id": qid,
                        "metric": metric,
                        "value": self.per_query[metric][qid],
                    }
                )
        for metric in self.metric_names:
            rows.append({"type": "macro", "metric": metric, "value": self.macro[metric]})
        return rows

    def to_table(self) -> str:
        lines = [f"mode={self.mode.value}  queries={len(next(iter(self.per_query.values())))}"]
        lines.append("metric       macro")
        for metric in self.metric_names:
            lines.append(f"{metric:<12} {self.macro[metric]:.6f}")
        return "\n".join(lines)


def run_eval(
    corpus: Sequence[SequenceEmbedding],
    queries: Sequence[SequenceEmbedding],
    qrels: Qrels,
    cfg: ScoringConfig,
    metrics: Sequence[str] = ("recall@1", "ndcg@5"),
    workers: int = 1,
) -> EvalReport:
    """Rank the full corpus for every query and aggregate the metrics.

    Judgments are checked up front so a missing query fails before any
    scoring happens. Results do not depend on the worker count: queries are
    scored independently and reduced in input order.
    """
    specs = [MetricSpec.parse(m) for m in metrics]
    for q in queries:
        qrels.gains_for(q.seq_id)

    prepared = prepare_corpus(corpus, cfg)
    k_full = len(prepared)

    def evaluate(query: SequenceEmbedding) -> dict[str, float]:
        result = rank_prepared(query, prepared, cfg, k=k_full, workers=1)
        ranked_ids = result.candidate_ids()
        values = {}
        for spec in specs:
            if spec.name == "recall":
                values[str(spec)] = recall_at_k(ranked_ids, qrels.relevant_for(query.seq_id), spec.k)
            else:
                values[str(spec)] = ndcg_at_k(ranked_ids, qrels.gains_for(query.seq_id), spec.k)
        return values

    if workers == 1:
        all_values = [evaluate(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_values = list(pool.map(evaluate, queries))

    per_query = {
        str(spec): {q.seq_id: vals[str(spec)] for q, vals in zip(queries, all_values)}
        for spec in specs
    }
    macro = {m: float(np.mean(list(vals.values()))) for m, vals in per_query.items()}
    return EvalReport(
        mode=cfg.mode,
        metric_names=tuple(str(s) for s in specs),
        per_query=per_query,
        macro=macro,
    )


@dataclass(frozen=True)
class LayerSweepConfig:
    """Which layer feeds the pooled score and which layers feed tokens."""

    pool_layer: int | str = LAST_LAYER
    token_layers: tuple = (LAST_LAYER,)
    mode: Mode = Mode.LATE


@dataclass(frozen=True)
class LayerSweepRow:
    pool_layer: int
    token_layer: int
    macro: Mapping[str, float]


def records_by_layer(
    records: Sequence[SequenceEmbedding],
) -> dict[int, dict[int, SequenceEmbedding]]:
    """Group records as layer_id -> seq_id -> embedding."""
    grouped: dict[int, dict[int, SequenceEmbedding]] = {}
    for rec in records:
        grouped.setdefault(rec.layer_id, {})[rec.seq_id] = rec
    return grouped


def _resolve_layer(layer: int | str, available: Sequence[int]) -> int:
    if layer == LAST_LAYER:
        return max(available)
    layer = int(layer)
    if layer not in available:
        raise MissingLayer(layer)
    return layer


def _combine_layers(
    grouped: dict[int, dict[int, SequenceEmbedding]],
    pool_layer: int,
    token_layer: int,
) -> list[SequenceEmbedding]:
    """Pooled vector from one layer, token matrix from another, per sequence."""
    pool_map = grouped[pool_layer]
    token_map = grouped[token_layer]
    combined = []
    for sid in sorted(token_map):
        if sid not in pool_map:
            raise MissingLayer(pool_layer)
        tok = token_map[sid]
        combined.append(
            SequenceEmbedding(
                seq_id=sid,
                layer_id=token_layer,
                pooled=pool_map[sid].pooled,
                tokens=tok.tokens,
                roles=tok.roles,
            )
        )
    return combined


def layer_sweep(
    multilayer_corpus: Sequence[SequenceEmbedding],
    multilayer_queries: Sequence[SequenceEmbedding],
    qrels: Qrels,
    sweep: LayerSweepConfig,
    metrics: Sequence[str] = ("ndcg@5",),
    workers: int = 1,
) -> list[LayerSweepRow]:
    """Evaluate every requested token layer with the pooled layer held fixed.

    With pool and token layers both at the last layer, the row reproduces a
    plain run_eval over the last-layer records.
    """
    corpus_grouped = records_by_layer(multilayer_corpus)
    query_grouped = records_by_layer(multilayer_queries)
    if not corpus_grouped or not query_grouped:
        raise MissingLayer(sweep.pool_layer)
    corpus_layers = sorted(corpus_grouped)
    query_layers = sorted(query_grouped)

    pool_c = _resolve_layer(sweep.pool_layer, corpus_layers)
    pool_q = _resolve_layer(sweep.pool_layer, query_layers)

    rows = []
    for token_layer in sweep.token_layers:
        tl_c = _resolve_layer(token_layer, corpus_layers)
        tl_q = _resolve_layer(token_layer, query_layers)
        corpus = _combine_layers(corpus_grouped, pool_c, tl_c)
        queries = _combine_layers(query_grouped, pool_q, tl_q)
        cfg = ScoringConfig(mode=sweep.mode)
        report = run_eval(corpus, queries, qrels, cfg, metrics=metrics, workers=workers)
        rows.append(LayerSweepRow(pool_layer=pool_c, token_layer=tl_c, macro=report.macro))
    return rows
