"""Pooled, late-interaction, and hybrid scoring plus top-k corpus retrieval.

Late interaction scores a pair by matching every valid query token to its
most similar valid candidate token under cosine similarity and averaging the
maxima over query tokens. Two deliberately separate implementations exist:

* maxsim_reference: plain loop over query tokens, float64 throughout. Slow,
  obviously correct, kept as the oracle.
* maxsim_blocked: tiled kernel working in float32 blocks with running
  per-query-token maxima and a float64 final mean. Never materializes the
  full similarity matrix. This is what retrieval uses.

The hybrid score is the plain sum of the pooled dot product and the late
score (weight 1.0 by default); the weight knob exists only for ablations.
"""

from __future__ import annotations

import heapq
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import chain
from typing import Iterable, Sequence

import numpy as np

from .embeddings import (
    DEFAULT_EXCLUDED_ROLES,
    Mode,
    RetrievalResult,
    ScoreBreakdown,
    SequenceEmbedding,
    TokenRole,
    normalize_rows,
    score_for_mode,
    valid_indices,
)
from .errors import (
    DimensionMismatch,
    EmptyCandidateTokens,
    EmptyCorpus,
    EmptyQueryTokens,
)

DEFAULT_QUERY_BLOCK = 128
DEFAULT_CANDIDATE_BLOCK = 256


@dataclass(frozen=True)
class ScoringConfig:
    """Scoring policy: mode, role exclusions, hybrid weight.

    Pooling and padding roles are always excluded from both sides no matter
    what the caller passes; extra roles (e.g. vision on the query side) can
    be stacked on top.
    """

    mode: Mode
    query_exclude_roles: frozenset = DEFAULT_EXCLUDED_ROLES
    candidate_exclude_roles: frozenset = DEFAULT_EXCLUDED_ROLES
    hybrid_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(
            self,
            "query_exclude_roles",
            frozenset(TokenRole(r) for r in self.query_exclude_roles) | DEFAULT_EXCLUDED_ROLES,
        )
        object.__setattr__(
            self,
            "candidate_exclude_roles",
            frozenset(TokenRole(r) for r in self.candidate_exclude_roles)
            | DEFAULT_EXCLUDED_ROLES,
        )


def _require_same_dim(q: SequenceEmbedding, c: SequenceEmbedding) -> None:
    if q.dim != c.dim:
        raise DimensionMismatch(f"query dim {q.dim} != candidate dim {c.dim}")


def _query_matrix(q: SequenceEmbedding, cfg: ScoringConfig) -> np.ndarray:
    idx = valid_indices(q, cfg.query_exclude_roles)
    if not idx:
        raise EmptyQueryTokens(q.seq_id)
    return q.tokens[idx]


def _candidate_matrix(c: SequenceEmbedding, cfg: ScoringConfig) -> np.ndarray:
    idx = valid_indices(c, cfg.candidate_exclude_roles)
    if not idx:
        raise EmptyCandidateTokens(c.seq_id)
    return c.tokens[idx]


def pooled_score(q: SequenceEmbedding, c: SequenceEmbedding) -> float:
    """Dot product of the two stored unit pooled vectors, in float64."""
    _require_same_dim(q, c)
    return float(np.dot(q.pooled.astype(np.float64), c.pooled.astype(np.float64)))


def maxsim_reference(q: SequenceEmbedding, c: SequenceEmbedding, cfg: ScoringConfig) -> float:
    """Oracle late-interaction score: float64 end to end, no tiling."""
    _require_same_dim(q, c)
    qn = normalize_rows(_query_matrix(q, cfg).astype(np.float64))
    cn = normalize_rows(_candidate_matrix(c, cfg).astype(np.float64))
    total = 0.0
    for i in range(qn.shape[0]):
        total += float(np.max(cn @ qn[i]))
    return total / qn.shape[0]


def _blocked_row_maxima(
    qn: np.ndarray,
    cn: np.ndarray,
    query_block: int,
    candidate_block: int,
) -> np.ndarray:
    """Running max cosine per query row over candidate rows, float32 tiles."""
    out = np.empty(qn.shape[0], dtype=np.float32)
    for qs in range(0, qn.shape[0], query_block):
        qb = qn[qs : qs + query_block]
        acc = np.full(qb.shape[0], -np.inf, dtype=np.float32)
        for cs in range(0, cn.shape[0], candidate_block):
            sims = qb @ cn[cs : cs + candidate_block].T
            np.maximum(acc, sims.max(axis=1), out=acc)
        out[qs : qs + qb.shape[0]] = acc
    return out


def _mean64(maxima: np.ndarray) -> float:
    return float(maxima.astype(np.float64).mean())


def maxsim_blocked(
    q: SequenceEmbedding,
    c: SequenceEmbedding,
    cfg: ScoringConfig,
    *,
    query_block: int = DEFAULT_QUERY_BLOCK,
    candidate_block: int = DEFAULT_CANDIDATE_BLOCK,
) -> float:
    """Tiled late-interaction score; agrees with maxsim_reference to 1e-5."""
    if query_block < 1 or candidate_block < 1:
        raise ValueError("block sizes must be >= 1")
    _require_same_dim(q, c)
    qn = normalize_rows(_query_matrix(q, cfg).astype(np.float32, copy=False))
    cn = normalize_rows(_candidate_matrix(c, cfg).astype(np.float32, copy=False))
    return _mean64(_blocked_row_maxima(qn, cn, query_block, candidate_block))


def hybrid_score(q: SequenceEmbedding, c: SequenceEmbedding, cfg: ScoringConfig) -> ScoreBreakdown:
    """Full breakdown for one pair; hybrid = single + weight * late."""
    s_single = pooled_score(q, c)
    s_late = maxsim_blocked(q, c, cfg)
    return ScoreBreakdown.combine(s_single, s_late, cfg.hybrid_weight)


@dataclass(frozen=True)
class PreparedCandidate:
    """Candidate with role filtering and token normalization done once."""

    seq_id: int
    pooled64: np.ndarray  # (dim,) float64
    tokens_normed: np.ndarray | None  # (m, dim) float32 unit rows; None in single mode

    @property
    def dim(self) -> int:
        return int(self.pooled64.shape[0])


def prepare_corpus(
    corpus: Sequence[SequenceEmbedding], cfg: ScoringConfig
) -> list[PreparedCandidate]:
    """Normalize candidate token matrices once so many queries can reuse them.

    In late/hybrid mode a candidate with no valid tokens is an error here,
    before any query runs; it is never silently skipped.
    """
    prepared = []
    for c in corpus:
        if cfg.mode is Mode.SINGLE:
            tokens_normed = None
        else:
            tokens_normed = normalize_rows(_candidate_matrix(c, cfg).astype(np.float32, copy=False))
        prepared.append(
            PreparedCandidate(
                seq_id=c.seq_id,
                pooled64=c.pooled.astype(np.float64),
                tokens_normed=tokens_normed,
            )
        )
    return prepared


def _breakdown_against(
    qpooled64: np.ndarray,
    qn: np.ndarray | None,
    cand: PreparedCandidate,
    cfg: ScoringConfig,
) -> ScoreBreakdown:
    if cand.dim != qpooled64.shape[0]:
        raise DimensionMismatch(
            f"candidate {cand.seq_id} dim {cand.dim} != query dim {qpooled64.shape[0]}"
        )
    s_single = float(np.dot(qpooled64, cand.pooled64))
    if cfg.mode is Mode.SINGLE:
        # Token-level work is skipped entirely; the late slot reads 0.
        return ScoreBreakdown.combine(s_single, 0.0, cfg.hybrid_weight)
    maxima = _blocked_row_maxima(qn, cand.tokens_normed, DEFAULT_QUERY_BLOCK, DEFAULT_CANDIDATE_BLOCK)
    return ScoreBreakdown.combine(s_single, _mean64(maxima), cfg.hybrid_weight)


def rank_prepared(
    query: SequenceEmbedding,
    prepared: Sequence[PreparedCandidate],
    cfg: ScoringConfig,
    k: int,
    workers: int = 1,
) -> RetrievalResult:
    """Rank a prepared corpus for one query. Output is identical for any
    worker count: every worker keeps a bounded top-k and the merge reapplies
    the global (score desc, candidate id asc) order."""
    if not prepared:
        raise EmptyCorpus("cannot rank an empty corpus")
    if k < 1 or k > len(prepared):
        raise ValueError(f"k={k} outside [1, {len(prepared)}]")
    if workers < 1:
        raise ValueError("workers must be >= 1")

    qpooled64 = query.pooled.astype(np.float64)
    qn = None
    if cfg.mode is not Mode.SINGLE:
        qn = normalize_rows(_query_matrix(query, cfg).astype(np.float32, copy=False))

    def sort_key(item: tuple[int, ScoreBreakdown]) -> tuple[float, int]:
        cid, breakdown = item
        return (-score_for_mode(breakdown, cfg.mode), cid)

    def score_chunk(chunk: Sequence[PreparedCandidate]) -> list[tuple[int, ScoreBreakdown]]:
        scored = ((c.seq_id, _breakdown_against(qpooled64, qn, c, cfg)) for c in chunk)
        return heapq.nsmallest(k, scored, key=sort_key)

    if workers == 1:
        top = score_chunk(prepared)
    else:
        step = (len(prepared) + workers - 1) // workers
        chunks = [prepared[i : i + step] for i in range(0, len(prepared), step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            locals_ = list(pool.map(score_chunk, chunks))
        top = heapq.nsmallest(k, chain.from_iterable(locals_), key=sort_key)

    return RetrievalResult(query_id=query.seq_id, mode=cfg.mode, ranked=tuple(top))


def score_corpus(
    query: SequenceEmbedding,
    corpus: Sequence[SequenceEmbedding],
    cfg: ScoringConfig,
    k: int,
    workers: int = 1,
) -> RetrievalResult:
    """Top-k retrieval of corpus candidates for one query."""
    if not corpus:
        raise EmptyCorpus("cannot rank an empty corpus")
    return rank_prepared(query, prepare_corpus(corpus, cfg), cfg, k, workers)


@dataclass(frozen=True)
class MatchExplanation:
    """Best candidate token for one query token, with runner-up context.

    Indices refer to positions in the original token matrices, so they can
    be mapped straight back onto the input sequences. alternatives lists the
    top matches (best first, ties by ascending index) and always includes
    the best match itself.
    """

    query_index: int
    best_index: int
    similarity: float
    alternatives: tuple[tuple[int, float], ...]


def explain_matches(
    q: SequenceEmbedding,
    c: SequenceEmbedding,
    cfg: ScoringConfig,
    alternatives_k: int = 5,
) -> list[MatchExplanation]:
    """Per-query-token match table under the same float64 path as the oracle.

    The mean of the returned similarities equals maxsim_reference for the
    same pair and config. Argmax ties resolve to the lowest candidate index.
    """
    if alternatives_k < 1:
        raise ValueError("alternatives_k must be >= 1")
    _require_same_dim(q, c)
    q_idx = valid_indices(q, cfg.query_exclude_roles)
    c_idx = valid_indices(c, cfg.candidate_exclude_roles)
    if not q_idx:
        raise EmptyQueryTokens(q.seq_id)
    if not c_idx:
        raise EmptyCandidateTokens(c.seq_id)
    qn = normalize_rows(q.tokens[q_idx].astype(np.float64))
    cn = normalize_rows(c.tokens[c_idx].astype(np.float64))

    out = []
    take = min(alternatives_k, len(c_idx))
    for row, qi in enumerate(q_idx):
        sims = cn @ qn[row]
        best_pos = int(np.argmax(sims))  # first occurrence wins ties
        # Stable sort on negated sims keeps equal values in ascending index order.
        order = np.argsort(-sims, kind="stable")[:take]
        alts = tuple((c_idx[int(p)], float(sims[int(p)])) for p in order)
        out.append(
            MatchExplanation(
                query_index=qi,
                best_index=c_idx[best_pos],
                similarity=float(sims[best_pos]),
                alternatives=alts,
            )
        )
    return out


def match_records(explanations: Iterable[MatchExplanation]) -> list[dict]:
    """Plain-dict form of explanations, one record per query token."""
    return [
        {
            "query_index": e.query_index,
            "best_index": e.best_index,
            "similarity": e.similarity,
            "alternatives": [[i, s] for i, s in e.alternatives],
        }
        for e in explanations
    ]


def match_records_jsonl(explanations: Iterable[MatchExplanation]) -> str:
    """Line-delimited serialization consumed by downstream visualization."""
    return "\n".join(json.dumps(r) for r in match_records(explanations))
