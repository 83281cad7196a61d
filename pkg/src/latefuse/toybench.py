"""Controlled pairwise benchmark isolating local binding evidence.

Each benchmark pair holds a positive document whose panels bind codes to
markers and a hard negative carrying the same codes and the same markers in
the same panel positions, but with the code assignment deranged (no code
stays on its own marker). Under the synthetic encoder both documents pool to
bit-identical vectors, so single-vector scoring is an exact coin flip while
token-level matching separates them cleanly. The document structure is
plain data and can be re-encoded by any other encoder, including real
models via the exporter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import Mode, SequenceEmbedding, TokenRole, score_for_mode
from .errors import NoDerangementExists, UnknownId
from .scoring import ScoringConfig, hybrid_score

DEFAULT_CODE_POOL = 100
DEFAULT_MARKER_POOL = 100


@dataclass(frozen=True)
class BindingDocument:
    """A document as a bag of panels, each binding one code to one marker."""

    doc_id: int
    panels: tuple[tuple[int, int], ...]  # (code_id, marker_id) per panel

    def __post_init__(self):
        object.__setattr__(self, "panels", tuple((int(c), int(m)) for c, m in self.panels))
        codes = [c for c, _ in self.panels]
        markers = [m for _, m in self.panels]
        if len(set(codes)) != len(codes):
            raise ValueError("codes within a document must be distinct")
        if len(set(markers)) != len(markers):
            raise ValueError("markers within a document must be distinct")

    @property
    def codes(self) -> list[int]:
        return [c for c, _ in self.panels]

    @property
    def markers(self) -> list[int]:
        return [m for _, m in self.panels]


@dataclass(frozen=True)
class BenchmarkSpec:
    """Pairs of (positive, hard negative) plus one query per positive panel."""

    pairs: tuple[tuple[BindingDocument, BindingDocument], ...]
    queries: tuple[tuple[int, int, int], ...]  # (pair_index, code_id, marker_id)
    seed: int

    def __post_init__(self):
        expected = sum(len(pos.panels) for pos, _ in self.pairs)
        if len(self.queries) != expected:
            raise ValueError("need exactly one query per positive panel")


def generate_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed point, by rejection.

    Every derangement is equally likely because plain uniform permutations
    are resampled until one qualifies. n < 2 has no derangement.
    """
    if n < 2:
        raise NoDerangementExists(f"no derangement exists for n={n}")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def generate_benchmark(
    num_pairs: int,
    bindings_per_doc: int,
    seed: int,
    code_pool_size: int = DEFAULT_CODE_POOL,
    marker_pool_size: int = DEFAULT_MARKER_POOL,
) -> BenchmarkSpec:
    """Build num_pairs (positive, negative) documents and all their queries.

    The same seed always yields the same benchmark. Positive doc ids are
    even, their negatives odd, so ids stay unique across the benchmark.
    """
    if bindings_per_doc < 2:
        raise ValueError("bindings_per_doc must be >= 2 to allow a derangement")
    if code_pool_size < bindings_per_doc or marker_pool_size < bindings_per_doc:
        raise ValueError("id pools must be at least bindings_per_doc wide")
    rng = np.random.default_rng(seed)
    pairs = []
    queries = []
    for p in range(num_pairs):
        codes = rng.choice(code_pool_size, size=bindings_per_doc, replace=False)
        markers = rng.choice(marker_pool_size, size=bindings_per_doc, replace=False)
        positive = BindingDocument(
            doc_id=2 * p,
            panels=tuple(zip(codes.tolist(), markers.tolist())),
        )
        perm = generate_derangement(bindings_per_doc, rng)
        negative = BindingDocument(
            doc_id=2 * p + 1,
            panels=tuple(
                (int(codes[perm[i]]), int(markers[i])) for i in range(bindings_per_doc)
            ),
        )
        pairs.append((positive, negative))
        queries.extend((p, int(c), int(m)) for c, m in positive.panels)
    return BenchmarkSpec(pairs=tuple(pairs), queries=tuple(queries), seed=seed)


@dataclass(frozen=True)
class SyntheticCodebook:
    """Unit vectors standing in for code and marker mentions."""

    code_vectors: np.ndarray  # (num_codes, dim) float64 unit rows
    marker_vectors: np.ndarray  # (num_markers, dim) float64 unit rows

    def __post_init__(self):
        for name in ("code_vectors", "marker_vectors"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def generate(
        cls,
        num_codes: int,
        num_markers: int,
        dim: int,
        seed: int,
    ) -> "SyntheticCodebook":
        rng = np.random.default_rng(seed)
        codes = rng.standard_normal((num_codes, dim))
        markers = rng.standard_normal((num_markers, dim))
        codes /= np.linalg.norm(codes, axis=1, keepdims=True)
        markers /= np.linalg.norm(markers, axis=1, keepdims=True)
        return cls(code_vectors=codes, marker_vectors=markers)

    @property
    def dim(self) -> int:
        return int(self.code_vectors.shape[1])

    def code(self, code_id: int) -> np.ndarray:
        if not 0 <= code_id < self.code_vectors.shape[0]:
            raise UnknownId(f"code id {code_id} outside codebook")
        return self.code_vectors[code_id]

    def marker(self, marker_id: int) -> np.ndarray:
        if not 0 <= marker_id < self.marker_vectors.shape[0]:
            raise UnknownId(f"marker id {marker_id} outside codebook")
        return self.marker_vectors[marker_id]


def _canonical_bag(doc: BindingDocument, codebook: SyntheticCodebook) -> np.ndarray:
    """Sum of all element vectors in id-sorted order, float64.

    The order is canonical so two documents with the same element multisets
    produce bit-identical sums regardless of panel arrangement.
    """
    total = np.zeros(codebook.dim, dtype=np.float64)
    for c in sorted(doc.codes):
        total += codebook.code(c)
    for m in sorted(doc.markers):
        total += codebook.marker(m)
    return total


def synthetic_encode_document(
    doc: BindingDocument, codebook: SyntheticCodebook
) -> SequenceEmbedding:
    """One raw token per panel (code + marker vector) plus a pooling token.

    The pooling token row holds the canonical bag sum and the pooled field
    its normalization, mirroring how a pooled readout summarizes a sequence.
    """
    panel_rows = [codebook.code(c) + codebook.marker(m) for c, m in doc.panels]
    bag = _canonical_bag(doc, codebook)
    pooled = bag / np.linalg.norm(bag)
    tokens = np.vstack(panel_rows + [bag])
    roles = [TokenRole.TEXT] * len(panel_rows) + [TokenRole.POOLING]
    return SequenceEmbedding(
        seq_id=doc.doc_id,
        layer_id=0,
        pooled=pooled.astype(np.float32),
        tokens=tokens.astype(np.float32),
        roles=np.array(roles, dtype=np.uint8),
    )


def synthetic_encode_query(
    code_id: int,
    marker_id: int,
    codebook: SyntheticCodebook,
    seq_id: int = 0,
) -> SequenceEmbedding:
    """A query mentions exactly one binding: one text token, one pooling token."""
    v = codebook.code(code_id) + codebook.marker(marker_id)
    pooled = v / np.linalg.norm(v)
    return SequenceEmbedding(
        seq_id=seq_id,
        layer_id=0,
        pooled=pooled.astype(np.float32),
        tokens=np.vstack([v, v]).astype(np.float32),
        roles=np.array([TokenRole.TEXT, TokenRole.POOLING], dtype=np.uint8),
    )


@dataclass(frozen=True)
class PairwiseAccuracy:
    accuracy: float
    tie_fraction: float


def pairwise_accuracy(
    bench: BenchmarkSpec,
    codebook: SyntheticCodebook,
    mode: Mode,
) -> PairwiseAccuracy:
    """Fraction of queries scoring their positive above its hard negative.

    An exact tie (bit-equal selected scores) contributes 0.5 to accuracy and
    counts toward tie_fraction. Under the synthetic encoder single-vector
    scores tie on every query by construction.
    """
    cfg = ScoringConfig(mode=mode)
    encoded = [
        (synthetic_encode_document(pos, codebook), synthetic_encode_document(neg, codebook))
        for pos, neg in bench.pairs
    ]
    total = 0.0
    ties = 0
    for qi, (pair_index, code_id, marker_id) in enumerate(bench.queries):
        query = synthetic_encode_query(code_id, marker_id, codebook, seq_id=qi)
        pos_emb, neg_emb = encoded[pair_index]
        s_pos = score_for_mode(hybrid_score(query, pos_emb, cfg), mode)
        s_neg = score_for_mode(hybrid_score(query, neg_emb, cfg), mode)
        if s_pos == s_neg:
            ties += 1
            total += 0.5
        elif s_pos > s_neg:
            total += 1.0
    n = len(bench.queries)
    return PairwiseAccuracy(accuracy=total / n, tie_fraction=ties / n)


def save_benchmark(bench: BenchmarkSpec, path: str | Path) -> None:
    """Write the benchmark as structured text so other encoders can reuse it."""
    payload = {
        "seed": bench.seed,
        "pairs": [
            {
                "positive": {"doc_id": pos.doc_id, "panels": [list(p) for p in pos.panels]},
                "negative": {"doc_id": neg.doc_id, "panels": [list(p) for p in neg.panels]},
            }
            for pos, neg in bench.pairs
        ],
        "queries": [list(q) for q in bench.queries],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_benchmark(path: str | Path) -> BenchmarkSpec:
    payload = json.loads(Path(path).read_text())
    pairs = tuple(
        (
            BindingDocument(
                doc_id=entry["positive"]["doc_id"],
                panels=tuple(tuple(p) for p in entry["positive"]["panels"]),
            ),
            BindingDocument(
                doc_id=entry["negative"]["doc_id"],
                panels=tuple(tuple(p) for p in entry["negative"]["panels"]),
            ),
        )
        for entry in payload["pairs"]
    )
    queries = tuple(tuple(q) for q in payload["queries"])
    return BenchmarkSpec(pairs=pairs, queries=queries, seed=payload["seed"])


def training_pairs(
    bench: BenchmarkSpec,
    codebook: SyntheticCodebook,
    queries_per_pair: int | None = None,
) -> list[tuple[SequenceEmbedding, SequenceEmbedding]]:
    """(query, positive document) pairs for contrastive adapter training.

    In-batch training treats other pairs' positives as negatives, so capping
    queries_per_pair (usually at 1) keeps batches free of duplicate
    positives; a query whose "negative" is its own document teaches nothing.
    """
    encoded = {pos.doc_id: synthetic_encode_document(pos, codebook) for pos, _ in bench.pairs}
    taken: dict[int, int] = {}
    out = []
    for qi, (pair_index, code_id, marker_id) in enumerate(bench.queries):
        if queries_per_pair is not None:
            if taken.get(pair_index, 0) >= queries_per_pair:
                continue
            taken[pair_index] = taken.get(pair_index, 0) + 1
        pos_doc = bench.pairs[pair_index][0]
        query = synthetic_encode_query(code_id, marker_id, codebook, seq_id=qi)
        out.append((query, encoded[pos_doc.doc_id]))
    return out
