"""Shared data model: token roles, per-sequence embeddings, score breakdowns.

A SequenceEmbedding bundles what one encoder forward pass leaves behind for a
single sequence: the pooled unit-norm vector used for single-vector scoring
and the raw per-token hidden states used for late interaction. Token-level
normalization happens at scoring time, never at storage time.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable

import numpy as np

from .errors import DimensionMismatch, ZeroNormToken

# Unit-norm slack for stored pooled vectors (float32 storage).
POOLED_NORM_TOL = 1e-5
# Rows with L2 norm at or below this cannot be direction-normalized.
ZERO_NORM_THRESHOLD = 1e-12


class TokenRole(IntEnum):
    """Role of one token position. Values double as the on-disk role bytes."""

    TEXT = 0
    VISION = 1
    SPECIAL = 2
    POOLING = 3
    PADDING = 4


# Pooling and padding positions never participate in token-level matching.
DEFAULT_EXCLUDED_ROLES = frozenset({TokenRole.POOLING, TokenRole.PADDING})


class Mode(str, Enum):
    """Which score ranks candidates."""

    SINGLE = "single"
    LATE = "late"
    HYBRID = "hybrid"


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SequenceEmbedding:
    """One encoded sequence, immutable and safe to share across threads.

    tokens holds raw (unnormalized) hidden states, one row per token.
    pooled must already be unit L2 norm within POOLED_NORM_TOL.
    roles carries one TokenRole value per token row; at most one row may be
    the pooling position.
    """

    seq_id: int
    layer_id: int
    pooled: np.ndarray  # (dim,) float32, unit norm
    tokens: np.ndarray  # (n_tokens, dim) float32, raw
    roles: np.ndarray  # (n_tokens,) uint8 of TokenRole values

    def __post_init__(self):
        pooled = _frozen_array(self.pooled, np.float32)
        if pooled.ndim != 1 or pooled.shape[0] == 0:
            raise ValueError("pooled must be a non-empty 1-d vector")
        tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if tokens.size == 0:
            tokens = tokens.reshape(0, pooled.shape[0])
        if tokens.ndim != 2:
            raise ValueError("tokens must be a 2-d matrix")
        tokens.setflags(write=False)
        roles = _frozen_array(self.roles, np.uint8)
        object.__setattr__(self, "pooled", pooled)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "roles", roles)

        if tokens.shape[1] != pooled.shape[0]:
            raise DimensionMismatch(
                f"tokens dim {tokens.shape[1]} != pooled dim {pooled.shape[0]}"
            )
        if roles.shape != (tokens.shape[0],):
            raise ValueError("roles length must match token count")
        if roles.size and int(roles.max()) > int(max(TokenRole)):
            raise ValueError("roles contain a value outside TokenRole")
        norm = float(np.linalg.norm(pooled.astype(np.float64)))
        if abs(norm - 1.0) > POOLED_NORM_TOL:
            raise ValueError(f"pooled norm {norm} departs from 1 beyond {POOLED_NORM_TOL}")
        if int(np.count_nonzero(roles == TokenRole.POOLING)) > 1:
            raise ValueError("at most one token may carry the pooling role")

    @property
    def dim(self) -> int:
        return int(self.pooled.shape[0])

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])


def valid_indices(
    emb: SequenceEmbedding,
    exclude_roles: Iterable[TokenRole] = DEFAULT_EXCLUDED_ROLES,
) -> list[int]:
    """Ascending token indices whose role is not excluded.

    Callers own the policy; scoring configs always fold in pooling/padding.
    """
    excluded = {int(r) for r in exclude_roles}
    return [i for i, r in enumerate(emb.roles.tolist()) if r not in excluded]


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Return a new matrix with unit-L2 rows, preserving dtype.

    Raises ZeroNormToken with the first offending row index when any row
    norm is at or below ZERO_NORM_THRESHOLD. Norms are measured in float64
    so the threshold test does not depend on storage dtype.
    """
    matrix = np.asarray(matrix)
    norms = np.linalg.norm(matrix.astype(np.float64, copy=False), axis=1)
    bad = np.flatnonzero(norms <= ZERO_NORM_THRESHOLD)
    if bad.size:
        raise ZeroNormToken(int(bad[0]))
    return matrix / norms.astype(matrix.dtype)[:, None]


@dataclass(frozen=True)
class ScoreBreakdown:
    """The three scores for one (query, candidate) pair.

    Built through combine() the hybrid component is s_single + weight *
    s_late on a single arithmetic path, so with the default unit weight
    s_hybrid - (s_single + s_late) is exactly zero.
    """

    s_single: float
    s_late: float
    s_hybrid: float

    @classmethod
    def combine(cls, s_single: float, s_late: float, weight: float = 1.0) -> "ScoreBreakdown":
        return cls(float(s_single), float(s_late), float(s_single) + weight * float(s_late))


def score_for_mode(breakdown: ScoreBreakdown, mode: Mode) -> float:
    if mode is Mode.SINGLE:
        return breakdown.s_single
    if mode is Mode.LATE:
        return breakdown.s_late
    return breakdown.s_hybrid


@dataclass(frozen=True)
class RetrievalResult:
    """Top-k candidates for one query, descending by the mode's score.

    Ties are broken by ascending candidate id, so results are reproducible
    across runs and worker counts.
    """

    query_id: int
    mode: Mode
    ranked: tuple[tuple[int, ScoreBreakdown], ...]

    def candidate_ids(self) -> list[int]:
        return [cid for cid, _ in self.ranked]
