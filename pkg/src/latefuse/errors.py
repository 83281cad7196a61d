"""Domain exceptions. Everything raised on purpose by this package derives
from LateFuseError so callers (and the CLI) can map failures to one branch."""

from __future__ import annotations


class LateFuseError(Exception):
    """Base class for all domain errors raised by latefuse."""


class DimensionMismatch(LateFuseError):
    pass


class ZeroNormToken(LateFuseError):
    def __init__(self, row: int):
        super().__init__(f"token row {row} has norm below threshold, cannot normalize")
        self.row = row


class EmptyQueryTokens(LateFuseError):
    def __init__(self, seq_id: int):
        super().__init__(f"query {seq_id} has no valid tokens after role exclusion")
        self.seq_id = seq_id


class EmptyCandidateTokens(LateFuseError):
    def __init__(self, seq_id: int):
        super().__init__(f"candidate {seq_id} has no valid tokens after role exclusion")
        self.seq_id = seq_id


class EmptyCorpus(LateFuseError):
    pass


class ZeroNormProjection(LateFuseError):
    def __init__(self, row: int):
        super().__init__(f"adapter projection of token row {row} has near-zero norm")
        self.row = row


class NonFiniteLoss(LateFuseError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


class NoDerangementExists(LateFuseError):
    pass


class UnknownId(LateFuseError):
    pass


class MissingQrels(LateFuseError):
    def __init__(self, query_id: int):
        super().__init__(f"no relevance judgments for query {query_id}")
        self.query_id = query_id


class MissingLayer(LateFuseError):
    def __init__(self, layer_id: object):
        super().__init__(f"layer {layer_id!r} not present in the multilayer collection")
        self.layer_id = layer_id


class EmptyRelevantSet(LateFuseError):
    pass


class DumpError(LateFuseError):
    """Base for binary dump format violations."""


class IoFailure(DumpError):
    pass


class BadMagic(DumpError):
    pass


class UnsupportedVersion(DumpError):
    def __init__(self, version: int):
        super().__init__(f"unsupported dump format version {version}")
        self.version = version


class TruncatedFile(DumpError):
    pass


class HeterogeneousDim(DumpError):
    pass


class ChecksumMismatch(DumpError):
    def __init__(self, record_index: int):
        super().__init__(f"record {record_index}: stored CRC-32 does not match payload")
        self.record_index = record_index
