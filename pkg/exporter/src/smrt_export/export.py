"""Run a transformer over texts and capture per-layer hidden states.

Each input text is tokenized, a pooling token (the tokenizer's eos, or pad
as a fallback) is appended, and the model runs with hidden-state output
enabled. For every requested layer one record is written per sequence: raw
token states, the L2-normalized state at the pooling position as the
pooled vector, and role bytes from the tokenizer's own classification.

Role mapping: tokenizer-reported special tokens -> special; the appended
pooling position -> pooling; everything else -> text. Padding introduced
by batching is trimmed before writing, so batch size never changes the
stored records. Token types this text pipeline cannot see (vision) are
never emitted; an unknown classification would map to special.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .format import (
    ROLE_POOLING,
    ROLE_SPECIAL,
    ROLE_TEXT,
    ExportRecord,
    write_manifest,
    write_records,
)

LAST = "last"


class ExportError(Exception):
    """Base for everything this module raises on purpose."""


class ModelLoadError(ExportError):
    pass


class LayerOutOfRange(ExportError):
    def __init__(self, layer: int, n_layers: int):
        super().__init__(f"layer {layer} outside 0..{n_layers}")
        self.layer = layer


class ExportFailed(ExportError):
    """At least one input could not be exported; carries the reasons."""

    def __init__(self, failures: list[tuple[int, str]]):
        lines = "; ".join(f"input {i}: {msg}" for i, msg in failures)
        super().__init__(f"{len(failures)} input(s) failed: {lines}")
        self.failures = failures


@dataclass(frozen=True)
class ExportJob:
    model_id: str
    texts: tuple[str, ...]
    layers: tuple[int, ...] | str = LAST  # explicit ids, or "last"
    out_path: str = "export.bin"
    manifest_path: str | None = None  # default: out_path with .json
    batch_size: int = 8
    device: str = "cpu"
    id_base: int = 0  # seq_id of the first input

    def __post_init__(self):
        object.__setattr__(self, "texts", tuple(self.texts))
        if self.layers != LAST:
            object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.texts:
            raise ValueError("no input texts")


@dataclass(frozen=True)
class ExportSummary:
    out_path: str
    manifest_path: str
    record_count: int
    sequence_count: int
    layer_ids: tuple[int, ...]
    dim: int


def load_model(model_id: str, device: str):
    """AutoModel + AutoTokenizer; local paths never touch the network."""
    import torch  # deferred: importing torch is slow and cli --help shouldn't pay it
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:  # transformers raises a zoo of types here
        raise ModelLoadError(f"cannot load {model_id!r}: {exc}") from exc
    model.eval()
    model.to(torch.device(device))
    return model, tokenizer


def _resolve_layers(layers, n_layers: int) -> tuple[int, ...]:
    if layers == LAST:
        return (n_layers,)
    for layer in layers:
        if not 0 <= layer <= n_layers:
            raise LayerOutOfRange(layer, n_layers)
    return tuple(layers)


def _pooling_token_id(tokenizer) -> int:
    if tokenizer.eos_token_id is not None:
        return tokenizer.eos_token_id
    if tokenizer.pad_token_id is not None:
        return tokenizer.pad_token_id
    raise ModelLoadError("tokenizer defines neither eos nor pad token")


def _encode_batch(tokenizer, texts: Sequence[str], pool_id: int, pad_id: int):
    """Token ids with the pooling token appended, padded to one length.

    Returns (ids, lengths, roles) where roles already carry the final
    per-token byte for the unpadded positions.
    """
    import torch

    per_seq = []
    for text in texts:
        ids = tokenizer(text, add_special_tokens=True)["input_ids"]
        special = tokenizer.get_special_tokens_mask(ids, already_has_special_tokens=True)
        roles = [ROLE_SPECIAL if s else ROLE_TEXT for s in special]
        per_seq.append((ids + [pool_id], roles + [ROLE_POOLING]))

    width = max(len(ids) for ids, _ in per_seq)
    batch_ids = torch.full((len(per_seq), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(per_seq), width), dtype=torch.long)
    lengths, role_rows = [], []
    for row, (ids, roles) in enumerate(per_seq):
        batch_ids[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask[row, : len(ids)] = 1
        lengths.append(len(ids))
        role_rows.append(np.asarray(roles, np.uint8))
    return batch_ids, mask, lengths, role_rows


def export(job: ExportJob, model=None, tokenizer=None) -> ExportSummary:
    """Run the job and write dump + manifest.

    A preloaded (model, tokenizer) pair skips loading; otherwise
    job.model_id is loaded fresh. Inputs that produce no content tokens
    are collected and reported together; the job fails if any failed.
    """
    import torch

    if model is None or tokenizer is None:
        model, tokenizer = load_model(job.model_id, job.device)
    pool_id = _pooling_token_id(tokenizer)
    pad_id = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else pool_id

    records: list[ExportRecord] = []
    failures: list[tuple[int, str]] = []
    layer_ids: tuple[int, ...] = ()

    for start in range(0, len(job.texts), job.batch_size):
        batch = job.texts[start : start + job.batch_size]
        ids, mask, lengths, role_rows = _encode_batch(tokenizer, batch, pool_id, pad_id)
        with torch.no_grad():
            out = model(input_ids=ids.to(model.device),
                        attention_mask=mask.to(model.device),
                        output_hidden_states=True)
        hidden = out.hidden_states  # (n_layers + 1) x (batch, width, dim)
        layer_ids = _resolve_layers(job.layers, len(hidden) - 1)

        for row, roles in enumerate(role_rows):
            seq_id = job.id_base + start + row
            n = lengths[row]
            if not np.any(roles[:n] != ROLE_POOLING):
                failures.append((start + row, "no content tokens"))
                continue
            for layer in layer_ids:
                states = hidden[layer][row, :n].to(torch.float32).cpu().numpy()
                pooled64 = states[n - 1].astype(np.float64)
                norm = np.linalg.norm(pooled64)
                if norm == 0.0:
                    failures.append((start + row, f"zero pooled norm at layer {layer}"))
                    break
                records.append(ExportRecord(
                    seq_id=seq_id, layer_id=layer,
                    pooled=(pooled64 / norm).astype(np.float32),
                    tokens=states, roles=roles[:n]))

    if failures:
        raise ExportFailed(failures)

    manifest_path = job.manifest_path or str(Path(job.out_path).with_suffix(".json"))
    write_records(records, job.out_path)
    write_manifest(records, source_model=job.model_id, path=manifest_path)
    return ExportSummary(
        out_path=job.out_path,
        manifest_path=manifest_path,
        record_count=len(records),
        sequence_count=len(job.texts),
        layer_ids=layer_ids,
        dim=int(records[0].pooled.shape[0]) if records else 0,
    )


def render_benchmark_queries(path: str | Path) -> list[str]:
    """One text per query from a serialized binding benchmark.

    The benchmark file is the engine's JSON layout: queries are
    (pair_index, code_id, marker_id) triples; each becomes a short
    "code <id> marker <id>" sentence.
    """
    payload = json.loads(Path(path).read_text())
    return [f"code {code} marker {marker}" for _, code, marker in payload["queries"]]
