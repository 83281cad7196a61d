"""Command-line front end.

Exit codes: 0 on success, 1 on domain errors (bad data, format violations),
2 on usage errors (argparse's own convention). Subcommands that consume
randomness require an explicit --seed; outputs are reproducible for a given
seed and identical for any --workers value.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import (
    AdapterParams,
    Optimizer,
    TrainConfig,
    adapted_late_score,
    evaluate_mean_loss,
    init_adapter_params,
    train_adapter,
)
from .embeddings import Mode, ScoreBreakdown, SequenceEmbedding, TokenRole, score_for_mode
from .errors import LateFuseError
from .evaluation import (
    LayerSweepConfig,
    Qrels,
    layer_sweep,
    records_by_layer,
    run_eval,
)
from .dumps import (
    load_adapter_params,
    read_dump,
    save_adapter_params,
    validate_dump,
)
from .scoring import (
    ScoringConfig,
    explain_matches,
    hybrid_score,
    match_records_jsonl,
    prepare_corpus,
    rank_prepared,
)
from .toybench import (
    SyntheticCodebook,
    generate_benchmark,
    load_benchmark,
    pairwise_accuracy,
    save_benchmark,
    training_pairs,
)

_ROLE_NAMES = {r.name.lower(): r for r in TokenRole}


def _parse_roles(text: str | None) -> frozenset:
    if not text:
        return frozenset()
    roles = set()
    for part in text.split(","):
        part = part.strip().lower()
        if part not in _ROLE_NAMES:
            raise LateFuseError(f"unknown token role {part!r}")
        roles.add(_ROLE_NAMES[part])
    return frozenset(roles)


def _scoring_config(args) -> ScoringConfig:
    return ScoringConfig(
        mode=Mode(args.mode),
        query_exclude_roles=_parse_roles(getattr(args, "mask_query_roles", None)),
        candidate_exclude_roles=_parse_roles(getattr(args, "mask_candidate_roles", None)),
    )


def _load_records(path: str) -> list[SequenceEmbedding]:
    return list(read_dump(path))


def _find_record(records, seq_id: int, what: str) -> SequenceEmbedding:
    for r in records:
        if r.seq_id == seq_id:
            return r
    raise LateFuseError(f"{what} id {seq_id} not found in dump")


def _breakdown_dict(b: ScoreBreakdown) -> dict:
    return {"s_single": b.s_single, "s_late": b.s_late, "s_hybrid": b.s_hybrid}


def _add_mode(parser) -> None:
    parser.add_argument("--mode", required=True, choices=[m.value for m in Mode])


def _add_mask_flags(parser) -> None:
    parser.add_argument("--mask-query-roles", default=None, metavar="ROLES",
                        help="comma-separated roles to drop from query matching")
    parser.add_argument("--mask-candidate-roles", default=None, metavar="ROLES",
                        help="comma-separated roles to drop from candidate matching")


def _add_format(parser) -> None:
    parser.add_argument("--format", default="table", choices=["table", "records"],
                        help="records = one JSON object per line")


def cmd_score(args) -> int:
    cfg = _scoring_config(args)
    queries = _load_records(args.query_dump)
    corpus = _load_records(args.corpus_dump)
    q = _find_record(queries, args.query_id, "query")
    c = _find_record(corpus, args.candidate_id, "candidate")
    breakdown = hybrid_score(q, c, cfg)
    if args.format == "records":
        print(json.dumps({"query_id": q.seq_id, "candidate_id": c.seq_id,
                          "mode": cfg.mode.value, **_breakdown_dict(breakdown)}))
    else:
        print(f"query={q.seq_id} candidate={c.seq_id}")
        print(f"s_single = {breakdown.s_single:+.6f}")
        print(f"s_late   = {breakdown.s_late:+.6f}")
        print(f"s_hybrid = {breakdown.s_hybrid:+.6f}")
        print(f"selected ({cfg.mode.value}) = {score_for_mode(breakdown, cfg.mode):+.6f}")
    return 0


def _emit_result(result, args) -> None:
    if args.format == "records":
        print(json.dumps({
            "query_id": result.query_id,
            "mode": result.mode.value,
            "ranked": [{"candidate_id": cid, **_breakdown_dict(b)} for cid, b in result.ranked],
        }))
    else:
        print(f"query {result.query_id} (mode={result.mode.value})")
        for rank, (cid, b) in enumerate(result.ranked, start=1):
            print(f"  {rank:>3}. candidate={cid:<8} score={score_for_mode(b, result.mode):+.6f} "
                  f"(single={b.s_single:+.6f} late={b.s_late:+.6f})")


def cmd_retrieve(args) -> int:
    cfg = _scoring_config(args)
    queries = _load_records(args.query_dump)
    corpus = _load_records(args.corpus_dump)
    if args.query_id is not None:
        queries = [_find_record(queries, args.query_id, "query")]
    k = min(args.k, len(corpus)) if corpus else args.k
    prepared = prepare_corpus(corpus, cfg)
    for q in queries:
        result = rank_prepared(q, prepared, cfg, k=k, workers=args.workers)
        _emit_result(result, args)
    return 0


def cmd_eval(args) -> int:
    cfg = _scoring_config(args)
    queries = _load_records(args.query_dump)
    corpus = _load_records(args.corpus_dump)
    qrels = Qrels.from_text(args.qrels)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = run_eval(corpus, queries, qrels, cfg, metrics=metrics, workers=args.workers)
    if args.format == "records":
        for row in report.to_records():
            print(json.dumps(row))
    else:
        print(report.to_table())
    return 0


def cmd_toybench_generate(args) -> int:
    bench = generate_benchmark(args.pairs, args.bindings, seed=args.seed)
    save_benchmark(bench, args.out)
    print(f"wrote {args.out}: {len(bench.pairs)} pairs, {len(bench.queries)} queries")
    return 0


def cmd_toybench_run(args) -> int:
    bench = load_benchmark(args.bench)
    max_code = max(max(c for c, _ in pos.panels + neg.panels) for pos, neg in bench.pairs)
    max_marker = max(max(m for _, m in pos.panels + neg.panels) for pos, neg in bench.pairs)
    codebook = SyntheticCodebook.generate(max_code + 1, max_marker + 1, args.dim, seed=args.seed)
    out = pairwise_accuracy(bench, codebook, Mode(args.mode))
    if args.format == "records":
        print(json.dumps({"mode": args.mode, "accuracy": out.accuracy,
                          "tie_fraction": out.tie_fraction,
                          "queries": len(bench.queries)}))
    else:
        print(f"mode={args.mode} queries={len(bench.queries)} "
              f"accuracy={out.accuracy:.4f} tie_fraction={out.tie_fraction:.4f}")
    return 0


def cmd_adapter_train(args) -> int:
    queries = _load_records(args.query_dump)
    positives = _load_records(args.positive_dump)
    if not queries:
        raise LateFuseError("query dump holds no records")
    if len(queries) != len(positives):
        raise LateFuseError("query and positive dumps must pair up one to one")
    dataset = list(zip(queries, positives))
    hidden = queries[0].dim
    cfg = TrainConfig(
        temperature=args.tau,
        learning_rate=args.lr,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        optimizer=Optimizer(args.optimizer),
    )
    params = init_adapter_params(hidden, args.out_dim, seed=args.seed)
    initial = evaluate_mean_loss(dataset, params, cfg)
    result = train_adapter(dataset, params, cfg)
    final = evaluate_mean_loss(dataset, result.params, cfg)
    save_adapter_params(result.params, args.out)
    if args.format == "records":
        print(json.dumps({"initial_loss": initial, "final_loss": final,
                          "steps": args.steps, "losses": list(result.losses)}))
    else:
        print(f"trained {args.steps} steps: mean loss {initial:.6f} -> {final:.6f}")
        print(f"params written to {args.out}")
    return 0


def cmd_adapter_apply(args) -> int:
    """Retrieval with the late score computed over adapted tokens."""
    cfg = _scoring_config(args)
    params = load_adapter_params(args.params)
    queries = _load_records(args.query_dump)
    corpus = _load_records(args.corpus_dump)
    if args.query_id is not None:
        queries = [_find_record(queries, args.query_id, "query")]
    k = min(args.k, len(corpus))
    from .embeddings import RetrievalResult  # local to keep the top imports lean

    for q in queries:
        scored = []
        for c in corpus:
            s_single = float(np.dot(q.pooled.astype(np.float64), c.pooled.astype(np.float64)))
            s_late = adapted_late_score(q, c, params, cfg.query_exclude_roles)
            scored.append((c.seq_id, ScoreBreakdown.combine(s_single, s_late, cfg.hybrid_weight)))
        scored.sort(key=lambda item: (-score_for_mode(item[1], cfg.mode), item[0]))
        result = RetrievalResult(query_id=q.seq_id, mode=cfg.mode, ranked=tuple(scored[:k]))
        _emit_result(result, args)
    return 0


def cmd_dump_validate(args) -> int:
    report = validate_dump(args.dump, manifest_path=args.manifest)
    if report.ok:
        print(f"{args.dump}: ok")
        return 0
    for v in report.violations:
        where = f"record {v.record_index}" if v.record_index is not None else v.scope
        print(f"{args.dump}: {where}: {v.message}", file=sys.stderr)
    return 1


def cmd_dump_inspect(args) -> int:
    with read_dump(args.dump) as reader:
        h = reader.header
        print(f"{args.dump}: version={h.version} dim={h.dim} "
              f"records={h.record_count} flags={h.flags:#x}")
        if args.records:
            for i, rec in enumerate(reader):
                roles = np.bincount(rec.roles, minlength=len(TokenRole))
                role_text = " ".join(
                    f"{TokenRole(j).name.lower()}={int(n)}" for j, n in enumerate(roles) if n
                )
                print(f"  [{i}] seq={rec.seq_id} layer={rec.layer_id} "
                      f"tokens={rec.n_tokens} ({role_text})")
    return 0


def cmd_layer_sweep(args) -> int:
    corpus = _load_records(args.corpus_dump)
    queries = _load_records(args.query_dump)
    qrels = Qrels.from_text(args.qrels)
    token_layers = tuple(
        part.strip() if part.strip() == "last" else int(part)
        for part in args.token_layers.split(",")
    )
    pool_layer = args.pool_layer if args.pool_layer == "last" else int(args.pool_layer)
    sweep = LayerSweepConfig(pool_layer=pool_layer, token_layers=token_layers, mode=Mode(args.mode))
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    rows = layer_sweep(corpus, queries, qrels, sweep, metrics=metrics, workers=args.workers)
    if args.format == "records":
        for row in rows:
            print(json.dumps({"pool_layer": row.pool_layer, "token_layer": row.token_layer,
                              **dict(row.macro)}))
    else:
        print(f"pool_layer={rows[0].pool_layer if rows else '-'} mode={args.mode}")
        print("token_layer  " + "  ".join(metrics))
        for row in rows:
            vals = "  ".join(f"{row.macro[m]:.6f}" for m in metrics)
            print(f"{row.token_layer:>11}  {vals}")
    return 0


def cmd_explain(args) -> int:
    cfg = _scoring_config(args)
    queries = _load_records(args.query_dump)
    corpus = _load_records(args.corpus_dump)
    q = _find_record(queries, args.query_id, "query")
    c = _find_record(corpus, args.candidate_id, "candidate")
    explanations = explain_matches(q, c, cfg, alternatives_k=args.alternatives)
    print(match_records_jsonl(explanations))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latefuse",
        description="Late-interaction retrieval over stored hidden states.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score one query against one candidate")
    p.add_argument("--query-dump", required=True)
    p.add_argument("--corpus-dump", required=True)
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--candidate-id", type=int, required=True)
    _add_mode(p)
    _add_mask_flags(p)
    _add_format(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("retrieve", help="rank a corpus for each query")
    p.add_argument("--query-dump", required=True)
    p.add_argument("--corpus-dump", required=True)
    p.add_argument("--query-id", type=int, default=None, help="restrict to one query")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    _add_mode(p)
    _add_mask_flags(p)
    _add_format(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="run retrieval metrics against judgments")
    p.add_argument("--query-dump", required=True)
    p.add_argument("--corpus-dump", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="recall@1,ndcg@5")
    p.add_argument("--workers", type=int, default=1)
    _add_mode(p)
    _add_mask_flags(p)
    _add_format(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toybench-generate", help="write a binding benchmark file")
    p.add_argument("--pairs", type=int, default=40)
    p.add_argument("--bindings", type=int, default=25)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toybench_generate)

    p = sub.add_parser("toybench-run", help="score a binding benchmark synthetically")
    p.add_argument("--bench", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, required=True, help="codebook seed")
    _add_mode(p)
    _add_format(p)
    p.set_defaults(func=cmd_toybench_run)

    p = sub.add_parser("adapter-train", help="train a token readout adapter")
    p.add_argument("--query-dump", required=True)
    p.add_argument("--positive-dump", required=True, help="positive per query, by position")
    p.add_argument("--out", required=True)
    p.add_argument("--out-dim", type=int, default=128)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--optimizer", default="adaptive-moments",
                   choices=[o.value for o in Optimizer])
    p.add_argument("--seed", type=int, required=True)
    _add_format(p)
    p.set_defaults(func=cmd_adapter_train)

    p = sub.add_parser("adapter-apply", help="retrieve with adapted late scores")
    p.add_argument("--params", required=True)
    p.add_argument("--query-dump", required=True)
    p.add_argument("--corpus-dump", required=True)
    p.add_argument("--query-id", type=int, default=None)
    p.add_argument("--k", type=int, default=10)
    _add_mode(p)
    _add_mask_flags(p)
    _add_format(p)
    p.set_defaults(func=cmd_adapter_apply)

    p = sub.add_parser("dump-validate", help="audit a dump file (and manifest)")
    p.add_argument("--dump", required=True)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_dump_validate)

    p = sub.add_parser("dump-inspect", help="print header and record summaries")
    p.add_argument("--dump", required=True)
    p.add_argument("--records", action="store_true", help="list every record")
    p.set_defaults(func=cmd_dump_inspect)

    p = sub.add_parser("layer-sweep", help="metrics per token layer, pooled layer fixed")
    p.add_argument("--query-dump", required=True)
    p.add_argument("--corpus-dump", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--pool-layer", default="last")
    p.add_argument("--token-layers", default="last", help="comma list of ids or 'last'")
    p.add_argument("--metrics", default="ndcg@5")
    p.add_argument("--workers", type=int, default=1)
    _add_mode(p)
    _add_format(p)
    p.set_defaults(func=cmd_layer_sweep)

    p = sub.add_parser("explain", help="per-query-token best matches as JSON lines")
    p.add_argument("--query-dump", required=True)
    p.add_argument("--corpus-dump", required=True)
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--candidate-id", type=int, required=True)
    p.add_argument("--alternatives", type=int, default=5)
    _add_mode(p)
    _add_mask_flags(p)
    p.set_defaults(func=cmd_explain)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LateFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
