"""Train the token readout adapter on the binding task and report losses.

Uses one query per document pair so in-batch negatives are always other
documents. The positive late score is structurally pinned at 1.0 (the
query token literally appears in the positive document), so all learning
shows up as pushing negative scores down.
"""

import argparse

import numpy as np

from latefuse import (
    SyntheticCodebook,
    TrainConfig,
    evaluate_mean_loss,
    generate_benchmark,
    init_adapter_params,
    train_adapter,
    training_pairs,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=240)
    ap.add_argument("--train-pairs", type=int, default=200)
    ap.add_argument("--bindings", type=int, default=25)
    ap.add_argument("--pool", type=int, default=1000,
                    help="size of the code and marker id pools")
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--out-dim", type=int, default=64)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--tau", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    bench = generate_benchmark(args.pairs, args.bindings, seed=args.seed,
                               code_pool_size=args.pool, marker_pool_size=args.pool)
    book = SyntheticCodebook.generate(args.pool, args.pool, dim=args.dim,
                                      seed=args.seed)
    pairs = training_pairs(bench, book, queries_per_pair=1)
    train, held = pairs[: args.train_pairs], pairs[args.train_pairs :]
    print(f"{len(train)} training pairs, {len(held)} held out")

    cfg = TrainConfig(temperature=args.tau, learning_rate=args.lr,
                      steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    params = init_adapter_params(args.dim, args.out_dim, seed=args.seed)

    initial = evaluate_mean_loss(train, params, cfg)
    initial_held = evaluate_mean_loss(held, params, cfg) if held else float("nan")
    result = train_adapter(train, params, cfg)
    final = evaluate_mean_loss(train, result.params, cfg)
    final_held = evaluate_mean_loss(held, result.params, cfg) if held else float("nan")

    window = max(1, args.steps // 10)
    for start in range(0, args.steps, window):
        chunk = result.losses[start : start + window]
        print(f"steps {start:>4}-{start + len(chunk) - 1:<4} mean loss {np.mean(chunk):.5f}")

    print(f"\ntrain loss    {initial:.5f} -> {final:.5f}  (ratio {final / initial:.3f})")
    if held:
        print(f"held-out loss {initial_held:.5f} -> {final_held:.5f}")


if __name__ == "__main__":
    main()
