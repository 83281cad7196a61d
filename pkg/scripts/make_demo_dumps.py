"""Write a small demo corpus as dump files so every CLI subcommand has
something to chew on.

Produces queries.bin / corpus.bin (last layer only, for score / retrieve /
eval / explain), queries_layers.bin / corpus_layers.bin (all layers, for
layer-sweep), qrels.txt and a manifest per corpus dump in --out-dir. Each
query is planted inside exactly one document (its last-layer tokens are a
subset), so eval numbers are meaningfully high rather than random.
"""

import argparse
from pathlib import Path

import numpy as np

from latefuse import SequenceEmbedding, TokenRole, build_manifest, write_dump, write_manifest


def planted_corpus(rng, n_docs, n_queries, dim, layers):
    """Documents across layers; query j's valid tokens hide in document j."""
    corpus, queries, relevant = [], [], {}
    for i in range(n_docs):
        per_layer = {
            layer: rng.standard_normal((8, dim)).astype(np.float32) for layer in layers
        }
        for layer, tokens in per_layer.items():
            roles = np.zeros(8, np.uint8)
            roles[-1] = TokenRole.POOLING
            pooled = tokens[-1] / np.linalg.norm(tokens[-1])
            corpus.append(SequenceEmbedding(seq_id=i, layer_id=layer,
                                            pooled=pooled, tokens=tokens, roles=roles))
        if i < n_queries:
            # last layer carries the planted signal, earlier layers noise
            signal = per_layer[max(layers)][:3]
            for layer in layers:
                tokens = signal if layer == max(layers) else rng.standard_normal(
                    (3, dim)).astype(np.float32)
                roles = np.zeros(3, np.uint8)
                roles[-1] = TokenRole.POOLING
                pooled = tokens[0] / np.linalg.norm(tokens[0])
                queries.append(SequenceEmbedding(seq_id=1000 + i, layer_id=layer,
                                                 pooled=pooled, tokens=tokens,
                                                 roles=roles))
            relevant[1000 + i] = i
    return corpus, queries, relevant


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="demo")
    ap.add_argument("--docs", type=int, default=30)
    ap.add_argument("--queries", type=int, default=8)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--layers", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    layers = tuple(range(args.layers))
    corpus, queries, relevant = planted_corpus(rng, args.docs, args.queries,
                                               args.dim, layers)
    last = max(layers)
    corpus_last = [r for r in corpus if r.layer_id == last]
    write_dump(corpus_last, out / "corpus.bin")
    write_dump([r for r in queries if r.layer_id == last], out / "queries.bin")
    write_dump(corpus, out / "corpus_layers.bin")
    write_dump(queries, out / "queries_layers.bin")
    write_manifest(build_manifest(corpus_last, source_model="synthetic-demo"),
                   out / "corpus.manifest.json")
    write_manifest(build_manifest(corpus, source_model="synthetic-demo"),
                   out / "corpus_layers.manifest.json")
    qrels_lines = [f"{qid} {cid}" for qid, cid in sorted(relevant.items())]
    (out / "qrels.txt").write_text("\n".join(qrels_lines) + "\n")

    print(f"wrote {len(corpus)} corpus and {len(queries)} query records to {out}/")
    print("try:")
    print(f"  latefuse dump-inspect --dump {out}/corpus.bin")
    print(f"  latefuse retrieve --query-dump {out}/queries.bin "
          f"--corpus-dump {out}/corpus.bin --mode hybrid --k 5")
    print(f"  latefuse eval --query-dump {out}/queries.bin "
          f"--corpus-dump {out}/corpus.bin --qrels {out}/qrels.txt --mode late")
    print(f"  latefuse layer-sweep --query-dump {out}/queries_layers.bin "
          f"--corpus-dump {out}/corpus_layers.bin --qrels {out}/qrels.txt "
          f"--token-layers {','.join(str(l) for l in layers)} --mode late")


if __name__ == "__main__":
    main()
