"""Compression curve: interned-edge growth under a Zipf-weighted triple stream.

Prints a TSV of occurrences seen vs unique edges vs compression ratio, so the
sub-linear growth of the codebook is visible directly.

Usage: python3 scripts/compression_curve.py --vocab 500 --draws 50000
"""

import argparse

import numpy as np

from apr.codebook import Channel, Codebook
from apr.embedding import HashingProvider


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vocab", type=int, default=500,
                    help="distinct triples in the underlying distribution")
    ap.add_argument("--draws", type=int, default=50_000)
    ap.add_argument("--exponent", type=float, default=1.1,
                    help="Zipf exponent; >= 1.0 gives a heavy head")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--checkpoints", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    entities = [f"org_{i}" for i in range(max(8, args.vocab // 3))]
    relations = [f"rel_{j}" for j in range(max(4, args.vocab // 40))]
    vocab = [(entities[(3 * k) % len(entities)],
              relations[k % len(relations)],
              entities[(7 * k + 1) % len(entities)])
             for k in range(args.vocab)]
    weights = 1.0 / np.arange(1, args.vocab + 1) ** args.exponent
    weights /= weights.sum()
    draws = rng.choice(args.vocab, size=args.draws, p=weights)

    cb = Codebook(HashingProvider(dimension=16, seed=args.seed))
    step = max(1, args.draws // args.checkpoints)
    print("occurrences\tunique_edges\tentities\tcompression_ratio")
    for start in range(0, args.draws, step):
        chunk = [vocab[i] for i in draws[start:start + step]]
        cb.indexify(chunk, Channel.FACT, f"chunk#{start // step}")
        stats = cb.stats()
        print(f"{stats.total_occurrences}\t{stats.n_edges}\t"
              f"{len(cb.entities)}\t{stats.compression_ratio:.2f}")


if __name__ == "__main__":
    main()
