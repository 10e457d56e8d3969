"""Signal-to-noise sweep for the token-dilution model.

Tabulates SNR against context length, fits the 1/n law, and reports how often
the short prompt beats the long one on paired draws.

Usage: python3 scripts/dilution_sweep.py --relevant 4 --sigma 1.0
"""

import argparse

import numpy as np

from apr.embedding import simulate_dilution, simulate_length_bias


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--relevant", type=int, default=4,
                    help="relevant tokens m present in every prompt")
    ap.add_argument("--lengths", type=int, nargs="+",
                    default=[8, 16, 32, 64, 128, 256])
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    points = simulate_dilution(args.relevant, args.lengths, args.sigma,
                               trials=args.trials, seed=args.seed)
    print("n\tsnr")
    for n, snr in points:
        print(f"{n}\t{snr:.4f}")

    x = np.array([1.0 / n for n, _ in points])
    y = np.array([snr for _, snr in points])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    print(f"\nfit: snr = {slope:.2f}/n + {intercept:.2f}  (R^2 = {r2:.4f})")

    short, long_ = min(args.lengths), max(args.lengths)
    bias = simulate_length_bias(args.relevant, short, long_, args.sigma,
                                trials=1000, seed=args.seed)
    print(f"paired trials n={short} vs n={long_}: "
          f"short wins {bias.short_win_fraction:.1%} "
          f"(mean scores {bias.mean_short:.3f} vs {bias.mean_long:.3f})")


if __name__ == "__main__":
    main()
