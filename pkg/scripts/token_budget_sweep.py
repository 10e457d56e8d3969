"""Selector behaviour across token budgets and token prices.

Trains a preference policy on synthetic pairs where large budgets reward rich
prompts and small budgets reward lean ones, then sweeps (a) the advertised
token budget and (b) the token price eta, printing the chosen action and its
proxy cost at each point.

Usage: python3 scripts/token_budget_sweep.py --pairs 40 --epochs 60
"""

import argparse

import numpy as np

from apr.codebook import Channel
from apr.policy import (
    ALL_ACTIONS,
    PolicyParams,
    PreferencePair,
    QueryFeatures,
    SelectorAction,
    proxy_token_cost,
    select_action,
    train,
)

RICH = (SelectorAction.INCLUDE_ALL,) * 3
LEAN = (SelectorAction.NOT_INCLUDE,) * 3


def features(token_budget: float) -> QueryFeatures:
    return QueryFeatures(query_tokens=60, triple_count=6, ambiguity=0.5,
                         token_budget=token_budget,
                         redundancy={ch.value: 0.3 for ch in Channel})


def synthetic_pairs(n_per_regime: int) -> list:
    pairs = []
    for k in range(n_per_regime):
        pairs.append(PreferencePair(features(5000 + k), RICH, LEAN))
        pairs.append(PreferencePair(features(100 + k), LEAN, RICH))
    return pairs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=40,
                    help="synthetic preference pairs per budget regime")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    trained = train(synthetic_pairs(args.pairs), PolicyParams(),
                    epochs=args.epochs, seed=args.seed)
    print(f"trained on {2 * args.pairs} pairs, "
          f"final loss {trained.loss_history[-1]:.4f}\n")

    print("token_budget\taction\tproxy_cost")
    for budget in (100, 250, 500, 1000, 2000, 4000, 8000):
        action = select_action(features(budget), trained)
        names = ",".join(a.value for a in action)
        print(f"{budget}\t{names}\t{proxy_token_cost(action):.0f}")

    print("\neta\taction\tproxy_cost")
    for eta in np.linspace(0.0, 0.5, 6):
        trained.eta = float(eta)
        action = select_action(features(4000), trained)
        names = ",".join(a.value for a in action)
        print(f"{eta:.1f}\t{names}\t{proxy_token_cost(action):.0f}")

    costs = sorted({proxy_token_cost(a) for a in ALL_ACTIONS})
    print(f"\nproxy cost range over the 27 actions: {costs[0]:.0f}..{costs[-1]:.0f}")


if __name__ == "__main__":
    main()
