"""Run the knowledge-transfer experiment and print a per-iteration table.

Usage:
    python scripts/run_transfer.py [--kind counts|ranges|sum|presence]
                                   [--folds N] [--rounds N] [--seed N] [--fast]

``--fast`` shrinks the datasets for a quick look; the default matches the
acceptance configuration (sub-5-minute run).
"""

import argparse
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from queryprob import pipeline


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--kind", default="counts", choices=pipeline.QUERY_KINDS)
    parser.add_argument("--folds", type=int, default=5)
    parser.add_argument("--rounds", type=int, default=3)
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("--delta", type=float, default=1.0)
    parser.add_argument("--fast", action="store_true", help="small datasets, 2 folds")
    args = parser.parse_args()

    config = pipeline.SynthConfig(
        query_kind=args.kind,
        seed=args.seed,
        folds=2 if args.fast else args.folds,
        n_source=200 if args.fast else 1000,
        n_target=200 if args.fast else 1000,
        n_ood=100 if args.fast else 1000,
        n_test=200 if args.fast else 1000,
    )
    # fast mode has ~5x fewer gradient steps per epoch; keep the effective
    # fine-tuning budget comparable
    train = pipeline.TrainConfig(
        rounds=args.rounds,
        delta=args.delta,
        lr_finetune=0.02 if args.fast else 0.005,
    )

    start = time.time()
    result = pipeline.run_iterations(config, train)
    wall = time.time() - start

    print(f"query_kind={args.kind} folds={config.folds} rounds={args.rounds} wall={wall:.0f}s")
    print(f"{'iter':>4} {'target cnt':>12} {'target sum':>12} {'ood cnt':>12} "
          f"{'source cnt':>12} {'relabeled':>10} {'val nll':>8}")
    iterations = len(result.folds[0].reports)
    for i in range(iterations):
        tc = result.aggregate("target_count_accuracy")[i]
        ts = result.aggregate("target_sum_accuracy")[i]
        oc = result.aggregate("ood_count_accuracy")[i]
        sc = result.aggregate("source_count_accuracy")[i]
        rf = result.aggregate("relabeled_fraction")[i]
        nll = result.aggregate("mean_nll")[i]
        print(f"{i:>4} {tc[0]:>7.3f}±{tc[1]:<4.3f} {ts[0]:>7.3f}±{ts[1]:<4.3f} "
              f"{oc[0]:>7.3f}±{oc[1]:<4.3f} {sc[0]:>7.3f}±{sc[1]:<4.3f} "
              f"{rf[0]:>10.3f} {nll[0]:>8.3f}")
    best = [f.best_iteration for f in result.folds]
    print(f"best iterations per fold: {best}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
