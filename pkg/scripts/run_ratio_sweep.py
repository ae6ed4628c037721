"""Clean-test accuracy versus poisoning ratio for one attack (no defense)."""

import argparse
import logging

from apforge.attacks import AttackConfig
from apforge.defenses import DefenseConfig
from apforge.harness import TrainConfig, emit_report, sweep


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--attack", default="EM")
    p.add_argument("--ratios", nargs="+", type=float, default=[0.2, 0.4, 0.6, 0.8, 1.0])
    p.add_argument("--out", default="results/ratios")
    p.add_argument("--data", default="synthetic")
    p.add_argument("--epochs", type=int, default=30)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = sweep([AttackConfig(args.attack)], [DefenseConfig()], args.ratios, TrainConfig(epochs=args.epochs),
                args.data)
    emit_report(res.records, args.out)
    for r in res.records:
        print(f"ratio {r.ratio:.2f}: test {100 * r.clean_test_acc:.2f}  train {100 * r.poisoned_train_acc:.2f}")


if __name__ == "__main__":
    main()
