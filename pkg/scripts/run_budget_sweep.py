"""EM at several l-inf budgets, with and without a preprocessing defense."""

import argparse
import logging

from apforge.attacks import AttackConfig
from apforge.defenses import DefenseConfig
from apforge.harness import TrainConfig, emit_report, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--budgets", nargs="+", type=float, default=[8, 16], help="in units of 1/255")
    p.add_argument("--defenses", nargs="+", default=["None", "Gray"])
    p.add_argument("--out", default="results/budgets")
    p.add_argument("--data", default="synthetic")
    p.add_argument("--epochs", type=int, default=30)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train = TrainConfig(epochs=args.epochs)
    base = run_experiment(None, DefenseConfig(), 1.0, train, args.data)
    records = [base]
    for b in args.budgets:
        for d in args.defenses:
            records.append(run_experiment(AttackConfig("EM", eps=b / 255), DefenseConfig(d), 1.0, train, args.data))
    emit_report(records, args.out)
    print(f"clean baseline {100 * base.clean_test_acc:.2f}")
    for r in records[1:]:
        print(f"eps {255 * r.eps_used:5.1f}/255 {r.defense_name:>6}: {100 * r.clean_test_acc:.2f}")


if __name__ == "__main__":
    main()
