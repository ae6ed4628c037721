"""Attack x defense accuracy matrix on the synthetic set.

    python3 scripts/run_matrix.py --out results/matrix --attacks EM LSP --defenses None Gray JPEG
"""

import argparse
import logging

from apforge.attacks import AttackConfig
from apforge.defenses import DefenseConfig
from apforge.harness import TrainConfig, emit_report, sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/matrix")
    p.add_argument("--data", default="synthetic")
    p.add_argument("--attacks", nargs="+", default=["EM", "LSP", "AR", "OPS"])
    p.add_argument("--defenses", nargs="+", default=["None", "Gray", "JPEG", "BDR", "UMax", "AT"])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train = TrainConfig(epochs=args.epochs, seed=args.seed)
    attacks = [None] + [AttackConfig(a, seed=args.seed) for a in args.attacks]
    res = sweep(attacks, [DefenseConfig(d) for d in args.defenses], [1.0], train, args.data)
    emit_report(res.records, args.out)

    table = {(r.attack_name, r.defense_name): r.clean_test_acc for r in res.records}
    names = ["None"] + args.attacks
    print(f"{'':8}" + "".join(f"{d:>8}" for d in args.defenses))
    for a in names:
        cells = [f"{100 * table[a, d]:8.2f}" if (a, d) in table else f"{'-':>8}" for d in args.defenses]
        print(f"{a:8}" + "".join(cells))
    for label, err in res.failures:
        print("failed:", label, err)


if __name__ == "__main__":
    main()
