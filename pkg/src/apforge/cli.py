"""``apforge`` command line: poison, train, eval, sweep, report, selftest.

Configs are JSON objects.  ``--set a.b=v`` overrides a (dotted) key, with ``v``
parsed as JSON when possible and kept as a string otherwise.  Exit status is 0
on success, 1 for invalid input and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from .attacks import AttackConfig
from .defenses import DefenseConfig
from .harness import (TrainConfig, cache_dir, cache_path, emit_report, get_perturbations, load_data,
                      load_records, run_experiment, sweep)

log = logging.getLogger("apforge")

COMMANDS = ("poison", "train", "eval", "sweep", "report", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apforge", description="Availability-poisoning attacks and defenses.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; dotted keys reach nested objects (repeatable)")
    p.add_argument("--seed", type=int, help="seed for training and every attack")
    p.add_argument("--cache", type=Path, help="perturbation cache directory (APFORGE_CACHE wins)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise UsageError(f"override {item!r} is not KEY=VALUE")
    *parents, leaf = key.split(".")
    node = cfg
    for part in parents:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise UsageError(f"override {item!r}: {part!r} is not an object")
    node[leaf] = parse_value(value)


def load_config(path, overrides=(), seed=None) -> dict:
    cfg = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg.setdefault("train", {})["seed"] = seed
        if isinstance(cfg.get("attack"), dict):
            cfg["attack"]["seed"] = seed
        for a in cfg.get("attacks", []) or []:
            if isinstance(a, dict):
                a["seed"] = seed
    return cfg


def _build(cls, raw, what):
    if not isinstance(raw, dict):
        raise UsageError(f"{what} must be a JSON object, got {raw!r}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise UsageError(f"bad {what}: {exc}") from exc


def attack_from(raw):
    return None if raw is None else _build(AttackConfig, raw, "attack")


def defense_from(raw):
    if raw is None:
        return DefenseConfig()
    if isinstance(raw, str):
        return DefenseConfig(kind=raw)
    if isinstance(raw, list):
        return [defense_from(r) for r in raw]
    return _build(DefenseConfig, raw, "defense")


KNOWN_KEYS = {"data", "attack", "attacks", "defense", "defenses", "ratio", "ratios", "train", "records"}


def _check_keys(cfg):
    unknown = set(cfg) - KNOWN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")


def cmd_poison(cfg, args) -> int:
    attack = attack_from(cfg.get("attack"))
    if attack is None:
        raise UsageError("poison needs an 'attack' object")
    tag = cfg.get("data", "synthetic")
    train, _ = load_data(tag)
    pert = get_perturbations(attack, train, tag, args.cache)
    src = cache_path(attack, tag, cache_dir(args.cache))
    args.out.mkdir(parents=True, exist_ok=True)
    dst = args.out / f"{attack.attack}.apbt"
    shutil.copyfile(src, dst)
    shutil.copyfile(src.with_name(src.name + ".meta"), dst.with_name(dst.name + ".meta"))
    print(f"{attack.attack}: {len(pert)} perturbations, {pert.norm} eps={pert.eps:.6g} -> {dst}")
    return 0


def cmd_run(cfg, args) -> int:
    record = run_experiment(attack_from(cfg.get("attack")), defense_from(cfg.get("defense")),
                            float(cfg.get("ratio", 1.0)), _build(TrainConfig, cfg.get("train", {}), "train"),
                            cfg.get("data", "synthetic"), args.cache)
    emit_report([record], args.out)
    if args.command == "eval":
        print(f"{record.clean_test_acc:.4f}")
    else:
        print(f"{record.attack_name}/{record.defense_name} ratio={record.ratio:.2f} "
              f"test={record.clean_test_acc:.4f} train={record.poisoned_train_acc:.4f}")
    return 0


def cmd_sweep(cfg, args) -> int:
    attacks = [attack_from(a) for a in cfg.get("attacks", [cfg.get("attack")])]
    defenses = [defense_from(d) for d in cfg.get("defenses", [cfg.get("defense")])]
    ratios = [float(r) for r in cfg.get("ratios", [cfg.get("ratio", 1.0)])]
    result = sweep(attacks, defenses, ratios, _build(TrainConfig, cfg.get("train", {}), "train"),
                   cfg.get("data", "synthetic"), args.cache)
    print(result.summary)
    if result.records:
        emit_report(result.records, args.out)
    for label, err in result.failures:
        print(f"FAILED {label}: {err}", file=sys.stderr)
    return 2 if result.failures else 0


def cmd_report(cfg, args) -> int:
    src = Path(cfg.get("records", args.out / "results.json"))
    try:
        records = load_records(src)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read records from {src}: {exc}") from exc
    for path in emit_report(records, args.out):
        print(path)
    return 0


def cmd_selftest(cfg, args) -> int:
    from .oracles import selftest

    rows = selftest(cfg.get("train", {}).get("seed", 0) if args.seed is None else args.seed)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in rows) else 2


HANDLERS = {"poison": cmd_poison, "train": cmd_run, "eval": cmd_run, "sweep": cmd_sweep,
            "report": cmd_report, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        _check_keys(cfg)
        return HANDLERS[args.command](cfg, args)
    except (UsageError, ValueError) as exc:
        print(f"apforge: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report, do not dump a traceback at users
        log.exception("run failed")
        print(f"apforge: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
