"""Experiment pipeline: poison, defend, train, evaluate, report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .archive import ArchiveError, atomic_write
from .attacks import AttackConfig, generate
from .augment import augment
from .datasets import LabeledDataset, PerturbationSet, PoisonedDataset, apply_poison, gen_synthetic, load_cifar10
from .defenses import PREPROCESS, DefenseConfig, pgd_adversarial, preprocess, umax_select
from .numerics import CnnModel, SgdState, init_model
from .training import accuracy, run_epoch

log = logging.getLogger(__name__)

CSV_COLUMNS = ("attack", "defense", "ratio", "eps", "clean_test_acc", "poisoned_train_acc",
               "epochs", "seed", "wall_seconds")
BATCH_DEFENSES = ("AT", "UMax", "ULite")
AUG_DEFENSES = ("Standard", "CutOut", "MixUp", "CutMix")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.lr_decay_every < 0:
            raise ValueError("lr_decay_every must be >= 0 (0 disables decay)")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every == 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class ExperimentRecord:
    attack_name: str
    defense_name: str
    ratio: float
    eps_used: float
    clean_test_acc: float
    poisoned_train_acc: float
    epochs: int
    seed: int
    wall_seconds: float
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.history = [tuple(float(v) for v in row) for row in self.history]
        for name in ("clean_test_acc", "poisoned_train_acc"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if len(self.history) != self.epochs:
            raise ValueError(f"history has {len(self.history)} rows for {self.epochs} epochs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history"] = [list(row) for row in self.history]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    def key(self) -> tuple:
        """Everything but wall time; equal keys mean a reproduced run."""
        d = self.to_dict()
        d.pop("wall_seconds")
        return tuple(sorted((k, json.dumps(v)) for k, v in d.items()))


# ---------------------------------------------------------------- datasets


def load_data(tag: str) -> tuple[LabeledDataset, LabeledDataset]:
    """Resolve a dataset tag to ``(train, test)``.

    ``synthetic`` or ``synthetic:seed=1,per_class=200,test_per_class=100,hw=32``;
    ``cifar10:<directory with the binary batches>``.
    """
    kind, _, arg = tag.partition(":")
    if kind == "synthetic":
        opts = {"seed": 0, "per_class": 200, "test_per_class": 100, "hw": 32, "classes": 10}
        for item in filter(None, arg.split(",")):
            k, _, v = item.partition("=")
            if k not in opts:
                raise ValueError(f"unknown synthetic option {k!r} in tag {tag!r}")
            opts[k] = int(v)
        common = dict(num_classes=opts["classes"], hw=opts["hw"], seed=opts["seed"])
        return (gen_synthetic(per_class=opts["per_class"], split="train", **common),
                gen_synthetic(per_class=opts["test_per_class"], split="test", **common))
    if kind == "cifar10":
        if not arg:
            raise ValueError("cifar10 tag needs a directory: cifar10:<path>")
        return load_cifar10(arg, "train"), load_cifar10(arg, "test")
    raise ValueError(f"unknown dataset tag {tag!r}")


# ---------------------------------------------------------------- training


def _as_defense_list(defense) -> list[DefenseConfig]:
    if defense is None:
        return [DefenseConfig()]
    if isinstance(defense, DefenseConfig):
        return [defense]
    return list(defense)


def check_defenses(defenses: Sequence[DefenseConfig]) -> None:
    """Reject stacks that cannot be combined (two batch rewrites, two transforms...)."""
    kinds = [d.kind for d in defenses if d.kind != "None"]
    if len(set(kinds)) != len(kinds):
        raise ValueError(f"defense listed twice: {kinds}")
    batch = [k for k in kinds if k in BATCH_DEFENSES]
    if len(batch) > 1:
        raise ValueError(f"conflicting batch defenses {batch}: only one may replace each batch")
    if sum(k in PREPROCESS for k in kinds) > 1:
        raise ValueError(f"at most one preprocessing defense may be applied, got {kinds}")
    if sum(k in AUG_DEFENSES for k in kinds) > 1:
        raise ValueError(f"at most one augmentation policy may be applied, got {kinds}")


def defense_name(defenses: Sequence[DefenseConfig]) -> str:
    kinds = [d.kind for d in defenses if d.kind != "None"]
    return "+".join(kinds) if kinds else "None"


def _batch_fn(defenses: Sequence[DefenseConfig], num_classes: int):
    """Per-batch rewrite for a defense stack, or ``None`` for plain training.

    Any defense other than ``None`` trains on standard crop+flip batches; the
    augmentation policy or batch defense is applied on top of that.
    """
    kinds = {d.kind: d for d in defenses if d.kind != "None"}
    if not kinds:
        return None
    policy = next((k for k in AUG_DEFENSES if k in kinds), "Standard")
    at, umax, lite = kinds.get("AT"), kinds.get("UMax"), kinds.get("ULite")

    def fn(model, x, y, rng):
        x, soft = augment(x, y, "Standard", rng, num_classes)
        if policy != "Standard":
            x, soft = augment(x, y, policy, rng, num_classes)
        if lite is not None:
            x, soft = augment(x, y, "ULite", rng, num_classes, p=lite.aug_prob)
        elif umax is not None:
            x, soft = umax_select(model, x, y, umax.umax_k, rng, num_classes, p=umax.aug_prob)
        elif at is not None:
            x = pgd_adversarial(model, x, y, at.at_eps, at.at_alpha, at.at_steps, rng)
        return x, soft

    return fn


def train_model(data, defense, cfg: TrainConfig, testset: LabeledDataset | None = None):
    """Train a fresh CNN on ``data`` under ``defense``; returns ``(model, history, train_images)``.

    ``defense`` is one :class:`DefenseConfig` or a compatible stack of them.
    History rows are ``(train_loss, train_acc, test_acc)``; ``test_acc`` is NaN
    without a test set.  ``train_images`` are the images after preprocessing.
    """
    if isinstance(data, PoisonedDataset):
        data = data.as_labeled()
    defenses = _as_defense_list(defense)
    check_defenses(defenses)
    images = data.images
    for d in defenses:
        if d.kind in PREPROCESS:
            images = preprocess(images, d)
    model = init_model(data.num_classes, data.image_shape, seed=cfg.seed)
    state = SgdState.for_model(model, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 101])
    batch_fn = _batch_fn(defenses, data.num_classes)
    history = []
    for epoch in range(cfg.epochs):
        state.lr = cfg.lr_at(epoch)
        loss, acc = run_epoch(model, state, images, data.labels, cfg.batch_size, rng, batch_fn)
        test_acc = evaluate(model, testset) if testset is not None else float("nan")
        history.append((loss, acc, test_acc))
        log.info("epoch %d/%d loss %.4f train %.4f test %.4f", epoch + 1, cfg.epochs, loss, acc, test_acc)
    return model, history, images


def evaluate(model: CnnModel, testset: LabeledDataset) -> float:
    if testset is None or len(testset) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return accuracy(model, testset.images, testset.labels)


# ---------------------------------------------------------------- cache


def cache_dir(default=None) -> Path:
    env = os.environ.get("APFORGE_CACHE")
    if env:
        return Path(env)
    return Path(default) if default is not None else Path.home() / ".cache" / "apforge"


def cache_path(cfg: AttackConfig, data_tag: str, directory) -> Path:
    key = hashlib.sha256(f"{cfg.digest()}|{data_tag}".encode()).hexdigest()[:20]
    return Path(directory) / f"{cfg.attack}-{key}.apbt"


def get_perturbations(cfg: AttackConfig, train: LabeledDataset, data_tag: str, directory=None) -> PerturbationSet:
    """Load the cached set for ``(cfg, data_tag)`` or generate and store it.

    A cache entry that fails its checksum or does not match the dataset is
    regenerated.
    """
    path = cache_path(cfg, data_tag, cache_dir(directory))
    if path.exists():
        try:
            pert = PerturbationSet.load(path)
            if pert.deltas.shape == train.images.shape:
                log.info("cache hit %s", path)
                return pert
            log.warning("cached %s has shape %s, expected %s; regenerating", path, pert.deltas.shape,
                        train.images.shape)
        except (ArchiveError, KeyError, ValueError, OSError) as exc:
            log.warning("cache entry %s unreadable (%s); regenerating", path, exc)
    pert = generate(train, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    pert.save(path)
    return pert


# ---------------------------------------------------------------- experiments


def run_experiment(attack: AttackConfig | None, defense, ratio: float, train_cfg: TrainConfig,
                   data_tag: str = "synthetic", cache=None) -> ExperimentRecord:
    t0 = time.perf_counter()
    train, test = load_data(data_tag)
    defenses = _as_defense_list(defense)
    if attack is None:
        data, eps = train, 0.0
    else:
        pert = get_perturbations(attack, train, data_tag, cache)
        data, eps = apply_poison(train, pert, ratio, seed=attack.seed), pert.eps
    model, history, images = train_model(data, defenses, train_cfg, test)
    return ExperimentRecord(
        attack_name=attack.attack if attack is not None else "None",
        defense_name=defense_name(defenses),
        ratio=float(ratio) if attack is not None else 0.0,
        eps_used=float(eps),
        clean_test_acc=history[-1][2],
        poisoned_train_acc=accuracy(model, images, data.labels),
        epochs=train_cfg.epochs,
        seed=train_cfg.seed,
        wall_seconds=time.perf_counter() - t0,
        history=history,
    )


@dataclass
class SweepResult:
    records: list
    failures: list
    summary: str


def sweep(attacks: Sequence[AttackConfig | None], defenses: Sequence, ratios: Sequence[float],
          train_cfg: TrainConfig, data_tag: str = "synthetic", cache=None) -> SweepResult:
    """Run every (attack, defense, ratio) combination in that nesting order.

    A failing run is logged and listed in ``failures``; the sweep carries on.
    """
    if not attacks or not defenses or not ratios:
        raise ValueError("sweep grid is empty")
    records, failures = [], []
    for attack in attacks:
        for defense in defenses:
            for ratio in ratios:
                label = (attack.attack if attack else "None", defense_name(_as_defense_list(defense)), ratio)
                try:
                    records.append(run_experiment(attack, defense, ratio, train_cfg, data_tag, cache))
                except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the sweep
                    log.error("run %s failed: %s", label, exc)
                    failures.append((label, repr(exc)))
    return SweepResult(records, failures, summary_table(records))


def summary_table(records) -> str:
    lines = [f"{'attack':<8}{'defense':<12}{'ratio':>7}{'eps':>9}{'test_acc':>10}{'train_acc':>11}"]
    for r in records:
        lines.append(f"{r.attack_name:<8}{r.defense_name:<12}{r.ratio:>7.2f}{r.eps_used:>9.4f}"
                     f"{r.clean_test_acc:>10.4f}{r.poisoned_train_acc:>11.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- reporting


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def csv_text(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([_fmt(v) for v in (r.attack_name, r.defense_name, float(r.ratio), float(r.eps_used),
                                           float(r.clean_test_acc), float(r.poisoned_train_acc), r.epochs,
                                           r.seed, float(r.wall_seconds))])
    return buf.getvalue()


def curve_names(records) -> list[str]:
    names, seen = [], {}
    for r in records:
        base = f"{r.attack_name}_{r.defense_name}".replace("+", "-")
        seen[base] = seen.get(base, 0) + 1
        names.append(f"{base}.dat" if seen[base] == 1 else f"{base}_{seen[base]}.dat")
    return names


def emit_report(records, out_dir) -> list[Path]:
    """Write results.csv, results.json and one ``epoch train_acc test_acc`` curve per record."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = [out / "results.csv", out / "results.json"]
    atomic_write(written[0], csv_text(records).encode())
    atomic_write(written[1], (json.dumps([r.to_dict() for r in records], indent=1) + "\n").encode())
    for r, name in zip(records, curve_names(records)):
        rows = [f"{e + 1} {tr:.4f} {te:.4f}" for e, (_, tr, te) in enumerate(r.history)]
        atomic_write(out / name, ("\n".join(rows) + "\n").encode())
        written.append(out / name)
    return written


def load_records(path) -> list[ExperimentRecord]:
    return [ExperimentRecord.from_dict(d) for d in json.loads(Path(path).read_text())]


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)
