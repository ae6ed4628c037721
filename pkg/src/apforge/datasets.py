"""Datasets, perturbation sets and poisoning.

Images are float32 NCHW arrays in [0, 1]; labels are int64 vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import archive_load, archive_save, atomic_write
from .numerics import lp_norms

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


@dataclass
class PerturbationSet:
    deltas: np.ndarray
    norm: str
    eps: float
    attack_name: str
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.deltas)

    def norms(self) -> np.ndarray:
        if self.norm == "l0":
            # budget counts perturbed pixel positions, not channel entries
            return (np.abs(self.deltas).max(axis=1) != 0).reshape(len(self), -1).sum(axis=1)
        return lp_norms(self.deltas, self.norm)

    def within_budget(self, tol=1e-6) -> bool:
        norms = self.norms()
        if self.norm == "l0":
            return bool((norms <= self.eps).all())
        return bool((norms <= self.eps + tol).all())

    def save(self, path) -> None:
        """Archive the deltas at ``path`` plus a ``<path>.meta`` key=value sidecar."""
        path = Path(path)
        archive_save({"deltas": self.deltas}, path)
        lines = [
            f"attack={self.attack_name}",
            f"norm={self.norm}",
            f"eps={self.eps!r}",
            f"seed={self.seed}",
        ]
        lines += [f"{k}={v}" for k, v in sorted(self.meta.items())]
        atomic_write(meta_path(path), ("\n".join(lines) + "\n").encode())

    @classmethod
    def load(cls, path) -> "PerturbationSet":
        path = Path(path)
        deltas = archive_load(path)["deltas"]
        meta = read_key_values(meta_path(path))
        attack = meta.pop("attack")
        norm = meta.pop("norm")
        eps = float(meta.pop("eps"))
        seed = int(meta.pop("seed"))
        return cls(deltas, norm, eps, attack, seed, meta)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def read_key_values(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


@dataclass
class PoisonedDataset:
    base: LabeledDataset
    poisoned_mask: np.ndarray
    ratio: float
    images: np.ndarray

    @property
    def labels(self):
        return self.base.labels

    @property
    def num_classes(self):
        return self.base.num_classes

    @property
    def name(self):
        return self.base.name

    def __len__(self):
        return len(self.base)

    def as_labeled(self) -> LabeledDataset:
        return LabeledDataset(self.images, self.base.labels, self.base.num_classes, self.base.name)


def load_cifar10(path, split: str = "train") -> LabeledDataset:
    """Read the CIFAR-10 binary batches under ``path``.

    Each record is one label byte followed by 3072 pixel bytes (R, G, B planes,
    32x32 row-major).  Record order is preserved.
    """
    names = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
    if names is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    chunks = []
    for name in names:
        f = Path(path) / name
        if not f.is_file():
            raise FileNotFoundError(f"missing CIFAR-10 batch file {f}")
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise ValueError(f"{f}: size {raw.size} is not a multiple of {CIFAR_RECORD} (truncated record)")
        chunks.append(raw.reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return LabeledDataset(images, labels, 10, f"cifar10-{split}")


def _smooth_field(rng, channels, hw, max_freq=2):
    yy, xx = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    out = np.zeros((channels, hw, hw))
    for c in range(channels):
        for fy in range(max_freq + 1):
            for fx in range(max_freq + 1):
                if fx == fy == 0:
                    continue
                amp = rng.standard_normal()
                phase = rng.uniform(0, 2 * np.pi)
                out[c] += amp * np.cos(2 * np.pi * (fx * xx + fy * yy) / hw + phase)
        out[c] /= out[c].std()
    return out


def class_templates(num_classes, hw, seed, amp=0.045, chroma=0.3) -> np.ndarray:
    """One smooth low-frequency RGB pattern per class, centred on grey.

    Most of the structure is a luminance field shared by all channels, with a
    weaker per-channel colour field on top (weight ``chroma``), so a grey-scale
    copy still carries the class.
    """
    rng = np.random.default_rng([seed, 0])
    out = []
    for _ in range(num_classes):
        field = _smooth_field(rng, 1, hw) + chroma * _smooth_field(rng, 3, hw)
        out.append(0.5 + amp * field / field.std())
    return np.stack(out)


def gen_synthetic(num_classes=10, per_class=200, hw=32, seed=0, split="train",
                  noise_sigma=0.15, template_amp=0.045, translate=True) -> LabeledDataset:
    """Class template, randomly translated, plus i.i.d. Gaussian pixel noise.

    Each image is its class template circularly shifted by a uniform random
    offset (when ``translate``), plus N(0, ``noise_sigma``) per pixel, clamped to
    [0, 1].  Templates depend only on ``seed`` so both splits share them; the
    per-image stream is derived from ``(seed, split)``.  The shift makes the
    true class feature position-invariant, so a small CNN needs several epochs to
    learn it, while a fixed-position injected pattern is picked up at once.
    """
    if per_class < 2:
        raise ValueError("per_class must be >= 2")
    if hw < 8:
        raise ValueError("hw must be >= 8")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    templates = class_templates(num_classes, hw, seed, template_amp)
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(num_classes), per_class)
    shifts = rng.integers(0, hw, size=(len(labels), 2)) if translate else np.zeros((len(labels), 2), int)
    clean = np.stack([np.roll(templates[y], tuple(s), axis=(1, 2)) for y, s in zip(labels, shifts)])
    noise = rng.standard_normal(clean.shape) * noise_sigma
    images = np.clip(clean + noise, 0, 1).astype(np.float32)
    return LabeledDataset(images, labels, num_classes, f"synthetic-{split}")


def poison_mask(n, ratio, seed) -> np.ndarray:
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    perm = np.random.default_rng([seed, 7]).permutation(n)
    mask = np.zeros(n, bool)
    mask[perm[: int(np.floor(ratio * n + 1e-9))]] = True
    return mask


def apply_poison(base: LabeledDataset, pert: PerturbationSet, ratio=1.0, seed=0) -> PoisonedDataset:
    if len(pert) != len(base):
        raise ValueError(f"perturbation set has {len(pert)} samples, dataset has {len(base)}")
    if pert.deltas.shape[1:] != base.images.shape[1:]:
        raise ValueError(f"perturbation shape {pert.deltas.shape[1:]} != image shape {base.images.shape[1:]}")
    mask = poison_mask(len(base), ratio, seed)
    images = base.images.copy()
    images[mask] = np.clip(base.images[mask] + pert.deltas[mask], 0, 1)
    return PoisonedDataset(base, mask, float(ratio), images)


def clean_poisoned(base: LabeledDataset) -> PoisonedDataset:
    """Wrap a clean dataset so it can flow through the poisoned-data path."""
    return PoisonedDataset(base, np.zeros(len(base), bool), 0.0, base.images)
