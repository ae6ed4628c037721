"""Preprocessing transforms, adversarial examples and UEraser-Max selection.

Preprocessing (grayscale, JPEG cycle, bit-depth reduction, Gaussian blur) is
applied once to the training set; augmentations run per batch during training.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .augment import POLICIES, augment, one_hot, ulite
from .numerics import CnnModel, per_sample_loss
from .pgd import pgd_linf

DEFENSES = ("None", "Standard", "CutOut", "MixUp", "CutMix", "Gaussian", "BDR", "Gray", "JPEG",
            "ULite", "UMax", "AT")
PREPROCESS = ("Gaussian", "BDR", "Gray", "JPEG")
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "None"
    jpeg_quality: int = 10
    bdr_bits: int = 2
    gauss_kernel: int = 3
    gauss_sigma: float = 0.1
    at_eps: float = 8 / 255
    at_alpha: float = 2 / 255
    at_steps: int = 10
    umax_k: int = 5
    aug_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSES:
            raise ValueError(f"unknown defense {self.kind!r}; expected one of {DEFENSES}")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality must lie in [1, 100], got {self.jpeg_quality}")
        if not 1 <= self.bdr_bits <= 7:
            raise ValueError(f"bdr_bits must lie in [1, 7], got {self.bdr_bits}")
        if self.gauss_kernel < 1 or self.gauss_kernel % 2 == 0:
            raise ValueError(f"gauss_kernel must be odd and >= 1, got {self.gauss_kernel}")
        if self.umax_k < 1:
            raise ValueError(f"umax_k must be >= 1, got {self.umax_k}")
        if self.at_steps < 1:
            raise ValueError(f"at_steps must be >= 1, got {self.at_steps}")
        if self.at_eps <= 0:
            raise ValueError(f"at_eps must be > 0, got {self.at_eps}")
        if not 0 <= self.aug_prob <= 1:
            raise ValueError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DefenseConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown DefenseConfig fields: {sorted(unknown)}")
        return cls(**raw)

    def with_(self, **changes) -> "DefenseConfig":
        return replace(self, **changes)


def _check_rgb(batch):
    batch = np.asarray(batch, np.float32)
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) batch, got shape {batch.shape}")
    return batch


def grayscale(batch) -> np.ndarray:
    batch = _check_rgb(batch)
    r, g, b = batch.astype(np.float64).transpose(1, 0, 2, 3)
    wr, wg, wb = GRAY_WEIGHTS
    # float64 accumulation makes an already-grey pixel map exactly onto itself
    y = (wr * r + wg * g + wb * b).astype(np.float32)
    return np.repeat(y[:, None], 3, axis=1)


def bit_depth_reduce(batch, bits: int) -> np.ndarray:
    if not 1 <= bits <= 7:
        raise ValueError(f"bits must lie in [1, 7], got {bits}")
    levels = 2 ** bits - 1
    x = np.asarray(batch, np.float64)
    return (np.round(x * levels) / levels).astype(np.float32)


def gaussian_kernel1d(kernel: int, sigma: float) -> np.ndarray:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {kernel}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = np.arange(kernel) - kernel // 2
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(batch, kernel: int = 3, sigma: float = 0.1) -> np.ndarray:
    k = gaussian_kernel1d(kernel, sigma)
    x = np.asarray(batch, np.float64)
    if kernel == 1:
        return x.astype(np.float32)
    r = kernel // 2
    h, w = x.shape[-2:]
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)], mode="reflect")
    rows = sum(k[i] * xp[..., i : i + h, :] for i in range(kernel))
    out = sum(k[j] * rows[..., j : j + w] for j in range(kernel))
    return np.clip(out, 0, 1).astype(np.float32)


# JPEG baseline quantization tables (luminance, chrominance)
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], np.float64)
JPEG_CHROMA = np.full((8, 8), 99.0)
JPEG_CHROMA[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def quant_table(base, quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must lie in [1, 100], got {quality}")
    s = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * s + 50) / 100), 1, 255)


def dct_matrix(n=8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos((2 * i + 1) * k * np.pi / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


_DCT = dct_matrix()


def rgb_to_ycbcr(x):
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=1)


def ycbcr_to_rgb(x):
    y, cb, cr = x[:, 0], x[:, 1] - 128, x[:, 2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=1)


def _block_quantize(plane, table):
    """Quantize and dequantize the 8x8 block DCT of ``(N, H, W)`` planes."""
    n, h, w = plane.shape
    blocks = plane.reshape(n, h // 8, 8, w // 8, 8)
    coef = np.einsum("ui,nbijc,vj->nbuvc", _DCT, blocks.transpose(0, 1, 2, 4, 3), _DCT)
    coef = np.round(coef / table[:, :, None]) * table[:, :, None]
    back = np.einsum("ui,nbuvc,vj->nbijc", _DCT, coef, _DCT)
    return back.transpose(0, 1, 2, 4, 3).reshape(n, h, w)


def jpeg_cycle(batch, quality: int = 10) -> np.ndarray:
    """Compress and decompress in memory: colour transform, DCT, quantization.

    Entropy coding is lossless, so it is skipped.  Sides that are not a
    multiple of 8 are reflect-padded and cropped back afterwards.
    """
    batch = _check_rgb(batch)
    luma, chroma = quant_table(JPEG_LUMA, quality), quant_table(JPEG_CHROMA, quality)
    h, w = batch.shape[-2:]
    ph, pw = -h % 8, -w % 8
    x = np.pad(batch.astype(np.float64) * 255, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    ycc = rgb_to_ycbcr(x) - 128
    for c, table in enumerate((luma, chroma, chroma)):
        ycc[:, c] = _block_quantize(ycc[:, c], table)
    out = ycbcr_to_rgb(ycc + 128)[:, :, :h, :w] / 255
    return np.clip(out, 0, 1).astype(np.float32)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)


def preprocess(images, cfg: DefenseConfig) -> np.ndarray:
    """Apply the configured input transformation; non-preprocessing kinds pass through."""
    if cfg.kind == "Gray":
        return grayscale(images)
    if cfg.kind == "JPEG":
        return jpeg_cycle(images, cfg.jpeg_quality)
    if cfg.kind == "BDR":
        return bit_depth_reduce(images, cfg.bdr_bits)
    if cfg.kind == "Gaussian":
        return gaussian_blur(images, cfg.gauss_kernel, cfg.gauss_sigma)
    return np.asarray(images, np.float32)


def pgd_adversarial(model: CnnModel, batch, labels, eps, alpha, steps, rng) -> np.ndarray:
    """Loss-maximizing l-inf PGD from a uniform random start; returns ``x + delta``."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x = np.asarray(batch, np.float32)
    delta = pgd_linf(model, x, np.asarray(labels), eps, alpha, steps, rng=rng)
    return x + delta


def umax_select(model: CnnModel, batch, labels, K, rng, num_classes=None, p=0.5, return_losses=False):
    """Per sample, keep the ULite draw (out of ``K``) with the largest loss.

    Ties go to the earliest draw.  With ``return_losses`` the ``(K, N)`` loss
    matrix is returned as a third element.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    x = np.asarray(batch, np.float32)
    labels = np.asarray(labels)
    num_classes = model.num_classes if num_classes is None else num_classes
    draws = np.stack([ulite(x, rng, p) for _ in range(K)])
    losses = np.stack([per_sample_loss(model, d, labels) for d in draws])
    pick = losses.argmax(axis=0)
    out = draws[pick, np.arange(len(x))]
    soft = one_hot(labels, num_classes)
    return (out, soft, losses) if return_losses else (out, soft)


__all__ = [
    "DEFENSES", "PREPROCESS", "POLICIES", "DefenseConfig", "augment", "bit_depth_reduce",
    "gaussian_blur", "grayscale", "jpeg_cycle", "pgd_adversarial", "preprocess", "psnr",
    "umax_select",
]
