"""Batch augmentations returning ``(images, soft_labels)``.

Policies: Standard (reflect-pad crop + horizontal flip), CutOut, MixUp, CutMix,
Plasma (fractal brightness/contrast), ChannelShuffle, and ULite, which chains
Plasma and ChannelShuffle.
"""

from __future__ import annotations

import numpy as np

POLICIES = ("Standard", "CutOut", "MixUp", "CutMix", "Plasma", "ChannelShuffle", "ULite")

CROP_PAD = 4
CUTOUT_SIZE = 8
PLASMA_ROUGHNESS = 0.5
PLASMA_BRIGHTNESS = 0.3
PLASMA_CONTRAST = 0.5


def one_hot(labels, num_classes) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), np.float32)
    out[np.arange(len(labels)), labels] = 1
    return out


def random_crop_flip(x, rng, pad=CROP_PAD, flip_p=0.5):
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < flip_p
    out = np.empty_like(x)
    for i, ((dy, dx), flip) in enumerate(zip(offs, flips)):
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flip else crop
    return out


def cutout(x, rng, size=CUTOUT_SIZE):
    n, _, h, w = x.shape
    out = x.copy()
    centers = np.stack([rng.integers(0, h, n), rng.integers(0, w, n)], axis=1)
    for i, (cy, cx) in enumerate(centers):
        y0, y1 = max(cy - size // 2, 0), min(cy + size // 2, h)
        x0, x1 = max(cx - size // 2, 0), min(cx + size // 2, w)
        out[i, :, y0:y1, x0:x1] = 0
    return out


def mixup(x, soft, rng, lam=None):
    lam = rng.beta(1.0, 1.0) if lam is None else lam
    perm = rng.permutation(len(x))
    xm = (lam * x + (1 - lam) * x[perm]).astype(np.float32)
    ym = (lam * soft + (1 - lam) * soft[perm]).astype(np.float32)
    return xm, ym


def cutmix(x, soft, rng, lam=None):
    n, _, h, w = x.shape
    lam = rng.beta(1.0, 1.0) if lam is None else lam
    perm = rng.permutation(n)
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    y0, y1 = np.clip([cy - ch // 2, cy + ch // 2], 0, h)
    x0, x1 = np.clip([cx - cw // 2, cx + cw // 2], 0, w)
    out = x.copy()
    out[:, :, y0:y1, x0:x1] = x[perm, :, y0:y1, x0:x1]
    frac = (y1 - y0) * (x1 - x0) / (h * w)
    ym = ((1 - frac) * soft + frac * soft[perm]).astype(np.float32)
    return out, ym


def _neighbour_mean(f, rows, cols, half):
    """Mean of the up/down/left/right points at distance ``half`` that exist."""
    s = f.shape[-1]
    total = np.zeros((f.shape[0], len(rows), len(cols)))
    count = np.zeros((len(rows), len(cols)))
    for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
        r, c = rows + dr, cols + dc
        rok, cok = (r >= 0) & (r < s), (c >= 0) & (c < s)
        ok = rok[:, None] & cok[None, :]
        vals = f[:, np.clip(r, 0, s - 1)][:, :, np.clip(c, 0, s - 1)]
        total += vals * ok
        count += ok
    return total / count


def plasma_fields(n, h, w, rng, roughness=PLASMA_ROUGHNESS) -> np.ndarray:
    """``n`` midpoint-displacement (diamond-square) fractal fields in [0, 1]."""
    k = int(np.ceil(np.log2(max(h, w, 2))))
    s = 2 ** k + 1
    f = np.zeros((n, s, s))
    f[:, :: s - 1, :: s - 1] = rng.uniform(-1, 1, size=(n, 2, 2))
    step, scale = s - 1, roughness
    while step > 1:
        half = step // 2
        # square step: centre of each cell from its four corners
        corners = (f[:, 0:-1:step, 0:-1:step] + f[:, step::step, 0:-1:step]
                   + f[:, 0:-1:step, step::step] + f[:, step::step, step::step]) / 4
        f[:, half::step, half::step] = corners + scale * rng.uniform(-1, 1, corners.shape)
        # diamond step: edge midpoints from their (up to four) neighbours
        for rows, cols in ((np.arange(half, s, step), np.arange(0, s, step)),
                           (np.arange(0, s, step), np.arange(half, s, step))):
            mean = _neighbour_mean(f, rows, cols, half)
            f[:, rows[:, None], cols[None, :]] = mean + scale * rng.uniform(-1, 1, mean.shape)
        step, scale = half, scale * roughness
    f = f[:, :h, :w]
    lo = f.min(axis=(1, 2), keepdims=True)
    hi = f.max(axis=(1, 2), keepdims=True)
    return ((f - lo) / np.where(hi > lo, hi - lo, 1)).astype(np.float32)


def plasma(x, rng, p=0.5):
    n, _, h, w = x.shape
    out = x.copy()
    bright = rng.random(n) < p
    contrast = rng.random(n) < p
    fb = plasma_fields(n, h, w, rng)[:, None]
    fc = plasma_fields(n, h, w, rng)[:, None]
    out[bright] = out[bright] + PLASMA_BRIGHTNESS * (fb[bright] - 0.5)
    out[contrast] = (out[contrast] - 0.5) * (1 + PLASMA_CONTRAST * (fc[contrast] - 0.5)) + 0.5
    return np.clip(out, 0, 1).astype(np.float32)


def channel_shuffle(x, rng, p=0.5):
    out = x.copy()
    for i in np.flatnonzero(rng.random(len(x)) < p):
        out[i] = x[i, rng.permutation(x.shape[1])]
    return out


def ulite(x, rng, p=0.5):
    return channel_shuffle(plasma(x, rng, p), rng, p)


def augment(batch, labels, policy: str, rng, num_classes=None, lam=None, p=0.5):
    """Apply ``policy`` to a batch; returns ``(images, soft_labels)``.

    ``labels`` are hard class indices; rows of the returned soft labels sum to 1.
    ``lam`` pins the MixUp/CutMix mixing weight (otherwise Beta(1, 1)); ``p`` is
    the per-image probability used by the Plasma and ChannelShuffle policies.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    batch = np.asarray(batch, np.float32)
    labels = np.asarray(labels)
    if len(batch) != len(labels):
        raise ValueError("batch and labels are not aligned")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    soft = one_hot(labels, num_classes)
    if policy == "Standard":
        return random_crop_flip(batch, rng), soft
    if policy == "CutOut":
        return cutout(batch, rng), soft
    if policy == "MixUp":
        return mixup(batch, soft, rng, lam)
    if policy == "CutMix":
        return cutmix(batch, soft, rng, lam)
    if policy == "Plasma":
        return plasma(batch, rng, p), soft
    if policy == "ChannelShuffle":
        return channel_shuffle(batch, rng, p), soft
    return ulite(batch, rng, p), soft
