"""Signed-gradient l-inf PGD on the input of a fixed model."""

from __future__ import annotations

import numpy as np

from .numerics import CnnModel, input_gradient, project_lp


def clamp_delta(x, delta, eps):
    """Keep ``x + delta`` inside [0, 1] and ``delta`` inside the l-inf ball.

    Projecting after the clamp keeps the budget exact even when ``(x + d) - x``
    rounds to something a hair larger than ``d``.
    """
    return project_lp(np.clip(x + delta, 0, 1) - x, "linf", eps)


def pgd_linf(model: CnnModel, x, targets, eps, alpha, steps, *, minimize=False,
             delta=None, rng=None, batch_size=256) -> np.ndarray:
    """Run ``steps`` of PGD and return the perturbation (same shape as ``x``).

    Ascends the cross-entropy of ``targets`` unless ``minimize`` is set.
    ``delta`` seeds the iteration; otherwise it starts at zero, or uniformly in
    the ball when ``rng`` is given.  Samples are independent, so batching only
    affects speed.
    """
    x = np.asarray(x, np.float32)
    if delta is not None:
        delta = np.array(delta, np.float32)
    elif rng is not None:
        delta = rng.uniform(-eps, eps, size=x.shape).astype(np.float32)
    else:
        delta = np.zeros_like(x)
    delta = clamp_delta(x, delta, eps)
    if steps <= 0:
        return delta
    sign = np.float32(-1 if minimize else 1)
    step = np.float32(alpha)
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        xb, db, tb = x[sl], delta[sl], targets[sl]
        for _ in range(steps):
            _, g = input_gradient(model, xb + db, tb)
            db = clamp_delta(xb, db + sign * step * np.sign(g), eps)
        delta[sl] = db
    return delta
