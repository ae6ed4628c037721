"""Slow independent reference implementations used by the self-test and the tests.

Each oracle recomputes a fast routine the obvious way (finite differences,
scalar loops, a direct 2-D convolution) so the two can be compared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AR_OFFSETS, OPS_COLORS, ar_filter, ar_recurrence, ops_search
from .defenses import gaussian_blur, gaussian_kernel1d
from .numerics import activation_pattern, init_model, loss_and_grads, per_sample_loss, project_lp


def _loss64(model, x, y) -> float:
    return float(per_sample_loss(model, x, y).mean())


def _fd(model, x, y, bump, h, base_pattern, shrink=3):
    """Central difference of the loss along ``bump(h)``; shrinks ``h`` near kinks.

    ``bump(s)`` applies a signed offset ``s`` in place and returns an undo callable.
    Returns ``None`` when every step size still crosses a ReLU/pool switch.
    """
    for _ in range(shrink + 1):
        undo = bump(h)
        up, pat_up = _loss64(model, x, y), activation_pattern(model, x)
        undo()
        undo = bump(-h)
        down, pat_down = _loss64(model, x, y), activation_pattern(model, x)
        undo()
        if pat_up == base_pattern == pat_down:
            return (up - down) / (2 * h)
        h /= 10
    return None


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int


def grad_check(seed=0, n=4, num_classes=3, hw=8, widths=(4, 8, 8), per_tensor=12, h=1e-3) -> GradCheck:
    """Compare analytic parameter and input gradients with central differences.

    Runs in float64 on a tiny network.  The relative error of a coordinate is
    ``|a - f| / max(|a|, |f|, 1e-6)``.
    """
    rng = np.random.default_rng([seed, 501])
    model = init_model(num_classes, (3, hw, hw), widths, seed=seed).astype(np.float64)
    x = rng.random((n, 3, hw, hw))
    y = rng.integers(0, num_classes, n)
    _, grads, gx = loss_and_grads(model, x, y, wrt_input=True)
    base = activation_pattern(model, x)
    worst, checked, skipped = 0.0, 0, 0

    def compare(analytic, numeric):
        nonlocal worst, checked, skipped
        if numeric is None:
            skipped += 1
            return
        checked += 1
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))

    targets = [(name, model.params[name], grads[name]) for name in model.param_names] + [("input", x, gx)]
    for _, arr, g in targets:
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for p in picks:
            def bump(s, flat=flat, p=p):
                old = flat[p]
                flat[p] = old + s

                def undo():
                    flat[p] = old
                return undo
            compare(float(g.reshape(-1)[p]), _fd(model, x, y, bump, h, base))
    return GradCheck(worst, checked, skipped)


def ar_oracle(field, coeffs) -> np.ndarray:
    """Scalar triple loop over one ``(C, H, W)`` field with explicit zero padding."""
    field = np.asarray(field, np.float64)
    c, h, w = field.shape
    out = np.zeros((c, h + 2, w + 2))
    out[:, 2:, 2:] = field
    for ch in range(c):
        for i in range(1, h):
            for j in range(1, w):
                acc = 0.0
                for k in range(len(AR_OFFSETS)):
                    di, dj = AR_OFFSETS[k]
                    acc = acc + float(coeffs[k]) * float(out[ch, i + 2 + di, j + 2 + dj])
                out[ch, i + 2, j + 2] = acc
    return out[:, 2:, 2:]


def ar_instance(seed, shape=(3, 8, 8)):
    rng = np.random.default_rng([seed, 601])
    coeffs = ar_filter(rng)
    field = np.zeros(shape)
    field[:, 0, :] = rng.standard_normal((shape[0], shape[2]))
    field[:, 1:, 0] = rng.standard_normal((shape[0], shape[1] - 1))
    return field, coeffs


def ops_brute_force(images):
    """Exhaustive (i, j, colour) search with plain loops; first strict maximum wins."""
    x = np.asarray(images, np.float64)
    n, _, h, w = x.shape
    best, best_key = -np.inf, None
    for i in range(h):
        for j in range(w):
            for k, color in enumerate(OPS_COLORS):
                d = [float(np.mean(np.abs(color - x[m, :, i, j]))) for m in range(n)]
                score = float(np.mean(d) - np.std(d))
                if score > best + 1e-12:
                    best, best_key = score, (i, j, k)
    i, j, k = best_key
    return i, j, OPS_COLORS[k].copy()


def blur_oracle(batch, kernel, sigma) -> np.ndarray:
    """Direct 2-D convolution with the outer-product Gaussian kernel, reflect padding."""
    k1 = gaussian_kernel1d(kernel, sigma)
    k2 = np.outer(k1, k1)
    x = np.asarray(batch, np.float64)
    r = kernel // 2
    h, w = x.shape[-2:]
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)], mode="reflect")
    out = np.zeros_like(x)
    for a in range(kernel):
        for b in range(kernel):
            out += k2[a, b] * xp[..., a : a + h, b : b + w]
    return np.clip(out, 0, 1)


def selftest(seed=0) -> list[tuple[str, bool, str]]:
    """Run every oracle comparison; returns ``(name, passed, detail)`` rows."""
    rows = []
    gc = grad_check(seed)
    rows.append(("grad_check", gc.max_rel_error <= 1e-3 and gc.checked > 0,
                 f"max rel err {gc.max_rel_error:.2e} over {gc.checked} coords ({gc.skipped} skipped)"))

    same = 0
    for s in range(10):
        field, coeffs = ar_instance(seed * 10 + s)
        same += np.array_equal(ar_recurrence(field, coeffs), ar_oracle(field, coeffs))
    rows.append(("ar_oracle", same == 10, f"{same}/10 bitwise equal"))

    rng = np.random.default_rng([seed, 602])
    agree = 0
    for _ in range(5):
        imgs = rng.random((6, 3, 8, 8))
        i, j, c = ops_search(imgs)
        bi, bj, bc = ops_brute_force(imgs)
        agree += (i, j) == (bi, bj) and np.array_equal(c, bc)
    rows.append(("ops_brute_force", agree == 5, f"{agree}/5 agree"))

    x = rng.random((2, 3, 9, 11)).astype(np.float32)
    err = float(np.abs(gaussian_blur(x, 5, 1.2) - blur_oracle(x, 5, 1.2)).max())
    rows.append(("blur_oracle", err <= 1e-6, f"max abs err {err:.1e}"))

    ok = True
    for norm, eps in (("linf", 8 / 255), ("l2", 1.0), ("l0", 5)):
        d = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
        once = project_lp(d, norm, eps, batched=True)
        ok &= np.array_equal(project_lp(once, norm, eps, batched=True), once)
    rows.append(("projection_idempotence", bool(ok), "linf, l2, l0"))
    return rows
