"""Availability-poisoning perturbation generators.

Surrogate-based (l-inf): EM, REM, HYPO, TAP.  Surrogate-free: LSP and AR (l2)
and OPS (l0, one pixel).  Every generator returns a :class:`PerturbationSet`
whose deltas satisfy the declared budget before any [0, 1] clamping done at
poison time.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .datasets import LabeledDataset, PerturbationSet
from .numerics import CnnModel, SgdState, init_model, input_gradient, project_lp
from .pgd import clamp_delta, pgd_linf
from .training import accuracy, mean_loss, run_epoch

log = logging.getLogger(__name__)

ATTACKS = ("EM", "REM", "HYPO", "TAP", "LSP", "AR", "OPS")
ATTACK_NORMS = {"EM": "linf", "REM": "linf", "HYPO": "linf", "TAP": "linf",
                "LSP": "l2", "AR": "l2", "OPS": "l0"}
SURROGATE_FREE = ("LSP", "AR", "OPS")

LINF_EPS = 8 / 255
LSP_L2 = 1.304  # at 3x32x32
AR_EPS = 1.0
# causal 3x3 window anchored at the generated pixel (bottom-right corner)
AR_OFFSETS = ((-2, -2), (-2, -1), (-2, 0), (-1, -2), (-1, -1), (-1, 0), (0, -2), (0, -1))
AR_COEFF_BOUND = 0.99
AR_PROBE_SEED = 12345
AR_PROBE_LIMIT = 10.0  # max |u| on the probe, boundary ~ N(0, 1)


@dataclass(frozen=True)
class AttackConfig:
    attack: str
    eps: float | None = None
    pgd_steps: int | None = None
    pgd_alpha: float = 0.8 / 255
    surrogate_epochs: int = 1
    stop_error: float = 0.01
    min_outer: int = 20
    outer_cap: int = 30
    rem_adv_eps: float = 4 / 255
    rem_adv_steps: int = 5
    patch_size: int = 8
    lr: float = 0.03
    batch_size: int = 128
    pretrain_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}; expected one of {ATTACKS}")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.attack in ("EM", "REM", "HYPO", "TAP") and not self.pgd_alpha > 0:
            raise ValueError("pgd_alpha must be positive")
        if self.min_outer < 1 or self.outer_cap < 1:
            raise ValueError("min_outer and outer_cap must be >= 1")
        if self.attack == "REM" and not 0 <= self.rem_adv_eps <= self.budget:
            raise ValueError("rem_adv_eps must lie in [0, eps]")
        if self.attack == "OPS" and self.eps not in (None, 1):
            raise ValueError("OPS perturbs exactly one pixel (eps must be 1)")

    @property
    def norm(self) -> str:
        return ATTACK_NORMS[self.attack]

    @property
    def steps(self) -> int:
        """PGD steps per update; EM/REM take few per outer iteration, HYPO/TAP run one long pass."""
        if self.pgd_steps is not None:
            return self.pgd_steps
        return 2 if self.attack in ("EM", "REM") else 20

    @property
    def budget(self) -> float:
        """Effective eps; LSP's default depends on image size, see :func:`lsp_eps`."""
        if self.eps is not None:
            return self.eps
        return {"linf": LINF_EPS, "l0": 1}.get(self.norm, AR_EPS if self.attack == "AR" else None)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


@dataclass
class SurrogateCheckpoint:
    model: CnnModel
    train_error: float
    epochs_run: int


def _new_surrogate(data: LabeledDataset, cfg: AttackConfig):
    model = init_model(data.num_classes, data.image_shape, seed=cfg.seed)
    return model, SgdState.for_model(model, lr=cfg.lr, momentum=0.9, weight_decay=5e-4)


def pretrain_surrogate(data: LabeledDataset, cfg: AttackConfig, target_error=0.05) -> SurrogateCheckpoint:
    """Train a surrogate on clean data until its train error is <= ``target_error``."""
    model, state = _new_surrogate(data, cfg)
    rng = np.random.default_rng([cfg.seed, 41])
    err, epochs = 1.0, 0
    while epochs < cfg.pretrain_epochs:
        run_epoch(model, state, data.images, data.labels, cfg.batch_size, rng)
        epochs += 1
        err = 1 - accuracy(model, data.images, data.labels)
        if err <= target_error:
            break
    return SurrogateCheckpoint(model, float(err), epochs)


# ---------------------------------------------------------------------------
# error-minimizing family (EM, REM)


def _adv_batch_fn(eps, steps):
    alpha = eps / 4

    def fn(model, x, y, rng):
        d = pgd_linf(model, x, y, eps, alpha, steps, rng=rng)
        return x + d, y

    return fn


def _min_noise_step(model, x, y, delta, cfg, adv_eps, rng, batch_size=256):
    """``cfg.steps`` error-minimizing steps on ``delta``.

    With ``adv_eps > 0`` each step first finds a loss-maximizing perturbation of
    budget ``adv_eps`` around ``x + delta`` and minimizes the loss there.
    """
    eps = cfg.budget
    step = np.float32(cfg.pgd_alpha)
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        xb, yb, db = x[sl], y[sl], delta[sl]
        for _ in range(cfg.steps):
            xu = xb + db
            if adv_eps > 0:
                xu = xu + pgd_linf(model, xu, yb, adv_eps, adv_eps / 4, cfg.rem_adv_steps, rng=rng)
            _, g = input_gradient(model, xu, yb)
            db = clamp_delta(xb, db - step * np.sign(g), eps)
        delta[sl] = db
    return delta


def _error_minimizing(data: LabeledDataset, cfg: AttackConfig, adv_eps: float, outer_cap=None):
    x, y = data.images, data.labels
    model, state = _new_surrogate(data, cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    batch_fn = _adv_batch_fn(adv_eps, cfg.rem_adv_steps) if adv_eps > 0 else None
    delta = np.zeros_like(x)
    cap = cfg.outer_cap if outer_cap is None else outer_cap
    # the surrogate fits the noisy data long before the noise is strong enough
    # to carry over to fresh models, so the error test only counts from min_outer on
    warmup = min(cfg.min_outer, cap)
    history, best, reason = [], None, "outer_cap"
    for outer in range(cap):
        poisoned = x + delta
        for _ in range(cfg.surrogate_epochs):
            run_epoch(model, state, poisoned, y, cfg.batch_size, rng, batch_fn)
        # judge the noise by how well the surrogate fits the data it was just
        # trained on; measuring after the update would only show that PGD can
        # fool the current surrogate
        err = 1 - accuracy(model, poisoned, y)
        loss = mean_loss(model, poisoned, y)
        delta = _min_noise_step(model, x, y, delta, cfg, adv_eps, rng)
        history.append((err, loss))
        log.info("%s outer %d: surrogate error %.4f loss %.4f", cfg.attack, outer + 1, err, loss)
        if best is None or err <= best[0]:
            best = (err, delta.copy())
        if outer + 1 >= warmup and err <= cfg.stop_error:
            reason = "stop_error"
            break
    if reason != "stop_error":
        log.warning("%s did not reach stop error %.3f within %d outer iterations; keeping best (%.4f)",
                    cfg.attack, cfg.stop_error, cap, best[0])
        delta = best[1]
    meta = {
        "stop_reason": reason,
        "converged": reason == "stop_error",
        "outer_iters": len(history),
        "surrogate_errors": ",".join(f"{e:.6f}" for e, _ in history),
        "surrogate_losses": ",".join(f"{l:.6f}" for _, l in history),
    }
    return delta, meta, model


def em_generate(data: LabeledDataset, cfg: AttackConfig) -> PerturbationSet:
    """Error-minimizing noise: alternate surrogate training with loss-minimizing PGD."""
    if cfg.attack != "EM":
        raise ValueError(f"em_generate needs attack='EM', got {cfg.attack!r}")
    delta, meta, _ = _error_minimizing(data, cfg, 0.0)
    return PerturbationSet(delta, "linf", cfg.budget, "EM", cfg.seed, meta)


def rem_generate(data: LabeledDataset, cfg: AttackConfig) -> PerturbationSet:
    """Robust error-minimizing noise: EM against an adversarially trained surrogate."""
    if cfg.attack != "REM":
        raise ValueError(f"rem_generate needs attack='REM', got {cfg.attack!r}")
    delta, meta, _ = _error_minimizing(data, cfg, cfg.rem_adv_eps)
    return PerturbationSet(delta, "linf", cfg.budget, "REM", cfg.seed, meta)


# ---------------------------------------------------------------------------
# fixed-surrogate attacks (HYPO, TAP)


def _check_surrogate(surrogate: SurrogateCheckpoint, limit=0.05):
    if surrogate.train_error > limit:
        raise ValueError(f"surrogate train error {surrogate.train_error:.3f} exceeds {limit}; pretrain it further")


def hypo_generate(data: LabeledDataset, surrogate: SurrogateCheckpoint, cfg: AttackConfig) -> PerturbationSet:
    """Push each sample toward its true label under a fixed pretrained surrogate."""
    if cfg.attack != "HYPO":
        raise ValueError(f"hypo_generate needs attack='HYPO', got {cfg.attack!r}")
    _check_surrogate(surrogate)
    delta = pgd_linf(surrogate.model, data.images, data.labels, cfg.budget, cfg.pgd_alpha,
                     cfg.steps, minimize=True)
    return PerturbationSet(delta, "linf", cfg.budget, "HYPO", cfg.seed)


def tap_targets(labels, num_classes) -> np.ndarray:
    return (np.asarray(labels) + 1) % num_classes


def tap_generate(data: LabeledDataset, surrogate: SurrogateCheckpoint, cfg: AttackConfig) -> PerturbationSet:
    """Targeted adversarial examples toward class ``(y + 1) mod C``."""
    if cfg.attack != "TAP":
        raise ValueError(f"tap_generate needs attack='TAP', got {cfg.attack!r}")
    _check_surrogate(surrogate)
    targets = tap_targets(data.labels, data.num_classes)
    delta = pgd_linf(surrogate.model, data.images, targets, cfg.budget, cfg.pgd_alpha,
                     cfg.steps, minimize=True)
    return PerturbationSet(delta, "linf", cfg.budget, "TAP", cfg.seed)


# ---------------------------------------------------------------------------
# surrogate-free attacks


def lsp_eps(image_shape, base=LSP_L2) -> float:
    """l2 radius for ``image_shape``: ``base`` at 3x32x32, same per-pixel size elsewhere."""
    return base * math.sqrt(int(np.prod(image_shape)) / 3072)


def lsp_patterns(num_classes, image_shape, patch_size, eps, seed) -> np.ndarray:
    c, h, w = image_shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    rng = np.random.default_rng([seed, 21])
    level = eps / math.sqrt(c * h * w)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(num_classes, c, h // patch_size, w // patch_size))
    patterns = np.repeat(np.repeat(signs * level, patch_size, axis=2), patch_size, axis=3)
    return project_lp(patterns.astype(np.float32), "l2", eps, batched=True)


def lsp_generate(data: LabeledDataset, cfg: AttackConfig) -> PerturbationSet:
    """Class-wise patch-constant colour blocks (linearly separable shortcuts)."""
    if cfg.attack != "LSP":
        raise ValueError(f"lsp_generate needs attack='LSP', got {cfg.attack!r}")
    eps = cfg.eps if cfg.eps is not None else lsp_eps(data.image_shape)
    patterns = lsp_patterns(data.num_classes, data.image_shape, cfg.patch_size, eps, cfg.seed)
    delta = np.ascontiguousarray(patterns[data.labels])
    return PerturbationSet(delta, "l2", float(eps), "LSP", cfg.seed)


def ar_filter(rng, max_tries=1000) -> np.ndarray:
    """Uniform coefficients rescaled to ``|sum| == AR_COEFF_BOUND``, stable ones only.

    The sum bound alone does not stop the recurrence from growing, so a draw is
    kept only if it keeps a fixed probe field within ``AR_PROBE_LIMIT``.
    """
    probe = _ar_boundary(np.random.default_rng(AR_PROBE_SEED), (1, 32, 32))
    for _ in range(max_tries):
        coeffs = rng.uniform(-1, 1, size=len(AR_OFFSETS))
        total = coeffs.sum()
        if total == 0:
            continue
        coeffs = coeffs * (AR_COEFF_BOUND / abs(total))
        if np.abs(ar_recurrence(probe, coeffs)).max() <= AR_PROBE_LIMIT:
            return coeffs
    raise RuntimeError(f"no stable AR filter in {max_tries} draws")


def ar_recurrence(field, coeffs) -> np.ndarray:
    """Fill ``field[..., i, j]`` for i, j >= 1 from its causal neighbours.

    The first row and column of ``field`` are the given boundary values;
    neighbours outside the array count as zero.  Vectorized over leading axes,
    sequential over pixels, accumulating in offset order.
    """
    u = np.array(field, dtype=np.float64)
    h, w = u.shape[-2:]
    for i in range(1, h):
        for j in range(1, w):
            acc = np.zeros(u.shape[:-2])
            for c, (di, dj) in zip(coeffs, AR_OFFSETS):
                ii, jj = i + di, j + dj
                if ii >= 0 and jj >= 0:
                    acc = acc + c * u[..., ii, jj]
            u[..., i, j] = acc
    return u


def _ar_boundary(rng, shape):
    field = np.zeros(shape)
    field[..., 0, :] = rng.standard_normal(shape[:-2] + (shape[-1],))
    field[..., 1:, 0] = rng.standard_normal(shape[:-2] + (shape[-2] - 1,))
    return field


def ar_generate(data: LabeledDataset, cfg: AttackConfig, max_resample=10) -> PerturbationSet:
    """Class-wise autoregressive noise, rescaled to an exact l2 norm per sample."""
    if cfg.attack != "AR":
        raise ValueError(f"ar_generate needs attack='AR', got {cfg.attack!r}")
    c, h, w = data.image_shape
    if h < 4 or w < 4:
        raise ValueError("AR needs images of at least 4x4")
    eps = cfg.budget
    filters = np.stack([ar_filter(np.random.default_rng([cfg.seed, 31, k])) for k in range(data.num_classes)])
    delta = np.empty(data.images.shape, np.float32)
    resampled = 0
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.labels == k)
        if not len(idx):
            continue
        rngs = [np.random.default_rng([cfg.seed, 32, int(i)]) for i in idx]
        fields = np.stack([_ar_boundary(r, (c, h, w)) for r in rngs])
        u = ar_recurrence(fields, filters[k])
        for tries in range(max_resample + 1):
            norms = np.sqrt((u.reshape(len(idx), -1) ** 2).sum(axis=1))
            bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
            if not len(bad):
                break
            if tries == max_resample:
                raise RuntimeError("AR recurrence keeps producing zero or non-finite noise")
            resampled += len(bad)
            u[bad] = ar_recurrence(np.stack([_ar_boundary(rngs[b], (c, h, w)) for b in bad]), filters[k])
        delta[idx] = (u * (eps / norms)[:, None, None, None]).astype(np.float32)
    meta = {"resampled": resampled} if resampled else {}
    return PerturbationSet(delta, "l2", float(eps), "AR", cfg.seed, meta)


OPS_COLORS = np.array(list(itertools.product((0.0, 1.0), repeat=3)))


def ops_scores(images) -> np.ndarray:
    """Score of every (colour, i, j) for one class's images: mean minus std of the
    per-image channel-averaged distance |v - x| between colour ``v`` and the pixel.
    """
    x = np.asarray(images, np.float64)
    # |0 - x| = x and |1 - x| = 1 - x, per channel
    dist = np.stack([x, 1 - x])  # (2, n, 3, H, W)
    scores = np.empty((len(OPS_COLORS),) + x.shape[2:])
    for k, color in enumerate(OPS_COLORS.astype(int)):
        d = (dist[color[0], :, 0] + dist[color[1], :, 1] + dist[color[2], :, 2]) / 3
        scores[k] = d.mean(axis=0) - d.std(axis=0)
    return scores


def ops_search(images) -> tuple[int, int, np.ndarray]:
    """Best ``(i, j, colour)``; ties go to the lexicographically lowest (i, j, colour)."""
    scores = ops_scores(images)
    # flatten in (i, j, colour) order so argmax picks the lowest tuple on ties
    flat = scores.transpose(1, 2, 0).reshape(-1)
    i, j, k = np.unravel_index(int(np.argmax(flat)), scores.shape[1:] + scores.shape[:1])
    return int(i), int(j), OPS_COLORS[k].copy()


def ops_generate(data: LabeledDataset, cfg: AttackConfig) -> PerturbationSet:
    """One-pixel shortcut: each class gets its own pixel position and extreme colour."""
    if cfg.attack != "OPS":
        raise ValueError(f"ops_generate needs attack='OPS', got {cfg.attack!r}")
    delta = np.zeros(data.images.shape, np.float32)
    chosen = {}
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.labels == k)
        if not len(idx):
            continue
        i, j, color = ops_search(data.images[idx])
        chosen[k] = (i, j, color)
        delta[idx, :, i, j] = color.astype(np.float32)[None, :] - data.images[idx, :, i, j]
    meta = {f"class{k}": f"{i},{j},{''.join(str(int(v)) for v in col)}" for k, (i, j, col) in chosen.items()}
    return PerturbationSet(delta, "l0", 1, "OPS", cfg.seed, meta)


def generate(data: LabeledDataset, cfg: AttackConfig, surrogate: SurrogateCheckpoint | None = None) -> PerturbationSet:
    """Dispatch on ``cfg.attack``; HYPO/TAP pretrain a surrogate when none is given."""
    if cfg.attack in ("HYPO", "TAP") and surrogate is None:
        surrogate = pretrain_surrogate(data, cfg)
    fn = {
        "EM": em_generate, "REM": rem_generate, "LSP": lsp_generate,
        "AR": ar_generate, "OPS": ops_generate,
    }.get(cfg.attack)
    if fn is not None:
        return fn(data, cfg)
    if cfg.attack == "HYPO":
        return hypo_generate(data, surrogate, cfg)
    return tap_generate(data, surrogate, cfg)
