"""Small fixed CNN with hand-written reverse-mode gradients, SGD and lp projection.

Arrays are plain ``numpy`` float32 arrays; the public batch layout is NCHW.
Internally activations are kept channels-last so that every 3x3 convolution
is a single im2col matmul.

The architecture is fixed: three blocks of (3x3 conv, ReLU, 2x2 max-pool)
followed by one fully connected layer.  Max-pool is applied before the ReLU,
which is equivalent because ReLU is monotone and is cheaper on the pooled map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

DEFAULT_WIDTHS = (32, 64, 128)
# fixed input normalisation: pixels in [0, 1] are shifted to [-0.5, 0.5]
INPUT_CENTER = 0.5


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class CnnModel:
    params: dict[str, np.ndarray]
    num_classes: int
    in_shape: tuple[int, int, int]
    widths: tuple[int, ...] = DEFAULT_WIDTHS

    def copy(self) -> "CnnModel":
        return CnnModel(
            {k: v.copy() for k, v in self.params.items()},
            self.num_classes,
            self.in_shape,
            self.widths,
        )

    def astype(self, dtype) -> "CnnModel":
        return CnnModel(
            {k: v.astype(dtype) for k, v in self.params.items()},
            self.num_classes,
            self.in_shape,
            self.widths,
        )

    @property
    def param_names(self) -> list[str]:
        return list(self.params)


def param_shapes(num_classes, in_shape, widths=DEFAULT_WIDTHS) -> dict[str, tuple]:
    c, h, w = in_shape
    if h % 2 ** len(widths) or w % 2 ** len(widths):
        raise ShapeError(
            f"input height/width ({h}, {w}) must be divisible by {2 ** len(widths)}"
        )
    shapes = {}
    prev = c
    for i, width in enumerate(widths):
        shapes[f"conv{i}.w"] = (width, prev, 3, 3)
        shapes[f"conv{i}.b"] = (width,)
        prev = width
    feat = prev * (h >> len(widths)) * (w >> len(widths))
    shapes["fc.w"] = (num_classes, feat)
    shapes["fc.b"] = (num_classes,)
    return shapes


def init_model(num_classes=10, in_shape=(3, 32, 32), widths=DEFAULT_WIDTHS, seed=0) -> CnnModel:
    """He-normal weights, zero biases; deterministic in ``seed``."""
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(num_classes, in_shape, widths).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return CnnModel(params, num_classes, tuple(in_shape), tuple(widths))


def zero_model(num_classes=10, in_shape=(3, 32, 32), widths=DEFAULT_WIDTHS) -> CnnModel:
    params = {k: np.zeros(s, np.float32) for k, s in param_shapes(num_classes, in_shape, widths).items()}
    return CnnModel(params, num_classes, tuple(in_shape), tuple(widths))


# ---------------------------------------------------------------------------
# layer primitives (channels-last)


def _im2col(x):
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 9, c), x.dtype)
    for k in range(9):
        dh, dw = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, dh : dh + h, dw : dw + w, :]
    return cols.reshape(n * h * w, 9 * c)


@njit(cache=True)
def _col2im_kernel(dcols, out):
    n, h, w, c = out.shape
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for k in range(9):
                    ii = i + k // 3 - 1
                    jj = j + k % 3 - 1
                    if 0 <= ii < h and 0 <= jj < w:
                        for ch in range(c):
                            out[b, ii, jj, ch] += dcols[b, i, j, k, ch]


def _col2im(dcols, shape):
    n, h, w, c = shape
    out = np.zeros(shape, dcols.dtype)
    _col2im_kernel(np.ascontiguousarray(dcols).reshape(n, h, w, 9, c), out)
    return out


def _wmat(w):
    # (O, C, 3, 3) -> (9C, O) matching the (kh, kw, c) column order
    o, c = w.shape[:2]
    return w.transpose(2, 3, 1, 0).reshape(9 * c, o)


@njit(cache=True)
def _pool_forward_kernel(z, out, idx):
    # 2x2 max with strict ">" so ties resolve to the first window position
    n, h2, w2, c = out.shape
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for ch in range(c):
                    best = z[b, 2 * i, 2 * j, ch]
                    arg = 0
                    for q in range(1, 4):
                        v = z[b, 2 * i + q // 2, 2 * j + q % 2, ch]
                        if v > best:
                            best = v
                            arg = q
                    out[b, i, j, ch] = best
                    idx[b, i, j, ch] = arg


@njit(cache=True)
def _pool_backward_kernel(dout, idx, dz):
    n, h2, w2, c = dout.shape
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for ch in range(c):
                    q = idx[b, i, j, ch]
                    dz[b, 2 * i + q // 2, 2 * j + q % 2, ch] = dout[b, i, j, ch]


def _pool_forward(z):
    n, h, w, c = z.shape
    out = np.empty((n, h // 2, w // 2, c), z.dtype)
    idx = np.empty(out.shape, np.int8)
    _pool_forward_kernel(z, out, idx)
    return out, idx


def _pool_backward(dout, idx):
    n, h2, w2, c = idx.shape
    dz = np.zeros((n, 2 * h2, 2 * w2, c), dout.dtype)
    _pool_backward_kernel(np.ascontiguousarray(dout), idx, dz)
    return dz


ROW_BLOCK = 512


def _rows_matmul(a, b):
    """a @ b in fixed-height row blocks.

    OpenBLAS picks different kernels (gemv, small-M paths) depending on the
    row count, so a row's result can change in the last ulp with batch size.
    Feeding it blocks of a constant height, zero padded, keeps each output
    row a function of its own input row only.
    """
    n = a.shape[0]
    out = np.empty((n, b.shape[1]), dtype=np.result_type(a, b))
    full = n - n % ROW_BLOCK
    for i in range(0, full, ROW_BLOCK):
        np.matmul(a[i:i + ROW_BLOCK], b, out=out[i:i + ROW_BLOCK])
    if full < n:
        tail = np.zeros((ROW_BLOCK, a.shape[1]), dtype=a.dtype)
        tail[:n - full] = a[full:]
        out[full:] = (tail @ b)[:n - full]
    return out


def _check_batch(model, batch):
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ShapeError(f"batch must be 4-D NCHW, got rank {batch.ndim}")
    if batch.shape[0] < 1:
        raise ShapeError("batch dimension is empty, need N >= 1")
    for dim, (got, want) in enumerate(zip(batch.shape[1:], model.in_shape), start=1):
        if got != want:
            name = ("channel", "height", "width")[dim - 1]
            raise ShapeError(f"dimension {dim} ({name}) is {got}, model expects {want}")
    return batch


def _forward_tape(model, batch, keep):
    p = model.params
    dtype = p["fc.w"].dtype
    x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=dtype)
    x -= np.asarray(INPUT_CENTER, dtype)
    tape = []
    for i in range(len(model.widths)):
        w = p[f"conv{i}.w"]
        cols = _im2col(x)
        z = _rows_matmul(cols, _wmat(w)).reshape(x.shape[:3] + (w.shape[0],))
        z += p[f"conv{i}.b"]
        pooled, mask = _pool_forward(z)
        a = np.maximum(pooled, 0)
        if keep:
            tape.append((x.shape, cols, mask, pooled > 0))
        x = a
    feat = x.reshape(x.shape[0], -1)
    logits = _rows_matmul(feat, p["fc.w"].T) + p["fc.b"]
    return logits, feat, tape


def forward(model: CnnModel, batch) -> np.ndarray:
    """Logits of shape (N, num_classes) for an NCHW batch."""
    batch = _check_batch(model, batch)
    logits, _, _ = _forward_tape(model, batch, keep=False)
    return logits


def _as_targets(labels, n, num_classes, dtype):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != (n, num_classes):
            raise ShapeError(f"soft labels shape {labels.shape} != {(n, num_classes)}")
        return labels.astype(dtype)
    if labels.shape != (n,):
        raise ShapeError(f"labels length {labels.shape[0] if labels.ndim else 0} != batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    onehot = np.zeros((n, num_classes), dtype)
    onehot[np.arange(n), labels.astype(np.int64)] = 1
    return onehot


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_sample_loss(model: CnnModel, batch, labels) -> np.ndarray:
    """Cross-entropy of each sample; labels may be ints or soft rows."""
    batch = _check_batch(model, batch)
    logits = forward(model, batch)
    targets = _as_targets(labels, batch.shape[0], model.num_classes, logits.dtype)
    return -(targets * log_softmax(logits)).sum(axis=1)


def _backprop(model, batch, labels, want_params, want_input):
    batch = _check_batch(model, batch)
    n = batch.shape[0]
    p = model.params
    logits, feat, tape = _forward_tape(model, batch, keep=True)
    targets = _as_targets(labels, n, model.num_classes, logits.dtype)
    logp = log_softmax(logits)
    loss = -(targets * logp).sum() / n

    # d loss / d logits = (softmax * rowsum(targets) - targets) / n
    dlogits = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / n
    grads = {}
    if want_params:
        grads["fc.w"] = dlogits.T @ feat
        grads["fc.b"] = dlogits.sum(axis=0)
    dx = (dlogits @ p["fc.w"]).reshape(tape[-1][3].shape)
    for i in reversed(range(len(model.widths))):
        in_shape, cols, mask, active = tape[i]
        w = p[f"conv{i}.w"]
        dz = _pool_backward(dx.reshape(active.shape) * active, mask)
        dz2 = dz.reshape(-1, w.shape[0])
        if want_params:
            dwmat = cols.T @ dz2
            grads[f"conv{i}.w"] = dwmat.reshape(3, 3, w.shape[1], w.shape[0]).transpose(3, 2, 0, 1)
            grads[f"conv{i}.b"] = dz2.sum(axis=0)
        if i > 0 or want_input:
            dx = _col2im(dz2 @ _wmat(w).T, in_shape)
    grads = {k: np.ascontiguousarray(grads[k]) for k in p} if want_params else None
    input_grads = np.ascontiguousarray(dx.transpose(0, 3, 1, 2)) if want_input else None
    return float(loss), grads, input_grads, logits


def loss_and_grads(model: CnnModel, batch, labels, wrt_input: bool = False):
    """Mean softmax cross-entropy and its gradients.

    ``labels`` is an int vector or an (N, num_classes) array of soft targets.
    Returns ``(loss, param_grads, input_grads)``; ``input_grads`` is None unless
    ``wrt_input`` is set, in which case it has the NCHW shape of ``batch``.
    """
    return _backprop(model, batch, labels, True, wrt_input)[:3]


def input_gradient(model: CnnModel, batch, labels):
    """``(loss, d loss / d batch)`` without computing parameter gradients."""
    loss, _, gx, _ = _backprop(model, batch, labels, False, True)
    return loss, gx


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    momentum_buffers: dict[str, np.ndarray]
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @classmethod
    def for_model(cls, model: CnnModel, lr=0.1, momentum=0.9, weight_decay=5e-4) -> "SgdState":
        bufs = {k: np.zeros_like(v) for k, v in model.params.items()}
        return cls(bufs, lr, momentum, weight_decay)


def sgd_step(model: CnnModel, grads, state: SgdState):
    """In-place heavy-ball SGD with L2 weight decay; returns ``(model, state)``."""
    for name, param in model.params.items():
        g = grads[name]
        buf = state.momentum_buffers[name]
        if g.shape != param.shape or buf.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {param.shape}")
        buf *= state.momentum
        buf += g
        if state.weight_decay:
            buf += state.weight_decay * param
        param -= np.asarray(state.lr, param.dtype) * buf
    return model, state


# ---------------------------------------------------------------------------
# projection

NORMS = ("linf", "l2", "l0")


def project_lp(delta, norm: str, eps, batched: bool = False) -> np.ndarray:
    """Project ``delta`` onto the lp ball of radius ``eps``.

    With ``batched`` the projection is applied independently to each slice along
    axis 0.  For ``l0`` the ``eps`` largest-magnitude entries are kept, ties going
    to the lowest flat index.
    """
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    delta = np.asarray(delta)
    dtype = delta.dtype if np.issubdtype(delta.dtype, np.floating) else np.float32
    flat = delta.reshape(delta.shape[0], -1) if batched else delta.reshape(1, -1)
    flat = flat.astype(dtype, copy=True)
    if norm == "linf":
        e = np.asarray(eps, dtype)
        np.clip(flat, -e, e, out=flat)
    elif norm == "l2":
        norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
        over = norms > eps
        if over.any():
            flat[over] = (flat[over] * (eps / norms[over])[:, None]).astype(dtype)
            # rounding can leave the norm a hair above eps; shrinking by one ulp
            # until it is inside keeps the projection bitwise idempotent
            for _ in range(16):
                renorm = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
                still = renorm > eps
                if not still.any():
                    break
                flat[still] = np.nextafter(flat[still], np.zeros((), dtype))
    else:
        k = int(eps)
        if k != eps:
            raise ValueError("l0 eps must be an integer count")
        if k < flat.shape[1]:
            # stable sort on -|x| keeps the lowest index among equal magnitudes
            order = np.argsort(-np.abs(flat), axis=1, kind="stable")
            drop = order[:, k:]
            np.put_along_axis(flat, drop, 0, axis=1)
    return flat.reshape(delta.shape)


def lp_norms(delta, norm: str) -> np.ndarray:
    """Per-sample norm along axis 0 (l0 counts nonzero entries)."""
    flat = np.asarray(delta).reshape(len(delta), -1)
    if norm == "linf":
        return np.abs(flat).max(axis=1)
    if norm == "l2":
        return np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    if norm == "l0":
        return (flat != 0).sum(axis=1)
    raise ValueError(f"unknown norm {norm!r}")


def activation_pattern(model: CnnModel, batch) -> bytes:
    """Fingerprint of every ReLU on/off state and max-pool argmax for ``batch``.

    Two inputs with the same pattern lie in the same linear region of the
    network, which is what a finite-difference check needs to know.
    """
    batch = _check_batch(model, batch)
    _, _, tape = _forward_tape(model, batch, keep=True)
    return b"".join(np.packbits(active).tobytes() + idx.tobytes() for _, _, idx, active in tape)
