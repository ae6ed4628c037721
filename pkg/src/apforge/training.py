"""Mini-batch SGD loop and accuracy evaluation shared by attacks and the harness."""

from __future__ import annotations

import numpy as np

from .numerics import CnnModel, SgdState, _backprop, forward, per_sample_loss, sgd_step

EVAL_BATCH = 500


def predict(model: CnnModel, images, batch_size=EVAL_BATCH) -> np.ndarray:
    """Argmax class per image; ``np.argmax`` already breaks ties toward the lower index."""
    if len(images) == 0:
        raise ValueError("cannot predict on an empty set")
    out = [forward(model, images[i : i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def accuracy(model: CnnModel, images, labels) -> float:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(predict(model, images) == np.asarray(labels)))


def mean_loss(model: CnnModel, images, labels, batch_size=EVAL_BATCH) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        total += float(per_sample_loss(model, images[i : i + batch_size], labels[i : i + batch_size]).sum())
    return total / len(images)


def run_epoch(model: CnnModel, state: SgdState, images, labels, batch_size, rng, batch_fn=None):
    """One shuffled pass of SGD.

    ``batch_fn(model, x, y, rng) -> (x, targets)`` may rewrite each batch
    (augmentation, adversarial examples); ``targets`` may be soft rows.
    Returns ``(mean_loss, running_accuracy)`` where accuracy is measured
    against the hard labels on the batches actually trained on.
    """
    n = len(labels)
    order = rng.permutation(n)
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        xb, yb = images[idx], labels[idx]
        targets = yb
        if batch_fn is not None:
            xb, targets = batch_fn(model, xb, yb, rng)
        loss, grads, _, logits = _backprop(model, xb, targets, True, False)
        sgd_step(model, grads, state)
        loss_sum += loss * len(idx)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n
