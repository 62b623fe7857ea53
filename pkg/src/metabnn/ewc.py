"""Elastic weight consolidation adapted to binarized networks.

Importance is the empirical Fisher diagonal: the mean squared per-example
cross-entropy gradient w.r.t. the hidden weights, with gradients flowing
through the binarized weights exactly as in training and the normalization
layers frozen to their running statistics. The quadratic penalty anchors
the hidden weights themselves; normalization parameters are exempt, so the
comparison against hidden-weight consolidation isolates the same parameter
set.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .nn import _backward_signals, forward


@dataclass(frozen=True)
class TaskAnchor:
    """Immutable post-task snapshot: hidden weights and their importance."""
    wh: tuple      # per-layer weight copies
    fisher: tuple  # per-layer non-negative importance, same shapes


def fisher_diagonal(model, images, labels, n_samples, seed, batch_size=256):
    """Per-layer empirical Fisher diagonals over `n_samples` examples.

    Samples without replacement (all examples, each once, if n_samples
    exceeds the view). Because eval-mode normalization is a fixed affine
    map, rows of the backward signal are per-example gradients, so the
    mean squared weight gradient for a linear layer reduces to
    (dz**2).T @ (x**2) averaged over examples — no per-example loop.
    """
    n_total = len(images)
    if n_total == 0:
        raise ValueError("empty dataset view")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    take = min(n_samples, n_total)
    idx = rng.permutation(n_total)[:take]

    fisher = [np.zeros_like(l.wh, dtype=np.float64) for l in model.layers]
    for start in range(0, take, batch_size):
        rows = idx[start:start + batch_size]
        _, cache = forward(model, images[rows], mode="eval")
        _, signals = _backward_signals(model, cache, labels[rows],
                                       reduce_mean=False)
        for k in range(model.n_layers):
            dz = signals[k][0]
            x = cache.layers[k].x
            fisher[k] += (dz.astype(np.float64) ** 2).T @ (x.astype(np.float64) ** 2)
    return [(f / take).astype(model.dtype) for f in fisher]


def ewc_penalty_grad(whs, anchors, lam):
    """Gradient of the quadratic penalty: lam * sum_tasks F * (W_h - a),
    one array per layer."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    grads = [np.zeros_like(w) for w in whs]
    for anchor in anchors:
        if len(anchor.wh) != len(whs):
            raise ValueError("anchor layer count does not match model")
        for k, w in enumerate(whs):
            if anchor.wh[k].shape != w.shape:
                raise ValueError(
                    f"anchor shape {anchor.wh[k].shape} does not match "
                    f"weights {w.shape}"
                )
            backend.ewc_accum(grads[k], w, anchor.wh[k], anchor.fisher[k], lam)
    return grads


def ewc_penalty_value(whs, anchors, lam):
    """(lam/2) * sum_tasks sum_i F_i (W_i - a_i)^2; the scalar whose exact
    gradient ewc_penalty_grad returns."""
    total = 0.0
    for anchor in anchors:
        for k, w in enumerate(whs):
            diff = np.asarray(w, dtype=np.float64) - anchor.wh[k]
            total += float((anchor.fisher[k] * diff * diff).sum())
    return 0.5 * lam * total


def consolidate_task(model, images, labels, n_samples, seed, anchors):
    """Append a TaskAnchor for the just-finished task; returns the new list."""
    fisher = fisher_diagonal(model, images, labels, n_samples, seed)
    anchor = TaskAnchor(
        wh=tuple(l.wh.copy() for l in model.layers),
        fisher=tuple(fisher),
    )
    return list(anchors) + [anchor]


def make_grad_hook(anchors, lam):
    """Train-step hook adding the penalty gradient to the task gradient
    before the optimizer sees it."""
    def hook(model, grads):
        penalty = ewc_penalty_grad(model.hidden_weights(), anchors, lam)
        for k in range(len(penalty)):
            grads.dwh[k] += penalty[k]
    return hook
