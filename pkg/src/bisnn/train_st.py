"""Straight-through training: binary forward pass, SGD on latent real weights."""

from __future__ import annotations

import numpy as np


def binarize(w_real):
    """Elementwise sign with sign(0) = +1. Accepts an array or a list of arrays."""
    if isinstance(w_real, (list, tuple)):
        return [binarize(w) for w in w_real]
    return np.where(np.asarray(w_real) >= 0, 1.0, -1.0)


def _mean_gradient(net, weights, inputs, targets):
    losses, grads, _ = net.loss_and_gradient(weights, inputs, targets)
    batch = inputs.shape[1]
    grads = [g / batch for g in grads]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient ({np.count_nonzero(~np.isfinite(g))} entries, "
                f"batch loss = {np.mean(losses)})"
            )
    return losses, grads


def st_update(w_real, grads, eta: float, clip: float | None = None):
    """``w_r <- w_r - eta * g``, optionally clipped to ``[-clip, clip]``."""
    out = [w - eta * g for w, g in zip(w_real, grads)]
    if clip is not None:
        out = [np.clip(w, -clip, clip) for w in out]
    return out


def st_step(w_real, inputs, targets, eta: float, net, clip: float | None = None):
    """One straight-through step on a mini-batch.

    ``inputs`` is time-major ``(T, B, n_in)``. The forward pass sees
    ``binarize(w_real)`` only; the batch-averaged local gradient evaluated
    there moves the latent weights. Returns ``(new_w_real, per_example_loss)``.
    """
    if eta < 0:
        raise ValueError("learning rate must be nonnegative")
    if inputs.shape[1] == 0:
        raise ValueError("empty batch")
    w = binarize(w_real)
    losses, grads = _mean_gradient(net, w, inputs, targets)
    return st_update(w_real, grads, eta, clip), losses


def fp_step(weights, inputs, targets, eta: float, net):
    """Full-precision baseline: the same local rule applied to real weights directly."""
    losses, grads = _mean_gradient(net, weights, inputs, targets)
    return st_update(weights, grads, eta), losses
