"""Exhaustive-enumeration references over small binary weight vectors.

These are slow on purpose and only exist to check the fast paths.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import expit, logsumexp

MAX_WEIGHTS = 16


def all_configurations(n: int) -> np.ndarray:
    """Every vector in {+1, -1}^n, shape (2^n, n)."""
    if n > MAX_WEIGHTS:
        raise ValueError(f"enumeration limited to {MAX_WEIGHTS} weights, got {n}")
    return np.array(list(itertools.product((1.0, -1.0), repeat=n)))


def exact_mean_gradient_oracle(loss, logits) -> np.ndarray:
    """Gradient of E_q[loss(w)] with respect to the posterior means.

    Multilinearity of the mean-field expectation gives, per coordinate,
    0.5 * sum over the other weights of q(others) * (L(+1, others) - L(-1, others)).
    """
    logits = np.asarray(logits, dtype=float).ravel()
    n = logits.size
    configs = all_configurations(n)
    p = expit(2.0 * logits)
    values = np.array([loss(w) for w in configs])
    grad = np.zeros(n)
    for k in range(n):
        others = np.delete(np.arange(n), k)
        pk = p[others]
        cfg = configs[:, others]
        q_others = np.prod(np.where(cfg > 0, pk, 1.0 - pk), axis=1)
        sign = configs[:, k]
        # each "others" configuration appears once with w_k = +1 and once with -1
        grad[k] = 0.5 * np.sum(q_others * sign * values)
    return grad


def gibbs_posterior_oracle(loss, prior_logits, rho: float):
    """Normalized prior * exp(-loss / rho) over {+1, -1}^n.

    Returns ``(configurations, probabilities)``.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    prior_logits = np.asarray(prior_logits, dtype=float).ravel()
    configs = all_configurations(prior_logits.size)
    # log Bern(w | sigmoid(2 x0)) = sum log sigmoid(2 x0 w)
    log_prior = np.sum(np.log(expit(2.0 * prior_logits * configs)), axis=1)
    log_unnorm = log_prior - np.array([loss(w) for w in configs]) / rho
    return configs, np.exp(log_unnorm - logsumexp(log_unnorm))


def expected_loss(loss, logits) -> float:
    """E_q[loss(w)] by enumeration."""
    logits = np.asarray(logits, dtype=float).ravel()
    configs = all_configurations(logits.size)
    p = expit(2.0 * logits)
    q = np.prod(np.where(configs > 0, p, 1.0 - p), axis=1)
    return float(np.sum(q * np.array([loss(w) for w in configs])))


def convolution_trace(spikes, kernel) -> np.ndarray:
    """Direct sum_{d > 0} kernel(d) * spikes[t - d] along axis 0."""
    spikes = np.asarray(spikes, dtype=float)
    T = spikes.shape[0]
    out = np.zeros_like(spikes)
    for t in range(T):
        for d in range(1, t + 1):
            out[t] += kernel(d) * spikes[t - d]
    return out
