"""Numerical checks of the local learning rule and the relaxed-sample estimator.

Frozen-trajectory check: after a forward pass, hold every presynaptic trace
and refractory term at its recorded value and let only the synaptic sum
depend on the weights. Replacing the step by ``sigmoid(k * (u - threshold))``
makes the summed local losses smooth in the weights, and the implemented
local gradient (with error signals evaluated on those smoothed outputs) must
equal its central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .network import CLASSIFICATION, REGRESSION, Network
from .oracles import exact_mean_gradient_oracle
from .srm import FilterParams, refractory_trace
from .train_bayes import gs_gradient_scale, gs_sample, step_rng


def _smoothed_outputs(net, weights, records):
    k, theta = net.params.surrogate_steepness, net.params.threshold
    outs = []
    for w, rec, spec in zip(weights, records, net.specs):
        u = spec.scale * (rec.presynaptic @ np.asarray(w).T) - refractory_trace(rec.spikes, net.params)
        outs.append(expit(k * (u - theta)))
    return outs


def smoothed_loss(net, weights, records, targets) -> float:
    """Sum over layers, steps and batch of local losses on smoothed outputs."""
    losses, _ = net.local_losses(records, targets, outputs=_smoothed_outputs(net, weights, records))
    return float(sum(l.sum() for l in losses))


def smoothed_gradient(net, weights, records, targets):
    """Local gradient with error signals taken on the smoothed outputs."""
    _, errors = net.local_losses(records, targets, outputs=_smoothed_outputs(net, weights, records))
    return net.local_gradient(records, errors)


def finite_difference(net, weights, records, targets, h: float = 1e-5):
    grads = []
    for layer, w in enumerate(weights):
        g = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            plus = [x.copy() for x in weights]
            minus = [x.copy() for x in weights]
            plus[layer][idx] += h
            minus[layer][idx] -= h
            g[idx] = (smoothed_loss(net, plus, records, targets)
                      - smoothed_loss(net, minus, records, targets)) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max |a - n| / (|n| + floor * max|n|) over all entries."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = np.abs(n) + floor * max(np.max(np.abs(n)), 1e-300)
    return float(np.max(np.abs(a - n) / scale))


@dataclass
class GradcheckCase:
    net: Network
    weights: list
    inputs: np.ndarray
    targets: np.ndarray


def random_case(rng, max_neurons: int = 16, max_T: int = 20, kind: str | None = None,
                binary: bool | None = None) -> GradcheckCase:
    """Random 2-layer network, weights and input batch within the check limits."""
    kind = kind or (CLASSIFICATION if rng.random() < 0.5 else REGRESSION)
    n_in = int(rng.integers(2, max_neurons + 1))
    hidden = [int(rng.integers(2, max_neurons + 1)) for _ in range(2)]
    T = int(rng.integers(5, max_T + 1))
    B = int(rng.integers(1, 4))
    k = int(rng.integers(2, 4))
    params = FilterParams(threshold=float(rng.uniform(0.1, 0.8)))
    net = Network.build(n_in, hidden, k, kind, params=params, readout_seed=int(rng.integers(2**31)))
    if binary is None:
        binary = rng.random() < 0.5
    weights = [rng.choice([-1.0, 1.0], size=s) if binary else rng.uniform(-1, 1, size=s)
               for s in net.weight_shapes]
    inputs = (rng.random((T, B, n_in)) < 0.3).astype(np.uint8)
    targets = rng.integers(0, k, size=B) if kind == CLASSIFICATION else rng.normal(size=(B, k))
    return GradcheckCase(net, weights, inputs, targets)


def check_case(case: GradcheckCase, h: float = 1e-5) -> float:
    _, records = case.net.forward_sequence(case.weights, case.inputs)
    analytic = smoothed_gradient(case.net, case.weights, records, case.targets)
    numeric = finite_difference(case.net, case.weights, records, case.targets, h)
    return relative_error(analytic, numeric)


def frozen_trajectory_suite(n_cases: int = 20, seed: int = 0) -> list[float]:
    rng = np.random.default_rng(seed)
    return [check_case(random_case(rng)) for _ in range(n_cases)]


def multilinear_loss(coeffs: dict):
    """Loss sum_S c_S prod_{i in S} w_i with its gradient; keys are index tuples."""

    def loss(w):
        w = np.asarray(w, dtype=float)
        return sum(c * np.prod(w[list(S)], axis=-1) for S, c in coeffs.items())

    def grad(w):
        w = np.asarray(w, dtype=float)
        g = np.zeros_like(w)
        for S, c in coeffs.items():
            for i in S:
                rest = [j for j in S if j != i]
                g[..., i] += c * np.prod(w[..., rest], axis=-1)
        return g

    return loss, grad


def estimator_samples(grad, logits, tau_gs: float, n_samples: int, seed: int) -> np.ndarray:
    """Per-sample relaxed estimates of the mean gradient, shape (n_samples, n)."""
    logits = np.asarray(logits, dtype=float)
    rng = step_rng(seed, 0)
    w = gs_sample(np.broadcast_to(logits, (n_samples, logits.size)), tau_gs, rng)
    return gs_gradient_scale(logits, w, tau_gs) * grad(w)


def estimator_check(coeffs: dict, logits, tau_gs: float = 0.05, n_samples: int = 100_000, seed: int = 0):
    """Monte Carlo mean, its standard error, and the enumeration reference."""
    loss, grad = multilinear_loss(coeffs)
    est = estimator_samples(grad, logits, tau_gs, n_samples, seed)
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / np.sqrt(n_samples)
    exact = exact_mean_gradient_oracle(loss, logits)
    return mean, se, exact


def random_multilinear(rng, n: int) -> dict:
    coeffs = {(i,): float(rng.normal()) for i in range(n)}
    for i in range(n):
        for j in range(i + 1, n):
            coeffs[(i, j)] = float(rng.normal())
    if n >= 3:
        coeffs[(0, 1, 2)] = float(rng.normal())
    return coeffs
