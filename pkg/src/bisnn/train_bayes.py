"""Mean-field Bernoulli training of binary weights by natural gradient.

The posterior over each weight is Bernoulli on {+1, -1} with
P(w = +1) = sigmoid(2 * logit); the mean is tanh(logit). Logits move by

    logit <- (1 - eta * rho) * logit - eta * (grad_mu - rho * prior_logit)

where ``grad_mu`` is estimated from one Gumbel-relaxed weight sample per
mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

# |logit| cap inside cosh^2 only; larger logits are saturated anyway
_LOGIT_CAP = 15.0
_EPS_CLAMP = 1e-7


@dataclass
class BayesHyperparams:
    rho: float = 1e-4
    tau_gs: float = 1.0
    eta: float = 0.01
    prior_logits: list | None = None
    ensemble_size: int = 10
    n_samples: int = 1

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if not self.tau_gs > 0:
            raise ValueError(f"tau_gs must be positive, got {self.tau_gs}")
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        if self.ensemble_size < 1 or self.n_samples < 1:
            raise ValueError("ensemble_size and n_samples must be >= 1")

    def priors_for(self, logits):
        if self.prior_logits is None:
            return [np.zeros_like(x) for x in logits]
        return [np.asarray(p, dtype=float) for p in self.prior_logits]

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "tau_gs": self.tau_gs,
            "eta": self.eta,
            "ensemble_size": self.ensemble_size,
            "n_samples": self.n_samples,
            "prior_logits": None if self.prior_logits is None
            else [np.asarray(p).tolist() for p in self.prior_logits],
        }


def mean_params(logits):
    return np.tanh(logits)


def probabilities(logits):
    """P(w = +1) = sigmoid(2 * logit)."""
    return expit(2.0 * np.asarray(logits, dtype=float))


def logits_from_probabilities(p):
    p = np.asarray(p, dtype=float)
    return 0.5 * (np.log(p) - np.log1p(-p))


def logits_from_means(mu):
    return np.arctanh(mu)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based stream addressed by ``(seed, step)``."""
    return np.random.Generator(np.random.Philox(key=(int(step) << 64) | (int(seed) & (2**64 - 1))))


def logistic_noise(shape, rng) -> np.ndarray:
    eps = np.clip(rng.random(shape), _EPS_CLAMP, 1.0 - _EPS_CLAMP)
    return 0.5 * (np.log(eps) - np.log1p(-eps))


def gs_sample(logits, tau_gs: float, rng):
    """Relaxed sample ``tanh((logit + delta) / tau)``.

    ``sign`` of the result is +1 with probability sigmoid(2 * logit) exactly,
    whatever ``tau_gs``. Accepts one array or a list of arrays.
    """
    if isinstance(logits, (list, tuple)):
        return [gs_sample(x, tau_gs, rng) for x in logits]
    logits = np.asarray(logits, dtype=float)
    delta = logistic_noise(logits.shape, rng)
    return np.tanh((logits + delta) / tau_gs)


def gs_gradient_scale(logits, w, tau_gs: float):
    """Chain-rule factor d w / d mu = (1 - w^2) / (tau * (1 - tanh^2(logit)))."""
    x = np.minimum(np.abs(np.asarray(logits, dtype=float)), _LOGIT_CAP)
    return (1.0 - np.asarray(w) ** 2) * np.cosh(x) ** 2 / tau_gs


def natural_update(logits, grad_mu, hyper: BayesHyperparams, prior_logits=None):
    """Apply the natural-gradient logit update with a given mean-gradient estimate."""
    priors = prior_logits if prior_logits is not None else hyper.priors_for(logits)
    eta, rho = hyper.eta, hyper.rho
    return [(1.0 - eta * rho) * x - eta * (g - rho * x0) for x, g, x0 in zip(logits, grad_mu, priors)]


def bayes_step(logits, inputs, targets, hyper: BayesHyperparams, net, rng):
    """One natural-gradient step on a mini-batch.

    Draws ``hyper.n_samples`` relaxed weight samples (default one), runs the
    network at each, and averages the rescaled batch-mean loss gradients.
    Returns ``(new_logits, per_example_loss)``.
    """
    if inputs.shape[1] == 0:
        raise ValueError("empty batch")
    batch = inputs.shape[1]
    grad_mu = [np.zeros_like(x) for x in logits]
    losses = 0.0
    for _ in range(hyper.n_samples):
        w = gs_sample(logits, hyper.tau_gs, rng)
        loss, grads, _ = net.loss_and_gradient(w, inputs, targets)
        losses = losses + loss / hyper.n_samples
        for acc, x, wi, g in zip(grad_mu, logits, w, grads):
            acc += gs_gradient_scale(x, wi, hyper.tau_gs) * (g / batch) / hyper.n_samples
    new = natural_update(logits, grad_mu, hyper)
    for x in new:
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(
                f"non-finite logit update ({np.count_nonzero(~np.isfinite(x))} entries, "
                f"batch loss = {np.mean(losses)})"
            )
    return new, losses


def bernoulli_kl(logits, prior_logits) -> float:
    """KL(q || p) between mean-field Bernoulli posteriors given by logits."""
    total = 0.0
    for x, x0 in zip(logits, prior_logits):
        a, b = 2.0 * np.asarray(x, dtype=float), 2.0 * np.asarray(x0, dtype=float)
        p = expit(a)
        # log p - log pi and log(1-p) - log(1-pi) in log-sigmoid form
        kl = p * (log_expit(a) - log_expit(b)) + (1 - p) * (log_expit(-a) - log_expit(-b))
        total += float(np.sum(kl))
    return total


def free_energy(logits, loss_estimate: float, prior_logits, rho: float) -> float:
    return float(loss_estimate) + rho * bernoulli_kl(logits, prior_logits)


def map_weights(logits):
    """Most probable binary weights: sign(2 * sigmoid(2 * logit) - 1) with sign(0) = +1."""
    if isinstance(logits, (list, tuple)):
        return [map_weights(x) for x in logits]
    return np.where(np.asarray(logits) >= 0, 1.0, -1.0)


def sample_binary(logits, rng):
    """Hard binary draw from the posterior."""
    if isinstance(logits, (list, tuple)):
        return [sample_binary(x, rng) for x in logits]
    p = probabilities(logits)
    return np.where(rng.random(p.shape) < p, 1.0, -1.0)
