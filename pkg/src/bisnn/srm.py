"""Discrete-time Spike Response Model.

Membrane potential of neuron i at step t::

    u[i, t] = kappa * sum_j w[i, j] * p[j, t] - (beta * s_i)[t]
    s[i, t] = 1 if u[i, t] >= threshold else 0

with p[j, t] = sum_{d > 0} alpha[d] * s[j, t - d] and the filters
alpha[d] = exp(-d / tau_mem) - exp(-d / tau_syn), beta[d] = exp(-d / tau_ref).
Both are sums of first-order exponentials, so every convolution is carried
by a one-pole recursive trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class FilterParams:
    tau_mem: float = 20.0
    tau_syn: float = 5.0
    tau_ref: float = 2.0
    threshold: float = 0.5
    surrogate_steepness: float = 1.0

    def __post_init__(self):
        for name in ("tau_mem", "tau_syn", "tau_ref", "surrogate_steepness"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be a positive finite number, got {value}")
        if self.tau_mem == self.tau_syn:
            raise ValueError("tau_mem == tau_syn makes the synaptic filter identically zero")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    @property
    def decay_mem(self) -> float:
        return float(np.exp(-1.0 / self.tau_mem))

    @property
    def decay_syn(self) -> float:
        return float(np.exp(-1.0 / self.tau_syn))

    @property
    def decay_ref(self) -> float:
        return float(np.exp(-1.0 / self.tau_ref))

    def to_dict(self) -> dict:
        return {
            "tau_mem": self.tau_mem,
            "tau_syn": self.tau_syn,
            "tau_ref": self.tau_ref,
            "threshold": self.threshold,
            "surrogate_steepness": self.surrogate_steepness,
        }


def filter_alpha(t: int, params: FilterParams) -> float:
    """Synaptic alpha kernel at lag ``t``; zero at ``t == 0``."""
    if t <= 0:
        return 0.0
    return float(np.exp(-t / params.tau_mem) - np.exp(-t / params.tau_syn))


def filter_beta(t: int, params: FilterParams) -> float:
    """Refractory feedback kernel at lag ``t``; zero at ``t == 0``."""
    if t <= 0:
        return 0.0
    return float(np.exp(-t / params.tau_ref))


@dataclass
class LayerState:
    """Recursive state of one layer at a single time step.

    ``trace_mem - trace_syn`` is the presynaptic trace ``p``.
    """

    trace_mem: np.ndarray
    trace_syn: np.ndarray
    refractory: np.ndarray
    membrane: np.ndarray
    last_spikes: np.ndarray = field(default=None)

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "LayerState":
        return cls(
            trace_mem=np.zeros(n_in),
            trace_syn=np.zeros(n_in),
            refractory=np.zeros(n_out),
            membrane=np.zeros(n_out),
            last_spikes=np.zeros(n_out, dtype=np.uint8),
        )

    @property
    def presynaptic(self) -> np.ndarray:
        return self.trace_mem - self.trace_syn


def step_traces(state: LayerState, input_spikes, own_spikes, params: FilterParams) -> LayerState:
    """Advance traces by one step, consuming the spikes emitted at ``t - 1``."""
    input_spikes = np.asarray(input_spikes, dtype=float)
    own_spikes = np.asarray(own_spikes, dtype=float)
    if input_spikes.shape != state.trace_mem.shape:
        raise ValueError(
            f"input spikes shape {input_spikes.shape} != trace shape {state.trace_mem.shape}"
        )
    if own_spikes.shape != state.refractory.shape:
        raise ValueError(
            f"own spikes shape {own_spikes.shape} != refractory shape {state.refractory.shape}"
        )
    return LayerState(
        trace_mem=params.decay_mem * (state.trace_mem + input_spikes),
        trace_syn=params.decay_syn * (state.trace_syn + input_spikes),
        refractory=params.decay_ref * (state.refractory + own_spikes),
        membrane=state.membrane,
        last_spikes=state.last_spikes,
    )


def membrane_and_spike(state: LayerState, weights, scale: float, params: FilterParams):
    """Return ``(u, s)`` for the current step.

    ``scale`` multiplies the synaptic sum only; the refractory term is
    subtracted unscaled.
    """
    weights = np.asarray(weights, dtype=float)
    p = state.presynaptic
    if weights.ndim != 2 or weights.shape != (state.refractory.shape[0], p.shape[0]):
        raise ValueError(
            f"weights shape {weights.shape} incompatible with "
            f"({state.refractory.shape[0]}, {p.shape[0]})"
        )
    u = scale * (weights @ p) - state.refractory
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite membrane potential")
    s = (u >= params.threshold).astype(np.uint8)
    return u, s


def surrogate_derivative(u, params: FilterParams):
    """Sigmoid-derivative stand-in for the Heaviside derivative.

    Evaluated as sigma(z) * (1 - sigma(z)) with
    ``z = surrogate_steepness * (u - threshold)``; peaks at 0.25.
    """
    z = params.surrogate_steepness * (np.asarray(u, dtype=float) - params.threshold)
    # symmetric form, avoids 1 - sigma cancellation in the upper tail
    e = np.exp(-np.abs(z))
    out = e / (1.0 + e) ** 2
    return out if np.ndim(out) else float(out)


def _causal_trace(spikes: np.ndarray, decay: float) -> np.ndarray:
    # x[t] = decay * (x[t-1] + s[t-1]), x[0] = 0, along axis 0; a step loop
    # over whole (B, n) slices beats lfilter on the strided time axis
    out = np.zeros(spikes.shape, dtype=float)
    for t in range(1, spikes.shape[0]):
        out[t] = decay * (out[t - 1] + spikes[t - 1])
    return out


def presynaptic_traces(spikes, params: FilterParams) -> np.ndarray:
    """Filter a time-major spike record ``(T, ...)`` into alpha traces ``p``.

    Row ``t`` holds sum_{d > 0} alpha[d] * spikes[t - d] (zero history before
    row 0).
    """
    spikes = np.asarray(spikes, dtype=float)
    return _causal_trace(spikes, params.decay_mem) - _causal_trace(spikes, params.decay_syn)


def refractory_trace(spikes, params: FilterParams) -> np.ndarray:
    """Time-major beta-filtered record of a neuron's own spikes."""
    return _causal_trace(np.asarray(spikes, dtype=float), params.decay_ref)
