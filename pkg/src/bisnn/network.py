"""Feedforward stack of SRM layers trained with per-layer local readouts.

Every layer owns a fixed random readout ``R`` and a local loss on
``y_t = R @ s_t``; hidden layers share the global target. Gradients stay
inside a layer: the presynaptic traces and the refractory history are
treated as constants, so

    grad[i, j] = kappa * sum_t e[i, t] * sigma'(u[i, t] - threshold) * p[j, t]

with ``e[:, t] = R.T @ dl_t/dy_t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from .srm import FilterParams, presynaptic_traces, surrogate_derivative

CHECKPOINT_FORMAT = "bisnn-checkpoint"
CHECKPOINT_VERSION = 1

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class LayerSpec:
    n_in: int
    n_out: int
    readout_dim: int
    scale: float | None = None

    def __post_init__(self):
        if min(self.n_in, self.n_out, self.readout_dim) <= 0:
            raise ValueError(f"layer dimensions must be positive: {self}")
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / np.sqrt(self.n_in))
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass
class ReadoutHead:
    matrix: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown readout kind {self.kind!r}")
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.matrix.setflags(write=False)


@dataclass
class PerStepLoss:
    value: float
    error_signals: np.ndarray


@dataclass
class LayerRecord:
    """Time-major record of one layer over a batch: ``(T, B, n)`` arrays."""

    presynaptic: np.ndarray
    membrane: np.ndarray
    spikes: np.ndarray


def _readout_loss_grad(y, target, kind):
    """Per-step loss and dl/dy for readout outputs ``y`` of shape (..., k)."""
    if kind == REGRESSION:
        diff = y - target
        return 0.5 * np.sum(diff**2, axis=-1), diff
    labels = np.asarray(target)
    k = y.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes")
    logp = log_softmax(y, axis=-1)
    onehot = np.eye(k)[labels]
    onehot = np.broadcast_to(onehot, y.shape)
    return -np.sum(onehot * logp, axis=-1), np.exp(logp) - onehot


def local_loss_and_errors(layer_spikes, head: ReadoutHead, target, t: int | None = None) -> PerStepLoss:
    """Local loss at a single step and the error signal of every neuron.

    ``t`` is accepted for bookkeeping only; the target is constant in time.
    """
    s = np.asarray(layer_spikes, dtype=float)
    if s.shape != (head.matrix.shape[1],):
        raise ValueError(f"spike vector shape {s.shape} does not match readout {head.matrix.shape}")
    y = head.matrix @ s
    target = np.asarray(target, dtype=float) if head.kind == REGRESSION else int(target)
    value, dy = _readout_loss_grad(y, target, head.kind)
    return PerStepLoss(value=float(value), error_signals=dy @ head.matrix)


def broadcast_target(targets, kind: str, readout_dim: int):
    """Shape targets for a ``(T, B, k)`` readout: labels ``(B,)`` or reals ``(B, k)``."""
    if kind == CLASSIFICATION:
        return np.asarray(targets, dtype=np.int64)
    r = np.asarray(targets, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[-1] != readout_dim:
        raise ValueError(f"regression targets have width {r.shape[-1]}, readout has {readout_dim}")
    return r


class Network:
    """Layer specs, frozen readouts and filter parameters.

    Weights are not stored here: training rules pass whichever weight values
    (latent, binary, relaxed) they want the forward pass to see.
    """

    def __init__(self, specs, kind: str, params: FilterParams | None = None,
                 readout_seed: int = 0, readouts=None):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        for a, b in zip(self.specs, self.specs[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.kind = kind
        self.params = params or FilterParams()
        self.readout_seed = readout_seed
        if readouts is None:
            rng = np.random.default_rng(readout_seed)
            readouts = []
            for spec in self.specs:
                bound = 1.0 / np.sqrt(spec.n_out)
                readouts.append(rng.uniform(-bound, bound, size=(spec.readout_dim, spec.n_out)))
        self.heads = [ReadoutHead(np.asarray(m, dtype=float), kind) for m in readouts]
        for head, spec in zip(self.heads, self.specs):
            if head.matrix.shape != (spec.readout_dim, spec.n_out):
                raise ValueError(f"readout shape {head.matrix.shape} does not match {spec}")

    @classmethod
    def build(cls, n_in: int, hidden, n_readout: int, kind: str, **kwargs) -> "Network":
        sizes = [n_in, *hidden]
        specs = [LayerSpec(a, b, n_readout) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(specs, kind, **kwargs)

    @property
    def weight_shapes(self):
        return [(s.n_out, s.n_in) for s in self.specs]

    def init_weights(self, rng, low=-0.1, high=0.1):
        return [rng.uniform(low, high, size=shape) for shape in self.weight_shapes]

    def _check_weights(self, weights):
        if len(weights) != len(self.specs):
            raise ValueError(f"expected {len(self.specs)} weight matrices, got {len(weights)}")
        for w, shape in zip(weights, self.weight_shapes):
            if np.shape(w) != shape:
                raise ValueError(f"weight shape {np.shape(w)} != {shape}")

    def forward_sequence(self, weights, inputs):
        """Simulate the stack on a time-major batch ``inputs`` of shape (T, B, n_in).

        Returns the list of per-layer spike records and the full trajectory
        (one :class:`LayerRecord` per layer).
        """
        self._check_weights(weights)
        x = np.asarray(inputs)
        if x.ndim != 3 or x.shape[2] != self.specs[0].n_in:
            raise ValueError(f"inputs must be (T, B, {self.specs[0].n_in}), got {x.shape}")
        if np.any((x != 0) & (x != 1)):
            raise ValueError("inputs must be binary")
        p = self.params
        threshold, decay_ref = p.threshold, p.decay_ref
        records = []
        for w, spec in zip(weights, self.specs):
            pre = presynaptic_traces(x, p)
            drive = spec.scale * (pre @ np.asarray(w, dtype=float).T)
            if not np.all(np.isfinite(drive)):
                raise FloatingPointError("non-finite synaptic drive")
            T, B, n = drive.shape
            u = np.empty_like(drive)
            s = np.empty((T, B, n), dtype=np.uint8)
            refr = np.zeros((B, n))
            for t in range(T):
                u[t] = drive[t] - refr
                s[t] = u[t] >= threshold
                refr = decay_ref * (refr + s[t])
            records.append(LayerRecord(pre, u, s))
            x = s
        return [r.spikes for r in records], records

    def readout(self, layer: int, spikes) -> np.ndarray:
        return np.asarray(spikes, dtype=float) @ self.heads[layer].matrix.T

    def local_losses(self, records, targets, outputs=None):
        """Per-layer local losses and error signals for a batch.

        ``outputs`` overrides the spike records fed to the readouts (the
        smoothed-output oracle uses this). Returns ``(losses, errors)`` where
        ``losses[l]`` has shape (T, B) and ``errors[l]`` (T, B, n_out).
        """
        losses, errors = [], []
        for layer, (rec, head, spec) in enumerate(zip(records, self.heads, self.specs)):
            s = rec.spikes if outputs is None else outputs[layer]
            y = self.readout(layer, s)
            target = broadcast_target(targets, self.kind, spec.readout_dim)
            value, dy = _readout_loss_grad(y, target, self.kind)
            losses.append(value)
            errors.append(dy @ head.matrix)
        return losses, errors

    def local_gradient(self, records, errors):
        """Local weight gradients, summed over the batch and over time."""
        if len(records) != len(errors):
            raise ValueError("trajectory and error signals come from different networks")
        grads = []
        for rec, e, spec in zip(records, errors, self.specs):
            if e.shape != rec.membrane.shape:
                raise ValueError(f"error shape {e.shape} != membrane shape {rec.membrane.shape}")
            post = e * surrogate_derivative(rec.membrane, self.params)
            # sum over (t, b) as one matrix product
            g = spec.scale * (post.reshape(-1, spec.n_out).T @ rec.presynaptic.reshape(-1, spec.n_in))
            grads.append(g)
        return grads

    def loss_and_gradient(self, weights, inputs, targets):
        """Forward pass, local losses and gradients for one batch.

        Returns ``(per_example_loss, grads, records)``; ``per_example_loss``
        is the output layer's loss summed over time, shape (B,).
        """
        _, records = self.forward_sequence(weights, inputs)
        losses, errors = self.local_losses(records, targets)
        grads = self.local_gradient(records, errors)
        return losses[-1].sum(axis=0), grads, records

    def predict_outputs(self, weights, inputs):
        """Output-layer readout over time, shape (T, B, k)."""
        spikes, _ = self.forward_sequence(weights, inputs)
        return self.readout(len(self.specs) - 1, spikes[-1])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "layers": [
                {"n_in": s.n_in, "n_out": s.n_out, "readout_dim": s.readout_dim, "scale": s.scale}
                for s in self.specs
            ],
            "filter": self.params.to_dict(),
            "readout_seed": self.readout_seed,
            "readouts": [h.matrix.tolist() for h in self.heads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        return cls(
            [LayerSpec(**layer) for layer in d["layers"]],
            d["kind"],
            FilterParams(**d["filter"]),
            readout_seed=d["readout_seed"],
            readouts=d["readouts"],
        )


@dataclass
class Checkpoint:
    """Trained state: network description plus latent weights or logits."""

    network: Network
    weights: list
    rule: str
    hyper: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "rule": self.rule,
            "network": self.network.to_dict(),
            "weights": [np.asarray(w).tolist() for w in self.weights],
            "hyper": self.hyper,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a bisnn checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        net = Network.from_dict(d["network"])
        weights = [np.asarray(w, dtype=float) for w in d["weights"]]
        net._check_weights(weights)
        return cls(net, weights, d["rule"], d.get("hyper", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))
