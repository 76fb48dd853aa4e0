"""MAP and ensemble predictors, calibration metrics, and probability grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .data import PopulationCodeSpec, population_encode
from .network import CLASSIFICATION
from .train_bayes import map_weights, sample_binary, step_rng

MAP = "map"
ENSEMBLE = "ensemble"
# weights used exactly as given (full-precision baselines)
DIRECT = "direct"


@dataclass
class PredictionRecord:
    """Predictions for N examples.

    Classification fills ``probs`` (N, C); regression fills ``mean`` and
    ``std`` (N, k), with ``std`` zero for single-network predictors.
    """

    targets: np.ndarray
    predictor: str
    probs: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def _as_time_major(inputs):
    x = np.asarray(inputs)
    if x.ndim == 2:
        x = x[:, None, :]
    return x


def network_outputs(net, weights, inputs, last_step: bool = False, chunk: int = 256):
    """Time-aggregated output of the last layer for ``inputs`` (T, B, n_in).

    Classification returns class probabilities (softmax per step, averaged
    over steps unless ``last_step``); regression returns the time-averaged
    readout.
    """
    x = _as_time_major(inputs)
    out = []
    for start in range(0, x.shape[1], chunk):
        y = net.predict_outputs(weights, x[:, start : start + chunk])
        if net.kind == CLASSIFICATION:
            p = softmax(y, axis=-1)
            out.append(p[-1] if last_step else p.mean(axis=0))
        else:
            out.append(y[-1] if last_step else y.mean(axis=0))
    return np.concatenate(out, axis=0)


def predict_weights(net, weights, inputs, targets=None, predictor: str = MAP, last_step: bool = False):
    out = network_outputs(net, weights, inputs, last_step)
    if net.kind == CLASSIFICATION:
        return PredictionRecord(np.asarray(targets) if targets is not None else None, predictor, probs=out)
    return PredictionRecord(targets, predictor, mean=out, std=np.zeros_like(out))


def predict_map(net, logits, inputs, targets=None, last_step: bool = False) -> PredictionRecord:
    """Single network at ``sign(logits)``; works for latent ST weights too."""
    return predict_weights(net, map_weights(list(logits)), inputs, targets, MAP, last_step)


def predict_ensemble(net, logits, inputs, K: int, seed: int, targets=None,
                     last_step: bool = False) -> PredictionRecord:
    """Average over ``K`` hard binary draws from the posterior.

    Member ``k`` draws its weights from the stream addressed by ``(seed, k)``.
    """
    if K < 1:
        raise ValueError("ensemble size must be >= 1")
    members = []
    for k in range(K):
        w = sample_binary(list(logits), step_rng(seed, k))
        members.append(network_outputs(net, w, inputs, last_step))
    members = np.stack(members)
    name = f"{ENSEMBLE}-{K}"
    if net.kind == CLASSIFICATION:
        return PredictionRecord(np.asarray(targets) if targets is not None else None, name,
                                probs=members.mean(axis=0))
    return PredictionRecord(targets, name, mean=members.mean(axis=0), std=members.std(axis=0))


def accuracy(record: PredictionRecord) -> float:
    return float(np.mean(record.labels == record.targets))


def nll(record: PredictionRecord) -> float:
    p = record.probs[np.arange(len(record.targets)), record.targets]
    return float(-np.mean(np.log(np.maximum(p, 1e-12))))


def mse(record: PredictionRecord) -> float:
    return float(np.mean((record.mean - np.asarray(record.targets)) ** 2))


def expected_calibration_error(records, n_bins: int = 15) -> float:
    """Equal-width confidence-binned calibration gap.

    ``records`` is a :class:`PredictionRecord` or a pair ``(probs, labels)``.
    A confidence ``c`` falls in bin ``ceil(c * n_bins) - 1`` (bins are
    right-closed; ``c = 0`` joins the first bin).
    """
    if isinstance(records, PredictionRecord):
        probs, labels = records.probs, records.targets
    else:
        probs, labels = records
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise ValueError("no records")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    n = len(conf)
    ece = 0.0
    for b in range(n_bins):
        mask = idx == b
        if mask.any():
            ece += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


def grid_points(bbox, resolution: int) -> np.ndarray:
    """Row-major grid over ``(x_min, x_max, y_min, y_max)``; y varies slowest."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    x0, x1, y0, y1 = bbox
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def predict_points(net, logits, points, spec: PopulationCodeSpec, encoding_seed: int,
                   predictor: str = MAP, K: int = 10, seed: int = 0) -> PredictionRecord:
    """Encode real-valued points and run the chosen predictor on them."""
    spikes = population_encode(np.asarray(points, dtype=float), spec, np.random.default_rng(encoding_seed))
    x = spikes.transpose(1, 0, 2)
    if predictor == MAP:
        return predict_map(net, logits, x)
    if predictor == DIRECT:
        return predict_weights(net, list(logits), x, predictor=DIRECT)
    return predict_ensemble(net, logits, x, K, seed)


def uncertainty_grid(net, logits, bbox, resolution: int, spec: PopulationCodeSpec,
                     predictor: str = MAP, K: int = 10, seed: int = 0, encoding_seed: int = 0):
    """Class-1 probability on a row-major ``resolution x resolution`` grid.

    Returns ``(points (resolution**2, 2), p1 (resolution**2,))``.
    """
    if net.kind != CLASSIFICATION or net.specs[-1].readout_dim != 2:
        raise ValueError("uncertainty grids need a 2-class checkpoint")
    points = grid_points(bbox, resolution)
    rec = predict_points(net, logits, points, spec, encoding_seed, predictor, K, seed)
    return points, rec.probs[:, 1]
