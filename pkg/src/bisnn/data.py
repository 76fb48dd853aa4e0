"""Synthetic datasets, population coding, and the packed spike dataset file."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BSNNDATA"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PopulationCodeSpec:
    n_units: int = 10
    input_range: tuple = (-1.0, 1.0)
    width: float | None = None
    max_rate: float = 0.5
    T: int = 100

    def __post_init__(self):
        low, high = self.input_range
        object.__setattr__(self, "input_range", (float(low), float(high)))
        if self.n_units < 1 or self.T < 1:
            raise ValueError("n_units and T must be positive")
        if not low < high:
            raise ValueError(f"input_range must satisfy low < high, got {self.input_range}")
        if not 0 < self.max_rate <= 1:
            raise ValueError(f"max_rate must lie in (0, 1], got {self.max_rate}")
        if self.width is None:
            object.__setattr__(self, "width", (high - low) / self.n_units)
        if not self.width > 0:
            raise ValueError("width must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(*self.input_range, self.n_units)

    def rates(self, x) -> np.ndarray:
        """Per-step firing probability of every unit, shape (..., dims * n_units)."""
        x = np.clip(np.asarray(x, dtype=float), *self.input_range)
        g = self.max_rate * np.exp(-((x[..., None] - self.centers) ** 2) / (2 * self.width**2))
        return g.reshape(*x.shape[:-1], -1)


def population_encode(x, spec: PopulationCodeSpec, rng) -> np.ndarray:
    """Bernoulli spike trains for a real vector ``x``.

    Returns a ``(T, dims * n_units)`` uint8 array; passing a batch ``(N, dims)``
    gives ``(N, T, dims * n_units)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None]
    rates = spec.rates(x)
    draws = rng.random((x.shape[0], spec.T, rates.shape[-1]))
    spikes = (draws < rates[:, None, :]).astype(np.uint8)
    return spikes[0] if single else spikes


def gen_two_moons(n_per_class: int, noise_std: float, seed):
    """Interleaved half circles; returns ``(points (2n, 2), labels (2n,))``."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    theta0 = rng.uniform(0, np.pi, n_per_class)
    theta1 = rng.uniform(0, np.pi, n_per_class)
    upper = np.column_stack([np.cos(theta0), np.sin(theta0)])
    lower = np.column_stack([1 - np.cos(theta1), 0.5 - np.sin(theta1)])
    points = np.vstack([upper, lower])
    if noise_std > 0:
        points = points + rng.normal(0.0, noise_std, points.shape)
    labels = np.repeat([0, 1], n_per_class)
    return points, labels


CLUSTERS_1D = ((-1.0, -0.6), (-0.2, 0.2), (0.6, 1.0))


def gen_1d_clusters(seed, n_per_cluster: int = 50, noise_std: float = 0.02):
    """Three separated input clusters with cubic targets; returns ``(x (N, 1), y (N, 1))``."""
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(lo, hi, n_per_cluster) for lo, hi in CLUSTERS_1D])
    y = x**3 + (rng.normal(0.0, noise_std, x.shape) if noise_std > 0 else 0.0)
    return x[:, None], y[:, None]


@dataclass
class SpikeDataset:
    """Encoded examples: ``spikes`` (N, T, n_inputs) uint8 plus targets."""

    spikes: np.ndarray
    targets: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes, dtype=np.uint8)
        if self.spikes.ndim != 3:
            raise ValueError("spikes must be (N, T, n_inputs)")
        if np.any(self.spikes > 1):
            raise ValueError("spikes must be binary")
        if len(self.targets) != len(self.spikes):
            raise ValueError("targets and spikes disagree on N")

    @property
    def n_examples(self) -> int:
        return self.spikes.shape[0]

    @property
    def T(self) -> int:
        return self.spikes.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.spikes.shape[2]

    @property
    def n_classes(self) -> int:
        return int(np.max(self.targets)) + 1

    def batch(self, idx):
        """Time-major spikes ``(T, B, n_inputs)`` and targets for the given indices."""
        return np.ascontiguousarray(self.spikes[idx].transpose(1, 0, 2)), self.targets[idx]

    def subset(self, idx) -> "SpikeDataset":
        return SpikeDataset(self.spikes[idx], self.targets[idx], self.kind, dict(self.meta))

    def save(self, path) -> None:
        """Write the packed container.

        Layout: ``MAGIC``, uint32 little-endian header length, UTF-8 JSON
        header, then for every example and step one row of ``n_inputs`` bits
        (``np.packbits`` order, zero-padded to a whole byte).
        """
        header = {
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "shape": list(self.spikes.shape),
            "T": self.T,
            "row_bytes": (self.n_inputs + 7) // 8,
            "targets": np.asarray(self.targets).tolist(),
            "target_dtype": "int" if self.kind == "classification" else "float",
            "meta": self.meta,
        }
        blob = json.dumps(header).encode()
        packed = np.packbits(self.spikes, axis=-1)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(packed.tobytes())

    @classmethod
    def load(cls, path) -> "SpikeDataset":
        raw = Path(path).read_bytes()
        if raw[: len(MAGIC)] != MAGIC:
            raise ValueError(f"{path}: not a spike dataset file")
        off = len(MAGIC)
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off : off + n].decode())
        off += n
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {header['version']}")
        N, T, n_inputs = header["shape"]
        row_bytes = header["row_bytes"]
        expected = N * T * row_bytes
        body = np.frombuffer(raw, dtype=np.uint8, offset=off)
        if body.size != expected:
            raise ValueError(f"{path}: expected {expected} payload bytes, found {body.size}")
        spikes = np.unpackbits(body.reshape(N, T, row_bytes), axis=-1, count=n_inputs)
        dtype = np.int64 if header["target_dtype"] == "int" else float
        targets = np.asarray(header["targets"], dtype=dtype)
        if targets.ndim == 1 and dtype is float:
            targets = targets[:, None]
        return cls(spikes, targets, header["kind"], header.get("meta", {}))


def encode_dataset(points, targets, spec: PopulationCodeSpec, seed: int, kind: str, **meta) -> SpikeDataset:
    rng = np.random.default_rng(seed)
    spikes = population_encode(np.asarray(points, dtype=float), spec, rng)
    meta = {"encoding": asdict(spec), "encoding_seed": seed, **meta}
    meta["encoding"]["input_range"] = list(spec.input_range)
    return SpikeDataset(spikes, np.asarray(targets), kind, meta)
