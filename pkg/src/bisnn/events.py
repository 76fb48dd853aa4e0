"""AEDAT 2.0 parsing for DVS128 recordings (MNIST-DVS) and binning into spikes.

AEDAT 2.0 files start with ``#``-prefixed ASCII header lines (the first one
``#!AER-DAT2.0``), followed by big-endian 8-byte records: a 32-bit address
word and a 32-bit microsecond timestamp. DVS128 address layout::

    bit 0       polarity (0 = ON, 1 = OFF)
    bits 1-7    127 - x
    bits 8-14   y
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import SpikeDataset

SENSOR_SIZE = 128
ON, OFF = 1, 0
RECORD_DTYPE = np.dtype([("addr", ">u4"), ("t", ">u4")])
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


class AedatError(ValueError):
    pass


class DvsEvent(NamedTuple):
    timestamp: int
    x: int
    y: int
    polarity: int


def events_from_list(events) -> np.ndarray:
    """Structured event array from an iterable of :class:`DvsEvent`."""
    return np.array([tuple(e) for e in events], dtype=EVENT_DTYPE)


def events_to_list(events: np.ndarray) -> list[DvsEvent]:
    return [DvsEvent(int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"])) for e in events]


def _split_header(data: bytes):
    offset = 0
    version = None
    while offset < len(data) and data[offset : offset + 1] == b"#":
        end = data.find(b"\n", offset)
        if end < 0:
            raise AedatError("unterminated header line")
        line = data[offset:end].strip()
        if line.startswith(b"#!AER-DAT"):
            version = line[len(b"#!AER-DAT") :].decode("ascii", "replace")
        offset = end + 1
    return version, offset


def parse_aedat(data: bytes) -> np.ndarray:
    """Decode an AEDAT 2.0 byte string into a time-sorted structured array.

    Fields: ``t`` (us), ``x``, ``y`` and ``p`` (1 = ON, 0 = OFF). Input
    without any header is read as bare 2.0 records.
    """
    version, offset = _split_header(data)
    if version is not None and not version.startswith("2."):
        raise AedatError(f"unsupported AEDAT version {version!r}")
    payload = len(data) - offset
    if payload % RECORD_DTYPE.itemsize:
        bad = offset + (payload // RECORD_DTYPE.itemsize) * RECORD_DTYPE.itemsize
        raise AedatError(f"truncated record at byte offset {bad}")
    raw = np.frombuffer(data, dtype=RECORD_DTYPE, offset=offset)
    addr = raw["addr"].astype(np.uint32)
    events = np.empty(raw.size, dtype=EVENT_DTYPE)
    events["t"] = raw["t"]
    events["x"] = SENSOR_SIZE - 1 - ((addr >> 1) & 0x7F)
    events["y"] = (addr >> 8) & 0x7F
    events["p"] = 1 - (addr & 1)
    if raw.size > 1 and np.any(np.diff(events["t"].astype(np.int64)) < 0):
        events = events[np.argsort(events["t"], kind="stable")]
    return events


def read_aedat(path) -> np.ndarray:
    return parse_aedat(Path(path).read_bytes())


@dataclass(frozen=True)
class BinningSpec:
    window_us: int = 2000
    T: int = 100
    crop: tuple = (32, 32, 64, 64)
    downsample: int = 2
    polarity_channels: bool = True
    sensor: tuple = (SENSOR_SIZE, SENSOR_SIZE)

    def __post_init__(self):
        if self.window_us < 1 or self.T < 1 or self.downsample < 1:
            raise ValueError("window_us, T and downsample must be positive")
        x0, y0, w, h = self.crop
        if x0 < 0 or y0 < 0 or w < 1 or h < 1 or x0 + w > self.sensor[0] or y0 + h > self.sensor[1]:
            raise ValueError(f"crop {self.crop} outside sensor {self.sensor}")

    @property
    def grid(self) -> tuple[int, int]:
        _, _, w, h = self.crop
        return -(-h // self.downsample), -(-w // self.downsample)

    @property
    def channels(self) -> int:
        return 2 if self.polarity_channels else 1

    @property
    def n_inputs(self) -> int:
        h, w = self.grid
        return self.channels * h * w


def bin_events(events: np.ndarray, spec: BinningSpec, start_us: int | None = None) -> np.ndarray:
    """OR-bin events into a ``(T, channels * H * W)`` uint8 tensor.

    Bins start at ``start_us`` (default: first event). Channel 0 holds ON
    events when polarity channels are on. Events past ``T`` bins or outside
    the crop are dropped.
    """
    H, W = spec.grid
    out = np.zeros((spec.T, spec.channels, H, W), dtype=np.uint8)
    if len(events) == 0:
        return out.reshape(spec.T, -1)
    t = events["t"].astype(np.int64)
    x = events["x"].astype(np.int64)
    y = events["y"].astype(np.int64)
    if np.any(x >= spec.sensor[0]) or np.any(y >= spec.sensor[1]):
        raise ValueError("event coordinates outside sensor bounds")
    start = int(t.min()) if start_us is None else int(start_us)
    x0, y0, w, h = spec.crop
    b = (t - start) // spec.window_us
    keep = (b >= 0) & (b < spec.T) & (x >= x0) & (x < x0 + w) & (y >= y0) & (y < y0 + h)
    c = (1 - events["p"][keep].astype(np.int64)) if spec.polarity_channels else np.zeros(keep.sum(), np.int64)
    out[b[keep], c, (y[keep] - y0) // spec.downsample, (x[keep] - x0) // spec.downsample] = 1
    return out.reshape(spec.T, -1)


_LABEL_RE = re.compile(r"mnist_(\d)_scale(\d+)_", re.IGNORECASE)


def mnist_dvs_label(path) -> tuple[int, int] | None:
    """``(digit, scale)`` from an MNIST-DVS file name, or ``None``."""
    m = _LABEL_RE.search(Path(path).name)
    return (int(m.group(1)), int(m.group(2))) if m else None


def ingest_directory(root, spec: BinningSpec, digits=None, scale: int | None = 4,
                     limit: int | None = None) -> SpikeDataset:
    """Bin every matching MNIST-DVS recording under ``root``.

    Files are taken in sorted path order; ``limit`` caps the number read.
    Labels are remapped to ``0..len(digits)-1`` in the order given.
    """
    files = []
    for path in sorted(Path(root).rglob("*.aedat")):
        info = mnist_dvs_label(path)
        if info is None:
            continue
        digit, file_scale = info
        if digits is not None and digit not in digits:
            continue
        if scale is not None and file_scale != scale:
            continue
        files.append((path, digit))
    if limit is not None:
        files = _balanced_head(files, limit)
    if not files:
        raise FileNotFoundError(f"no MNIST-DVS recordings found under {root}")
    label_map = {d: i for i, d in enumerate(digits)} if digits is not None else None
    spikes = np.stack([bin_events(read_aedat(p), spec) for p, _ in files])
    labels = np.array([label_map[d] if label_map else d for _, d in files], dtype=np.int64)
    meta = {
        "source": "mnist-dvs",
        "binning": {**spec.__dict__, "crop": list(spec.crop), "sensor": list(spec.sensor)},
        "digits": list(digits) if digits is not None else None,
        "scale": scale,
        "files": [str(Path(p).relative_to(root)) for p, _ in files],
    }
    return SpikeDataset(spikes, labels, "classification", meta)


def _balanced_head(files, limit):
    # round-robin across digits so a capped subset keeps every class
    by_digit = {}
    for path, digit in files:
        by_digit.setdefault(digit, []).append((path, digit))
    out = []
    queues = [by_digit[d] for d in sorted(by_digit)]
    i = 0
    while len(out) < limit and any(i < len(q) for q in queues):
        for q in queues:
            if i < len(q) and len(out) < limit:
                out.append(q[i])
        i += 1
    return sorted(out, key=lambda item: str(item[0]))
