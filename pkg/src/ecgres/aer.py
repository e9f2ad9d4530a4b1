"""Address-event files shared by the encoder and the simulator.

Binary layout: a flat little-endian array of 13-byte records

    time      float64   seconds
    source_id uint32    encoder line or neuron id
    meta      uint8     polarity for encoder events (0 = up, 1 = down), 0 for spikes

with a JSON sidecar ``<file>.json`` carrying ``kind``, ``duration``, the
number of sources and anything stage-specific (channel map, delta values).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AER_DTYPE = np.dtype([("time", "<f8"), ("source", "<u4"), ("meta", "u1")])
POL_UP, POL_DOWN = 0, 1
FORMAT_VERSION = 1


@dataclass
class EventTrain:
    """Time-sorted events; ``channel`` is the analog channel, ``polarity`` 0/1 (up/down)."""

    times: np.ndarray
    channel: np.ndarray
    polarity: np.ndarray
    duration: float
    n_channels: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.channel = np.asarray(self.channel, dtype=np.uint32)
        self.polarity = np.asarray(self.polarity, dtype=np.uint8)

    def __len__(self):
        return self.times.size

    @property
    def lines(self) -> np.ndarray:
        """Input line id: ``2*channel + polarity`` (ch1-up, ch1-down, ch2-up, ...)."""
        return self.channel.astype(np.int64) * 2 + self.polarity

    @property
    def n_lines(self) -> int:
        return 2 * self.n_channels

    def select(self, t0: float, t1: float) -> "EventTrain":
        """Events with ``t0 <= t < t1``, shifted to start at 0."""
        m = (self.times >= t0) & (self.times < t1)
        return EventTrain(
            self.times[m] - t0, self.channel[m], self.polarity[m], t1 - t0, self.n_channels, dict(self.meta)
        )

    def rate(self) -> float:
        """Mean events per second per channel (both polarities)."""
        return len(self) / self.duration / max(self.n_channels, 1) if self.duration > 0 else 0.0


@dataclass
class SpikeRecord:
    times: np.ndarray
    neuron: np.ndarray
    duration: float
    n_neurons: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.neuron = np.asarray(self.neuron, dtype=np.int64)

    def __len__(self):
        return self.times.size

    def counts(self) -> np.ndarray:
        return np.bincount(self.neuron, minlength=self.n_neurons)


def _write(path: Path, times, source, meta_col, sidecar: dict) -> None:
    rec = np.empty(len(times), dtype=AER_DTYPE)
    rec["time"] = times
    rec["source"] = source
    rec["meta"] = meta_col
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(rec.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"version": FORMAT_VERSION, **sidecar}, indent=2, sort_keys=True))


def _read(path: Path) -> tuple[np.ndarray, dict]:
    rec = np.frombuffer(Path(path).read_bytes(), dtype=AER_DTYPE)
    side = json.loads(Path(str(path) + ".json").read_text())
    return rec, side


def write_events(path: str | Path, train: EventTrain) -> None:
    side = {
        "kind": "encoder",
        "duration": train.duration,
        "n_channels": train.n_channels,
        "channel_map": {str(2 * c + p): [c, "up" if p == 0 else "down"] for c in range(train.n_channels) for p in (0, 1)},
        **train.meta,
    }
    _write(Path(path), train.times, train.channel, train.polarity, side)


def read_events(path: str | Path) -> EventTrain:
    rec, side = _read(path)
    extra = {k: v for k, v in side.items() if k not in ("kind", "duration", "n_channels", "channel_map", "version")}
    return EventTrain(
        rec["time"].copy(), rec["source"].copy(), rec["meta"].copy(), side["duration"], side["n_channels"], extra
    )


def write_spikes(path: str | Path, record: SpikeRecord) -> None:
    side = {"kind": "spikes", "duration": record.duration, "n_neurons": record.n_neurons, **record.meta}
    _write(Path(path), record.times, record.neuron, np.zeros(len(record), np.uint8), side)


def read_spikes(path: str | Path) -> SpikeRecord:
    rec, side = _read(path)
    extra = {k: v for k, v in side.items() if k not in ("kind", "duration", "n_neurons", "version")}
    return SpikeRecord(rec["time"].copy(), rec["source"].astype(np.int64), side["duration"], side["n_neurons"], extra)


class SpikeWriter:
    """Append spikes chunk by chunk; the sidecar is written on :meth:`close`."""

    def __init__(self, path: str | Path, n_neurons: int, meta: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.n_neurons = n_neurons
        self.meta = dict(meta or {})
        self.count = 0
        self._f = open(self.path, "wb")

    def __call__(self, times: np.ndarray, ids: np.ndarray) -> None:
        rec = np.empty(len(times), dtype=AER_DTYPE)
        rec["time"] = times
        rec["source"] = ids
        rec["meta"] = 0
        self._f.write(rec.tobytes())
        self.count += len(times)

    def close(self, duration: float) -> None:
        self._f.close()
        side = {"version": FORMAT_VERSION, "kind": "spikes", "duration": duration,
                "n_neurons": self.n_neurons, "n_spikes": self.count, **self.meta}
        Path(str(self.path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def open_spikes(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Memory-mapped ``(times, neuron_ids, sidecar)`` views of a spike file."""
    side = json.loads(Path(str(path) + ".json").read_text())
    if Path(path).stat().st_size == 0:
        return np.empty(0), np.empty(0, np.uint32), side
    rec = np.memmap(path, dtype=AER_DTYPE, mode="r")
    return rec["time"], rec["source"], side
