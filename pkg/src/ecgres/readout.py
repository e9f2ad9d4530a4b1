"""Filtered reservoir state, least-squares readouts and detection thresholds.

The state of neuron ``j`` at time ``t`` is ``sum_{s <= t} exp(-(t - s)/tau_out)``
over its spikes ``s``, sampled on a regular grid ``t_k = k * sample_period``.
Long runs never materialize the full state matrix: :class:`StateStream`
yields row blocks, which feed an accumulated Gram system for training and a
score matrix for calibration.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import linalg
from scipy.signal import lfilter

from .aer import SpikeRecord
from .dataset import Interval
from .errors import CoverageGap, DegenerateScores, SingularSystem
from .wfdb_ingest import ANOMALIES, Label

MODEL_VERSION = 1
DEFAULT_PERIOD = 1.0 / 360.0
_EPS = 1e-9


@dataclass(frozen=True)
class FilterKernel:
    tau_out: float = 0.175

    def __post_init__(self):
        if not self.tau_out > 0:
            raise ValueError("tau_out must be positive")


@dataclass
class StateMatrix:
    X: np.ndarray
    sample_period: float
    t0: float = 0.0

    @property
    def sample_times(self) -> np.ndarray:
        return self.t0 + np.arange(self.X.shape[0]) * self.sample_period


def n_samples_for(duration: float, sample_period: float) -> int:
    return int(math.floor(duration / sample_period + _EPS))


class StateStream:
    """Row-block iterator over the filtered state of a (possibly memory-mapped) spike train."""

    def __init__(self, times, neuron, n_neurons: int, kernel: FilterKernel, sample_period: float,
                 n_samples: int, chunk_rows: int = 16384):
        if not sample_period > 0:
            raise ValueError("sample_period must be positive")
        self.times = times
        self.neuron = neuron
        self.n_neurons = int(n_neurons)
        self.kernel = kernel
        self.period = float(sample_period)
        self.n_samples = int(n_samples)
        self.chunk_rows = int(chunk_rows)

    @classmethod
    def from_record(cls, record: SpikeRecord, kernel: FilterKernel, sample_period: float = DEFAULT_PERIOD,
                    n_samples: int | None = None, **kw) -> "StateStream":
        n = n_samples_for(record.duration, sample_period) if n_samples is None else n_samples
        return cls(record.times, record.neuron, record.n_neurons, kernel, sample_period, n, **kw)

    def __iter__(self) -> Iterator[tuple[int, np.ndarray]]:
        a = math.exp(-self.period / self.kernel.tau_out)
        y = np.zeros(self.n_neurons)
        lo_spike = 0
        for k0 in range(0, self.n_samples, self.chunk_rows):
            k1 = min(k0 + self.chunk_rows, self.n_samples)
            # spikes counted at sample k satisfy (k-1)P < s <= kP
            hi_spike = int(np.searchsorted(self.times, (k1 - 1 + _EPS) * self.period, side="right"))
            s = np.asarray(self.times[lo_spike:hi_spike], dtype=np.float64)
            nid = np.asarray(self.neuron[lo_spike:hi_spike], dtype=np.int64)
            lo_spike = hi_spike
            j = np.ceil(s / self.period - _EPS).astype(np.int64)
            j = np.maximum(j, k0)
            w = np.exp(-(j * self.period - s) / self.kernel.tau_out)
            b = np.zeros((k1 - k0, self.n_neurons))
            np.add.at(b, (j - k0, nid), w)
            x, _ = lfilter([1.0], [1.0, -a], b, axis=0, zi=(a * y)[None, :])
            y = x[-1]
            yield k0, x


def filter_spikes(record: SpikeRecord, kernel: FilterKernel = FilterKernel(),
                  sample_period: float = DEFAULT_PERIOD, n_samples: int | None = None) -> StateMatrix:
    st = StateStream.from_record(record, kernel, sample_period, n_samples)
    X = np.zeros((st.n_samples, st.n_neurons))
    for k0, blk in st:
        X[k0:k0 + blk.shape[0]] = blk
    return StateMatrix(X, sample_period)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


def sample_range(iv: Interval, sample_period: float) -> tuple[int, int]:
    """Half-open range of grid samples ``k`` with ``start_s <= k*P < end_s``."""
    k0 = int(math.ceil(iv.start_s / sample_period - _EPS))
    k1 = int(math.ceil(iv.end_s / sample_period - _EPS))
    return k0, k1


def build_targets(intervals: Sequence[Interval], n_samples: int, sample_period: float = DEFAULT_PERIOD,
                  classes: Sequence[Label] = ANOMALIES) -> np.ndarray:
    """``[n_samples, n_classes]`` binary target matrix."""
    Y = np.zeros((n_samples, len(classes)))
    col = {lab: i for i, lab in enumerate(classes)}
    for iv in intervals:
        c = col.get(iv.label)
        if c is None:
            continue
        k0, k1 = sample_range(iv, sample_period)
        Y[max(k0, 0):min(k1, n_samples), c] = 1.0
    return Y


# ---------------------------------------------------------------------------
# Least squares
# ---------------------------------------------------------------------------


@dataclass
class GramSystem:
    """Accumulated normal equations ``X^T X`` and ``X^T Y``."""

    xtx: np.ndarray
    xty: np.ndarray
    n_rows: int = 0

    @classmethod
    def empty(cls, n_features: int, n_targets: int) -> "GramSystem":
        return cls(np.zeros((n_features, n_features)), np.zeros((n_features, n_targets)))

    def add(self, X: np.ndarray, Y: np.ndarray) -> None:
        self.xtx += X.T @ X
        self.xty += X.T @ Y
        self.n_rows += X.shape[0]

    def default_ridge(self) -> float:
        return 1e-4 * float(np.trace(self.xtx)) / self.xtx.shape[0]

    def solve(self, ridge: float | None = None) -> np.ndarray:
        """Weights ``[n_targets, n_features]``; ``ridge=None`` uses the trace-scaled default."""
        lam = self.default_ridge() if ridge is None else float(ridge)
        if lam < 0:
            raise ValueError("ridge must be >= 0")
        A = self.xtx + lam * np.eye(self.xtx.shape[0])
        if lam == 0:
            ev = np.linalg.eigvalsh(A)
            if ev[0] <= ev[-1] * A.shape[0] * np.finfo(float).eps * 10:
                raise SingularSystem(f"X is rank-deficient (eigenvalue ratio {ev[0] / max(ev[-1], 1e-300):.2e}); use ridge > 0")
        try:
            W = linalg.solve(A, self.xty, assume_a="pos")
        except linalg.LinAlgError as e:
            raise SingularSystem(str(e)) from e
        return W.T


def train_weights(X, targets: np.ndarray, ridge: float | None = None) -> np.ndarray:
    """Ridge least squares: one weight row per target column.

    At ``ridge=0`` the system is solved by QR-based ``lstsq`` after a rank check,
    which keeps the residual orthogonal to ``X`` to working precision.
    """
    X = X.X if isinstance(X, StateMatrix) else np.asarray(X, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if ridge == 0:
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            raise SingularSystem(f"X has rank {rank} < {X.shape[1]} columns; use ridge > 0")
        W, *_ = linalg.lstsq(X, Y)
        return W.T
    g = GramSystem.empty(X.shape[1], Y.shape[1])
    g.add(X, Y)
    return g.solve(ridge)


# ---------------------------------------------------------------------------
# Thresholds and triggering
# ---------------------------------------------------------------------------


def interval_max(scores: np.ndarray, intervals: Sequence[Interval], sample_period: float) -> np.ndarray:
    """Per-interval maximum of each score column, ``[n_intervals, n_units]``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    n = scores.shape[0]
    out = np.empty((len(intervals), scores.shape[1]))
    if not len(intervals):
        return out
    rng = np.array([sample_range(iv, sample_period) for iv in intervals], dtype=np.int64)
    bad = (rng[:, 0] < 0) | (rng[:, 1] > n) | (rng[:, 1] <= rng[:, 0])
    if bad.any():
        i = int(np.argmax(bad))
        raise CoverageGap(
            f"interval {i} [{intervals[i].start_s:.4f}, {intervals[i].end_s:.4f}) s not covered by {n} score samples"
        )
    order = np.argsort(rng[:, 0], kind="stable")
    r = rng[order]
    if np.any(r[1:, 0] < r[:-1, 1]):
        raise ValueError("intervals overlap")
    padded = np.vstack([scores, np.full((1, scores.shape[1]), -np.inf)])
    idx = r.reshape(-1)
    red = np.maximum.reduceat(padded, idx, axis=0)[::2]
    out[order] = red
    return out


def threshold_candidates(scores_i: np.ndarray) -> np.ndarray:
    """Achieved score values plus one value just below the minimum (detect everything)."""
    u = np.unique(scores_i)
    return np.concatenate([[np.nextafter(u[0], -np.inf)], u])


def _unit_threshold(cand, seg_max, normal_max, lam):
    a = np.sort(seg_max)
    b = np.sort(normal_max)
    missed = np.searchsorted(a, cand, side="right")
    fp = b.size - np.searchsorted(b, cand, side="right")
    cost = missed + lam * fp
    best = np.flatnonzero(cost == cost.min())[-1]
    return float(cand[best]), float(cost[best])


def calibrate_from_scores(scores: np.ndarray, intervals: Sequence[Interval], sample_period: float = DEFAULT_PERIOD,
                          lam: float = 1.0, classes: Sequence[Label] = ANOMALIES) -> tuple[np.ndarray, dict]:
    """Per-unit threshold minimizing ``missed own-type segments + lam * normal beats above threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    mx = interval_max(scores, intervals, sample_period)
    is_normal = np.array([iv.label == Label.NORMAL for iv in intervals], dtype=bool)
    thetas, costs = [], []
    for i, lab in enumerate(classes):
        col = scores[:, i]
        if col.size == 0 or np.all(col == col[0]):
            raise DegenerateScores(f"unit {lab.value}: all scores equal")
        own = np.array([iv.label == lab and iv.unit_kind == "segment" for iv in intervals], dtype=bool)
        th, c = _unit_threshold(threshold_candidates(col), mx[own, i], mx[is_normal, i], lam)
        thetas.append(th)
        costs.append(c)
    return np.array(thetas), {"cost": costs, "lambda": lam}


def calibrate_thresholds(weights: np.ndarray, X_val, intervals: Sequence[Interval],
                         sample_period: float = DEFAULT_PERIOD, lam: float = 1.0) -> np.ndarray:
    X = X_val.X if isinstance(X_val, StateMatrix) else np.asarray(X_val)
    return calibrate_from_scores(X @ np.asarray(weights).T, intervals, sample_period, lam)[0]


def trigger(scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """OR over units of ``score > threshold`` (strict)."""
    return np.any(np.atleast_2d(scores) > np.asarray(thresholds), axis=1)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ReadoutModel:
    weights: np.ndarray  # [n_units, n_neurons]
    thresholds: np.ndarray  # [n_units]; NaN before calibration
    kernel: FilterKernel = field(default_factory=FilterKernel)
    sample_period: float = DEFAULT_PERIOD
    classes: tuple[str, ...] = tuple(l.value for l in ANOMALIES)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64).reshape(-1)
        if self.thresholds.size != self.weights.shape[0]:
            raise ValueError("one threshold per readout unit expected")

    @property
    def calibrated(self) -> bool:
        return bool(np.all(np.isfinite(self.thresholds)))

    def scores(self, X) -> np.ndarray:
        X = X.X if isinstance(X, StateMatrix) else X
        return np.asarray(X) @ self.weights.T

    def trigger(self, X) -> tuple[np.ndarray, np.ndarray]:
        if not self.calibrated:
            raise ValueError("model has no thresholds yet")
        s = self.scores(X)
        return trigger(s, self.thresholds), s

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "tau_out": self.kernel.tau_out,
            "sample_period": self.sample_period,
            "classes": list(self.classes),
            "weights": self.weights.tolist(),
            "thresholds": [None if not math.isfinite(t) else t for t in self.thresholds],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReadoutModel":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        th = np.array([np.nan if t is None else t for t in d["thresholds"]], dtype=np.float64)
        return cls(np.asarray(d["weights"]), th, FilterKernel(d["tau_out"]), d["sample_period"],
                   tuple(d["classes"]), d.get("provenance", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ReadoutModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for blk in iter(lambda: f.read(1 << 20), b""):
            h.update(blk)
    return h.hexdigest()
