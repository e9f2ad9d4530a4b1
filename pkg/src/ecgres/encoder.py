"""Sigma-delta (level-crossing) event encoding of sampled signals.

Each channel keeps a reference level that starts at its first sample.  The
signal is linearly interpolated between samples; whenever it reaches
``reference + delta`` an up-event is emitted at the interpolated crossing time
and the reference steps up by ``delta`` (down-events symmetrically).  The
reference is held as ``first_sample + n * delta`` with integer ``n`` so that
repeated steps do not accumulate rounding error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np

from .aer import POL_DOWN, POL_UP, EventTrain
from .errors import InvalidConfig, NonMonotone
from .wfdb_ingest import SampledSignal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    delta: tuple[float, ...]  # mV, one per channel
    refractory_e: float = 0.0
    interpolation: str = "linear"

    def __post_init__(self):
        d = (self.delta,) if np.isscalar(self.delta) else tuple(self.delta)
        object.__setattr__(self, "delta", tuple(float(v) for v in d))
        if not self.delta or any(not (v > 0) or not math.isfinite(v) for v in self.delta):
            raise InvalidConfig(f"delta must be positive, got {self.delta}")
        if not self.refractory_e >= 0:
            raise InvalidConfig(f"refractory_e must be >= 0, got {self.refractory_e}")
        if self.interpolation != "linear":
            raise InvalidConfig(f"unsupported interpolation {self.interpolation!r}")

    def delta_for(self, channel: int) -> float:
        return self.delta[channel] if len(self.delta) > 1 else self.delta[0]


@numba.njit(cache=True)
def _encode_channel(x, fs, delta, refractory, duration):
    n = x.size
    if n < 2:
        return np.empty(0, np.float64), np.empty(0, np.uint8)
    total = 0.0
    for k in range(1, n):
        total += abs(x[k] - x[k - 1])
    cap = int(total / delta) + 2
    times = np.empty(cap, np.float64)
    pols = np.empty(cap, np.uint8)
    x0 = x[0]
    level = 0  # reference = x0 + level * delta
    m = 0
    last_up = -1e300
    last_dn = -1e300
    for k in range(n - 1):
        a = x[k]
        b = x[k + 1]
        if b > a:
            while True:
                target = x0 + (level + 1) * delta
                if b < target:
                    break
                t = (k + (target - a) / (b - a)) / fs
                level += 1
                if t < last_up + refractory:
                    t = last_up + refractory
                if t > duration:
                    continue
                last_up = t
                times[m] = t
                pols[m] = 0
                m += 1
        elif b < a:
            while True:
                target = x0 + (level - 1) * delta
                if b > target:
                    break
                t = (k + (a - target) / (a - b)) / fs
                level -= 1
                if t < last_dn + refractory:
                    t = last_dn + refractory
                if t > duration:
                    continue
                last_dn = t
                times[m] = t
                pols[m] = 1
                m += 1
    return times[:m], pols[:m]


def _check_signal(signal: SampledSignal) -> None:
    if not np.all(np.isfinite(signal.samples)):
        raise InvalidConfig("signal contains non-finite samples")


def encode_channel(x: np.ndarray, fs: float, delta: float, refractory_e: float = 0.0):
    """Event times and polarities (0 up, 1 down) for one channel."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if not delta > 0:
        raise InvalidConfig(f"delta must be positive, got {delta}")
    duration = x.size / fs
    return _encode_channel(x, float(fs), float(delta), float(refractory_e), duration)


def encode(signal: SampledSignal, cfg: EncoderConfig) -> EventTrain:
    _check_signal(signal)
    if len(cfg.delta) not in (1, signal.n_channels):
        raise InvalidConfig(f"{len(cfg.delta)} deltas for {signal.n_channels} channels")
    ts, chs, ps = [], [], []
    for c in range(signal.n_channels):
        t, p = encode_channel(signal.samples[:, c], signal.sampling_rate, cfg.delta_for(c), cfg.refractory_e)
        ts.append(t)
        ps.append(p)
        chs.append(np.full(t.size, c, np.uint32))
    times = np.concatenate(ts)
    chan = np.concatenate(chs)
    pol = np.concatenate(ps)
    order = np.lexsort((pol, chan, times))
    return EventTrain(
        times[order],
        chan[order],
        pol[order],
        signal.duration,
        signal.n_channels,
        {"delta": list(cfg.delta), "refractory_e": cfg.refractory_e},
    )


def channel_rate(x: np.ndarray, fs: float, delta: float) -> float:
    t, _ = encode_channel(x, fs, delta)
    return t.size / (x.size / fs)


def calibrate_delta(
    signal: SampledSignal,
    target_rate: float,
    *,
    rel_tol: float = 0.05,
    max_iter: int = 80,
    refractory_e: float = 0.0,
) -> EncoderConfig:
    """Per-channel delta giving ``target_rate`` events/s (up + down) on ``signal``.

    Bisection in log(delta); the event count is non-increasing in delta.
    """
    if not target_rate > 0:
        raise InvalidConfig(f"target_rate must be positive, got {target_rate}")
    _check_signal(signal)
    fs = signal.sampling_rate
    deltas = []
    for c in range(signal.n_channels):
        x = np.ascontiguousarray(signal.samples[:, c])
        span = float(np.max(np.abs(np.diff(x)))) if x.size > 1 else 0.0
        tv = float(np.sum(np.abs(np.diff(x)))) if x.size > 1 else 0.0
        if span == 0.0:
            raise NonMonotone(f"channel {c} is constant; no delta produces events")
        # at most tv/delta events, so the bracket starts just below that bound
        lo = tv / (target_rate * signal.duration) * 0.5
        hi = float(np.ptp(x)) * 2.0 + span  # at most one event
        r_lo = channel_rate(x, fs, lo)
        for _ in range(6):
            if r_lo >= target_rate:
                break
            lo *= 0.1
            r_lo = channel_rate(x, fs, lo)
        else:
            raise NonMonotone(f"channel {c}: max achievable rate {r_lo:.3g} below target")
        best = (abs(r_lo - target_rate), lo, r_lo)
        for _ in range(max_iter):
            mid = math.sqrt(lo * hi)
            r = channel_rate(x, fs, mid)
            if abs(r - target_rate) < best[0]:
                best = (abs(r - target_rate), mid, r)
            if r > target_rate:
                lo, r_lo = mid, r
            else:
                hi = mid
            if hi / lo - 1 < 1e-10:
                break
        err, d, r = best
        if err > rel_tol * target_rate:
            log.warning("channel %d: closest rate %.3g ev/s vs target %.3g", c, r, target_rate)
        deltas.append(d)
    return EncoderConfig(tuple(deltas), refractory_e)


def reconstruct_at(train: EventTrain, delta, initial, times: np.ndarray) -> np.ndarray:
    """Staircase reconstruction ``initial + delta*(#up - #down)`` over events with ``t_event <= t``.

    Returns ``(len(times), n_channels)``.
    """
    times = np.asarray(times, dtype=np.float64)
    n_ch = train.n_channels
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n_ch,))
    initial = np.broadcast_to(np.asarray(initial, dtype=np.float64), (n_ch,))
    out = np.empty((times.size, n_ch))
    for c in range(n_ch):
        m = train.channel == c
        t = train.times[m]
        step = np.where(train.polarity[m] == POL_UP, 1, -1)
        cum = np.concatenate([[0], np.cumsum(step)])
        k = np.searchsorted(t, times, side="right")
        out[:, c] = initial[c] + delta[c] * cum[k]
    return out


def decode(train: EventTrain, delta, initial, sampling_rate: float = 360.0, n_samples: int | None = None) -> SampledSignal:
    """Staircase reconstruction sampled on a regular grid."""
    if n_samples is None:
        n_samples = int(round(train.duration * sampling_rate))
    grid = np.arange(n_samples) / sampling_rate
    return SampledSignal(reconstruct_at(train, delta, initial, grid), sampling_rate)


__all__ = [
    "EncoderConfig",
    "EventTrain",
    "POL_UP",
    "POL_DOWN",
    "encode",
    "encode_channel",
    "calibrate_delta",
    "decode",
    "reconstruct_at",
]
