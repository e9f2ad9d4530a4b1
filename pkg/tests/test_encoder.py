import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgres import encoder as enc
from ecgres.aer import POL_DOWN, POL_UP, EventTrain, read_events, write_events
from ecgres.errors import InvalidConfig, NonMonotone
from ecgres.wfdb_ingest import SampledSignal


def _brute_force_counts(x, fs, delta, upsample=2000):
    """Level-crossing counts on a finely resampled copy of the linear interpolant.

    Events are detected sample by sample on the fine grid with a plain Python
    loop, so it shares no code with the compiled encoder.
    """
    t = np.arange(x.size) / fs
    tf = np.linspace(0, t[-1], (x.size - 1) * upsample + 1)
    xf = np.interp(tf, t, x)
    level, up, down = 0, 0, 0
    for v in xf[1:]:
        while v >= xf[0] + (level + 1) * delta:
            level += 1
            up += 1
        while v <= xf[0] + (level - 1) * delta:
            level -= 1
            down += 1
    return up, down


def _counts(train):
    return int(np.sum(train.polarity == POL_UP)), int(np.sum(train.polarity == POL_DOWN))


def test_constant_signal_no_events():
    tr = enc.encode(SampledSignal(np.full(360, 0.7), 360.0), enc.EncoderConfig((0.1,)))
    assert len(tr) == 0


@pytest.mark.parametrize("delta", [0.125, 0.1])
def test_ramp_gives_one_event_per_step(delta):
    fs = 100.0
    x = np.arange(101) / fs * 10 * delta  # rises 10*delta over exactly 1 s
    tr = enc.encode(SampledSignal(x, fs), enc.EncoderConfig((delta,)))
    assert len(tr) == 10
    assert np.all(tr.polarity == POL_UP)
    np.testing.assert_allclose(tr.times, np.arange(1, 11) / 10, rtol=0, atol=1e-12)


def test_ramp_exact_levels():
    # with a binary-exact step the crossing times land exactly on k/10
    x = np.arange(101) / 100.0 * 1.25
    tr = enc.encode(SampledSignal(x, 100.0), enc.EncoderConfig((0.125,)))
    assert tr.times.tolist() == [k / 10 for k in range(1, 11)]


def test_sine_matches_brute_force():
    fs = 360.0
    x = np.sin(2 * np.pi * np.arange(361) / fs)
    tr = enc.encode(SampledSignal(x, fs), enc.EncoderConfig((0.1,)))
    up, down = _counts(tr)
    assert (up, down) == _brute_force_counts(x, fs, 0.1)
    # 4 mV of travel per period: 20 steps each way, except that the closing
    # climb ends a hair below zero (sin(2*pi) < 0) and misses its last level
    assert (up, down) == (19, 20)


def test_invalid_delta():
    with pytest.raises(InvalidConfig):
        enc.EncoderConfig((0.0,))
    with pytest.raises(InvalidConfig):
        enc.EncoderConfig((-1.0,))
    with pytest.raises(InvalidConfig):
        enc.encode_channel(np.zeros(4), 360.0, 0.0)


smooth = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=12).map(np.array)


def _smooth_signal(coefs, n=720, fs=360.0):
    t = np.arange(n) / fs
    return sum(c * np.sin(2 * np.pi * (k + 1) * 0.7 * t + k) for k, c in enumerate(coefs)) / len(coefs)


@settings(max_examples=100, deadline=None)
@given(smooth, st.floats(0.01, 0.5))
def test_reconstruction_within_delta(coefs, delta):
    fs = 360.0
    x = _smooth_signal(coefs, fs=fs)
    tr = enc.encode(SampledSignal(x, fs), enc.EncoderConfig((delta,)))
    if len(tr) == 0:
        return
    r = enc.reconstruct_at(tr, delta, x[0], tr.times)[:, 0]
    truth = np.interp(tr.times, np.arange(x.size) / fs, x)
    assert np.all(np.abs(r - truth) <= delta * (1 + 1e-9))
    assert np.all(np.diff(tr.times) >= 0)
    assert tr.times[0] >= 0 and tr.times[-1] <= tr.duration


def test_decode_examples():
    empty = EventTrain(np.empty(0), np.empty(0), np.empty(0), 1.0)
    assert np.all(enc.decode(empty, 0.5, 2.0, 10.0).samples == 2.0)
    tr = EventTrain([0.1, 0.2, 0.3, 0.4], [0] * 4, [POL_UP, POL_UP, POL_UP, POL_DOWN], 1.0)
    out = enc.decode(tr, 1.0, 0.0, 10.0).samples[:, 0]
    assert out[-1] == 2.0
    assert out[:6].tolist() == [0.0, 1.0, 2.0, 3.0, 2.0, 2.0]


def test_calibrate_ramp():
    fs = 360.0
    x = np.arange(int(20 * fs) + 1) / fs  # 1 mV/s
    cfg = enc.calibrate_delta(SampledSignal(x, fs), 10.0)
    assert cfg.delta[0] == pytest.approx(0.1, rel=0.05)


def test_calibrate_constant():
    with pytest.raises(NonMonotone):
        enc.calibrate_delta(SampledSignal(np.ones(100), 360.0), 200.0)


def test_calibrate_hits_target_on_ecg(small_corpus):
    from ecgres.wfdb_ingest import list_records, read_record

    rec = read_record(small_corpus, list_records(small_corpus)[0])
    cfg = enc.calibrate_delta(rec.signal, 200.0)
    tr = enc.encode(rec.signal, cfg)
    for c in range(rec.signal.n_channels):
        rate = np.sum(tr.channel == c) / tr.duration
        assert 190 <= rate <= 210


@settings(max_examples=30, deadline=None)
@given(smooth, st.floats(0.02, 0.4))
def test_halving_delta_never_reduces_events(coefs, delta):
    x = _smooth_signal(coefs)
    a, _ = enc.encode_channel(x, 360.0, delta)
    b, _ = enc.encode_channel(x, 360.0, delta / 2)
    assert b.size >= a.size


def test_time_shift_equivariance():
    fs = 360.0
    rng = np.random.default_rng(3)
    x = np.cumsum(rng.normal(0, 0.05, 1000))
    pad = 90
    shifted = np.concatenate([np.full(pad, x[0]), x])
    t0, p0 = enc.encode_channel(x, fs, 0.1)
    t1, p1 = enc.encode_channel(shifted, fs, 0.1)
    assert np.array_equal(p0, p1)
    np.testing.assert_allclose(t1, t0 + pad / fs, atol=1e-12)


def test_refractory_spacing():
    fs = 360.0
    x = np.sin(2 * np.pi * 5 * np.arange(720) / fs) * 3
    t, p = enc.encode_channel(x, fs, 0.05, refractory_e=0.004)
    for pol in (POL_UP, POL_DOWN):
        assert np.all(np.diff(t[p == pol]) >= 0.004 - 1e-12)


def test_aer_roundtrip(tmp_path):
    x = np.stack([np.sin(np.arange(500) / 20), np.cos(np.arange(500) / 30)], axis=1)
    tr = enc.encode(SampledSignal(x, 360.0), enc.EncoderConfig((0.05, 0.07)))
    assert len(tr) and set(np.unique(tr.channel)) == {0, 1}
    write_events(tmp_path / "e.aer", tr)
    assert (tmp_path / "e.aer").stat().st_size == 13 * len(tr)
    back = read_events(tmp_path / "e.aer")
    assert np.array_equal(back.times, tr.times)
    assert np.array_equal(back.lines, tr.lines)
    assert back.duration == tr.duration
    assert back.meta["delta"] == [0.05, 0.07]
