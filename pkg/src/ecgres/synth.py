"""Synthetic two-channel ECG records in MIT-BIH layout.

The real database cannot be shipped with the package, so this module
generates stand-in records that exercise the full pipeline: 360 Hz, two
channels, format 212 at gain 200 / baseline 1024, MIT annotation files with
beat codes for the six in-scope classes plus a sprinkling of non-beat
annotations (rhythm changes, signal-quality marks) that the reader must skip.

Beats are sums of Gaussian waves (P, Q, R, S, T and class-specific extras).
Every record draws its own "subject" morphology, heart rate and noise level,
so train/validation/test splits at record level are genuinely distinct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .wfdb_ingest import LABEL_TO_CODE, MITBIH_FS, Label

GAIN = 200.0
BASELINE = 1024
ADC_MIN, ADC_MAX = -2047, 2047
CODE_RHYTHM = 28
CODE_NOISE = 14

# (t_offset s, sigma s, amp_ch1 mV, amp_ch2 mV); offsets relative to the R peak.
# T-wave offsets are scaled with sqrt(RR) at synthesis time.
_TEMPLATES: dict[Label, dict[str, tuple[float, float, float, float]]] = {
    Label.NORMAL: {
        "P": (-0.20, 0.025, 0.15, 0.08),
        "Q": (-0.028, 0.010, -0.12, -0.05),
        "R": (0.0, 0.011, 1.20, 0.30),
        "S": (0.028, 0.010, -0.25, -0.90),
        "T": (0.28, 0.060, 0.35, 0.22),
    },
    Label.LBBB: {
        "P": (-0.22, 0.025, 0.13, 0.07),
        "R1": (-0.020, 0.020, 0.90, -0.30),
        "R2": (0.040, 0.022, 0.85, -1.10),
        "T": (0.32, 0.070, -0.30, 0.35),
    },
    Label.RBBB: {
        "P": (-0.20, 0.025, 0.15, 0.08),
        "R": (0.0, 0.012, 1.00, 0.30),
        "S": (0.050, 0.025, -0.45, -0.40),
        "R'": (0.060, 0.018, 0.05, 0.80),
        "T": (0.30, 0.065, 0.30, -0.22),
    },
    Label.PVC: {
        "R": (0.020, 0.040, 1.60, -1.30),
        "S": (0.095, 0.040, -0.60, 0.20),
        "T": (0.36, 0.080, -0.60, 0.50),
    },
    Label.PACED: {
        "spike": (-0.045, 0.0025, 1.50, 1.00),
        "Q": (0.020, 0.035, -0.80, 1.00),
        "R": (0.080, 0.030, 0.60, -0.35),
        "T": (0.36, 0.075, 0.40, -0.30),
    },
    Label.APB: {
        "P": (-0.16, 0.020, -0.12, 0.10),
        "Q": (-0.028, 0.010, -0.12, -0.05),
        "R": (0.0, 0.011, 1.20, 0.30),
        "S": (0.028, 0.010, -0.25, -0.90),
        "T": (0.27, 0.060, 0.33, 0.20),
    },
}

# episode kind -> (probability, min run, max run)
_EPISODES: dict[Label, tuple[float, int, int]] = {
    Label.NORMAL: (0.40, 30, 120),
    Label.LBBB: (0.05, 15, 60),
    Label.RBBB: (0.05, 15, 60),
    Label.PACED: (0.05, 15, 60),
    Label.PVC: (0.225, 5, 12),
    Label.APB: (0.225, 5, 12),
}
_RHYTHM_AUX = {
    Label.NORMAL: "(N",
    Label.LBBB: "(B",
    Label.RBBB: "(B",
    Label.PACED: "(P",
    Label.PVC: "(VT",
    Label.APB: "(SVTA",
}


@dataclass
class Subject:
    rr: float  # baseline RR interval, s
    hrv: float  # relative RR jitter
    waves: dict[Label, dict[str, tuple[float, float, float, float]]]
    noise_mv: float
    wander_mv: float
    wander_hz: float


def draw_subject(rng: np.random.Generator) -> Subject:
    waves = {}
    # one scale per (wave, channel) shared by every class, so the subject's
    # "electrode placement" is consistent across beat types
    ch_scale = rng.lognormal(0.0, 0.2, size=2)
    for lab, tmpl in _TEMPLATES.items():
        w = {}
        for name, (t0, sig, a1, a2) in tmpl.items():
            w[name] = (
                t0 + rng.normal(0.0, 0.004),
                sig * rng.lognormal(0.0, 0.12),
                a1 * ch_scale[0] * rng.lognormal(0.0, 0.15),
                a2 * ch_scale[1] * rng.lognormal(0.0, 0.15),
            )
        waves[lab] = w
    return Subject(
        rr=60.0 / rng.uniform(58, 92),
        hrv=rng.uniform(0.02, 0.05),
        waves=waves,
        noise_mv=rng.uniform(0.008, 0.02),
        wander_mv=rng.uniform(0.03, 0.12),
        wander_hz=rng.uniform(0.12, 0.35),
    )


def _rr_factor(prev: Label | None, cur: Label) -> float:
    if cur == Label.PVC:
        return 0.55 if prev == Label.PVC else 0.62
    if cur == Label.APB:
        return 0.66 if prev == Label.APB else 0.72
    if prev == Label.PVC:
        return 1.38  # compensatory pause
    if prev == Label.APB:
        return 1.10
    return 1.0


def _beat_sequence(rng: np.random.Generator, subj: Subject, duration: float):
    """Label sequence and R-peak times filling ``duration`` seconds."""
    kinds = list(_EPISODES)
    probs = np.array([_EPISODES[k][0] for k in kinds])
    probs = probs / probs.sum()
    labels: list[Label] = []
    times: list[float] = []
    rhythm_marks: list[tuple[float, Label]] = []
    t = 0.6
    prev: Label | None = None
    paced_rr = 60.0 / rng.uniform(68, 76)
    # every record gets one long episode of each anomaly class, spread over the first episodes
    forced = [k for k in kinds if k != Label.NORMAL]
    forced = [forced[i] for i in rng.permutation(len(forced))]
    n_ep = 0
    while t < duration - 1.0:
        if forced and n_ep % 2 == 1:
            kind = forced.pop()
            _, lo, hi = _EPISODES[kind]
            run = 24
        else:
            kind = kinds[rng.choice(len(kinds), p=probs)]
            _, lo, hi = _EPISODES[kind]
            run = int(rng.integers(lo, hi + 1))
        n_ep += 1
        rhythm_marks.append((t, kind))
        for _ in range(run):
            lab = kind
            if kind == Label.NORMAL:
                u = rng.random()
                if u < 0.02:
                    lab = Label.PVC
                elif u < 0.04:
                    lab = Label.APB
            base = paced_rr if lab == Label.PACED else subj.rr
            rr = base * _rr_factor(prev, lab) * (1.0 + subj.hrv * rng.standard_normal())
            t_next = t if not times else times[-1] + max(rr, 0.3)
            if t_next > duration - 1.0:
                break
            times.append(t_next)
            labels.append(lab)
            prev = lab
        t = times[-1] + subj.rr if times else t + subj.rr
    return labels, np.asarray(times), rhythm_marks


def synthesize_record(
    rng: np.random.Generator, duration: float, fs: float = MITBIH_FS
) -> tuple[np.ndarray, list[tuple[int, Label]], list[tuple[int, int, str]]]:
    """Return (mV samples [n, 2], beat annotations, non-beat annotations)."""
    subj = draw_subject(rng)
    labels, times, marks = _beat_sequence(rng, subj, duration)
    n = int(round(duration * fs))
    x = np.zeros((n, 2))
    tgrid = np.arange(n) / fs
    prev_rr = subj.rr
    for k, (lab, tr) in enumerate(zip(labels, times)):
        if k > 0:
            prev_rr = tr - times[k - 1]
        qt_scale = math.sqrt(max(prev_rr, 0.3) / subj.rr)
        amp_jit = rng.lognormal(0.0, 0.05)
        for name, (t0, sig, a1, a2) in subj.waves[lab].items():
            if name == "T":
                t0 = t0 * qt_scale
            c = tr + t0
            lo = max(int((c - 5 * sig) * fs), 0)
            hi = min(int((c + 5 * sig) * fs) + 2, n)
            if hi <= lo:
                continue
            g = np.exp(-0.5 * ((tgrid[lo:hi] - c) / sig) ** 2) * amp_jit
            x[lo:hi, 0] += a1 * g
            x[lo:hi, 1] += a2 * g
    phase = rng.uniform(0, 2 * np.pi, size=2)
    for j in range(2):
        x[:, j] += subj.wander_mv * np.sin(2 * np.pi * subj.wander_hz * tgrid + phase[j])
    x += subj.noise_mv * rng.standard_normal(x.shape)

    beats = [(int(round(t * fs)), lab) for t, lab in zip(times, labels)]
    other = []
    for tm, kind in marks:
        s = int(round(tm * fs)) - 5
        if 0 <= s < n:
            other.append((s, CODE_RHYTHM, _RHYTHM_AUX[kind]))
    for _ in range(max(1, int(duration // 300))):
        other.append((int(rng.integers(0, n)), CODE_NOISE, ""))
    return x, beats, other


# ---------------------------------------------------------------------------
# Writers (synthetic-corpus generation only)
# ---------------------------------------------------------------------------


def to_adc(x_mv: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x_mv * GAIN) + BASELINE, ADC_MIN, ADC_MAX).astype(np.int16)


def pack_212(adc: np.ndarray) -> bytes:
    """Pack interleaved 12-bit samples (row-major ``[n, ch]``) into format 212."""
    flat = np.asarray(adc, dtype=np.int32).ravel()
    if flat.size % 2:
        flat = np.concatenate([flat, [0]])
    u = flat & 0xFFF
    a, b = u[0::2], u[1::2]
    out = np.empty((a.size, 3), dtype=np.uint8)
    out[:, 0] = a & 0xFF
    out[:, 1] = ((a >> 8) & 0x0F) | (((b >> 8) & 0x0F) << 4)
    out[:, 2] = b & 0xFF
    raw = out.tobytes()
    n_bytes = math.ceil(np.asarray(adc).size * 1.5)
    return raw[:n_bytes]


def header_text(name: str, adc: np.ndarray, fs: float = MITBIH_FS, descs=("MLII", "V1")) -> str:
    n, n_ch = adc.shape
    lines = [f"{name} {n_ch} {fs:g} {n}"]
    for j in range(n_ch):
        col = adc[:, j].astype(np.int64)
        checksum = int(col.sum()) & 0xFFFF
        if checksum >= 32768:
            checksum -= 65536
        lines.append(
            f"{name}.dat 212 {GAIN:g} 11 {BASELINE} {int(col[0])} {checksum} 0 {descs[j % len(descs)]}"
        )
    lines.append("# synthetic record (ecgres.synth)")
    return "\n".join(lines) + "\n"


def pack_annotations(entries: list[tuple[int, int, str]]) -> bytes:
    """MIT-format annotation bytes from ``(sample, code, aux)`` entries."""
    words: list[int] = []
    last = 0
    for sample, code, aux in sorted(entries, key=lambda e: (e[0], e[1])):
        delta = sample - last
        if delta < 0:
            raise ValueError("annotations must be sorted")
        if delta > 1023:
            words.append(59 << 10)
            words.append((delta >> 16) & 0xFFFF)
            words.append(delta & 0xFFFF)
            delta = 0
        words.append((code << 10) | delta)
        if aux:
            raw = aux.encode("latin-1")
            words.append((63 << 10) | len(raw))
            if len(raw) % 2:
                raw += b"\x00"
            words.extend(int.from_bytes(raw[i : i + 2], "little") for i in range(0, len(raw), 2))
        last = sample
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


def write_record(out_dir: str | Path, name: str, x_mv: np.ndarray, beats, other=()) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    adc = to_adc(x_mv)
    (d / f"{name}.hea").write_text(header_text(name, adc))
    (d / f"{name}.dat").write_bytes(pack_212(adc))
    entries = [(s, LABEL_TO_CODE[lab], "") for s, lab in beats] + list(other)
    (d / f"{name}.atr").write_bytes(pack_annotations(entries))


def make_corpus(out_dir: str | Path, n_records: int, duration: float, seed: int) -> list[str]:
    """Write ``n_records`` synthetic records named 500, 501, ... into ``out_dir``."""
    names = []
    for k in range(n_records):
        rng = np.random.default_rng([seed, k])
        x, beats, other = synthesize_record(rng, duration)
        name = str(500 + k)
        write_record(out_dir, name, x, beats, other)
        names.append(name)
    return names
