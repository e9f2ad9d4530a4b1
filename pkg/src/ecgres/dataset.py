"""Heartbeat segmentation and stream assembly.

Training streams are random draws of single beats; validation and test
streams are random concatenations of 5-10-beat contiguous segments.  Both
follow the beat/segment counts of the original experiment by default and can
be scaled down (``scaled_*`` helpers) for quick runs.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyClassPool, InsufficientSegments
from .wfdb_ingest import (
    ANOMALIES,
    IN_SCOPE,
    BeatAnnotation,
    Label,
    Record,
    SampledSignal,
)

SEG_MIN, SEG_MAX = 5, 10

TRAIN_COUNTS: dict[Label, int] = {Label.NORMAL: 22500, **{a: 1500 for a in ANOMALIES}}

# label -> (n_segments, n_beats); Normal has no segment target.
VALIDATION_RECIPE: dict[Label, tuple[int | None, int]] = {
    Label.NORMAL: (None, 2315),
    Label.LBBB: (24, 175),
    Label.RBBB: (22, 176),
    Label.PVC: (22, 154),
    Label.PACED: (21, 153),
    Label.APB: (22, 168),
}
TEST_RECIPE: dict[Label, tuple[int | None, int]] = {
    Label.NORMAL: (None, 1569),
    Label.LBBB: (15, 104),
    Label.RBBB: (17, 103),
    Label.PVC: (14, 100),
    Label.PACED: (16, 98),
    Label.APB: (14, 104),
}


@dataclass
class Beat:
    record_name: str
    label: Label
    samples: np.ndarray
    source_span: tuple[int, int]
    ordinal: int = 0  # position among all beat annotations of the record

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class Segment:
    beats: list[Beat]
    label: Label

    @property
    def record_name(self) -> str:
        return self.beats[0].record_name

    @property
    def source_span(self) -> tuple[int, int]:
        return self.beats[0].source_span[0], self.beats[-1].source_span[1]


@dataclass(frozen=True)
class Interval:
    start_s: float
    end_s: float
    label: Label
    unit_kind: str  # "beat" | "segment"
    unit_id: int
    n_beats: int = 1
    record: str = ""
    src_start: int = 0
    src_end: int = 0
    start_idx: int = 0
    end_idx: int = 0


@dataclass
class LabeledStream:
    signal: SampledSignal
    intervals: list[Interval] = field(default_factory=list)
    unit_kind: str = "beat"

    @property
    def duration(self) -> float:
        return self.signal.duration

    def beat_counts(self) -> dict[Label, int]:
        out = {lab: 0 for lab in IN_SCOPE}
        for iv in self.intervals:
            out[iv.label] += iv.n_beats
        return out

    def segment_counts(self) -> dict[Label, int]:
        out = {lab: 0 for lab in ANOMALIES}
        for iv in self.intervals:
            if iv.unit_kind == "segment":
                out[iv.label] += 1
        return out

    def normal_duration(self) -> float:
        return sum(iv.end_s - iv.start_s for iv in self.intervals if iv.label == Label.NORMAL)

    def sources(self) -> set[tuple[str, int, int]]:
        return {(iv.record, iv.src_start, iv.src_end) for iv in self.intervals}


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def beat_bounds(annotations: Sequence[BeatAnnotation], n_samples: int) -> list[tuple[int, int]]:
    """Midpoint-to-midpoint spans for every annotation, clamped to the record."""
    idx = [a.sample_index for a in annotations]
    spans = []
    for k, s in enumerate(idx):
        start = 0 if k == 0 else (idx[k - 1] + s) // 2
        end = n_samples if k == len(idx) - 1 else (s + idx[k + 1]) // 2
        spans.append((start, end))
    return spans


def segment_beats(
    signal: SampledSignal, annotations: Sequence[BeatAnnotation], record_name: str = ""
) -> list[Beat]:
    spans = beat_bounds(annotations, signal.n_samples)
    beats = []
    for k, (ann, (a, b)) in enumerate(zip(annotations, spans)):
        if ann.label not in IN_SCOPE or b <= a:
            continue
        beats.append(Beat(record_name, ann.label, signal.samples[a:b], (a, b), k))
    return beats


def record_beats(records: Iterable[Record]) -> list[Beat]:
    out = []
    for rec in records:
        out.extend(segment_beats(rec.signal, rec.annotations, rec.name))
    return out


def split_records(
    names: Sequence[str], seed: int, fractions=(0.5, 0.25, 0.25)
) -> dict[str, list[str]]:
    """Seeded record-level train/validation/test split (each part non-empty when possible)."""
    names = sorted(names)
    rng = np.random.default_rng(seed)
    order = [names[i] for i in rng.permutation(len(names))]
    n = len(order)
    if n < 3:
        raise InsufficientSegments(f"need at least 3 records for a 3-way split, got {n}")
    n_val = max(1, int(round(fractions[1] * n)))
    n_test = max(1, int(round(fractions[2] * n)))
    n_train = max(1, n - n_val - n_test)
    n_val = n - n_train - n_test
    return {
        "train": sorted(order[:n_train]),
        "validation": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


# ---------------------------------------------------------------------------
# Concatenation
# ---------------------------------------------------------------------------


def _concatenate(pieces: list[np.ndarray]) -> list[np.ndarray]:
    """DC-align each piece to the end of the previous one."""
    out = []
    prev_last = None
    for p in pieces:
        q = np.array(p, dtype=np.float64, copy=True)
        if prev_last is not None:
            q -= q[0] - prev_last
        out.append(q)
        prev_last = q[-1]
    return out


def _build_stream(units: list[tuple[Label, list[Beat], str]], fs: float, unit_kind: str) -> LabeledStream:
    """units: (label, beats, kind) with kind "segment" or "beats"."""
    pieces = [np.concatenate([b.samples for b in beats]) for _, beats, _ in units]
    aligned = _concatenate(pieces)
    intervals = []
    pos = 0
    uid = 0
    for (lab, beats, kind), piece in zip(units, aligned):
        if kind == "segment":
            n = piece.shape[0]
            intervals.append(
                Interval(
                    pos / fs, (pos + n) / fs, lab, "segment", uid, len(beats),
                    beats[0].record_name, beats[0].source_span[0], beats[-1].source_span[1],
                    pos, pos + n,
                )
            )
            uid += 1
            pos += n
        else:
            for b in beats:
                n = len(b)
                intervals.append(
                    Interval(
                        pos / fs, (pos + n) / fs, lab, "beat", uid, 1,
                        b.record_name, b.source_span[0], b.source_span[1], pos, pos + n,
                    )
                )
                uid += 1
                pos += n
    samples = np.concatenate(aligned) if aligned else np.zeros((0, 2))
    return LabeledStream(SampledSignal(samples, fs), intervals, unit_kind)


# ---------------------------------------------------------------------------
# Training stream
# ---------------------------------------------------------------------------


def scaled_counts(total: int) -> dict[Label, int]:
    """75 % Normal, 5 % per anomaly, summing exactly to ``total``."""
    each = int(round(0.05 * total))
    counts = {a: each for a in ANOMALIES}
    counts[Label.NORMAL] = total - each * len(ANOMALIES)
    return {Label.NORMAL: counts[Label.NORMAL], **{a: counts[a] for a in ANOMALIES}}


def assemble_training_stream(
    beats: Sequence[Beat],
    rng_seed: int,
    counts: dict[Label, int] | None = None,
    fs: float = 360.0,
) -> LabeledStream:
    counts = dict(TRAIN_COUNTS if counts is None else counts)
    rng = np.random.default_rng(rng_seed)
    pools: dict[Label, list[Beat]] = defaultdict(list)
    for b in beats:
        pools[b.label].append(b)
    drawn: list[Beat] = []
    for lab, n in counts.items():
        if n <= 0:
            continue
        pool = pools.get(lab, [])
        if not pool:
            raise EmptyClassPool(f"no {lab.value} beats available")
        replace = len(pool) < n
        idx = rng.choice(len(pool), size=n, replace=replace)
        drawn.extend(pool[i] for i in idx)
    order = rng.permutation(len(drawn))
    units = [(drawn[i].label, [drawn[i]], "beats") for i in order]
    return _build_stream(units, fs, "beat")


# ---------------------------------------------------------------------------
# Validation / test streams
# ---------------------------------------------------------------------------


def _runs(beats: Sequence[Beat]) -> list[list[Beat]]:
    """Maximal runs of consecutive same-label beats from one record."""
    runs: list[list[Beat]] = []
    for b in beats:
        if (
            runs
            and runs[-1][-1].record_name == b.record_name
            and runs[-1][-1].label == b.label
            and runs[-1][-1].ordinal + 1 == b.ordinal
        ):
            runs[-1].append(b)
        else:
            runs.append([b])
    return runs


def _segment_lengths(rng: np.random.Generator, n_segments: int | None, n_beats: int | None) -> list[int]:
    if n_segments is None and n_beats is None:
        return []
    if n_beats is None:
        return [int(v) for v in rng.integers(SEG_MIN, SEG_MAX + 1, size=n_segments)]
    if n_segments is None:
        lo, hi = -(-n_beats // SEG_MAX), n_beats // SEG_MIN
        if lo > hi:
            raise InsufficientSegments(f"cannot split {n_beats} beats into 5-10 beat segments")
        target = int(round(n_beats / ((SEG_MIN + SEG_MAX) / 2)))
        n_segments = min(max(target, lo), hi)
    if not n_segments * SEG_MIN <= n_beats <= n_segments * SEG_MAX:
        raise InsufficientSegments(f"{n_beats} beats cannot form {n_segments} segments of 5-10 beats")
    lengths = [SEG_MIN] * n_segments
    extra = n_beats - SEG_MIN * n_segments
    while extra:
        room = [i for i, x in enumerate(lengths) if x < SEG_MAX]
        lengths[room[int(rng.integers(len(room)))]] += 1
        extra -= 1
    return lengths


def _carve_once(rng, runs, lengths, packed: bool):
    # free windows: (run index, start, end) in beat positions
    free = [(i, 0, len(r)) for i, r in enumerate(runs)]
    out = []
    for L in sorted(lengths, reverse=True):
        fits = [k for k, (_, a, b) in enumerate(free) if b - a >= L]
        if not fits:
            return None, L
        k = fits[int(rng.integers(len(fits)))]
        ri, a, b = free.pop(k)
        off = a if packed else a + int(rng.integers(0, b - a - L + 1))
        out.append((ri, off, L))
        if off - a > 0:
            free.append((ri, a, off))
        if b - (off + L) > 0:
            free.append((ri, off + L, b))
    return out, None


def _carve(rng: np.random.Generator, runs: list[list[Beat]], lengths: list[int], label: Label,
           attempts: int = 20) -> list[Segment]:
    """Non-overlapping windows of the requested lengths inside same-label runs.

    Random placements are retried a few times; a left-packed placement is the
    last resort before giving up.
    """
    missing = None
    for i in range(attempts + 1):
        placed, missing = _carve_once(rng, runs, lengths, packed=i == attempts)
        if placed is not None:
            return [Segment(runs[ri][off : off + L], label) for ri, off, L in placed]
    raise InsufficientSegments(f"not enough contiguous {label.value} beats for a {missing}-beat segment")


def assemble_eval_stream(
    records: Sequence[Record],
    rng_seed: int,
    recipe: dict[Label, tuple[int | None, int | None]] | None = None,
    which: str = "validation",
    fs: float = 360.0,
) -> LabeledStream:
    """Random concatenation of contiguous 5-10 beat segments.

    Anomalous segments become one ``segment`` interval each; normal segments
    are split into per-beat intervals because false positives are charged per
    normal beat.
    """
    if recipe is None:
        recipe = TEST_RECIPE if which == "test" else VALIDATION_RECIPE
    rng = np.random.default_rng(rng_seed)
    beats = record_beats(records)
    runs_by_label: dict[Label, list[list[Beat]]] = defaultdict(list)
    for run in _runs(beats):
        if len(run) >= SEG_MIN:
            runs_by_label[run[0].label].append(run)

    segments: list[Segment] = []
    for lab in IN_SCOPE:
        n_seg, n_beats = recipe.get(lab, (0, 0))
        if lab != Label.NORMAL and not n_seg:
            continue
        if lab == Label.NORMAL and not n_beats:
            continue
        lengths = _segment_lengths(rng, n_seg, n_beats)
        segments.extend(_carve(rng, runs_by_label.get(lab, []), lengths, lab))

    order = rng.permutation(len(segments))
    units = []
    for i in order:
        seg = segments[i]
        kind = "beats" if seg.label == Label.NORMAL else "segment"
        units.append((seg.label, seg.beats, kind))
    return _build_stream(units, fs, "segment")


def scaled_eval_recipe(n_segments_per_anomaly: int, normal_fraction: float = 0.75, mean_len: float = 7.5):
    """Recipe with a fixed number of anomalous segments per class (lengths random)."""
    anomalous_beats = n_segments_per_anomaly * len(ANOMALIES) * mean_len
    normal = int(round(anomalous_beats * normal_fraction / (1 - normal_fraction)))
    recipe: dict[Label, tuple[int | None, int | None]] = {Label.NORMAL: (None, normal)}
    for a in ANOMALIES:
        recipe[a] = (n_segments_per_anomaly, None)
    return recipe


# ---------------------------------------------------------------------------
# Stream files
# ---------------------------------------------------------------------------

_CSV_FIELDS = [
    "start_s", "end_s", "label", "unit_kind", "unit_id",
    "n_beats", "record", "src_start", "src_end", "start_idx", "end_idx",
]


def save_stream(stream: LabeledStream, out_dir: str | Path, name: str) -> dict[str, Path]:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    sig = d / f"{name}.bin"
    meta = d / f"{name}.json"
    ivs = d / f"{name}.intervals.csv"
    sig.write_bytes(np.ascontiguousarray(stream.signal.samples, dtype="<f8").tobytes())
    meta.write_text(
        json.dumps(
            {
                "sampling_rate": stream.signal.sampling_rate,
                "n_samples": stream.signal.n_samples,
                "n_channels": stream.signal.n_channels,
                "dtype": "<f8",
                "unit_kind": stream.unit_kind,
            },
            indent=2,
        )
    )
    with open(ivs, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CSV_FIELDS)
        for iv in stream.intervals:
            w.writerow(
                [repr(iv.start_s), repr(iv.end_s), iv.label.value, iv.unit_kind, iv.unit_id,
                 iv.n_beats, iv.record, iv.src_start, iv.src_end, iv.start_idx, iv.end_idx]
            )
    return {"signal": sig, "meta": meta, "intervals": ivs}


def load_intervals(path: str | Path) -> list[Interval]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                Interval(
                    float(row["start_s"]), float(row["end_s"]), Label(row["label"]),
                    row["unit_kind"], int(row["unit_id"]), int(row.get("n_beats") or 1),
                    row.get("record", ""), int(row.get("src_start") or 0), int(row.get("src_end") or 0),
                    int(row.get("start_idx") or 0), int(row.get("end_idx") or 0),
                )
            )
    return out


def load_stream(in_dir: str | Path, name: str) -> LabeledStream:
    d = Path(in_dir)
    meta = json.loads((d / f"{name}.json").read_text())
    raw = np.frombuffer((d / f"{name}.bin").read_bytes(), dtype=meta["dtype"])
    samples = raw.reshape(meta["n_samples"], meta["n_channels"]).astype(np.float64)
    return LabeledStream(
        SampledSignal(samples, meta["sampling_rate"]),
        load_intervals(d / f"{name}.intervals.csv"),
        meta.get("unit_kind", "beat"),
    )


def load_signal(path: str | Path) -> SampledSignal:
    """Signal from a ``<name>.bin`` stream file (meta read from the sibling ``.json``)."""
    p = Path(path)
    meta = json.loads(p.with_suffix(".json").read_text())
    raw = np.frombuffer(p.read_bytes(), dtype=meta["dtype"])
    return SampledSignal(raw.reshape(meta["n_samples"], meta["n_channels"]), meta["sampling_rate"])
