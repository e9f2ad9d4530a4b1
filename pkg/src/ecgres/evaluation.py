"""Detection metrics: segment-level positives, beat-level negatives.

An anomalous segment is a true positive when any readout unit is above its
threshold at any sample inside it, whatever the unit's own class.  A normal
beat is a false positive when any unit fires inside it.  Per-class tables
charge a normal beat to class ``i`` only when unit ``i`` itself fires there,
so the per-class false positives add up to (at least) the overall count.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Interval
from .readout import DEFAULT_PERIOD, interval_max
from .wfdb_ingest import ANOMALIES, Label

CLASS_NAMES = {
    Label.LBBB: "Left bundle branch block beat",
    Label.RBBB: "Right bundle branch block beat",
    Label.PVC: "Premature ventricular contraction",
    Label.PACED: "Paced beat",
    Label.APB: "Atrial premature beat",
}

# Overall detection percentage quoted in the running text differs from the table.
TEXT_VS_TABLE_NOTE = "Reference figures are the tabulated ones (overall sensitivity 92.11 %); the prose quotes 91.3 %."


@dataclass(frozen=True)
class Counts:
    tp: int
    fn: int
    tn: int
    fp: int


@dataclass
class ConfusionCounts:
    overall: Counts
    per_class: dict[str, Counts]
    normal_duration: float = 0.0

    def to_dict(self) -> dict:
        return {
            "overall": asdict(self.overall),
            "per_class": {k: asdict(v) for k, v in self.per_class.items()},
            "normal_duration": self.normal_duration,
        }


@dataclass(frozen=True)
class MetricReport:
    sensitivity: float | None
    specificity: float | None
    ppv: float | None
    npv: float | None
    mtbfp: float | None

    def to_dict(self) -> dict:
        # JSON has no infinity; an unbounded MTBFP is written as the string "inf"
        return {k: ("inf" if v == math.inf else v) for k, v in asdict(self).items()}


def _ratio(a: int, b: int) -> float | None:
    return a / b if b else None


def compute_metrics(c: Counts, normal_duration: float) -> MetricReport:
    """Sensitivity, specificity, PPV, NPV (``None`` when 0/0) and MTBFP in seconds."""
    if c.fp:
        mtbfp = normal_duration / c.fp
    else:
        mtbfp = math.inf if (c.tn or normal_duration > 0) else None
    return MetricReport(
        _ratio(c.tp, c.tp + c.fn),
        _ratio(c.tn, c.tn + c.fp),
        _ratio(c.tp, c.tp + c.fp),
        _ratio(c.tn, c.tn + c.fn),
        mtbfp,
    )


def count_from_exceedance(exceed: np.ndarray, intervals: Sequence[Interval],
                          classes: Sequence[Label] = ANOMALIES) -> ConfusionCounts:
    """Tally outcomes from a boolean ``[n_intervals, n_units]`` exceedance table."""
    exceed = np.asarray(exceed, dtype=bool).reshape(len(intervals), -1)
    any_unit = exceed.any(axis=1)
    labels = [iv.label for iv in intervals]
    seg = np.array([iv.unit_kind == "segment" and iv.label != Label.NORMAL for iv in intervals], dtype=bool)
    normal = np.array([lab == Label.NORMAL for lab in labels], dtype=bool)
    n_normal = int(normal.sum())
    overall = Counts(
        tp=int((seg & any_unit).sum()),
        fn=int((seg & ~any_unit).sum()),
        tn=int((normal & ~any_unit).sum()),
        fp=int((normal & any_unit).sum()),
    )
    per = {}
    for i, lab in enumerate(classes):
        own = seg & np.array([l == lab for l in labels], dtype=bool)
        fp_i = int((normal & exceed[:, i]).sum())
        per[lab.value] = Counts(int((own & any_unit).sum()), int((own & ~any_unit).sum()), n_normal - fp_i, fp_i)
    dur = sum(iv.end_s - iv.start_s for iv, m in zip(intervals, normal) if m)
    return ConfusionCounts(overall, per, dur)


def count_outcomes(scores: np.ndarray, thresholds: np.ndarray, intervals: Sequence[Interval],
                   sample_period: float = DEFAULT_PERIOD) -> ConfusionCounts:
    """Counts from per-sample unit scores; raises CoverageGap if an interval lies outside the scores."""
    mx = interval_max(scores, intervals, sample_period)
    return count_from_exceedance(mx > np.asarray(thresholds), intervals)


def metrics_table(cc: ConfusionCounts) -> dict:
    rows = {}
    for lab in ANOMALIES:
        rows[lab.value] = compute_metrics(cc.per_class[lab.value], cc.normal_duration).to_dict()
    rows["Overall"] = compute_metrics(cc.overall, cc.normal_duration).to_dict()
    return rows


def _fmt(v, pct=True) -> str:
    if v is None:
        return "undefined"
    if v == "inf" or v == math.inf:
        return "inf"
    return f"{100 * v:.2f}" if pct else f"{v:.1f}"


def format_table(cc: ConfusionCounts) -> str:
    """Plain-text table: one row per anomaly plus the overall row."""
    rows = metrics_table(cc)
    head = f"{'Anomaly type':<36}{'Sens %':>10}{'Spec %':>10}{'PPV %':>10}{'NPV %':>10}{'MTBFP s':>10}"
    lines = [head, "-" * len(head)]
    for key, m in rows.items():
        name = CLASS_NAMES.get(Label(key), key) if key != "Overall" else "Overall"
        lines.append(
            f"{name:<36}{_fmt(m['sensitivity']):>10}{_fmt(m['specificity']):>10}"
            f"{_fmt(m['ppv']):>10}{_fmt(m['npv']):>10}{_fmt(m['mtbfp'], pct=False):>10}"
        )
    return "\n".join(lines)


def write_metrics(path: str | Path, cc: ConfusionCounts, extra: dict | None = None) -> dict:
    doc = {"counts": cc.to_dict(), "metrics": metrics_table(cc), "note": TEXT_VS_TABLE_NOTE, **(extra or {})}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
