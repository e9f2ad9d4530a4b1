"""Readers for MIT-BIH Arrhythmia Database records.

Three WFDB file kinds are handled:

* ``.hea`` text headers (record line + one line per signal),
* ``.dat`` signal files in format 212 (two 12-bit two's-complement samples
  packed into three bytes),
* ``.atr`` annotation files in the MIT binary format (16-bit words holding a
  6-bit type code and a 10-bit time delta, plus SKIP/NUM/SUB/CHN/AUX
  pseudo-annotations).

Only what the MIT-BIH Arrhythmia records need is supported; multi-segment
records and other storage formats raise :class:`UnsupportedFormat`.
"""

from __future__ import annotations

import enum
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatMismatch,
    MalformedAnnotation,
    MalformedHeader,
    TruncatedSignal,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

MITBIH_FS = 360.0
MITBIH_CHANNELS = 2
DEFAULT_GAIN = 200.0


class Label(str, enum.Enum):
    NORMAL = "Normal"
    LBBB = "LBBB"
    RBBB = "RBBB"
    PVC = "PVC"
    PACED = "Paced"
    APB = "APB"
    OTHER = "Other"


# Table order used everywhere a per-anomaly vector is laid out.
ANOMALIES: tuple[Label, ...] = (Label.LBBB, Label.RBBB, Label.PVC, Label.PACED, Label.APB)
IN_SCOPE: tuple[Label, ...] = (Label.NORMAL,) + ANOMALIES

# WFDB annotation codes (ecgcodes.h).
CODE_NORMAL, CODE_LBBB, CODE_RBBB, CODE_PVC, CODE_APC, CODE_PACE = 1, 2, 3, 5, 8, 12
# Codes that mark a QRS complex (WFDB isqrs table).
BEAT_CODES = frozenset({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 25, 30, 34, 35, 38, 41})
_CODE_TO_LABEL = {
    CODE_NORMAL: Label.NORMAL,
    CODE_LBBB: Label.LBBB,
    CODE_RBBB: Label.RBBB,
    CODE_PVC: Label.PVC,
    CODE_PACE: Label.PACED,
    CODE_APC: Label.APB,
}
LABEL_TO_CODE = {lab: code for code, lab in _CODE_TO_LABEL.items()}

# Pseudo-annotation codes of the MIT format.
_ACMAX = 49
_SKIP, _NUM, _SUB, _CHN, _AUX = 59, 60, 61, 62, 63


def label_for_code(code: int) -> Label:
    return _CODE_TO_LABEL.get(code, Label.OTHER)


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelSpec:
    file_name: str
    fmt: int
    gain: float  # ADC units per physical unit (mV)
    baseline: int
    byte_offset: int = 0
    adc_resolution: int = 12
    adc_zero: int = 0
    init_value: int | None = None
    checksum: int | None = None
    units: str = "mV"
    description: str = ""


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_channels: int
    sampling_rate: float
    n_samples: int
    channels: tuple[ChannelSpec, ...] = ()
    comments: tuple[str, ...] = ()

    @property
    def gains(self) -> tuple[float, ...]:
        return tuple(c.gain for c in self.channels)

    @property
    def baselines(self) -> tuple[int, ...]:
        return tuple(c.baseline for c in self.channels)

    @property
    def formats(self) -> tuple[int, ...]:
        return tuple(c.fmt for c in self.channels)

    def check_mitbih(self) -> None:
        """Raise :class:`FormatMismatch` unless the header has MIT-BIH layout."""
        if self.n_channels != MITBIH_CHANNELS:
            raise FormatMismatch(f"{self.record_name}: expected 2 channels, got {self.n_channels}")
        if self.sampling_rate != MITBIH_FS:
            raise FormatMismatch(f"{self.record_name}: expected 360 Hz, got {self.sampling_rate}")


@dataclass
class SampledSignal:
    """Physical samples, shape ``(n_samples, n_channels)``, in mV."""

    samples: np.ndarray
    sampling_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sampling_rate


@dataclass(frozen=True)
class BeatAnnotation:
    sample_index: int
    label: Label
    code: int = 0


@dataclass(frozen=True)
class RawAnnotation:
    """Every annotation in a file, beat or not (used for oracle comparisons)."""

    sample_index: int
    code: int
    subtype: int = 0
    chan: int = 0
    num: int = 0
    aux: str = ""


@dataclass
class Record:
    header: RecordHeader
    signal: SampledSignal
    annotations: list[BeatAnnotation] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.header.record_name


# ---------------------------------------------------------------------------
# Header
# ---------------------------------------------------------------------------

_FMT_RE = re.compile(r"^(\d+)(?:x(\d+))?(?::(\d+))?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\((-?\d+)\))?(?:/(\S+))?$")


def _to_text(data: bytes | str) -> str:
    if isinstance(data, str):
        return data
    return data.decode("ascii", errors="replace")


def parse_header(data: bytes | str) -> RecordHeader:
    """Parse the text of a WFDB ``.hea`` file."""
    lines = []
    comments = []
    for raw in _to_text(data).splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        lines.append(line)
    if not lines:
        raise MalformedHeader("no record line")

    rec = lines[0].split()
    if len(rec) < 2:
        raise MalformedHeader(f"record line too short: {lines[0]!r}")
    name = rec[0]
    if "/" in name:
        raise UnsupportedFormat(f"multi-segment record {name!r}")
    try:
        n_channels = int(rec[1])
    except ValueError as exc:
        raise MalformedHeader(f"bad signal count {rec[1]!r}") from exc
    if n_channels <= 0:
        raise MalformedHeader(f"record declares {n_channels} signals")

    fs = 250.0  # WFDB default
    n_samples = 0
    try:
        if len(rec) > 2:
            fs = float(rec[2].split("/")[0].split("(")[0])
        if len(rec) > 3:
            n_samples = int(rec[3])
    except ValueError as exc:
        raise MalformedHeader(f"bad record line {lines[0]!r}") from exc
    if fs <= 0:
        raise MalformedHeader(f"non-positive sampling rate {fs}")

    sig_lines = lines[1 : 1 + n_channels]
    if len(sig_lines) < n_channels:
        raise MalformedHeader(f"expected {n_channels} signal lines, found {len(sig_lines)}")
    channels = tuple(_parse_signal_line(s) for s in sig_lines)
    return RecordHeader(
        record_name=name,
        n_channels=n_channels,
        sampling_rate=fs,
        n_samples=n_samples,
        channels=channels,
        comments=tuple(comments),
    )


def _parse_signal_line(line: str) -> ChannelSpec:
    parts = line.split(maxsplit=8)
    if len(parts) < 2:
        raise MalformedHeader(f"signal line too short: {line!r}")
    m = _FMT_RE.match(parts[1])
    if not m:
        raise MalformedHeader(f"bad format field {parts[1]!r}")
    fmt = int(m.group(1))
    if fmt != 212:
        raise UnsupportedFormat(f"format {fmt} (only 212 is supported)")
    if m.group(2) not in (None, "1"):
        raise UnsupportedFormat("multi-frequency records are not supported")
    if m.group(3) not in (None, "0"):
        raise UnsupportedFormat("signal skew is not supported")
    offset = int(m.group(4) or 0)

    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    adcres, adczero = 12, 0
    init = checksum = None
    desc = ""
    try:
        if len(parts) > 2:
            g = _GAIN_RE.match(parts[2])
            if not g:
                raise MalformedHeader(f"bad gain field {parts[2]!r}")
            gain = float(g.group(1)) or DEFAULT_GAIN
            if g.group(2) is not None:
                baseline = int(g.group(2))
            if g.group(3):
                units = g.group(3)
        if len(parts) > 3:
            adcres = int(parts[3]) or 12
        if len(parts) > 4:
            adczero = int(parts[4])
        if len(parts) > 5:
            init = int(parts[5])
        if len(parts) > 6:
            checksum = int(parts[6])
        # parts[7] is the block size, unused for 212
        if len(parts) > 8:
            desc = parts[8]
    except ValueError as exc:
        raise MalformedHeader(f"bad signal line {line!r}") from exc
    if gain <= 0:
        raise MalformedHeader(f"non-positive gain in {line!r}")
    return ChannelSpec(
        file_name=parts[0],
        fmt=fmt,
        gain=gain,
        baseline=adczero if baseline is None else baseline,
        byte_offset=offset,
        adc_resolution=adcres,
        adc_zero=adczero,
        init_value=init,
        checksum=checksum,
        units=units,
        description=desc,
    )


# ---------------------------------------------------------------------------
# Format 212 signal
# ---------------------------------------------------------------------------


def decode_212(data: bytes, n_values: int) -> np.ndarray:
    """Unpack ``n_values`` 12-bit samples from a format-212 byte buffer."""
    need = math.ceil(n_values * 1.5)
    if len(data) < need:
        raise TruncatedSignal(f"need {need} bytes for {n_values} samples, have {len(data)}")
    n_pairs = (n_values + 1) // 2
    raw = np.frombuffer(data, dtype=np.uint8, count=min(len(data), n_pairs * 3))
    if raw.size < n_pairs * 3:  # odd count: last triplet only has two bytes
        raw = np.concatenate([raw, np.zeros(n_pairs * 3 - raw.size, np.uint8)])
    b = raw.reshape(-1, 3).astype(np.int32)
    out = np.empty(n_pairs * 2, dtype=np.int32)
    out[0::2] = b[:, 0] | ((b[:, 1] & 0x0F) << 8)
    out[1::2] = b[:, 2] | ((b[:, 1] & 0xF0) << 4)
    out[out > 2047] -= 4096
    return out[:n_values].astype(np.int16)


def read_adc_212(data: bytes, header: RecordHeader) -> np.ndarray:
    """Digital samples ``(n_samples, n_channels)`` exactly as stored."""
    chans = header.channels
    if len({c.file_name for c in chans}) != 1:
        raise FormatMismatch("all channels must share one signal file")
    if any(c.fmt != 212 for c in chans):
        raise UnsupportedFormat("only format 212 is supported")
    if len({c.byte_offset for c in chans}) != 1:
        raise FormatMismatch("channels disagree on byte offset")
    payload = bytes(data)[chans[0].byte_offset :]
    n_ch = header.n_channels
    n_samples = header.n_samples or (len(payload) * 2 // 3) // n_ch
    adc = decode_212(payload, n_samples * n_ch).reshape(n_samples, n_ch)
    for j, c in enumerate(chans):
        if c.checksum is not None:
            got = int(adc[:, j].astype(np.int64).sum()) & 0xFFFF
            if got != (c.checksum & 0xFFFF):
                log.warning("channel %d checksum mismatch (%d != %d)", j, got, c.checksum)
    return adc


def adc_to_physical(adc: np.ndarray, header: RecordHeader) -> np.ndarray:
    gains = np.asarray(header.gains, dtype=np.float64)
    base = np.asarray(header.baselines, dtype=np.float64)
    return (adc.astype(np.float64) - base) / gains


def parse_signal_212(data: bytes, header: RecordHeader) -> SampledSignal:
    adc = read_adc_212(data, header)
    return SampledSignal(adc_to_physical(adc, header), header.sampling_rate)


# ---------------------------------------------------------------------------
# MIT annotations
# ---------------------------------------------------------------------------


def read_raw_annotations(data: bytes) -> list[RawAnnotation]:
    """Decode every annotation in an MIT-format byte stream."""
    buf = bytes(data)
    if len(buf) % 2:
        buf = buf[:-1]
    words = np.frombuffer(buf, dtype="<u2")
    out: list[RawAnnotation] = []
    t = 0
    subtype = chan = num = 0
    pending: dict | None = None
    i = 0
    n = words.size

    def flush():
        if pending is not None:
            out.append(RawAnnotation(**pending))

    while i < n:
        w = int(words[i])
        code, val = w >> 10, w & 0x3FF
        i += 1
        if w == 0:
            break
        if code == _SKIP:
            if i + 2 > n:
                raise MalformedAnnotation("truncated SKIP")
            hi, lo = int(words[i]), int(words[i + 1])
            i += 2
            skip = (hi << 16) | lo
            if skip >= 1 << 31:
                skip -= 1 << 32
            t += skip
            if t < 0:
                raise MalformedAnnotation("SKIP moves before the start of the record")
            continue
        if code == _NUM:
            num = val - 1024 if val > 511 else val
            if pending is not None:
                pending["num"] = num
            continue
        if code == _SUB:
            subtype = val - 1024 if val > 511 else val
            if pending is not None:
                pending["subtype"] = subtype
            continue
        if code == _CHN:
            chan = val
            if pending is not None:
                pending["chan"] = chan
            continue
        if code == _AUX:
            nbytes = val
            nwords = (nbytes + 1) // 2
            if i + nwords > n:
                raise MalformedAnnotation("AUX string runs past end of file")
            text = words[i : i + nwords].tobytes()[:nbytes]
            i += nwords
            if pending is None:
                raise MalformedAnnotation("AUX before any annotation")
            pending["aux"] = text.decode("latin-1").rstrip("\x00")
            continue
        if code > _ACMAX:
            raise MalformedAnnotation(f"invalid annotation code {code} at word {i - 1}")
        flush()
        t += val
        # SUB resets per annotation; CHN and NUM persist (WFDB semantics)
        subtype = 0
        pending = {"sample_index": t, "code": code, "subtype": 0, "chan": chan, "num": num}
    flush()
    return out


def parse_annotations(data: bytes) -> list[BeatAnnotation]:
    """Beat annotations from an ``.atr`` stream, non-beat entries dropped."""
    beats = []
    last = -1
    for a in read_raw_annotations(data):
        if a.code not in BEAT_CODES:
            continue
        if a.sample_index <= last:
            raise MalformedAnnotation(
                f"beat sample indices not increasing ({a.sample_index} after {last})"
            )
        last = a.sample_index
        beats.append(BeatAnnotation(a.sample_index, label_for_code(a.code), a.code))
    return beats


# ---------------------------------------------------------------------------
# Records on disk
# ---------------------------------------------------------------------------


def list_records(records_dir: str | Path) -> list[str]:
    """Names of records in ``records_dir`` that have both a header and a signal file."""
    d = Path(records_dir)
    names = []
    for hea in sorted(d.glob("*.hea")):
        if (d / f"{hea.stem}.dat").exists():
            names.append(hea.stem)
    return names


def read_header(records_dir: str | Path, name: str) -> RecordHeader:
    return parse_header((Path(records_dir) / f"{name}.hea").read_bytes())


def read_record(
    records_dir: str | Path, name: str, *, annotator: str = "atr", strict_mitbih: bool = True
) -> Record:
    d = Path(records_dir)
    header = read_header(d, name)
    if strict_mitbih:
        header.check_mitbih()
    signal = parse_signal_212((d / header.channels[0].file_name).read_bytes(), header)
    ann_path = d / f"{name}.{annotator}"
    anns = parse_annotations(ann_path.read_bytes()) if ann_path.exists() else []
    if anns and anns[-1].sample_index >= signal.n_samples:
        raise MalformedAnnotation(
            f"{name}: annotation at {anns[-1].sample_index} beyond {signal.n_samples} samples"
        )
    return Record(header, signal, anns)
