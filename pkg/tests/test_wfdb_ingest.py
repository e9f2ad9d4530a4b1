import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgres.errors import FormatMismatch, MalformedAnnotation, MalformedHeader, TruncatedSignal, UnsupportedFormat
from ecgres.synth import header_text, pack_212, pack_annotations, write_record
from ecgres.wfdb_ingest import (
    Label,
    decode_212,
    label_for_code,
    list_records,
    parse_annotations,
    parse_header,
    parse_signal_212,
    read_raw_annotations,
    read_record,
)

wfdb = pytest.importorskip("wfdb")

HEADER_100 = """100 2 360 650000
100.dat 212 200 11 1024 995 -22131 0 MLII
100.dat 212 200 11 1024 1011 20052 0 V5
# 69 M 1085 1629 x1
"""


def _pack_pair_by_hand(a: int, b: int) -> bytes:
    """Bit-level 212 packing written independently of the reader."""
    ua, ub = a & 0xFFF, b & 0xFFF
    return bytes([ua & 0xFF, ((ub >> 8) << 4) | (ua >> 8), ub & 0xFF])


class TestHeader:
    def test_record_line(self):
        h = parse_header(HEADER_100.encode())
        assert (h.n_channels, h.sampling_rate, h.n_samples) == (2, 360.0, 650000)
        assert h.gains == (200.0, 200.0)
        assert h.baselines == (1024, 1024)
        assert h.channels[0].description == "MLII"
        assert h.channels[1].init_value == 1011
        assert h.comments == ("69 M 1085 1629 x1",)

    def test_zero_channels(self):
        with pytest.raises(MalformedHeader):
            parse_header(b"100 0 360 650000\n")

    def test_empty(self):
        with pytest.raises(MalformedHeader):
            parse_header(b"# only a comment\n")

    def test_missing_signal_lines(self):
        with pytest.raises(MalformedHeader):
            parse_header(b"100 2 360 10\n100.dat 212 200 11 1024 0 0 0 MLII\n")

    def test_other_format(self):
        with pytest.raises(UnsupportedFormat):
            parse_header(b"r 1 360 10\nr.dat 16 200 16 0 0 0 0 x\n")

    def test_multisegment(self):
        with pytest.raises(UnsupportedFormat):
            parse_header(b"r/2 2 360 10\n")

    def test_baseline_in_gain_field(self):
        h = parse_header(b"r 1 360 10\nr.dat 212 100(-5)/uV 12 3 0 0 0 lead\n")
        c = h.channels[0]
        assert (c.gain, c.baseline, c.units, c.adc_zero) == (100.0, -5, "uV", 3)

    def test_agrees_with_wfdb(self, tmp_path):
        (tmp_path / "100.hea").write_text(HEADER_100)
        ref = wfdb.rdheader(str(tmp_path / "100"))
        h = parse_header(HEADER_100)
        assert h.n_samples == ref.sig_len
        assert h.sampling_rate == ref.fs
        assert list(h.gains) == list(ref.adc_gain)
        assert list(h.baselines) == list(ref.baseline)

    def test_mitbih_layout_check(self):
        h = parse_header(b"r 1 250 10\nr.dat 212 200 11 1024 0 0 0 x\n")
        with pytest.raises(FormatMismatch):
            h.check_mitbih()


class TestSignal:
    def _hdr(self, n, baseline=0):
        return parse_header(f"r 1 360 {n}\nr.dat 212 200({baseline}) 12 0 0 0 0 x\n")

    def test_zero_triplet(self):
        s = parse_signal_212(b"\x00\x00\x00", self._hdr(2))
        assert s.samples[:, 0].tolist() == [0.0, 0.0]

    def test_plus_minus_one(self):
        data = _pack_pair_by_hand(1, -1)
        assert data == bytes([0x01, 0xF0, 0xFF])
        s = parse_signal_212(data, self._hdr(2))
        assert s.samples[:, 0] == pytest.approx([0.005, -0.005], abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-2048, 2047), min_size=2, max_size=200).filter(lambda v: len(v) % 2 == 0))
    def test_decode_matches_hand_packing(self, values):
        data = b"".join(_pack_pair_by_hand(a, b) for a, b in zip(values[0::2], values[1::2]))
        assert decode_212(data, len(values)).tolist() == values

    def test_odd_count(self):
        assert decode_212(_pack_pair_by_hand(-7, 0)[:2], 1).tolist() == [-7]

    def test_truncated(self):
        with pytest.raises(TruncatedSignal):
            decode_212(b"\x00\x00", 2)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.tuples(st.integers(-2047, 2047), st.integers(-2047, 2047)), min_size=1, max_size=300))
    def test_writer_roundtrip(self, pairs):
        adc = np.array(pairs, dtype=np.int64)
        hdr = parse_header(header_text("r", adc))
        s = parse_signal_212(pack_212(adc), hdr)
        assert np.array_equal(np.round(s.samples * 200 + 1024).astype(int), adc)


class TestAnnotations:
    def test_terminator_only(self):
        assert parse_annotations(b"\x00\x00") == []

    def test_codes_and_skip(self):
        entries = [(5, 1, ""), (10, 28, "(N"), (2000, 5, ""), (2001, 8, ""), (70000, 12, "")]
        raw = read_raw_annotations(pack_annotations(entries))
        assert [(a.sample_index, a.code) for a in raw] == [(e[0], e[1]) for e in entries]
        assert raw[1].aux == "(N"
        beats = parse_annotations(pack_annotations(entries))
        assert [b.label for b in beats] == [Label.NORMAL, Label.PVC, Label.APB, Label.PACED]

    def test_other_beats(self):
        assert label_for_code(4) is Label.OTHER  # aberrated APC
        assert label_for_code(1) is Label.NORMAL

    def test_non_beats_dropped(self):
        beats = parse_annotations(pack_annotations([(5, 14, ""), (9, 1, "")]))
        assert [b.sample_index for b in beats] == [9]

    def test_invalid_code(self):
        with pytest.raises(MalformedAnnotation):
            read_raw_annotations(np.array([(55 << 10) | 3, 0], dtype="<u2").tobytes())

    def test_decreasing_time(self):
        # a negative SKIP moves the clock backwards
        words = [(1 << 10) | 100, 59 << 10, 0xFFFF, 0xFFF0, (1 << 10) | 0, 0]
        with pytest.raises(MalformedAnnotation):
            parse_annotations(np.array(words, dtype="<u2").tobytes())

    def test_truncated_aux(self):
        words = [(1 << 10) | 3, (63 << 10) | 8, 0x4141]
        with pytest.raises(MalformedAnnotation):
            read_raw_annotations(np.array(words, dtype="<u2").tobytes())


class TestRecordAgainstWfdb:
    def test_signals_and_annotations(self, small_corpus):
        names = list_records(small_corpus)
        assert len(names) == 3
        for name in names:
            rec = read_record(small_corpus, name)
            ref = wfdb.rdrecord(str(small_corpus / name), physical=False)
            adc = np.round(rec.signal.samples * 200 + 1024).astype(np.int64)
            assert np.array_equal(adc, ref.d_signal)
            phys = wfdb.rdrecord(str(small_corpus / name))
            assert np.max(np.abs(rec.signal.samples - phys.p_signal)) < 1e-9
            ann = wfdb.rdann(str(small_corpus / name), "atr")
            beat = np.isin(ann.symbol, ["N", "L", "R", "V", "/", "A", "a", "J", "S", "E", "j", "F", "e", "Q", "f", "!", "n", "?", "r"])
            assert [b.sample_index for b in rec.annotations] == ann.sample[beat].tolist()
            assert rec.annotations[0].label in Label
            assert all(b.sample_index < rec.signal.n_samples for b in rec.annotations)

    def test_annotation_past_end(self, tmp_path):
        x = np.zeros((100, 2))
        write_record(tmp_path, "r", x, [(50, Label.NORMAL), (150, Label.NORMAL)])
        with pytest.raises(MalformedAnnotation):
            read_record(tmp_path, "r")
