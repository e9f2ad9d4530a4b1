import numpy as np
import pytest

from ecgres import dataset as ds
from ecgres.errors import EmptyClassPool, InsufficientSegments
from ecgres.wfdb_ingest import ANOMALIES, BeatAnnotation, Label, SampledSignal, list_records, read_record


def _ann(idx, lab=Label.NORMAL):
    return [BeatAnnotation(i, lab, 1) for i in idx]


def _sig(n):
    return SampledSignal(np.arange(2 * n, dtype=float).reshape(n, 2), 360.0)


@pytest.fixture(scope="module")
def records(mini_corpus):
    return {n: read_record(mini_corpus, n) for n in list_records(mini_corpus)}


def test_midpoint_bounds():
    beats = ds.segment_beats(_sig(400), _ann([100, 200, 300]))
    assert beats[1].source_span == (150, 250)
    assert beats[0].source_span == (0, 150)
    assert beats[2].source_span == (250, 400)


def test_single_annotation_spans_record():
    (b,) = ds.segment_beats(_sig(100), _ann([50]))
    assert b.source_span == (0, 100)


def test_other_beats_excluded():
    anns = _ann([100, 200]) + [BeatAnnotation(300, Label.OTHER, 4)]
    assert len(ds.segment_beats(_sig(400), anns)) == 2


def test_beat_count_matches_annotations(records):
    for name, rec in records.items():
        n_in_scope = sum(a.label in ds.IN_SCOPE for a in rec.annotations)
        assert len(ds.segment_beats(rec.signal, rec.annotations, name)) == n_in_scope


def test_published_training_counts():
    c = ds.TRAIN_COUNTS
    assert c[Label.NORMAL] == 22500 and all(c[a] == 1500 for a in ANOMALIES)
    assert sum(c.values()) == 30000
    assert ds.scaled_counts(10000) == {Label.NORMAL: 7500, **{a: 500 for a in ANOMALIES}}


def test_published_eval_totals():
    # the validation rows add up to 3141; the printed column total (3116) does not match its rows
    for recipe, segs, beats in ((ds.VALIDATION_RECIPE, 111, 3141), (ds.TEST_RECIPE, 76, 2078)):
        assert sum(v[0] for k, v in recipe.items() if k != Label.NORMAL) == segs
        assert sum(v[1] for v in recipe.values()) == beats


def test_training_stream(records):
    beats = ds.record_beats(records.values())
    counts = ds.scaled_counts(400)
    s = ds.assemble_training_stream(beats, 3, counts)
    got = s.beat_counts()
    assert all(got[k] == counts[k] for k in counts)
    # intervals tile the stream
    assert s.intervals[0].start_idx == 0
    assert all(a.end_idx == b.start_idx for a, b in zip(s.intervals, s.intervals[1:]))
    assert s.intervals[-1].end_idx == s.signal.n_samples
    again = ds.assemble_training_stream(beats, 3, counts)
    assert np.array_equal(s.signal.samples, again.signal.samples)


def test_empty_pool(records):
    beats = [b for b in ds.record_beats(records.values()) if b.label != Label.PVC]
    with pytest.raises(EmptyClassPool):
        ds.assemble_training_stream(beats, 0, ds.scaled_counts(100))


def test_dc_alignment_removes_jumps():
    a, b = np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([[5.0, 5.0], [6.0, 4.0]])
    out = np.concatenate(ds._concatenate([a, b]))
    assert out[2].tolist() == [1.0, 2.0]
    assert out[3].tolist() == [2.0, 1.0]


def test_eval_stream(records):
    names = sorted(records)
    recipe = ds.scaled_eval_recipe(2)
    s = ds.assemble_eval_stream([records[names[0]]], 9, recipe)
    segs = s.segment_counts()
    assert all(segs[a] == 2 for a in ANOMALIES)
    for iv in s.intervals:
        if iv.unit_kind == "segment":
            assert ds.SEG_MIN <= iv.n_beats <= ds.SEG_MAX
            assert iv.label != Label.NORMAL
        else:
            assert iv.label == Label.NORMAL and iv.n_beats == 1
    assert abs(s.beat_counts()[Label.NORMAL] - recipe[Label.NORMAL][1]) <= 1


def test_zero_anomalies(records):
    rec = records[sorted(records)[0]]
    s = ds.assemble_eval_stream([rec], 1, {Label.NORMAL: (None, 40)})
    assert sum(s.segment_counts().values()) == 0
    assert all(iv.label == Label.NORMAL for iv in s.intervals)


def test_insufficient(records):
    rec = records[sorted(records)[0]]
    with pytest.raises(InsufficientSegments):
        ds.assemble_eval_stream([rec], 1, {Label.LBBB: (500, None)})


def test_split_disjoint_and_seeded():
    names = [str(i) for i in range(48)]
    a = ds.split_records(names, 4)
    assert set(a["train"]) | set(a["validation"]) | set(a["test"]) == set(names)
    assert not set(a["train"]) & set(a["validation"])
    assert not set(a["validation"]) & set(a["test"])
    assert (len(a["train"]), len(a["validation"]), len(a["test"])) == (24, 12, 12)
    assert ds.split_records(names, 4) == a


def test_streams_disjoint(records):
    split = ds.split_records(sorted(records), 1)
    tr = ds.assemble_training_stream(ds.record_beats([records[n] for n in split["train"]]), 1, ds.scaled_counts(200))
    va = ds.assemble_eval_stream([records[n] for n in split["validation"]], 2, ds.scaled_eval_recipe(1))
    te = ds.assemble_eval_stream([records[n] for n in split["test"]], 3, ds.scaled_eval_recipe(1))
    assert not tr.sources() & va.sources()
    assert not va.sources() & te.sources()
    assert not tr.sources() & te.sources()


def test_segment_lengths_hit_beat_totals():
    rng = np.random.default_rng(0)
    for n_seg, n_beats in ((24, 175), (14, 100), (16, 98)):
        ls = ds._segment_lengths(rng, n_seg, n_beats)
        assert len(ls) == n_seg and sum(ls) == n_beats
        assert all(5 <= L <= 10 for L in ls)
    ls = ds._segment_lengths(rng, None, 2315)
    assert sum(ls) == 2315 and all(5 <= L <= 10 for L in ls)


def test_stream_roundtrip(tmp_path, records):
    rec = records[sorted(records)[0]]
    s = ds.assemble_eval_stream([rec], 5, ds.scaled_eval_recipe(1))
    ds.save_stream(s, tmp_path, "val")
    back = ds.load_stream(tmp_path, "val")
    assert np.array_equal(back.signal.samples, s.signal.samples)
    assert back.intervals == s.intervals
    header = (tmp_path / "val.intervals.csv").read_text().splitlines()[0]
    assert header.startswith("start_s,end_s,label,unit_kind,unit_id")
