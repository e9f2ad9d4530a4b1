import csv
import json
import math

import numpy as np
import pytest

from ecgres import evaluation as ev
from ecgres.cli import main
from ecgres.config import from_dict, load_config
from ecgres.errors import ConfigError, StaleArtifact
from ecgres.pipeline import STAGES, Pipeline

from .conftest import write_config


def _manifest(run):
    return json.loads((run / "manifest.json").read_text())


def test_manifest_has_every_stage(mini_run):
    _, run = mini_run
    m = _manifest(run)
    assert sorted(m["stages"]) == sorted(STAGES) and len(m["stages"]) == 9
    assert m["report"] is not None
    # every file on disk is recorded by the stage that wrote it
    recorded = set()
    for e in [*m["stages"].values(), m["report"]]:
        recorded |= set(e["outputs"])
        assert e["seconds"] >= 0
    on_disk = {p.relative_to(run).as_posix() for p in run.rglob("*") if p.is_file() and p.name != "manifest.json"}
    assert on_disk == recorded
    assert m["stages"]["simulate"]["summary"]["train"]["mean_rate"]["excitatory"] > 0


def test_rerun_is_skipped(mini_run, caplog):
    cfg, run = mini_run
    before = _manifest(run)
    with caplog.at_level("INFO", logger="ecgres.pipeline"):
        assert main(["all", "--config", str(cfg), "--mini"]) == 0
    after = _manifest(run)
    assert after["stages"] == before["stages"]
    assert sum("up to date" in r.getMessage() for r in caplog.records) == 10


def test_report_contents(mini_run):
    _, run = mini_run
    rows = list(csv.reader(open(run / "report/table3.csv")))
    assert len(rows) == 7 and rows[-1][0] == "Overall"
    meta = json.loads((run / "dataset/test.json").read_text())
    duration = meta["n_samples"] / meta["sampling_rate"]
    with open(run / "report/scores_test.csv") as fh:
        n_rows = sum(1 for _ in fh) - 1
    assert n_rows == math.floor(duration * 360 + 1e-9)
    t1 = list(csv.reader(open(run / "report/table1.csv")))
    assert [r[0] for r in t1[1:]] == ["Normal", "LBBB", "RBBB", "PVC", "Paced", "APB"]
    assert "Mean rates" in (run / "report/summary.txt").read_text()
    metrics = json.loads((run / "evaluate/metrics.json").read_text())
    seg = metrics["counts"]["overall"]
    assert seg["tp"] + seg["fn"] == 10


def test_corrupted_upstream_is_stale(copy_run):
    cfg, run = copy_run
    p = run / "dataset/train.bin"
    data = bytearray(p.read_bytes())
    data[100] ^= 0xFF
    p.write_bytes(bytes(data))
    pipe = Pipeline(load_config(cfg, mini=True))
    with pytest.raises(StaleArtifact):
        pipe.run("encode")
    assert main(["encode", "--config", str(cfg), "--mini"]) == 60


def test_config_change_invalidates_downstream(copy_run):
    cfg, run = copy_run
    cfg.write_text(cfg.read_text() + "\n[readout]\nlam = 4.0\n")
    # calibrate's recorded configuration no longer matches
    assert main(["evaluate", "--config", str(cfg), "--mini"]) == 60
    before = _manifest(run)["stages"]
    assert main(["all", "--config", str(cfg), "--mini"]) == 0
    after = _manifest(run)["stages"]
    assert after["simulate"] == before["simulate"]
    assert after["calibrate"]["config_hash"] != before["calibrate"]["config_hash"]


def test_cli_run_command(mini_run, tmp_path):
    _, run = mini_run
    out = tmp_path / "triggers.csv"
    rc = main(["run", "--model", str(run / "calibrate/model.json"), "--events", str(run / "encode/test.aer"),
               "--out", str(out)])
    assert rc == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["time_s", "score_LBBB", "score_RBBB", "score_PVC", "score_Paced", "score_APB", "trigger_bit"]
    ref = np.load(run / "evaluate/test_scores.npy")
    assert len(rows) - 1 == ref.shape[0]
    got = np.array([[float(v) for v in r[1:6]] for r in rows[1:]])
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def test_standalone_commands(tmp_path, mini_corpus):
    assert main(["synth", "--out", str(tmp_path / "c"), "--records", "2", "--duration", "30", "--seed", "1"]) == 0
    assert sorted(p.name for p in (tmp_path / "c").glob("*.hea")) == ["500.hea", "501.hea"]
    out = tmp_path / "streams"
    assert main(["dataset", "build", "--records-dir", str(mini_corpus), "--seed", "3", "--out", str(out),
                 "--train-beats", "200", "--eval-segments", "1"]) == 0
    assert (out / "validation.intervals.csv").exists()
    assert main(["encode", "--in", str(out / "train.bin"), "--target-rate", "150", "--out",
                 str(tmp_path / "t.aer")]) == 0
    side = json.loads((tmp_path / "t.aer.json").read_text())
    assert len(side["delta"]) == 2


def test_cli_error_codes(tmp_path):
    assert main(["ingest"]) == 62
    cfg = write_config(tmp_path / "a.toml", tmp_path / "missing", tmp_path / "out")
    assert main(["ingest", "--config", str(cfg)]) == 62
    (tmp_path / "empty").mkdir()
    cfg = write_config(tmp_path / "b.toml", tmp_path / "empty", tmp_path / "out")
    assert main(["ingest", "--config", str(cfg)]) == 61
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "100.hea").write_text("100 0 360 10\n")
    (bad / "100.dat").write_bytes(b"")
    cfg = write_config(tmp_path / "c.toml", bad, tmp_path / "out2")
    assert main(["ingest", "--config", str(cfg)]) == 10  # MalformedHeader from the ingest module
    cfg = write_config(tmp_path / "d.toml", bad, tmp_path / "out3", "[readout]\nbogus = 1\n")
    assert main(["ingest", "--config", str(cfg)]) == 62


def test_insufficient_segments_exit_code(tmp_path, mini_corpus):
    # one record per evaluation split cannot supply 40 segments of every class
    cfg = write_config(tmp_path / "e.toml", mini_corpus, tmp_path / "out", "[data]\neval_segments = 40\n")
    assert main(["ingest", "--config", str(cfg)]) == 0
    assert main(["dataset", "--config", str(cfg)]) == 21


def test_config_files(tmp_path):
    (tmp_path / "recs").mkdir()
    (tmp_path / "e.json").write_text(json.dumps({"records_dir": "recs", "output_dir": "o", "readout": {"lam": 2}}))
    cfg = load_config(tmp_path / "e.json", mini=True)
    assert cfg.records_dir == str((tmp_path / "recs").resolve())
    assert cfg.readout.lam == 2 and cfg.data.n_records == 3 and cfg.mini
    with pytest.raises(ConfigError):
        from_dict({"simulator": {"nope": 1}})
    with pytest.raises(ConfigError):
        from_dict({"data": {"eval_segments": "some"}}).validate(check_paths=False)
    a, b = from_dict({}), from_dict({"output_dir": "elsewhere"})
    assert a.hash() == b.hash()


def test_undefined_sensitivity_in_report():
    cc = ev.ConfusionCounts(ev.Counts(0, 0, 12, 1), {lab: ev.Counts(0, 0, 12, 1) for lab in
                                                     ("LBBB", "RBBB", "PVC", "Paced", "APB")}, 6.0)
    table = ev.format_table(cc)
    overall = table.splitlines()[-1].split()
    assert overall[1] == "undefined"
    assert ev.metrics_table(cc)["Overall"]["sensitivity"] is None
