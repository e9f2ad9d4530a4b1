"""File-based experiment pipeline with a content-hashed manifest.

Each stage reads only files written by earlier stages, writes its outputs into
a scratch directory and swaps it into place when done.  ``manifest.json``
records, per stage, the hash of the config sections it depends on, the hashes
of every file it consumed and of every file it produced.  A stage whose
recorded inputs, config and outputs all still match is skipped; an input file
whose hash no longer matches what its producer recorded raises
:class:`StaleArtifact`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import encoder as enc
from . import evaluation as ev
from . import readout as ro
from . import simulator as sim
from . import topology as topo
from .aer import SpikeWriter, open_spikes, read_events, write_events
from .config import ExperimentConfig
from .errors import EcgResError, StageFailure, StaleArtifact
from .wfdb_ingest import ANOMALIES, IN_SCOPE, Label, list_records, read_record

log = logging.getLogger(__name__)

STAGES = ("ingest", "dataset", "encode", "build", "tune", "simulate", "train", "calibrate", "evaluate")
SPLITS = ("train", "validation", "test")
MANIFEST_VERSION = 1

# config sections each stage depends on (top-level keys of ExperimentConfig)
STAGE_CONFIG = {
    "ingest": ("records_dir", "data"),
    "dataset": ("data",),
    "encode": ("encoder",),
    "build": ("topology", "simulator"),
    "tune": ("tune", "simulator"),
    "simulate": ("simulator",),
    "train": ("readout",),
    "calibrate": ("readout",),
    "evaluate": ("readout",),
    "report": (),
}

# (stage, file) pairs consumed by each stage
STAGE_INPUTS = {
    "ingest": [],
    "dataset": [("ingest", "records.json")],
    "encode": [("dataset", f"{s}.{ext}") for s in SPLITS for ext in ("bin", "json")],
    "build": [],
    "tune": [("encode", "train.aer"), ("encode", "train.aer.json"), ("build", "topology.json"),
             ("build", "neurons.json")],
    "simulate": [("encode", f"{s}.aer{x}") for s in SPLITS for x in ("", ".json")]
    + [("build", "topology.json"), ("build", "neurons.json"), ("tune", "weights.json")],
    "train": [("simulate", "train.spk"), ("simulate", "train.spk.json"), ("dataset", "train.intervals.csv"),
              ("dataset", "train.json")],
    "calibrate": [("train", "model.json"), ("simulate", "validation.spk"), ("simulate", "validation.spk.json"),
                  ("dataset", "validation.intervals.csv"), ("dataset", "validation.json")],
    "evaluate": [("calibrate", "model.json"), ("simulate", "test.spk"), ("simulate", "test.spk.json"),
                 ("dataset", "test.intervals.csv"), ("dataset", "test.json")],
    "report": [("ingest", "records.json"), ("dataset", "split.json"), ("simulate", "rates.json"),
               ("evaluate", "metrics.json"), ("evaluate", "test_scores.npy"), ("calibrate", "model.json"),
               ("dataset", "test.intervals.csv")],
}


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for blk in iter(lambda: f.read(1 << 22), b""):
            h.update(blk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Pipeline:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()

    # --- manifest -----------------------------------------------------------
    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            m = json.loads(self.manifest_path.read_text())
            if m.get("version") == MANIFEST_VERSION:
                return m
        return {"version": MANIFEST_VERSION, "config_hash": None, "stages": {}, "report": None}

    def _save_manifest(self) -> None:
        self.manifest["config_hash"] = self.cfg.hash()
        self.manifest["config"] = self.cfg.to_dict()
        _atomic_write_text(self.manifest_path, json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def stage_dir(self, name: str) -> Path:
        return self.out / name

    def _entry(self, name: str) -> dict | None:
        return self.manifest["report"] if name == "report" else self.manifest["stages"].get(name)

    def _config_hash(self, name: str) -> str:
        keys = STAGE_CONFIG[name]
        d = self.cfg.to_dict()
        return hashlib.sha256(json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()).hexdigest()

    def _check_inputs(self, name: str) -> dict[str, str]:
        """Verify every consumed file against its producer's manifest entry."""
        hashes = {}
        for up, fname in STAGE_INPUTS[name]:
            entry = self.manifest["stages"].get(up)
            rel = f"{up}/{fname}"
            if entry is None:
                raise StageFailure(f"stage {name!r} needs {up!r}, which has not been run")
            if entry["config_hash"] != self._config_hash(up):
                raise StaleArtifact(f"{up!r} was produced under a different configuration; rerun it")
            path = self.out / rel
            if not path.exists():
                raise StaleArtifact(f"{rel} is missing")
            h = sha256_file(path)
            if entry["outputs"].get(rel) != h:
                raise StaleArtifact(f"{rel} does not match the hash recorded by {up!r}")
            hashes[rel] = h
        return hashes

    def _up_to_date(self, name: str, inputs: dict[str, str]) -> bool:
        e = self._entry(name)
        if not e or e.get("config_hash") != self._config_hash(name) or e.get("inputs") != inputs:
            return False
        if name == "ingest" and e.get("external") != self._external_hashes():
            return False
        for rel, h in e["outputs"].items():
            p = self.out / rel
            if not p.exists() or sha256_file(p) != h:
                return False
        return True

    def _external_hashes(self) -> dict[str, str]:
        d = Path(self.cfg.records_dir)
        out = {}
        for name in self._record_names():
            for ext in ("hea", "dat", self.cfg.data.annotator):
                p = d / f"{name}.{ext}"
                if p.exists():
                    out[p.name] = sha256_file(p)
        return out

    def _record_names(self) -> list[str]:
        names = list_records(self.cfg.records_dir)
        n = self.cfg.data.n_records
        return names[:n] if n else names

    # --- running --------------------------------------------------------------
    def run(self, name: str, force: bool = False) -> dict:
        if name not in STAGES and name != "report":
            raise ValueError(f"unknown stage {name!r}")
        inputs = self._check_inputs(name)
        if not force and self._up_to_date(name, inputs):
            log.info("%s: up to date, skipped", name)
            return self._entry(name)
        final = self.stage_dir(name)
        tmp = self.out / f".{name}.tmp{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        t0 = time.perf_counter()
        log.info("%s: running", name)
        try:
            summary = getattr(self, f"_stage_{name}")(tmp)
        except EcgResError as e:
            shutil.rmtree(tmp, ignore_errors=True)
            if isinstance(e, (StaleArtifact, StageFailure)):
                raise
            raise StageFailure(f"stage {name!r} failed: {e}", cause=e) from e
        except Exception as e:
            shutil.rmtree(tmp, ignore_errors=True)
            raise StageFailure(f"stage {name!r} failed: {type(e).__name__}: {e}", cause=e) from e
        old = self.out / f".{name}.old{os.getpid()}"
        if final.exists():
            os.replace(final, old)
        os.replace(tmp, final)
        shutil.rmtree(old, ignore_errors=True)
        outputs = {f"{name}/{p.relative_to(final).as_posix()}": sha256_file(p)
                   for p in sorted(final.rglob("*")) if p.is_file()}
        entry = {
            "stage": name,
            "config_hash": self._config_hash(name),
            "inputs": inputs,
            "outputs": outputs,
            "seconds": round(time.perf_counter() - t0, 3),
            "summary": summary,
        }
        if name == "ingest":
            entry["external"] = self._external_hashes()
        if name == "report":
            self.manifest["report"] = entry
        else:
            self.manifest["stages"][name] = entry
            # downstream entries are now suspect; they will be re-validated on their next run
        self._save_manifest()
        return entry

    def run_all(self, force: bool = False, report: bool = True) -> dict:
        for s in STAGES:
            self.run(s, force=force)
        if report:
            self.run("report", force=force)
        return self.manifest

    # --- helpers ----------------------------------------------------------------
    def _records(self, names):
        return [read_record(self.cfg.records_dir, n, annotator=self.cfg.data.annotator) for n in names]

    def _network(self):
        t = topo.NetworkTopology.load(self.out / "build/topology.json")
        params = sim.NeuronParams.from_dict(json.loads((self.out / "build/neurons.json").read_text()))
        return t, params

    def _population_params(self) -> dict[str, sim.PopulationParams]:
        out = {}
        for pop in topo.POPULATIONS:
            s = getattr(self.cfg.simulator, pop)
            out[pop] = sim.PopulationParams(
                s.tau_mem, (s.tau_syn_exc, s.tau_syn_exc, s.tau_syn_inh, s.tau_syn_inh),
                s.v_thresh, s.v_reset, s.refractory,
            )
        return out

    def _state_stream(self, split: str, n_samples: int) -> ro.StateStream:
        times, ids, side = open_spikes(self.out / f"simulate/{split}.spk")
        r = self.cfg.readout
        return ro.StateStream(times, ids, side["n_neurons"], ro.FilterKernel(r.tau_out), r.sample_period, n_samples)

    def _n_samples(self, split: str) -> int:
        meta = json.loads((self.out / f"dataset/{split}.json").read_text())
        return ro.n_samples_for(meta["n_samples"] / meta["sampling_rate"], self.cfg.readout.sample_period)

    def _scores(self, split: str, model: ro.ReadoutModel) -> np.ndarray:
        n = self._n_samples(split)
        out = np.empty((n, model.weights.shape[0]))
        for k0, X in self._state_stream(split, n):
            out[k0:k0 + X.shape[0]] = X @ model.weights.T
        return out

    # --- stages -------------------------------------------------------------
    def _stage_ingest(self, d: Path) -> dict:
        names = self._record_names()
        if not names:
            raise StageFailure(f"no records found in {self.cfg.records_dir}")
        recs = []
        totals = {lab.value: 0 for lab in Label}
        for n in names:
            r = read_record(self.cfg.records_dir, n, annotator=self.cfg.data.annotator)
            counts = {lab.value: 0 for lab in Label}
            for a in r.annotations:
                counts[a.label.value] += 1
            for k, v in counts.items():
                totals[k] += v
            recs.append({"name": n, "n_samples": r.signal.n_samples, "fs": r.signal.sampling_rate,
                         "channels": [c.description for c in r.header.channels], "beats": counts})
        _dump(d / "records.json", {"records": recs, "totals": totals})
        return {"n_records": len(recs), "beats": totals}

    def _stage_dataset(self, d: Path) -> dict:
        c = self.cfg.data
        names = [r["name"] for r in json.loads((self.out / "ingest/records.json").read_text())["records"]]
        split = ds.split_records(names, c.split_seed)
        _dump(d / "split.json", split)
        train = ds.assemble_training_stream(ds.record_beats(self._records(split["train"])), c.train_seed,
                                            ds.scaled_counts(c.train_beats))
        if c.eval_segments == "table":
            rv, rt = ds.VALIDATION_RECIPE, ds.TEST_RECIPE
        else:
            rv = rt = ds.scaled_eval_recipe(int(c.eval_segments))
        val = ds.assemble_eval_stream(self._records(split["validation"]), c.validation_seed, rv, "validation")
        test = ds.assemble_eval_stream(self._records(split["test"]), c.test_seed, rt, "test")
        summary = {}
        for name, s in (("train", train), ("validation", val), ("test", test)):
            ds.save_stream(s, d, name)
            summary[name] = {
                "duration_s": s.duration,
                "beats": {k.value: v for k, v in s.beat_counts().items()},
                "segments": {k.value: v for k, v in s.segment_counts().items()},
            }
        return summary

    def _stage_encode(self, d: Path) -> dict:
        c = self.cfg.encoder
        train = ds.load_signal(self.out / "dataset/train.bin")
        cfg = enc.calibrate_delta(train, c.target_rate, refractory_e=c.refractory)
        _dump(d / "encoder.json", {"delta": list(cfg.delta), "refractory_e": cfg.refractory_e,
                                   "target_rate": c.target_rate})
        rates = {}
        for split in SPLITS:
            sig = train if split == "train" else ds.load_signal(self.out / f"dataset/{split}.bin")
            tr = enc.encode(sig, cfg)
            tr.meta["initial"] = sig.samples[0].tolist() if sig.n_samples else []
            write_events(d / f"{split}.aer", tr)
            rates[split] = tr.rate()
        return {"delta": list(cfg.delta), "rate_per_channel": rates}

    def _stage_build(self, d: Path) -> dict:
        c = self.cfg
        t = topo.build(c.topology.seed, c.topology.mode)
        base = sim.NeuronParams.from_populations(t, self._population_params())
        params = sim.inject_mismatch(base, c.simulator.mismatch_cv, c.simulator.mismatch_seed)
        t.save(d / "topology.json")
        _dump(d / "neurons.json", params.to_dict())
        rep = topo.connectivity_report(t)
        _dump(d / "connectivity.json", rep)
        return {"n_synapses": int(t.multiplicity.sum()), "density": rep["density"], "notes": rep["notes"]}

    def _stage_tune(self, d: Path) -> dict:
        c = self.cfg.tune
        t, params = self._network()
        weights = sim.WeightTable.from_dict(c.weights) if c.weights else sim.WeightTable.default()
        train = read_events(self.out / "encode/train.aer")
        sample = train.select(c.sample_offset, min(c.sample_offset + c.sample_duration, train.duration))
        crit = sim.EdgeCriteria((c.band_low, c.band_high), c.quiet_rate, c.quiet_within)
        if c.enabled:
            weights = sim.tune_to_edge(t, params, sample, weights, dt=self.cfg.simulator.dt, criteria=crit,
                                       max_iter=c.max_iter)
        stats = sim.edge_stats(t, params, weights, sample, self.cfg.simulator.dt, crit)
        _dump(d / "weights.json", weights.to_dict())
        _dump(d / "edge_stats.json", stats)
        return {"weights": weights.to_dict(), **stats}

    def _stage_simulate(self, d: Path) -> dict:
        c = self.cfg.simulator
        t, params = self._network()
        weights = sim.WeightTable.from_dict(json.loads((self.out / "tune/weights.json").read_text()))
        rates = {}
        summary = {}
        for split in SPLITS:
            train = read_events(self.out / f"encode/{split}.aer")
            s = sim.Simulator(t, params, weights, c.dt, max_rate=c.max_rate)
            writer = SpikeWriter(d / f"{split}.spk", t.n_neurons, {"dt": c.dt, "split": split})
            acc = sim.RateAccumulator(train.duration, 1.0, t)

            def sink(times, ids, writer=writer, acc=acc):
                writer(times, ids)
                acc(times, ids)

            s.run(train, chunk=c.chunk, sink=sink)
            writer.close(train.duration)
            rates[split] = acc.result()
            summary[split] = {"n_spikes": writer.count, "mean_rate": rates[split]["mean"]}
        _dump(d / "rates.json", rates)
        return summary

    def _stage_train(self, d: Path) -> dict:
        r = self.cfg.readout
        ivs = ds.load_intervals(self.out / "dataset/train.intervals.csv")
        n = self._n_samples("train")
        Y = ro.build_targets(ivs, n, r.sample_period)
        st = self._state_stream("train", n)
        g = ro.GramSystem.empty(st.n_neurons, Y.shape[1])
        for k0, X in st:
            g.add(X, Y[k0:k0 + X.shape[0]])
        ridge = g.default_ridge() if r.ridge is None else r.ridge
        W = g.solve(ridge)
        model = ro.ReadoutModel(
            W, np.full(W.shape[0], np.nan), ro.FilterKernel(r.tau_out), r.sample_period,
            provenance={"ridge": ridge, "train_rows": g.n_rows,
                        "train_spikes_sha256": sha256_file(self.out / "simulate/train.spk"),
                        "train_intervals_sha256": sha256_file(self.out / "dataset/train.intervals.csv")},
        )
        model.save(d / "model.json")
        return {"ridge": ridge, "rows": g.n_rows}

    def _stage_calibrate(self, d: Path) -> dict:
        model = ro.ReadoutModel.load(self.out / "train/model.json")
        ivs = ds.load_intervals(self.out / "dataset/validation.intervals.csv")
        scores = self._scores("validation", model)
        th, info = ro.calibrate_from_scores(scores, ivs, model.sample_period, self.cfg.readout.lam)
        model.thresholds = th
        model.provenance["validation_spikes_sha256"] = sha256_file(self.out / "simulate/validation.spk")
        model.provenance["lambda"] = self.cfg.readout.lam
        model.provenance["run_dir"] = str(self.out.resolve())
        model.save(d / "model.json")
        cc = ev.count_outcomes(scores, th, ivs, model.sample_period)
        return {"thresholds": th.tolist(), "cost": info["cost"], "validation_overall": cc.to_dict()["overall"]}

    def _stage_evaluate(self, d: Path) -> dict:
        model = ro.ReadoutModel.load(self.out / "calibrate/model.json")
        ivs = ds.load_intervals(self.out / "dataset/test.intervals.csv")
        scores = self._scores("test", model)
        cc = ev.count_outcomes(scores, model.thresholds, ivs, model.sample_period)
        doc = ev.write_metrics(d / "metrics.json", cc, {"config_hash": self.cfg.hash()})
        (d / "table.txt").write_text(ev.format_table(cc) + "\n")
        np.save(d / "test_scores.npy", scores)
        return {"overall": doc["metrics"]["Overall"], "counts": doc["counts"]["overall"]}

    def _stage_report(self, d: Path) -> dict:
        return write_report(self.out, d)


def write_report(run_dir: Path, d: Path) -> dict:
    """Summary text plus plot-ready CSVs from a finished run."""
    metrics = json.loads((run_dir / "evaluate/metrics.json").read_text())
    recs = json.loads((run_dir / "ingest/records.json").read_text())
    man = json.loads((run_dir / "manifest.json").read_text())
    ds_summary = man["stages"]["dataset"]["summary"]
    model = ro.ReadoutModel.load(run_dir / "calibrate/model.json")
    rows = metrics["metrics"]

    with open(d / "table3.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["anomaly", "sensitivity", "specificity", "ppv", "npv", "mtbfp_s"])
        for k in [*(lab.value for lab in ANOMALIES), "Overall"]:
            m = rows[k]
            w.writerow([k, m["sensitivity"], m["specificity"], m["ppv"], m["npv"], m["mtbfp"]])
    with open(d / "table1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *SPLITS, "corpus"])
        for lab in IN_SCOPE:
            w.writerow([lab.value, *(ds_summary[s]["beats"][lab.value] for s in SPLITS), recs["totals"][lab.value]])
    with open(d / "table2.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "validation", "test"])
        for lab in ANOMALIES:
            w.writerow([lab.value, ds_summary["validation"]["segments"][lab.value],
                        ds_summary["test"]["segments"][lab.value]])

    scores = np.load(run_dir / "evaluate/test_scores.npy")
    bits = ro.trigger(scores, model.thresholds)
    with open(d / "scores_test.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", *[f"score_{c}" for c in model.classes], "trigger_bit"])
        for k in range(scores.shape[0]):
            w.writerow([f"{k * model.sample_period:.6f}", *(f"{v:.6g}" for v in scores[k]), int(bits[k])])

    rates = json.loads((run_dir / "simulate/rates.json").read_text())
    for split, rr in rates.items():
        with open(d / f"rates_{split}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            pops = list(rr["rates"])
            w.writerow(["time_s", *pops])
            for i, t in enumerate(rr["t"]):
                w.writerow([t, *(rr["rates"][p][i] for p in pops)])

    table = (run_dir / "evaluate/table.txt").read_text()
    lines = [
        "Detection on the test stream",
        table,
        ev.TEXT_VS_TABLE_NOTE,
        "",
        f"Records: {len(recs['records'])}",
        "Beats per split: " + ", ".join(f"{s} {sum(ds_summary[s]['beats'].values())}" for s in SPLITS),
        "Mean rates (Hz/neuron): " + "; ".join(
            f"{s}: " + ", ".join(f"{p} {v:.2f}" for p, v in rates[s]["mean"].items()) for s in SPLITS),
    ]
    (d / "summary.txt").write_text("\n".join(lines) + "\n")
    return {"rows": len(rows), "score_rows": int(scores.shape[0])}


def run_stage(name: str, cfg: ExperimentConfig, force: bool = False) -> dict:
    return Pipeline(cfg).run(name, force=force)
