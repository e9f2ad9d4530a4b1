"""Command-line entry point.

Pipeline stages run against an experiment config::

    ecgres all --config exp.toml [--mini]
    ecgres simulate --config exp.toml --force

A few commands also work standalone on plain files::

    ecgres dataset build --records-dir D --seed S --out streams/
    ecgres encode --in streams/train.bin --target-rate 200 --out train.aer
    ecgres run --model runs/x/calibrate/model.json --events test.aer --out triggers.csv
    ecgres synth --out data/synthetic --records 48 --duration 1800 --seed 7
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EcgResError, StageFailure

log = logging.getLogger("ecgres")

STAGE_CMDS = ("ingest", "dataset", "encode", "build", "tune", "simulate", "train", "calibrate", "evaluate",
              "report", "all")


def _add_pipeline_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--config", required=False, help="experiment config (.toml or .json)")
    p.add_argument("--mini", action="store_true", help="small preset for quick end-to-end runs")
    p.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
    p.add_argument("--records-dir", help="override records_dir from the config")
    p.add_argument("--output-dir", help="override output_dir from the config")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ecgres", description="Spiking-reservoir ECG anomaly detection pipeline")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    for name in STAGE_CMDS:
        p = sub.add_parser(name, help=f"pipeline stage: {name}" if name != "all" else "run every stage")
        _add_pipeline_args(p)
        if name == "dataset":
            p.add_argument("action", nargs="?", choices=["build"], help="standalone stream assembly")
            p.add_argument("--seed", type=int, help="base seed for the standalone build")
            p.add_argument("--out", help="output directory for the standalone build")
            p.add_argument("--train-beats", type=int, default=30000)
            p.add_argument("--eval-segments", default="table")
        if name == "encode":
            p.add_argument("--in", dest="input", help="stream .bin file (standalone mode)")
            p.add_argument("--target-rate", type=float, default=200.0)
            p.add_argument("--delta", type=float, nargs="+", help="fixed delta per channel instead of calibration")
            p.add_argument("--out", help="output event file (standalone mode)")

    p = sub.add_parser("run", help="apply a calibrated model to an event file")
    p.add_argument("--model", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--network", help="run directory holding build/ and tune/ (default: from the model)")

    p = sub.add_parser("synth", help="write a synthetic corpus in MIT-BIH file layout")
    p.add_argument("--out", required=True)
    p.add_argument("--records", type=int, default=48)
    p.add_argument("--duration", type=float, default=1800.0)
    p.add_argument("--seed", type=int, default=7)
    return ap


def _load_cfg(args):
    from .config import ExperimentConfig, from_dict, load_config

    if args.config:
        cfg = load_config(args.config, mini=args.mini)
    elif args.records_dir and args.output_dir:
        cfg = from_dict({}, mini=args.mini)
    else:
        raise ConfigError("--config is required (or both --records-dir and --output-dir)")
    if args.records_dir:
        cfg.records_dir = args.records_dir
    if args.output_dir:
        cfg.output_dir = args.output_dir
    cfg.validate()
    assert isinstance(cfg, ExperimentConfig)
    return cfg


def _cmd_pipeline(args) -> int:
    from .pipeline import Pipeline

    pipe = Pipeline(_load_cfg(args))
    if args.command == "all":
        pipe.run_all(force=args.force)
        print((pipe.out / "evaluate/table.txt").read_text(), end="")
    else:
        entry = pipe.run(args.command, force=args.force)
        print(json.dumps(entry["summary"], indent=2, sort_keys=True, default=str))
    return 0


def _cmd_dataset_build(args) -> int:
    from . import dataset as ds
    from .wfdb_ingest import list_records, read_record

    if not (args.records_dir and args.out and args.seed is not None):
        raise ConfigError("dataset build needs --records-dir, --seed and --out")
    names = list_records(args.records_dir)
    split = ds.split_records(names, args.seed)
    recs = {k: [read_record(args.records_dir, n) for n in v] for k, v in split.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")
    train = ds.assemble_training_stream(ds.record_beats(recs["train"]), args.seed + 1,
                                        ds.scaled_counts(args.train_beats))
    if args.eval_segments == "table":
        rv, rt = ds.VALIDATION_RECIPE, ds.TEST_RECIPE
    else:
        rv = rt = ds.scaled_eval_recipe(int(args.eval_segments))
    ds.save_stream(train, out, "train")
    ds.save_stream(ds.assemble_eval_stream(recs["validation"], args.seed + 2, rv), out, "validation")
    ds.save_stream(ds.assemble_eval_stream(recs["test"], args.seed + 3, rt, "test"), out, "test")
    print(f"wrote streams to {out}")
    return 0


def _cmd_encode_file(args) -> int:
    from . import dataset as ds
    from . import encoder as enc
    from .aer import write_events

    if not args.out:
        raise ConfigError("encode --in needs --out")
    sig = ds.load_signal(args.input)
    cfg = enc.EncoderConfig(tuple(args.delta)) if args.delta else enc.calibrate_delta(sig, args.target_rate)
    train = enc.encode(sig, cfg)
    train.meta["initial"] = sig.samples[0].tolist() if sig.n_samples else []
    write_events(args.out, train)
    print(f"{len(train)} events, delta {list(cfg.delta)}, {train.rate():.1f} ev/s per channel")
    return 0


def _cmd_run(args) -> int:
    from . import readout as ro
    from . import simulator as sim
    from . import topology as topo
    from .aer import read_events

    model = ro.ReadoutModel.load(args.model)
    if not model.calibrated:
        raise ConfigError("model has no thresholds; run the calibrate stage first")
    net = Path(args.network or model.provenance.get("run_dir", ""))
    if not (net / "build/topology.json").exists():
        raise ConfigError(f"no network found under {net}; pass --network")
    t = topo.NetworkTopology.load(net / "build/topology.json")
    params = sim.NeuronParams.from_dict(json.loads((net / "build/neurons.json").read_text()))
    weights = sim.WeightTable.from_dict(json.loads((net / "tune/weights.json").read_text()))
    dt = json.loads((net / "manifest.json").read_text())["config"]["simulator"]["dt"] \
        if (net / "manifest.json").exists() else 1e-4
    events = read_events(args.events)
    rec = sim.simulate(t, params, weights, events, dt)
    X = ro.filter_spikes(rec, model.kernel, model.sample_period)
    bits, scores = model.trigger(X)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", *[f"score_{c}" for c in model.classes], "trigger_bit"])
        for k in range(scores.shape[0]):
            w.writerow([f"{k * model.sample_period:.6f}", *(f"{v:.6g}" for v in scores[k]), int(bits[k])])
    print(f"{scores.shape[0]} samples, {int(np.sum(bits))} above threshold")
    return 0


def _cmd_synth(args) -> int:
    from .synth import make_corpus

    names = make_corpus(args.out, args.records, args.duration, args.seed)
    print(f"wrote {len(names)} records to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "dataset" and args.action == "build":
            return _cmd_dataset_build(args)
        if args.command == "encode" and args.input:
            return _cmd_encode_file(args)
        return _cmd_pipeline(args)
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        cause = e.cause
        return cause.exit_code if isinstance(cause, EcgResError) else e.exit_code
    except EcgResError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
