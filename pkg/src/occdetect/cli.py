"""``occdetect`` command line: simulate, train, tune, ablate, generalize, evaluate.

Set ``OCCDETECT_LOG`` (e.g. ``INFO`` or ``DEBUG``) for progress logging.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .dataset import SplitSpec, load_csv, regularize, write_csv
from .errors import OccupancyError, UnsupportedModel
from .evalkit import EvalReport
from .features import MASKS, build_table
from .hyperopt import LSTM_SPACE, SVM_SPACE, BOTrace, bo_optimize, final_retrain
from .lstm import write_trace
from .pipeline import (MODEL_KINDS, Trained, calibrate, config_hash, evaluate, fit_model,
                       load_artifact, model_config, run_meta, save_artifact)
from .synthgen import make_scenarios, occupied_durations

log = logging.getLogger("occdetect")

DEFAULTS = {
    "simulate": {"months": 18.0, "split_weights": [16.5, 5.0, 3.5], "start": "2022-06-01",
                 "transfer_months": 3.0, "digital_start": "2023-04-01",
                 "transfer_start": "2023-09-01"},
    "models": {},
    "tune": {"n_init": 5, "n_iters": 20},
    "max_gap": 600,
    "split": None,
}
METRIC_FIELDS = ("precision", "recall", "f1", "accuracy", "auc_roc")
SCENARIOS = ("scenario0", "scenario1", "scenario2")


# ---------------------------------------------------------------------------
# helpers

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    with open(path, encoding="utf-8") as fh:
        return _merge(DEFAULTS, json.load(fh))


def stage_seed(seed: int, stage: str) -> int:
    """Independent per-stage seed derived from the root seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0] % 2**31)


def _model_cfg(cfg: dict, kind: str, seed: int) -> dict:
    over = {"seed": stage_seed(seed, kind)} if kind != "lr" else {}
    over.update(cfg["models"].get(kind, {}))
    return model_config(kind, over)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}"


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    return out


def load_scenario(directory, cfg: dict, need_split: bool = True):
    """Feature table for a scenario directory written by ``simulate``."""
    d = Path(directory)
    series = load_csv(d / "data.csv", source_id=d.name)
    params_path = d / "params.json"
    params = json.loads(params_path.read_text()) if params_path.exists() else {}
    split_d = cfg.get("split") or params.get("split")
    if need_split and not split_d:
        raise ValueError(f"{d}: no split boundaries in params.json or config")
    segments = regularize(series, cfg["max_gap"])
    spec = SplitSpec.from_dict(split_d) if need_split else None
    return segments, spec


def _metrics_row(kind, rep: EvalReport, *lead):
    return [*lead, kind, *(_fmt(getattr(rep, f)) for f in METRIC_FIELDS)]


def _report_json(path: Path, rep: EvalReport, meta: dict, **extra) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rep.to_json(**meta, **extra) + "\n", encoding="utf-8")


def _kinds(model: str) -> tuple[str, ...]:
    return MODEL_KINDS if model == "all" else (model,)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args, cfg) -> None:
    out = _out_dir(args.out)
    sim = cfg["simulate"]
    scen = make_scenarios(args.seed, months=sim["months"], split_weights=tuple(sim["split_weights"]),
                          start=sim["start"], transfer_months=sim["transfer_months"],
                          digital_start=sim["digital_start"], transfer_start=sim["transfer_start"])
    meta = run_meta(args.seed, {"command": "simulate", **sim})
    for name, sc in scen.items():
        d = out / name
        d.mkdir(exist_ok=True)
        write_csv(sc.series, d / "data.csv")
        _write_json(d / "params.json", {**sc.params_dict(), **meta})
    s0 = scen["scenario0"].series
    plotting.duration_histogram(occupied_durations(s0.occupied), out / "figures" / "durations.png")
    plotting.occupancy_boxplots(s0, out / "figures" / "boxplots.png")
    _write_json(out / "manifest.json", {**meta, "scenarios": list(scen)})
    print(f"wrote {', '.join(scen)} to {out}")


def _train_one(kind, table, cfg, args, out: Path, meta_base: dict) -> tuple[Trained, EvalReport]:
    mcfg = _model_cfg(cfg, kind, args.seed)
    trained = fit_model(kind, table, mcfg, args.mask)
    calibrate(trained, table)
    rep = evaluate(trained, table, "test")
    meta = {**meta_base, "config_hash": config_hash({**meta_base, "model": mcfg}), "model": kind,
            "mask": args.mask}
    save_artifact(trained, out / "model", meta)
    _report_json(out / "report.json", rep, meta, val_f1=trained.val_f1)
    plotting.confusion(rep.confusion, out / "confusion.png", f"{kind.upper()} ({args.mask})")
    if kind == "lstm":
        write_trace(trained.model.trace, out / "training_trace.csv")
        plotting.training_curves(trained.model.trace, out / "training_curves.png")
    return trained, rep


def cmd_train(args, cfg) -> None:
    out = _out_dir(args.out)
    segments, spec = load_scenario(args.data, cfg)
    table = build_table(segments, spec)
    meta_base = run_meta(args.seed, {"command": "train", **cfg}, dataset=Path(args.data).name)
    kinds = _kinds(args.model)
    results = {}
    for kind in kinds:
        sub = out / kind if len(kinds) > 1 else out
        results[kind] = _train_one(kind, table, cfg, args, sub, meta_base)
    if "lr" in results:
        lr_seconds = results["lr"][0].train_seconds
    else:  # cost baseline
        lr_seconds = fit_model("lr", table, _model_cfg(cfg, "lr", args.seed), args.mask).train_seconds
    rows, timing = [], {}
    for kind, (trained, rep) in results.items():
        rel = trained.train_seconds / lr_seconds if kind != "lr" else 1.0
        timing[kind] = {"train_seconds": trained.train_seconds, "relative_cost": rel,
                        "n_params": trained.n_params}
        rows.append([kind, f"{trained.train_seconds:.3f}", f"{rel:.1f}", trained.n_params])
        print(f"{kind}: F1 {rep.f1:.4f}  acc {rep.accuracy:.4f}  AUC {_fmt(rep.auc_roc)}  "
              f"train {trained.train_seconds:.2f}s ({rel:.1f}x LR)")
    _write_json(out / "timing.json", {"lr_baseline_seconds": lr_seconds, "models": timing})
    _write_csv(out / "table4.csv", ["model", "train_seconds", "relative_cost", "n_params"], rows)


def cmd_tune(args, cfg) -> None:
    if args.model not in ("svm", "lstm"):
        raise UnsupportedModel(f"model {args.model!r} has no tunable hyperparameters")
    out = _out_dir(args.out)
    segments, spec = load_scenario(args.data, cfg)
    table = build_table(segments, spec)
    kind = args.model
    base = _model_cfg(cfg, kind, args.seed)
    space = SVM_SPACE if kind == "svm" else LSTM_SPACE
    budget = cfg["tune"]
    trace_path = out / "trace.jsonl"
    resume = BOTrace.read_jsonl(trace_path) if args.resume else []
    if not args.resume and trace_path.exists():
        trace_path.unlink()

    def objective(params):
        trained = fit_model(kind, table, {**base, **params}, args.mask)
        calibrate(trained, table)
        return trained.val_f1, {"threshold": trained.threshold, "best_epoch": trained.best_epoch}

    def persist(entry):
        with open(trace_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    trace = bo_optimize(objective, space, budget["n_init"], budget["n_iters"],
                        seed=stage_seed(args.seed, "tune"), resume=resume, on_evaluation=persist)
    best = trace.best
    final = final_retrain(best["params"], table, kind, base, threshold=best["info"]["threshold"],
                          best_epoch=max(1, best["info"].get("best_epoch") or 1), mask=args.mask)
    rep = evaluate(final, table, "test")
    meta = run_meta(args.seed, {"command": "tune", **cfg, "model": base}, model=kind,
                    mask=args.mask, dataset=Path(args.data).name)
    save_artifact(final, out / "model", {**meta, "bo_best": best["params"],
                                         "bo_best_objective": best["objective"]})
    _report_json(out / "report.json", rep, meta, best_params=best["params"],
                 best_val_f1=best["objective"], n_evaluations=len(trace.evaluations))
    plotting.bo_trace([e["objective"] for e in trace.evaluations], out / "bo_trace.png",
                      budget["n_init"])
    print(f"{kind}: best val F1 {best['objective']:.4f} at {best['params']}; test F1 {rep.f1:.4f}")


def cmd_ablate(args, cfg) -> None:
    out = _out_dir(args.out)
    segments, spec = load_scenario(args.data, cfg)
    table = build_table(segments, spec)
    meta = run_meta(args.seed, {"command": "ablate", **cfg}, dataset=Path(args.data).name)
    masks = tuple(MASKS) if args.mask == "all" and not args.only_mask else (args.mask,)
    rows, records = [], []
    for kind in _kinds(args.model):
        mcfg = _model_cfg(cfg, kind, args.seed)
        for mask in masks:
            trained = fit_model(kind, table, mcfg, mask)
            calibrate(trained, table)
            rep = evaluate(trained, table, "test")
            rows.append([mask, *_metrics_row(kind, rep)])
            records.append({"model": kind, "mask": mask, "features": list(MASKS[mask]),
                            **rep.to_dict()})
            print(f"{kind:5s} {mask:8s} F1 {rep.f1:.4f}")
    _write_csv(out / "table1.csv", ["mask", "model", *METRIC_FIELDS], rows)
    _write_json(out / "ablation.json", {**meta, "results": records})
    plotting.ablation_bars(records, out / "ablation.png")


def cmd_generalize(args, cfg) -> None:
    out = _out_dir(args.out)
    root = Path(args.data)
    segments, spec = load_scenario(root / "scenario0", cfg)
    table0 = build_table(segments, spec)
    meta = run_meta(args.seed, {"command": "generalize", **cfg})
    models = {}
    for kind in _kinds(args.model):
        art = Path(args.models) / kind if args.models else None
        if art is not None and (art / "meta.json").exists():
            models[kind] = load_artifact(art)
        else:
            trained = fit_model(kind, table0, _model_cfg(cfg, kind, args.seed), args.mask)
            calibrate(trained, table0)
            save_artifact(trained, out / "models" / kind, {**meta, "model": kind})
            models[kind] = trained
    results = {}
    for name, table_name in (("scenario1", "table2.csv"), ("scenario2", "table3.csv")):
        segs, _ = load_scenario(root / name, cfg, need_split=False)
        rows = []
        for kind, trained in models.items():
            # frozen: the scenario-0 standardizer, weights and threshold are reused as-is
            table = build_table(segs, standardizer=trained.standardizer)
            rep = evaluate(trained, table, None)
            ref = evaluate(trained, table0, "test")
            rows.append(_metrics_row(kind, rep) + [_fmt(ref.f1)])
            results.setdefault(name, {})[kind] = {**rep.to_dict(), "reference_test_f1": ref.f1}
            plotting.confusion(rep.confusion, out / "figures" / f"{name}_{kind}.png",
                               f"{kind.upper()} on {name}")
            print(f"{name} {kind:5s} F1 {rep.f1:.4f} (scenario0 test {ref.f1:.4f})")
        _write_csv(out / table_name, ["model", *METRIC_FIELDS, "scenario0_test_f1"], rows)
    _write_json(out / "generalize.json", {**meta, "results": results})


def cmd_evaluate(args, cfg) -> None:
    out = _out_dir(args.out)
    trained = load_artifact(args.model_dir)
    need_split = args.part != "all"
    segs, spec = load_scenario(args.data, cfg, need_split=need_split)
    table = build_table(segs, spec, standardizer=trained.standardizer)
    rep = evaluate(trained, table, None if args.part == "all" else args.part)
    meta = run_meta(args.seed, {"command": "evaluate", **cfg}, model=trained.kind,
                    mask=trained.mask, dataset=Path(args.data).name, part=args.part)
    _report_json(out / "report.json", rep, meta)
    plotting.confusion(rep.confusion, out / "confusion.png", f"{trained.kind.upper()} ({args.part})")
    print(f"{trained.kind}: F1 {rep.f1:.4f}  acc {rep.accuracy:.4f}  AUC {_fmt(rep.auc_roc)}")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0, help="root random seed")
    common.add_argument("--out", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="occdetect", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"occdetect {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate the three synthetic scenarios")
    s.set_defaults(func=cmd_simulate)

    def data_cmd(name, help_, func, models, default_model=None,
                 data_help="scenario directory (from simulate)"):
        c = sub.add_parser(name, parents=[common], help=help_)
        c.add_argument("--data", required=True, help=data_help)
        c.add_argument("--model", choices=models, default=default_model, required=default_model is None)
        c.add_argument("--mask", choices=tuple(MASKS), default="all")
        c.set_defaults(func=func)
        return c

    data_cmd("train", "train, calibrate and test one model (or all)", cmd_train, (*MODEL_KINDS, "all"))
    t = data_cmd("tune", "Bayesian hyperparameter search, then retrain on train+val", cmd_tune,
                 MODEL_KINDS)
    t.add_argument("--resume", action="store_true", help="continue from an existing trace.jsonl")
    a = data_cmd("ablate", "all models under the three feature masks", cmd_ablate,
                 (*MODEL_KINDS, "all"), "all")
    a.add_argument("--only-mask", action="store_true", help="run just the --mask given")
    g = data_cmd("generalize", "evaluate frozen scenario-0 models on scenarios 1 and 2",
                 cmd_generalize, (*MODEL_KINDS, "all"), "all", "root directory written by simulate")
    g.add_argument("--models", help="directory holding lr/, svm/, lstm/ artifacts")

    e = sub.add_parser("evaluate", parents=[common], help="score a saved model on a dataset")
    e.add_argument("--model-dir", required=True, help="artifact directory (contains meta.json)")
    e.add_argument("--data", required=True, help="scenario directory")
    e.add_argument("--part", choices=("train", "val", "test", "all"), default="test")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    level = os.environ.get("OCCDETECT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except (OccupancyError, OSError, ValueError, KeyError) as exc:
        print(f"occdetect {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
