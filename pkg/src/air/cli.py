"""Command-line entry point: ``air {train,eval,sweep,verify}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path


from .config import ConfigError, ExperimentConfig, SweepSpec, config_hash, sweep_point
from .evaluation import GapReport, gap_decomposition
from .modelio import ModelFormatError, load_model, save_model
from .training import TrainHistory, TrainingDiverged, train
from .verify import run_verification

log = logging.getLogger("air")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
HISTORY_HEADER = ("iter", "train_loss", "val_bound")
SWEEP_HEADER = ("axis", "value", "k", "neg_log_px", "neg_bound", "delta_infer", "seed", "status")
VERIFY_HEADER = ("check_name", "status", "value", "threshold")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def write_table(path, header, rows, seed, cfg_hash, delimiter=",") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed} config_hash={cfg_hash}\n")
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_table(path, delimiter=",") -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines, delimiter=delimiter))


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    try:
        if getattr(args, "seed", None) is not None:
            cfg.train = type(cfg.train).from_dict({**cfg.train.to_dict(), "seed": args.seed})
        if getattr(args, "eval_k", None) is not None:
            if args.eval_k < 1:
                raise ValueError("--eval-k must be at least 1")
            cfg.eval_k = args.eval_k
        if getattr(args, "svi_steps", None) is not None:
            cfg.svi = type(cfg.svi).from_dict({**cfg.svi.to_dict(), "steps": args.svi_steps})
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    return cfg


def _out_dir(args, cfg=None) -> Path:
    out = args.out or (cfg.out if cfg is not None else None)
    if out is None:
        raise CliError("no output directory: pass --out or set 'out' in the config", EXIT_CONFIG)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(path) -> ExperimentConfig:
    if path is None:
        raise CliError("--config is required", EXIT_CONFIG)
    try:
        return ExperimentConfig.load(path)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _write_history(out: Path, history: TrainHistory, cfg: ExperimentConfig) -> None:
    write_table(out / "history.csv", HISTORY_HEADER, history.to_csv_rows(), cfg.train.seed, cfg.hash())


def _write_resolved(out: Path, cfg: ExperimentConfig) -> None:
    resolved = cfg.resolved()
    resolved["config_hash"] = cfg.hash()
    (out / "resolved-config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def run_training(cfg: ExperimentConfig, out: Path):
    """Train one model and write its artifacts; returns ``(model, data, history)``."""
    try:
        data = cfg.build_dataset()
        model = cfg.build_model()
    except (ValueError, OSError) as exc:
        raise CliError(f"cannot build experiment: {exc}", EXIT_CONFIG) from None
    _write_resolved(out, cfg)
    data.write_provenance(out / "provenance.json")
    try:
        history = train(model, data, cfg.objective, cfg.train)
    except TrainingDiverged as exc:
        _write_history(out, exc.history, cfg)
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    _write_history(out, history, cfg)
    save_model(out / "model.airm", model.state())
    return model, data, history


def run_gap_report(cfg: ExperimentConfig, model, data, out: Path) -> GapReport:
    x = getattr(data, cfg.eval_split)
    if len(x) == 0:
        raise CliError(f"{cfg.eval_split} split is empty", EXIT_CONFIG)
    report = gap_decomposition(model, x, cfg.eval_k, cfg.svi, seed=cfg.train.seed, split=cfg.eval_split)
    write_table(out / "gap_report.csv", GapReport.CSV_HEADER, [report.csv_row()], cfg.train.seed, cfg.hash())
    return report


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    out = _out_dir(args, cfg)
    _, _, history = run_training(cfg, out)
    log.info("best iteration %d, validation bound %.4f", history.best_iteration, history.best_val)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    out = _out_dir(args, cfg)
    if args.model is None:
        raise CliError("--model is required", EXIT_CONFIG)
    try:
        state = load_model(args.model)
    except (ModelFormatError, OSError) as exc:
        raise CliError(f"cannot read model {args.model}: {exc}", EXIT_CONFIG) from None
    try:
        data = cfg.build_dataset()
        model = cfg.build_model()
        model.load_state(state)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(f"model does not match config: {exc}", EXIT_CONFIG) from None
    report = run_gap_report(cfg, model, data, out)
    print(",".join(str(v) for v in report.csv_row()))
    return EXIT_OK


@dataclass
class SweepRow:
    axis: str
    value: float
    k: int
    neg_log_px: float
    neg_bound: float
    delta_infer: float
    seed: int
    status: str

    def as_tuple(self) -> tuple:
        return (self.axis, self.value, self.k, self.neg_log_px, self.neg_bound, self.delta_infer, self.seed, self.status)


def _run_cell(cfg: ExperimentConfig, axis: str, value: float, k: int, seed: int, out: Path) -> SweepRow:
    out.mkdir(parents=True, exist_ok=True)
    nan = float("nan")
    try:
        model, data, _ = run_training(cfg, out)
        rep = run_gap_report(cfg, model, data, out)
    except CliError as exc:
        status = "diverged" if exc.code == EXIT_DIVERGED else "error"
        log.warning("sweep cell %s=%g k=%d seed=%d failed: %s", axis, value, k, seed, exc)
        return SweepRow(axis, value, k, nan, nan, nan, seed, status)
    except Exception as exc:  # noqa: BLE001 - a failed child must not stop the sweep
        log.warning("sweep cell %s=%g k=%d seed=%d failed: %r", axis, value, k, seed, exc)
        return SweepRow(axis, value, k, nan, nan, nan, seed, "error")
    return SweepRow(axis, value, k, -rep.log_px, -rep.amortized_bound, rep.delta_infer, seed, "ok")


def _cell_job(job):
    cfg, axis, value, k, seed, out, level = job
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return _run_cell(cfg, axis, value, k, seed, out)


def baseline_curves(rows: list[SweepRow]) -> dict[int, list[tuple]]:
    """Per-k ``(value, seed, neg_log_px - baseline)``; baseline is the value-0 run of that seed."""
    curves: dict[int, list[tuple]] = {}
    base = {(r.k, r.seed): r.neg_log_px for r in rows if r.value == 0 and r.status == "ok"}
    for r in rows:
        b = base.get((r.k, r.seed))
        delta = r.neg_log_px - b if b is not None and r.status == "ok" else float("nan")
        curves.setdefault(r.k, []).append((r.value, r.seed, delta))
    return curves


def run_sweep(spec: SweepSpec, out: Path, jobs: int = 1) -> list[SweepRow]:
    level = logging.getLogger().level
    jobs_list = []
    for value, k, seed in spec.cells():
        cfg = sweep_point(spec.base, spec.axis, value, k, seed)
        cell_dir = out / "cells" / f"{spec.axis}={value:g}_k={k}_seed={seed}"
        jobs_list.append((cfg, spec.axis, value, k, seed, cell_dir, level))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_job, jobs_list))
    else:
        rows = [_run_cell(*job[:-1]) for job in jobs_list]
    rows.sort(key=lambda r: (r.value, r.k, r.seed))
    return rows


def cmd_sweep(args) -> int:
    if args.config is None:
        raise CliError("--config is required", EXIT_CONFIG)
    try:
        spec = SweepSpec.load(args.config)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    base = _apply_overrides(spec.base, args)
    if args.seed is not None:
        spec.seeds = [args.seed]
    spec.base = base
    out = _out_dir(args, base)
    raw = {
        "base": base.to_dict(),
        "axis": spec.axis,
        "values": spec.values,
        "ks": spec.ks,
        "seeds": spec.seeds,
    }
    h = config_hash(raw)
    seed_tag = "+".join(str(s) for s in spec.seeds)
    (out / "resolved-sweep.json").write_text(json.dumps({**raw, "config_hash": h}, indent=2, sort_keys=True) + "\n")
    rows = run_sweep(spec, out, max(1, args.jobs))
    write_table(out / "sweep.csv", SWEEP_HEADER, [r.as_tuple() for r in rows], seed_tag, h)
    if 0.0 in spec.values:
        for k, curve in baseline_curves(rows).items():
            write_table(out / f"curve_k{k}.tsv", ("value", "seed", "neg_log_px_minus_baseline"), curve, seed_tag, h, "\t")
    else:
        log.warning("no axis value 0 in the sweep; baseline-subtracted curves skipped")
    failed = sum(r.status != "ok" for r in rows)
    if failed:
        log.warning("%d of %d sweep cells failed", failed, len(rows))
    print(out / "sweep.csv")
    return EXIT_OK


def _parse_tolerances(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"tolerance override {item!r} is not NAME=VALUE", EXIT_CONFIG)
        try:
            out[key] = float(value)
        except ValueError:
            raise CliError(f"tolerance {key!r} is not a number", EXIT_CONFIG) from None
    return out


def cmd_verify(args) -> int:
    overrides = _parse_tolerances(args.tol)
    out = Path(args.out) if args.out else None
    try:
        results = run_verification(overrides)
    except KeyError as exc:
        raise CliError(str(exc.args[0]), EXIT_CONFIG) from None
    rows = [(r.name, r.status, r.value, r.threshold) for r in results]
    h = config_hash({"tolerances": overrides})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "verify.tsv", VERIFY_HEADER, rows, "fixed", h, "\t")
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(VERIFY_HEADER)
    w.writerows(rows)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="air", description="Regularized amortized inference for VAEs: train, evaluate, sweep, verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help):
        p.add_argument("--config", help=config_help)
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--eval-k", type=int, dest="eval_k", help="importance samples for the amortized test bound")
        p.add_argument("--svi-steps", type=int, dest="svi_steps", help="IW-SVI gradient steps per example")

    p = sub.add_parser("train", help="train one model")
    common(p, "experiment config (JSON)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="inference-gap report for a trained model")
    common(p, "experiment config (JSON)")
    p.add_argument("--model", help="parameter file written by train")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate across a regularization axis")
    common(p, "sweep spec (JSON)")
    p.add_argument("--jobs", type=int, default=1, help="parallel child processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the closed-form oracle checks")
    p.add_argument("--out", help="directory for verify.tsv")
    p.add_argument("--tol", action="append", metavar="NAME=VALUE", help="override a tolerance")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("AIR_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        print(f"air: AIR_LOG must be one of error, info, debug (got {level.lower()!r})", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"air: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
