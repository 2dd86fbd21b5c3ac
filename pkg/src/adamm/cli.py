"""Command-line surface: synth / train / eval / sweep / report / gradcheck.

Exit codes: 0 success, 2 configuration or input error, 3 numerical abort
(including gradient-check failures).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import gradcheck as gradcheck_mod
from .checkpoint import CheckpointFormatError
from .metrics import METRIC_NAMES, REGION_NAMES, MetricsRecord, RegionMetrics, sweep_aggregate
from .metrics import table_to_csv, table_to_text
from .trainer import (
    LOG_COLUMNS,
    ConfigError,
    NumericalAbort,
    TrainConfig,
    eval_sweep,
    format_log_row,
    infer_case,
    init_state,
    load_checkpoint,
    load_dataset,
    per_case_csv,
    save_checkpoint,
    train,
    write_synthetic_dataset,
)
from .metrics import evaluate_case
from .volumes import LabelVolume, ModalityCombination, VolumeFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parse_size(values):
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise ConfigError("--size takes one or three integers")


def _cmd_synth(args):
    size = _parse_size(args.size)
    names = write_synthetic_dataset(args.out, args.cases, size, seed=args.seed)
    print(f"wrote {len(names)} cases to {args.out}")
    return EXIT_OK


def _apply_overrides(data: dict, overrides) -> dict:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data[key] = value
    return data


def _load_config(args) -> TrainConfig:
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
    _apply_overrides(data, args.set)
    if getattr(args, "pretrain_teacher", None) is not None:
        data["pretrain_teacher_epochs"] = args.pretrain_teacher
    return TrainConfig.from_dict(data)


def _cmd_train(args):
    dataset = load_dataset(args.data)
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        cfg = _load_config(args)
        state = init_state(cfg, len(dataset))
    log_path = Path(args.log) if args.log else Path(str(args.out) + "_log.csv")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a" if args.resume else "w") as log_file:
        if not args.resume:
            log_file.write(",".join(LOG_COLUMNS) + "\n")

        def log(breakdown):
            log_file.write(format_log_row(breakdown) + "\n")

        train(state, dataset, max_steps=args.steps, log=log)
    save_checkpoint(args.out, state)
    print(f"trained to step {state.step}/{state.total_steps}; checkpoint at {args.out}")
    print(f"step log at {log_path}")
    return EXIT_OK


def _print_record(name: str, record: MetricsRecord):
    for region in REGION_NAMES:
        m = record.region(region)
        cells = "  ".join(f"{metric}={getattr(m, metric):.4f}" for metric in METRIC_NAMES)
        print(f"{name:<14} {region:<3} {cells}")


def _cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    combo = ModalityCombination.from_code(args.combo)
    records = []
    for case in dataset:
        probs = infer_case(
            state.model, case, combo, use_garm=state.cfg.garm, gate=not args.no_gate
        )
        record = evaluate_case(probs, LabelVolume(case.labels), spacing=case.spacing)
        records.append(record)
        _print_record(case.name, record)
    mean = {}
    for region in REGION_NAMES:
        for metric in METRIC_NAMES:
            col = np.array([getattr(r.region(region), metric) for r in records])
            col = col[~np.isnan(col)]
            mean[(region, metric)] = float(col.mean()) if col.size else float("nan")
    for region in REGION_NAMES:
        cells = "  ".join(f"{m}={mean[(region, m)]:.4f}" for m in METRIC_NAMES)
        print(f"{'mean':<14} {region:<3} {cells}")
    return EXIT_OK


def _cmd_sweep(args):
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    table, rows = eval_sweep(state.model, dataset, use_garm=state.cfg.garm, gate=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    per_case_path = Path(str(out) + "_per_case.csv")
    per_case_path.write_text(per_case_csv(rows))
    if args.format == "csv":
        table_path = Path(str(out) + "_table.csv")
        table_path.write_text(table_to_csv(table))
    else:
        table_path = Path(str(out) + "_table.txt")
        table_path.write_text(table_to_text(table))
    print(table_to_text(table))
    print(f"per-case metrics: {per_case_path}")
    print(f"aggregate table:  {table_path}")
    return EXIT_OK


def rows_from_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {"case": row["case"], "combination": row["combination"], "region": row["region"]}
            for metric in METRIC_NAMES:
                parsed[metric] = float(row[metric])
            rows.append(parsed)
    if not rows:
        raise ConfigError(f"no rows in {path}")
    return rows


def aggregate_rows(rows: list):
    """Rebuild the sweep table from per-case rows (mean per combination)."""
    records = {}
    codes = sorted({r["combination"] for r in rows})
    for code in codes:
        region_stats = {}
        for region in REGION_NAMES:
            sel = [r for r in rows if r["combination"] == code and r["region"] == region]
            values = {}
            for metric in METRIC_NAMES:
                col = np.array([r[metric] for r in sel])
                col = col[~np.isnan(col)]
                values[metric] = float(col.mean()) if col.size else float("nan")
            region_stats[region.lower()] = RegionMetrics(**values)
        records[code] = MetricsRecord(**region_stats)
    return sweep_aggregate(records)


def _cmd_report(args):
    table = aggregate_rows(rows_from_csv(args.per_case))
    rendered = table_to_csv(table) if args.format == "csv" else table_to_text(table)
    if args.out:
        Path(args.out).write_text(rendered)
        print(f"report written to {args.out}")
    else:
        print(rendered, end="")
    return EXIT_OK


def _cmd_gradcheck(args):
    dtype = torch.float64 if args.dtype == "double" else torch.float32
    results = gradcheck_mod.run_suite(dtype=dtype, tol=args.tol)
    tol = args.tol if args.tol is not None else gradcheck_mod.DEFAULT_TOL[dtype]
    failed = False
    for name, err, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<22} max relative error {err:.3e} (tol {tol:.0e})")
        failed = failed or not ok
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adamm", description="Missing-modality segmentation harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--cases", type=int, default=8)
    p.add_argument("--size", type=int, nargs="+", default=[24])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train teacher+student on a dataset directory")
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step CSV log path")
    p.add_argument("--steps", type=int, help="cap the number of steps this invocation")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument(
        "--pretrain-teacher", type=int, metavar="EPOCHS",
        help="two-phase regime: teacher-only epochs first, then a frozen-teacher distillation",
    )
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate one combination on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--combo", default="1111")
    p.add_argument("--no-gate", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="evaluate all 15 combinations and emit reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--format", choices=("csv", "txt"), default="csv")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="re-aggregate a per-case CSV into the table")
    p.add_argument("--per-case", required=True)
    p.add_argument("--format", choices=("csv", "txt"), default="txt")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--dtype", choices=("single", "double"), default="double")
    p.add_argument("--tol", type=float)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        for key, value in exc.breakdown.items():
            print(f"  {key} = {value}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, VolumeFormatError, CheckpointFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
