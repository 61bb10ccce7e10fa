"""Batch command-line front end: train, quantize-eval, search, report.

Every command is deterministic given its flags (seed included): re-running
rewrites output files with identical bytes. Wall-clock timestamps go only
to run.log. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 search found no feasible config.

The metrics file keeps one row per config id, sorted, so repeated runs
upsert their row instead of growing the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bitconfig, memory, models, search, training
from .bitconfig import ConfigError, ConfigSpace, Granularity, QuantConfig, config_id
from .graph import FormatError, load_dataset
from .models import GraphContext, build_model, load_checkpoint, save_checkpoint
from .training import TrainParams, finetune_quantized, train_full_precision

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INFEASIBLE = 3

METRICS_FILE = "metrics.csv"
CONFIG_DIR = "configs"


class UsageError(Exception):
    pass


class InfeasibleSearch(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(out_dir: Path, message: str) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(out_dir / "run.log", "a") as f:
        f.write(f"{stamp} {message}\n")


def _load_dataset(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"file not found: {path}")
    return load_dataset(path)


def _read_metrics(out_dir: Path) -> dict[str, str]:
    rows: dict[str, str] = {}
    path = out_dir / METRICS_FILE
    if path.exists():
        for line in path.read_text().splitlines()[1:]:
            if line.strip():
                rows[line.split(",", 1)[0]] = line
    return rows


def _upsert_metrics(out_dir: Path, row: str) -> None:
    rows = _read_metrics(out_dir)
    rows[row.split(",", 1)[0]] = row
    with open(out_dir / METRICS_FILE, "w") as f:
        f.write(",".join(memory.METRICS_COLUMNS) + "\n")
        for key in sorted(rows):
            f.write(rows[key] + "\n")


def _metrics_for(model, dataset, cfg, accuracy) -> str:
    report = memory.feature_memory_bits(model, dataset.graph, cfg)
    cid = "fp32" if cfg is None else config_id(cfg)
    return memory.metrics_row(
        cid, report.average_bits, report.memory_mb, report.saving_ratio_vs_fp32, accuracy
    )


def _save_config(out_dir: Path, cfg: QuantConfig) -> None:
    cfg_dir = out_dir / CONFIG_DIR
    cfg_dir.mkdir(exist_ok=True)
    (cfg_dir / f"{config_id(cfg)}.json").write_text(bitconfig.serialize(cfg))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    dataset = _load_dataset(args.dataset)
    out = _out_dir(args)
    model = build_model(args.arch, dataset.input_dim, dataset.num_classes, seed=args.seed)
    params = TrainParams(epochs=args.epochs, seed=args.seed)
    model, val, test = train_full_precision(model, dataset, params)
    save_checkpoint(model, out / "model.sgqm")
    _upsert_metrics(out, _metrics_for(model, dataset, None, test))
    _log(
        out,
        f"train arch={args.arch} dataset={args.dataset} seed={args.seed} "
        f"epochs={args.epochs} splits={int(dataset.train_mask.sum())}/"
        f"{int(dataset.val_mask.sum())}/{int(dataset.test_mask.sum())} "
        f"val={val:.4f} test={test:.4f}",
    )
    print(f"trained {args.arch}: val accuracy {val:.4f}, test accuracy {test:.4f}")
    return EXIT_OK


def cmd_quantize_eval(args) -> int:
    dataset = _load_dataset(args.dataset)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"file not found: {args.checkpoint}")
    if not os.path.exists(args.config):
        raise FileNotFoundError(f"file not found: {args.config}")
    model = load_checkpoint(args.checkpoint)
    cfg = bitconfig.parse(Path(args.config).read_text())
    out = _out_dir(args)
    params = TrainParams.for_finetune(epochs=args.epochs, seed=args.seed)
    tuned, val, test = finetune_quantized(model, dataset, cfg, params)
    save_checkpoint(tuned, out / f"finetuned-{config_id(cfg)}.sgqm")
    _save_config(out, cfg)
    _upsert_metrics(out, _metrics_for(model, dataset, cfg, test))
    _log(out, f"quantize-eval config={config_id(cfg)} val={val:.4f} test={test:.4f}")
    report = memory.feature_memory_bits(model, dataset.graph, cfg)
    print(
        f"config {config_id(cfg)}: test accuracy {test:.4f}, "
        f"average bits {report.average_bits:.4g}, memory {report.memory_mb:.4g} MB, "
        f"saving {report.saving_ratio_vs_fp32:.4g}x"
    )
    return EXIT_OK


def _space_from_file(path: str, model, dataset) -> ConfigSpace:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed space file: {e}") from e
    allowed = {"granularity", "template", "split_points"}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown space keys: {sorted(unknown)}")
    if "granularity" not in obj:
        raise ConfigError("space file missing 'granularity'")
    gran = Granularity(obj["granularity"])
    template = tuple(int(t) for t in obj.get("template", bitconfig.BIT_TEMPLATE))
    buckets = None
    if gran.per_bucket:
        if "split_points" in obj:
            buckets = bitconfig.DegreeBuckets(tuple(int(p) for p in obj["split_points"]))
        else:
            buckets = bitconfig.DegreeBuckets.from_degrees(dataset.graph.degrees())
    return ConfigSpace(gran, model.depth, template, buckets)


def cmd_search(args) -> int:
    dataset = _load_dataset(args.dataset)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"file not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    space = _space_from_file(args.config, model, dataset)
    jobs = 1 if os.environ.get("SGQ_DETERMINISTIC") == "1" else args.jobs

    ctx = GraphContext(model, dataset)
    fp_val = training.evaluate(model, ctx, None, "val")
    calibration = models.collect_calibration(model, ctx, space.buckets)
    eval_params = TrainParams.for_finetune(epochs=args.search_epochs, seed=args.seed)

    def evaluator(cfg: QuantConfig) -> float:
        _, val, _ = finetune_quantized(model, dataset, cfg, eval_params, calibration)
        return val

    def memory_fn(cfg: QuantConfig) -> float:
        return memory.feature_memory_bits(model, dataset.graph, cfg).memory_mb

    log_rows: list[str] = []

    def log(m: search.Measured) -> None:
        pred = "" if m.predicted is None else memory.format_number(m.predicted)
        log_rows.append(
            f"{m.iteration},{config_id(m.config)},{pred},"
            f"{memory.format_number(m.accuracy)},{memory.format_number(m.memory)}"
        )

    params = search.SearchParams(
        n_mea=args.n_mea,
        n_iter=args.n_iter,
        n_sample=args.n_sample,
        drop_threshold=args.drop_threshold,
        seed=args.seed,
    )
    result = search.explore(space, evaluator, fp_val, params, memory_fn, jobs=jobs, log=log)

    with open(out / "search_log.csv", "w") as f:
        f.write("iteration,config_id,predicted_acc,measured_acc,memory_mb\n")
        f.write("".join(r + "\n" for r in log_rows))
    with open(out / "trajectory.csv", "w") as f:
        f.write("iteration,best_feasible_memory_mb\n")
        for i, mb in enumerate(result.trajectory, start=1):
            f.write(f"{i},{'' if mb == float('inf') else memory.format_number(mb)}\n")
    _log(out, f"search measured={len(result.all_measured)} feasible={result.feasible}")

    if not result.feasible:
        print("no feasible config: nothing measured stays within the drop threshold")
        raise InfeasibleSearch()

    # the short-finetune search accuracy is only a ranking signal; re-run in full
    winner = result.best_config
    final_params = TrainParams.for_finetune(epochs=args.epochs, seed=args.seed)
    _, val, test = finetune_quantized(model, dataset, winner, final_params, calibration)
    (out / "winner.json").write_text(bitconfig.serialize(winner))
    _save_config(out, winner)
    _upsert_metrics(out, _metrics_for(model, dataset, winner, test))
    report = memory.feature_memory_bits(model, dataset.graph, winner)
    print(
        f"winner {config_id(winner)}: test accuracy {test:.4f}, "
        f"memory {report.memory_mb:.4g} MB, saving {report.saving_ratio_vs_fp32:.4g}x"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    rows = _read_metrics(out)
    if not rows:
        raise FileNotFoundError(f"no metrics rows under {out}")
    configs = {}
    cfg_dir = out / CONFIG_DIR
    if cfg_dir.is_dir():
        for f in sorted(cfg_dir.glob("*.json")):
            cfg = bitconfig.parse(f.read_text())
            configs[config_id(cfg)] = cfg
    header = f"{'config':<14} {'granularity':<13} {'avg bits':>9} {'memory MB':>10} {'saving':>8} {'accuracy':>9}"
    lines = [header, "-" * len(header)]
    series: list[tuple[str, float, float]] = []
    for cid in sorted(rows):
        _, avg_bits, mem_mb, saving, acc = rows[cid].split(",")
        gran = "full-precision" if cid == "fp32" else (
            configs[cid].granularity.value if cid in configs else "?"
        )
        lines.append(
            f"{cid:<14} {gran:<13} {avg_bits:>9} {mem_mb:>10} {saving:>8} {acc:>9}"
        )
        error_rate = 1.0 - float(acc)
        series.append((gran, float(mem_mb), error_rate))
    table = "\n".join(lines)
    print(table)
    with open(out / "fig7.csv", "w") as f:
        f.write("granularity,memory_mb,error_rate\n")
        for gran, mem_mb, err in sorted(series):
            f.write(f"{gran},{memory.format_number(mem_mb)},{memory.format_number(err)}\n")
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="sgq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, config=False):
        p.add_argument("--dataset", required=True, help="SGQD v1 container path")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="SGQM model checkpoint")
        if config:
            p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=200)
        p.add_argument("--jobs", type=int, default=1, help="cap on concurrent evaluations")
        p.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="train a full-precision model")
    p_train.add_argument("--arch", required=True, choices=[a.value for a in models.Arch])
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_q = sub.add_parser("quantize-eval", help="finetune under a bit config and report")
    common(p_q, checkpoint=True, config=True)
    p_q.set_defaults(func=cmd_quantize_eval)

    p_s = sub.add_parser("search", help="automatic bit selection over a config space")
    common(p_s, checkpoint=True, config=True)
    p_s.add_argument("--n-mea", type=int, default=40)
    p_s.add_argument("--n-iter", type=int, default=5)
    p_s.add_argument("--n-sample", type=int, default=2000)
    p_s.add_argument("--drop-threshold", type=float, default=0.005)
    p_s.add_argument("--search-epochs", type=int, default=50, help="finetune budget per measurement")
    p_s.set_defaults(func=cmd_search)

    p_r = sub.add_parser("report", help="tabulate metrics rows in a run directory")
    p_r.add_argument("--out", required=True, help="run directory to aggregate")
    p_r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleSearch:
        return EXIT_INFEASIBLE
    except (FileNotFoundError, FormatError, ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
