"""Command-line surface.

Exit codes are stable API: 0 ok, 2 config/input error, 3 diverged run,
4 detection failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .detector import DetectorConfig
from .errors import EseizeError, InputError
from .harness import (ExperimentConfig, auto_k_values, autorun, read_trace,
                      run_training, save_run, sweep_k)
from .detector import select_khat
from .report import render_runs_dir, write_sweep_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_DETECTION = 4


class _OutDirLock:
    """Commands are not re-entrant over the same output directory."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".eseize.lock")
        os.makedirs(out_dir, exist_ok=True)

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise InputError(f"output directory is locked ({self.path}); "
                             "remove the lock file if no other command is running")
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.remove(self.path)


def _load_config(path, seed=None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    config = ExperimentConfig.from_json_file(path)
    if seed is not None:
        config = config.with_updates(seeds=[int(seed)])
    return config


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    with _OutDirLock(args.out):
        diverged = False
        for seed in config["seeds"]:
            result = run_training(config, seed)
            rd = save_run(args.out, config, result)
            status = "DIVERGED" if result.diverged else "ok"
            print(f"seed {seed}: {status}  id_acc={result.id_acc}  "
                  f"ood_mean={result.ood_mean}  -> {rd}")
            diverged = diverged or result.diverged
    return EXIT_DIVERGED if diverged else EXIT_OK


def _parse_ks(spec: str, config: ExperimentConfig):
    if spec == "auto":
        return auto_k_values(config)
    try:
        ks = [int(v) for v in spec.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise InputError(f"cannot parse --ks: {exc}")
    if len(set(ks)) != len(ks):
        raise InputError("duplicate k values in --ks")
    return ks


def cmd_sweep(args) -> int:
    config = _load_config(args.config, args.seed)
    ks = _parse_ks(args.ks, config)
    with _OutDirLock(args.out):
        rows, results = sweep_k(config, ks, config["seeds"])
        write_sweep_table(rows, os.path.join(args.out, "sweep_table.csv"))
        for (k, seed), res in sorted(results.items()):
            save_run(args.out, config.with_updates(
                unfreeze={**config["unfreeze"], "k": k}), res)
        diverged = any(res.diverged for res in results.values())
        for row in rows:
            print(f"k={row['k']:>6}  dID={row['mean_delta_id']:+.4f}  "
                  f"dOOD={row['mean_delta_ood']:+.4f}  (n={row['n_seeds']})")
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_detect(args) -> int:
    if not os.path.exists(args.trace):
        raise InputError(f"trace file not found: {args.trace}")
    meta, cols = read_trace(args.trace)
    stride = args.stride
    if stride is None:
        try:
            stride = int(meta.get("stride", ""))
        except ValueError:
            raise InputError("trace metadata has no stride; pass --stride")
    cfg = DetectorConfig(tau=args.tau, eps=args.eps)
    traces = {m: cols[m] for m in ("trf", "s_avg", "s_worst")}
    results, errors = select_khat(traces, cfg, stride)
    payload = {}
    for metric in ("trf", "s_avg", "s_worst"):
        if metric in results:
            r = results[metric]
            payload[metric] = {"metric": metric, "t_rise": r.t_rise,
                               "t_stab": r.t_stab, "k_hat": r.k_hat,
                               "tau": cfg.tau, "eps": cfg.eps}
            print(f"{metric}: t_rise={r.t_rise} t_stab={r.t_stab} k_hat={r.k_hat}")
        else:
            payload[metric] = {"metric": metric, "error": errors[metric],
                               "tau": cfg.tau, "eps": cfg.eps}
            print(f"{metric}: FAILED ({errors[metric]})", file=sys.stderr)
    out_path = args.out or (os.path.splitext(args.trace)[0] + "_detection.json")
    with open(out_path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    return EXIT_DETECTION if errors else EXIT_OK


def cmd_autorun(args) -> int:
    config = _load_config(args.config, args.seed)
    with _OutDirLock(args.out):
        report, _ = autorun(config, out_dir=args.out)
        print("metric,k_hat,id_acc,ood_acc,wr")
        for metric, row in report.per_metric.items():
            print(f"{metric},{row['k_hat']},{row['id_acc']:.4f},"
                  f"{row['ood_acc']:.4f},{row['wr']:.2f} ({row['wr'] * 100:.0f}%)")
        for metric, reason in report.detector_errors.items():
            print(f"{metric}: detection failed ({reason})", file=sys.stderr)
        print(f"baseline k=0: id_acc={report.baseline['id_acc']:.4f} "
              f"ood_acc={report.baseline['ood_acc']:.4f}")
    if report.detector_errors and not report.per_metric:
        return EXIT_DETECTION
    return EXIT_OK


def cmd_report(args) -> int:
    if not os.path.isdir(args.runs):
        raise InputError(f"runs directory not found: {args.runs}")
    out_dir = args.out or args.runs
    written = render_runs_dir(args.runs, out_dir, fmt=args.format)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="eseize",
        description="Early-training intervention experiments and dynamics metrics.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="single training run per seed")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None,
                   help="override the config seed list with one seed")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="sweep the unfreezing interval k")
    s.add_argument("--config", required=True)
    s.add_argument("--ks", default="auto",
                   help="comma list of k values, or 'auto' (0, 1, log-spaced to k_max)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("detect", help="stabilization detection on a trace CSV")
    d.add_argument("--trace", required=True)
    d.add_argument("--tau", type=int, default=3)
    d.add_argument("--eps", type=float, default=0.02)
    d.add_argument("--stride", type=int, default=None)
    d.add_argument("--out", default=None, help="detection JSON path")
    d.set_defaults(func=cmd_detect)

    a = sub.add_parser("autorun", help="detect k_hat then run the winning-rate protocol")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_autorun)

    r = sub.add_parser("report", help="render tables and figures from stored runs")
    r.add_argument("--runs", required=True)
    r.add_argument("--format", choices=("csv", "svg"), default="csv")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EseizeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
