"""Experiment orchestration: configured training runs with intervention
schedules and metric logging, ID/OOD evaluation, k-sweeps, and the
winning-rate protocol."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .data import Dataset, metric_sample, ood_suite
from .detector import DetectorConfig, DetectionResult, select_khat
from .errors import InputError
from .interventions import (FisherPenaltyConfig, UnfreezeSchedule,
                            WarmupSchedule, apply_interventions, trainable_set)
from .metrics import SharpnessConfig, MetricRecord, measure
from .nn import Model, loss_only, save_checkpoint
from .optim import OptimizerState
from .rng import PrngStreams

SCHEMA_VERSION = 1
TRACE_COLUMNS = ("step", "trf", "s_avg", "s_worst", "loss", "n_trainable")

_CONFIG_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "arch": {"kind": "mlp", "hidden": [64, 64, 64]},
    "dataset": {"kind": "digits14", "n_train": 10000, "n_test": 2000, "seed": 0},
    "optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 0.01,
                  "momentum": 0.9, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "total_steps": 2000,
    "batch_size": 128,
    "unfreeze": {"k": 0, "order": "top_down"},
    "warmup": {"divisor": 1.0, "switch_step": 0},
    "fisher_penalty": {"alpha": 0.0, "every": 10, "delay": 0, "hvp_eps": 1e-3},
    "sharpness": {"rho": 0.01, "n_noise": 15, "c_mode": "abs_w", "c_floor": 1e-12,
                  "norm": "l2", "pgd_steps": 20, "pgd_step_frac": 0.25,
                  "pgd_restarts": 1},
    "detector": {"tau": 3, "eps": 0.02},
    "record_stride": 10,
    "metric_sample_cap": 2048,
    "seeds": [0, 1, 2, 3],
    "k_max_rule": "equal_division",
    "autorun": {"phase_a_steps": None, "phase_a_stride": None, "n_random": 10},
}


def _merge_checked(defaults, given, path=""):
    if not isinstance(given, dict):
        raise InputError(f"config section {path or '<root>'} must be an object")
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise InputError(f"unknown config key: {path}{key}")
        if isinstance(defaults[key], dict) and key not in ("arch", "dataset"):
            out[key] = _merge_checked(defaults[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        merged = _merge_checked(_CONFIG_DEFAULTS, d)
        if merged["schema_version"] != SCHEMA_VERSION:
            raise InputError(f"unsupported config schema version: {merged['schema_version']}")
        if merged["k_max_rule"] != "equal_division":
            raise InputError(f"unknown k_max_rule: {merged['k_max_rule']}")
        if merged["total_steps"] < 1 or merged["batch_size"] < 1:
            raise InputError("total_steps and batch_size must be positive")
        return ExperimentConfig(merged)

    @staticmethod
    def from_json_file(path) -> "ExperimentConfig":
        with open(path) as f:
            return ExperimentConfig.from_dict(json.load(f))

    def __getitem__(self, key):
        return self.raw[key]

    def with_updates(self, **top_level) -> "ExperimentConfig":
        d = copy.deepcopy(self.raw)
        d.update(top_level)
        return ExperimentConfig(d)

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @property
    def n_blocks(self) -> int:
        kind = self.raw["arch"]["kind"]
        if kind == "mlp":
            return len(self.raw["arch"]["hidden"])
        return 3  # smallconv: conv, conv, dense

    def k_max(self) -> int:
        return max(1, self.raw["total_steps"] // self.n_blocks)

    def sharpness_config(self) -> SharpnessConfig:
        s = self.raw["sharpness"]
        return SharpnessConfig(rho=s["rho"], n_noise=s["n_noise"], c_mode=s["c_mode"],
                               c_floor=s["c_floor"], norm=s["norm"],
                               pgd_steps=s["pgd_steps"], pgd_step_frac=s["pgd_step_frac"],
                               pgd_restarts=s["pgd_restarts"])

    def detector_config(self) -> DetectorConfig:
        d = self.raw["detector"]
        return DetectorConfig(tau=d["tau"], eps=d["eps"])


# ---------------------------------------------------------------------------
# data

_DATASET_CACHE: dict = {}


def build_datasets(config: ExperimentConfig):
    """(train, test) for the config's dataset spec; cached per spec."""
    spec = config["dataset"]
    key = json.dumps(spec, sort_keys=True)
    if key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    kind = spec.get("kind")
    if kind == "digits14":
        train, test = data_mod.digits14(spec.get("n_train", 10000),
                                        spec.get("n_test", 2000),
                                        spec.get("seed", 0))
    elif kind == "idx":
        train = data_mod.load_idx(spec["train_images"], spec["train_labels"],
                                  downsample_14=spec.get("downsample_14", False),
                                  subset_n=spec.get("subset_n"), split="train")
        test = data_mod.load_idx(spec["test_images"], spec["test_labels"],
                                 downsample_14=spec.get("downsample_14", False),
                                 subset_n=spec.get("test_subset_n"), split="test")
    elif kind == "synthetic":
        seed = spec.get("seed", 0)
        train = data_mod.make_synthetic(spec["task"], spec.get("n_train", 2000),
                                        spec.get("noise_sd", 0.05), seed, split="train")
        test = data_mod.make_synthetic(spec["task"], spec.get("n_test", 1000),
                                       spec.get("noise_sd", 0.05), seed + 1, split="test")
    else:
        raise InputError(f"unknown dataset kind: {kind!r}")
    _DATASET_CACHE[key] = (train, test)
    return train, test


def _complete_arch(config: ExperimentConfig, train: Dataset) -> dict:
    arch = dict(config["arch"])
    n_classes = max(train.n_classes, 2)
    arch["n_classes"] = n_classes
    if arch["kind"] == "mlp":
        arch["input_dim"] = train.x.shape[1]
    elif arch["kind"] == "smallconv":
        if train.image_hw is None:
            raise InputError("smallconv requires image data")
        arch["in_hw"] = list(train.image_hw)
        arch.setdefault("channels", [8, 16])
        arch.setdefault("dense", 64)
    else:
        raise InputError(f"unknown arch kind: {arch['kind']!r}")
    return arch


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    id_acc: float
    ood_cells: dict            # kind -> {severity: acc}
    ood_mean: float | None

    def to_dict(self):
        return {"id_acc": self.id_acc, "ood_mean": self.ood_mean,
                "ood_cells": self.ood_cells}


@dataclass
class RunResult:
    seed: int
    config_hash: str
    records: list
    report: EvalReport | None
    diverged: bool
    model: Model | None = None
    final_scope: list = field(default_factory=list)

    @property
    def id_acc(self):
        return self.report.id_acc if self.report else None

    @property
    def ood_mean(self):
        return self.report.ood_mean if self.report else None


def accuracy(model: Model, ds: Dataset) -> float:
    preds = np.argmax(model.forward(ds.x), axis=1)
    return float((preds == ds.y).mean())


def evaluate(model: Model, test: Dataset, suite) -> EvalReport:
    """Top-1 accuracy on the ID test split and every corruption cell."""
    id_acc = accuracy(model, test)
    cells = {}
    vals = []
    for spec, corrupted in suite:
        cells.setdefault(spec.kind, {})[str(spec.severity)] = accuracy(model, corrupted)
        vals.append(cells[spec.kind][str(spec.severity)])
    ood_mean = float(np.mean(vals)) if vals else None
    return EvalReport(id_acc=id_acc, ood_cells=cells, ood_mean=ood_mean)


# ---------------------------------------------------------------------------
# training

def run_training(config: ExperimentConfig, seed: int, head_only: bool = False,
                 steps_override: int | None = None,
                 stride_override: int | None = None,
                 collect_metrics: bool = True) -> RunResult:
    """One deterministic training run with interventions and metric logging.

    head_only keeps every non-head block frozen for the whole run (the
    detector's phase-A protocol).
    """
    streams = PrngStreams(seed)
    train, test = build_datasets(config)
    arch = _complete_arch(config, train)
    model = Model.build(arch, streams)
    L = len(model.blocks)
    total_steps = steps_override if steps_override is not None else config["total_steps"]
    stride = stride_override if stride_override is not None else config["record_stride"]

    k = config["unfreeze"]["k"]
    if head_only:
        k = total_steps + 1  # no unfreeze event ever fires
    unfreeze = UnfreezeSchedule(k=k, L=L, order=config["unfreeze"]["order"])

    opt_spec = config["optimizer"]
    opt = OptimizerState(kind=opt_spec["kind"], lr=opt_spec["lr"],
                         momentum=opt_spec.get("momentum", 0.0),
                         beta1=opt_spec.get("beta1", 0.9),
                         beta2=opt_spec.get("beta2", 0.999),
                         eps=opt_spec.get("eps", 1e-8),
                         weight_decay=opt_spec.get("weight_decay", 0.0))
    warmup = WarmupSchedule(base_lr=opt_spec["lr"],
                            divisor=config["warmup"]["divisor"],
                            switch_step=config["warmup"]["switch_step"])
    fp = config["fisher_penalty"]
    penalty = FisherPenaltyConfig(alpha=fp["alpha"], every=fp["every"],
                                  delay=fp["delay"], hvp_eps=fp["hvp_eps"])
    scfg = config.sharpness_config()
    msample = metric_sample(train, streams, cap=config["metric_sample_cap"])

    shuffle_rng = streams.stream("shuffle")
    batch_size = config["batch_size"]
    n = len(train)
    order = shuffle_rng.permutation(n)
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        if cursor + batch_size > n:
            order = shuffle_rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        return train.x[idx], train.y[idx]

    records = []
    diverged = False
    for i in range(1, total_steps + 1):
        if collect_metrics and (i - 1) % stride == 0:
            scope = trainable_set(unfreeze, i)
            rec = measure(model, msample, scfg, streams, scope, step=i - 1,
                          train_loss=loss_only(model, msample.x, msample.y))
            records.append(rec)
        batch = next_batch()
        loss, _ = apply_interventions(i, model, opt, batch, unfreeze, warmup, penalty)
        if not np.isfinite(loss):
            diverged = True
            break

    report = None
    if not diverged:
        suite = []
        if test.image_hw is not None:
            suite = ood_suite(test, streams)
        report = evaluate(model, test, suite)
    return RunResult(seed=seed, config_hash=config.config_hash(), records=records,
                     report=report, diverged=diverged, model=model,
                     final_scope=sorted(model.trainable_ids()))


# ---------------------------------------------------------------------------
# trace file IO

def write_trace(path, records, meta: dict) -> None:
    lines = [f"# {k}={meta[k]}" for k in sorted(meta)]
    lines.append(",".join(TRACE_COLUMNS))
    for r in records:
        lines.append(f"{r.step},{r.trf!r},{r.s_avg!r},{r.s_worst!r},"
                     f"{r.train_loss!r},{r.n_trainable}")
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def read_trace(path):
    meta, rows = {}, []
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            k, _, v = ln[1:].strip().partition("=")
            meta[k.strip()] = v
        else:
            body.append(ln)
    if not body or body[0] != ",".join(TRACE_COLUMNS):
        raise InputError(f"trace file {path} does not match the expected schema")
    for ln in body[1:]:
        rows.append([float(v) for v in ln.split(",")])
    arr = np.asarray(rows, dtype=np.float64)
    cols = {name: (arr[:, i] if len(rows) else np.zeros(0))
            for i, name in enumerate(TRACE_COLUMNS)}
    return meta, cols


def run_dir_name(config: ExperimentConfig, seed: int) -> str:
    return f"run_{config.config_hash()}_{seed}"


def save_run(out_dir, config: ExperimentConfig, result: RunResult) -> str:
    rd = os.path.join(out_dir, run_dir_name(config, result.seed))
    os.makedirs(rd, exist_ok=True)
    meta = {"config_hash": result.config_hash, "seed": result.seed,
            "stride": config["record_stride"], "k": config["unfreeze"]["k"],
            "total_steps": config["total_steps"]}
    write_trace(os.path.join(rd, "trace.csv"), result.records, meta)
    report = {
        "config_hash": result.config_hash,
        "seed": result.seed,
        "diverged": result.diverged,
        "k": config["unfreeze"]["k"],
        "final_scope": result.final_scope,
        "n_records": len(result.records),
    }
    if result.report is not None:
        report.update(result.report.to_dict())
    with open(os.path.join(rd, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=False)
        f.write("\n")
    with open(os.path.join(rd, "config.json"), "w") as f:
        json.dump(config.raw, f, indent=2, sort_keys=True)
        f.write("\n")
    if result.model is not None:
        save_checkpoint(result.model, os.path.join(rd, "model.ckpt"))
    return rd


# ---------------------------------------------------------------------------
# sweeps and winning rate

def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ESEIZE_THREADS", "1")))
    except ValueError:
        return 1


def _sweep_job(raw_config: dict, k: int, seed: int, collect_metrics: bool,
               stride_override):
    config = ExperimentConfig.from_dict(raw_config).with_updates(
        unfreeze={**raw_config["unfreeze"], "k": int(k)})
    res = run_training(config, seed, collect_metrics=collect_metrics,
                       stride_override=stride_override)
    res.model = None  # keep pickles small across process boundaries
    return (int(k), int(seed), res)


def run_grid(config: ExperimentConfig, k_values, seeds, collect_metrics=False,
             stride_override=None):
    """All (k, seed) runs, optionally in parallel worker processes."""
    jobs = [(config.raw, int(k), int(s), collect_metrics, stride_override)
            for k in k_values for s in seeds]
    out = {}
    workers = _worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for k, s, res in pool.map(_sweep_job, *zip(*jobs)):
                out[(k, s)] = res
    else:
        for job in jobs:
            k, s, res = _sweep_job(*job)
            out[(k, s)] = res
    return out


def sweep_k(config: ExperimentConfig, k_values, seeds, collect_metrics=False,
            stride_override=None):
    """Per-k aggregates of ID/OOD deltas against each seed's k=0 baseline.

    Returns (rows, results): rows are dicts sorted ascending in k; diverged
    runs are excluded from means and counted.
    """
    k_values = [int(k) for k in k_values]
    if len(set(k_values)) != len(k_values):
        raise InputError("duplicate k values in sweep")
    if 0 not in k_values:
        raise InputError("sweep must include the k=0 baseline")
    results = run_grid(config, k_values, seeds, collect_metrics, stride_override)
    base = {s: results[(0, s)] for s in seeds}
    rows = []
    for k in sorted(k_values):
        d_id, d_ood, excluded = [], [], 0
        for s in seeds:
            res = results[(k, s)]
            b = base[s]
            if res.diverged or b.diverged:
                excluded += 1
                continue
            d_id.append(res.id_acc - b.id_acc)
            if res.ood_mean is not None and b.ood_mean is not None:
                d_ood.append(res.ood_mean - b.ood_mean)
        rows.append({
            "k": k,
            "n_seeds": len(seeds) - excluded,
            "excluded": excluded,
            "mean_delta_id": float(np.mean(d_id)) if d_id else float("nan"),
            "std_delta_id": float(np.std(d_id)) if d_id else float("nan"),
            "mean_delta_ood": float(np.mean(d_ood)) if d_ood else float("nan"),
            "std_delta_ood": float(np.std(d_ood)) if d_ood else float("nan"),
            "mean_id": float(np.mean([results[(k, s)].id_acc for s in seeds
                                      if not results[(k, s)].diverged] or [float("nan")])),
            "mean_ood": float(np.mean([results[(k, s)].ood_mean for s in seeds
                                       if not results[(k, s)].diverged
                                       and results[(k, s)].ood_mean is not None]
                                      or [float("nan")])),
        })
    return rows, results


def auto_k_values(config: ExperimentConfig, count: int = 8):
    """k=0, k=1, and log-spaced values up to k_max (inclusive)."""
    k_max = config.k_max()
    ks = {0, 1, k_max}
    for v in np.logspace(0, np.log10(k_max), count):
        ks.add(int(round(v)))
    return sorted(ks)


def sample_random_ks(config: ExperimentConfig, seed: int, n: int = 10):
    """Log-uniform integer draws in [1, k_max] from the random_k stream."""
    rng = PrngStreams(seed).stream("random_k")
    k_max = config.k_max()
    lo, hi = np.log(1.0), np.log(float(k_max))
    draws = np.exp(rng.uniform(lo, hi, size=n))
    return [int(min(max(round(v), 1), k_max)) for v in draws]


@dataclass
class WinningRateReport:
    detections: dict        # metric -> DetectionResult
    detector_errors: dict   # metric -> reason
    random_ks: list
    random_ood: dict        # k -> mean ood over seeds
    per_metric: dict        # metric -> {k_hat, id_acc, ood_acc, wins, wr}
    baseline: dict          # k=0 {id_acc, ood_acc}

    def to_dict(self):
        return {
            "detections": {m: vars(r) for m, r in self.detections.items()},
            "detector_errors": self.detector_errors,
            "random_ks": self.random_ks,
            "random_ood": {str(k): v for k, v in self.random_ood.items()},
            "per_metric": self.per_metric,
            "baseline": self.baseline,
        }


def autorun(config: ExperimentConfig, out_dir=None):
    """Two-phase protocol: detect stabilization on a head-only run, then
    pit the detector-selected intervals against random draws on OOD accuracy.

    Ties count as losses. Returns (WinningRateReport, phase_a_result).
    """
    ar = config["autorun"]
    phase_a_steps = ar["phase_a_steps"] or config["total_steps"]
    phase_a_stride = ar["phase_a_stride"] or config["record_stride"]
    seeds = config["seeds"]
    phase_a = run_training(config, seeds[0], head_only=True,
                           steps_override=phase_a_steps,
                           stride_override=phase_a_stride)
    traces = {
        "trf": np.array([r.trf for r in phase_a.records]),
        "s_avg": np.array([r.s_avg for r in phase_a.records]),
        "s_worst": np.array([r.s_worst for r in phase_a.records]),
    }
    detections, errors = select_khat(traces, config.detector_config(), phase_a_stride)
    k_max = config.k_max()
    for m, det in detections.items():
        det.k_hat = min(det.k_hat, k_max)

    random_ks = sample_random_ks(config, seeds[0], n=ar["n_random"])
    candidate_ks = sorted({0, *random_ks, *(d.k_hat for d in detections.values())})
    rows, results = sweep_k(config, candidate_ks, seeds)
    by_k = {row["k"]: row for row in rows}

    random_ood = {k: by_k[k]["mean_ood"] for k in sorted(set(random_ks))}
    per_metric = {}
    for m, det in detections.items():
        ood = by_k[det.k_hat]["mean_ood"]
        wins = sum(1 for k in random_ks if ood > by_k[k]["mean_ood"])
        per_metric[m] = {
            "k_hat": det.k_hat,
            "id_acc": by_k[det.k_hat]["mean_id"],
            "ood_acc": ood,
            "wins": wins,
            "wr": wins / len(random_ks),
        }
    report = WinningRateReport(
        detections=detections, detector_errors=errors, random_ks=random_ks,
        random_ood=random_ood, per_metric=per_metric,
        baseline={"id_acc": by_k[0]["mean_id"], "ood_acc": by_k[0]["mean_ood"]},
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_trace(os.path.join(out_dir, "phase_a_trace.csv"), phase_a.records,
                    {"config_hash": config.config_hash(), "seed": seeds[0],
                     "stride": phase_a_stride, "k": "head_only",
                     "total_steps": phase_a_steps})
        with open(os.path.join(out_dir, "winning_rate.json"), "w") as f:
            json.dump(report.to_dict(), f, indent=2)
            f.write("\n")
    return report, phase_a
