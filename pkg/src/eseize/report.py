"""Plot-ready CSV tables and static figures from stored run artifacts.

Figures are rendered with matplotlib in a pinned deterministic mode so that
identical inputs produce byte-identical SVG output.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .detector import normalize  # noqa: E402
from .errors import InputError  # noqa: E402
from .harness import read_trace  # noqa: E402

plt.rcParams["svg.hashsalt"] = "eseize"

SWEEP_HEADER = ["k", "n_seeds", "excluded", "mean_delta_id", "std_delta_id",
                "mean_delta_ood", "std_delta_ood", "mean_id", "mean_ood"]


def _savefig(fig, path):
    fig.savefig(path, metadata={"Date": None} if path.endswith(".svg") else None)
    plt.close(fig)


def write_sweep_table(rows, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(SWEEP_HEADER)
        for row in rows:
            wr.writerow([row[h] for h in SWEEP_HEADER])


def render_delta_curves(rows, out_dir, fmt: str = "csv") -> list:
    """Delta-accuracy-vs-k curve data (+ figure when fmt is svg).

    k values are written raw; the renderer applies symlog scaling so the
    k=0 baseline stays on the axis.
    """
    written = []
    table = os.path.join(out_dir, "delta_curves.csv")
    write_sweep_table(rows, table)
    written.append(table)
    if fmt == "svg":
        ks = [row["k"] for row in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key, label in (("mean_delta_id", "delta ID"),
                           ("mean_delta_ood", "delta OOD")):
            ax.plot(ks, [row[key] for row in rows], marker="o", label=label)
        ax.set_xscale("symlog", linthresh=1)
        ax.set_xlabel("unfreezing interval k")
        ax.set_ylabel("accuracy change vs k=0")
        ax.axhline(0.0, color="gray", lw=0.8)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "delta_curves.svg")
        _savefig(fig, path)
        written.append(path)
    return written


def render_dynamics(trace_path, out_dir, fmt: str = "csv", tag: str = "dynamics") -> list:
    """Normalized metric overlays for one trace file."""
    _, cols = read_trace(trace_path)
    steps = cols["step"]
    written = []
    table = os.path.join(out_dir, f"{tag}.csv")
    series = {}
    for name in ("trf", "s_avg", "s_worst"):
        try:
            series[name] = normalize(cols[name])
        except Exception:
            series[name] = np.full_like(cols[name], np.nan)
    with open(table, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "trf_norm", "s_avg_norm", "s_worst_norm"])
        for i, s in enumerate(steps):
            wr.writerow([int(s)] + [repr(float(series[n][i]))
                                    for n in ("trf", "s_avg", "s_worst")])
    written.append(table)
    if fmt == "svg":
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, vals in series.items():
            ax.plot(steps, vals, label=name)
        ax.set_xlabel("training step")
        ax.set_ylabel("normalized metric")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"{tag}.svg")
        _savefig(fig, path)
        written.append(path)
    return written


def render_runs_dir(runs_dir, out_dir, fmt: str = "csv") -> list:
    """Build the full report set from a directory of run_* artifacts."""
    run_dirs = sorted(
        d for d in os.listdir(runs_dir)
        if d.startswith("run_") and os.path.isdir(os.path.join(runs_dir, d))
    )
    if not run_dirs:
        raise InputError(f"no run_* directories under {runs_dir}")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    # delta curves from report.json files, baselined per seed against k=0
    reports = []
    for rd in run_dirs:
        rpath = os.path.join(runs_dir, rd, "report.json")
        if os.path.exists(rpath):
            with open(rpath) as f:
                reports.append(json.load(f))
    by_seed_base = {r["seed"]: r for r in reports if r.get("k") == 0 and not r["diverged"]}
    ks = sorted({r["k"] for r in reports})
    rows = []
    for k in ks:
        d_id, d_ood, n, excl = [], [], 0, 0
        ids, oods = [], []
        for r in reports:
            if r.get("k") != k:
                continue
            base = by_seed_base.get(r["seed"])
            if r["diverged"] or base is None:
                excl += 1
                continue
            n += 1
            ids.append(r["id_acc"])
            d_id.append(r["id_acc"] - base["id_acc"])
            if r.get("ood_mean") is not None and base.get("ood_mean") is not None:
                oods.append(r["ood_mean"])
                d_ood.append(r["ood_mean"] - base["ood_mean"])
        rows.append({
            "k": k, "n_seeds": n, "excluded": excl,
            "mean_delta_id": float(np.mean(d_id)) if d_id else float("nan"),
            "std_delta_id": float(np.std(d_id)) if d_id else float("nan"),
            "mean_delta_ood": float(np.mean(d_ood)) if d_ood else float("nan"),
            "std_delta_ood": float(np.std(d_ood)) if d_ood else float("nan"),
            "mean_id": float(np.mean(ids)) if ids else float("nan"),
            "mean_ood": float(np.mean(oods)) if oods else float("nan"),
        })
    if rows:
        written += render_delta_curves(rows, out_dir, fmt)

    for rd in run_dirs:
        tpath = os.path.join(runs_dir, rd, "trace.csv")
        if os.path.exists(tpath):
            try:
                written += render_dynamics(tpath, out_dir, fmt, tag=f"dynamics_{rd}")
            except InputError:
                pass
    return written
