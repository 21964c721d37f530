"""Stabilization detection on metric traces and conversion to an unfreezing
interval.

The detector works on min-max normalized traces: first locate the end of the
initial rapid-change phase, then find the first point after it where the
smoothed signal's consecutive changes drop below a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTraceError, InputError, NotStabilizedError


@dataclass
class DetectorConfig:
    tau: int = 3
    eps: float = 0.02
    rise_mode: str = "auto"  # "auto" | "given"
    t_rise: int = 0          # used when rise_mode == "given"

    def __post_init__(self):
        if self.tau < 1:
            raise InputError("tau must be >= 1")
        if not 0 < self.eps < 1:
            raise InputError("eps must be in (0, 1)")


@dataclass
class DetectionResult:
    metric: str
    t_rise: int
    t_stab: int
    k_hat: int


def normalize(values) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant traces are degenerate."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(~np.isfinite(v)):
        raise InputError("trace contains non-finite values")
    lo, hi = v.min(), v.max()
    if hi <= lo:
        raise DegenerateTraceError("constant trace cannot be normalized")
    return (v - lo) / (hi - lo)


def moving_average(values, tau: int) -> np.ndarray:
    """Trailing window mean; output length = input length - tau + 1."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < tau:
        raise InputError("trace shorter than smoothing window")
    return np.convolve(v, np.full(tau, 1.0 / tau), mode="valid")


def find_rapid_change_end(values, cfg: DetectorConfig) -> int:
    """Index (into the trace) where the initial rapid change ends.

    Take the absolute consecutive differences of the smoothed signal, find
    their peak, and return the first later index where the change falls
    under eps; if the peak itself is already under eps (no real explosion),
    or nothing later qualifies, the peak index is returned.
    """
    v = normalize(values)
    d = np.abs(np.diff(moving_average(v, cfg.tau)))
    if d.size == 0:
        return 0
    i_star = int(np.argmax(d))
    if d[i_star] <= cfg.eps:
        return i_star
    after = np.nonzero(d[i_star + 1:] <= cfg.eps)[0]
    if after.size == 0:
        return i_star
    return i_star + 1 + int(after[0])


def find_stabilization_by_mean(values, t_rise: int, cfg: DetectorConfig) -> int:
    """First index after t_rise where the smoothed signal's consecutive
    change is at most eps, in original trace indexing."""
    if t_rise < 0:
        raise InputError("t_rise must be >= 0")
    v = np.asarray(values, dtype=np.float64)
    tail = v[t_rise:] if t_rise > 0 else v
    if tail.size < cfg.tau + 1:
        raise NotStabilizedError("trace too short after t_rise")
    d = np.abs(np.diff(moving_average(tail, cfg.tau)))
    hits = np.nonzero(d <= cfg.eps)[0]
    if hits.size == 0:
        raise NotStabilizedError("no stabilization point within trace")
    return int(hits[0]) + t_rise


def detect(values, cfg: DetectorConfig, metric: str, stride: int) -> DetectionResult:
    """Full pipeline on a raw trace: normalize, locate the rise end, find the
    stabilization index, and convert it to an unfreezing interval."""
    v = normalize(values)
    if cfg.rise_mode == "given":
        t_rise = cfg.t_rise
    else:
        t_rise = find_rapid_change_end(v, cfg)
    t_stab = find_stabilization_by_mean(v, t_rise, cfg)
    k_hat = stride * max(t_stab, 1)
    return DetectionResult(metric=metric, t_rise=t_rise, t_stab=t_stab, k_hat=k_hat)


def select_khat(traces: dict, cfg: DetectorConfig, stride: int):
    """Per-metric detection over a map metric name -> raw value array.

    Returns (results, errors): failed metrics land in errors with the reason
    instead of aborting the whole selection.
    """
    results, errors = {}, {}
    for metric, values in traces.items():
        try:
            results[metric] = detect(values, cfg, metric, stride)
        except (DegenerateTraceError, NotStabilizedError, InputError) as exc:
            errors[metric] = str(exc)
    return results, errors
