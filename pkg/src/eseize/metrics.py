"""Learning-dynamics measurements: Fisher trace, sharpness, gradient
similarity, and feature rank.

All operations read the model without mutating it (perturbations are applied
and restored in place) and draw noise from indexed substreams, so a
measurement is reproducible regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DegenerateGradientError, DivergedError, InputError
from .nn import Model, loss_and_grad, loss_only, softmax
from .rng import PrngStreams


@dataclass
class SharpnessConfig:
    rho: float = 0.01
    n_noise: int = 15
    c_mode: str = "abs_w"  # "ones" | "abs_w"
    c_floor: float = 1e-12
    norm: str = "l2"
    pgd_steps: int = 20
    pgd_step_frac: float = 0.25
    pgd_restarts: int = 1

    def __post_init__(self):
        if self.rho <= 0:
            raise InputError("rho must be > 0")
        if self.n_noise < 1:
            raise InputError("n_noise must be >= 1")
        if self.c_mode not in ("ones", "abs_w"):
            raise InputError(f"unknown c_mode: {self.c_mode!r}")
        if self.norm != "l2":
            raise InputError("only the l2 norm is supported")


@dataclass
class MetricRecord:
    step: int
    trf: float
    s_avg: float
    s_worst: float
    train_loss: float
    n_trainable: int


@dataclass
class GsRecord:
    step: int
    scope: str  # block id or "global"
    gs: float


def _scope_or_trainable(model, scope):
    return set(scope) if scope is not None else model.trainable_ids()


def _c_vector(cfg: SharpnessConfig, w: np.ndarray) -> np.ndarray:
    if cfg.c_mode == "ones":
        return np.ones_like(w)
    return np.maximum(np.abs(w), cfg.c_floor)


class _Perturbed:
    """Temporarily replace the scope's flat parameter vector; always restores."""

    def __init__(self, model: Model, scope):
        self.model = model
        self.scope = scope
        self.w0 = model.get_flat(scope)

    def loss_at(self, w, x, y) -> float:
        self.model.set_flat(self.scope, w)
        try:
            return loss_only(self.model, x, y)
        finally:
            self.model.set_flat(self.scope, self.w0)

    def loss_grad_at(self, w, x, y):
        self.model.set_flat(self.scope, w)
        try:
            loss, grads = loss_and_grad(self.model, x, y, self.scope)
            flat = Model.flatten_grads(grads, self.model.scope_blocks(self.scope))
            return loss, flat
        finally:
            self.model.set_flat(self.scope, self.w0)


# ---------------------------------------------------------------------------

def trace_fisher(model: Model, sample: Dataset, streams: PrngStreams | None = None,
                 mode: str = "exact", scope=None) -> float:
    """Fisher Information trace over scope parameters, normalized by their count.

    exact mode takes the full expectation over the model's own class
    distribution; mc1 samples one label per input from it.
    """
    if len(sample) == 0:
        raise InputError("empty metric sample")
    scope = _scope_or_trainable(model, scope)
    p_count = model.param_count(scope)
    if p_count == 0:
        raise InputError("scope has no parameters")
    if mode == "exact" and model.n_classes > 32:
        raise InputError("exact mode supports at most 32 classes")
    logits, cache = model.forward_cache(sample.x)
    probs = softmax(logits)
    n, n_classes = probs.shape
    total = 0.0
    if mode == "exact":
        for c in range(n_classes):
            dlog = -probs.copy()
            dlog[:, c] += 1.0
            sq = model.per_example_sq_grad_norms(cache, dlog, scope)
            total += float((probs[:, c] * sq).sum())
    elif mode == "mc1":
        if streams is None:
            raise InputError("mc1 mode needs prng streams")
        rng = streams.stream("label_sample")
        u = rng.random(n)
        yhat = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
        yhat = np.minimum(yhat, n_classes - 1)
        dlog = -probs.copy()
        dlog[np.arange(n), yhat] += 1.0
        sq = model.per_example_sq_grad_norms(cache, dlog, scope)
        total = float(sq.sum())
    else:
        raise InputError(f"unknown trace_fisher mode: {mode!r}")
    return total / n / p_count


def sharpness_avg_objective(loss_fn, w0: np.ndarray, cfg: SharpnessConfig,
                            streams: PrngStreams) -> float:
    """Mean of loss(w0 - delta) - loss(w0) over Gaussian draws
    delta ~ N(0, rho^2 diag(c^2)); draw i comes from its own substream."""
    c = _c_vector(cfg, w0)
    base = loss_fn(w0)
    acc = 0.0
    for i in range(cfg.n_noise):
        rng = streams.child("noise", "avg", i)
        delta = cfg.rho * c * rng.standard_normal(w0.size)
        acc += loss_fn(w0 - delta) - base
    return acc / cfg.n_noise


def sharpness_worst_objective(loss_fn, grad_fn, w0: np.ndarray, cfg: SharpnessConfig,
                              streams: PrngStreams) -> float:
    """Projected gradient ascent over ||delta * c^-1||_2 <= rho, maximizing
    loss(w0 - delta) - loss(w0); returns the best evaluated iterate."""
    c = _c_vector(cfg, w0)
    base = loss_fn(w0)
    if not np.isfinite(base):
        raise DivergedError("non-finite base loss in sharpness search")
    best = 0.0  # u = 0 is always an evaluated point

    def ascend(u):
        nonlocal best
        step = cfg.pgd_step_frac * cfg.rho
        for _ in range(cfg.pgd_steps):
            loss, g = grad_fn(w0 - u * c)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise DivergedError("non-finite loss during sharpness search")
            best = max(best, loss - base)
            gu = -g * c  # ascent direction in u coordinates
            norm = np.linalg.norm(gu)
            if norm < 1e-300:
                return
            u = u + step * gu / norm
            unorm = np.linalg.norm(u)
            if unorm > cfg.rho:
                u = u * (cfg.rho / unorm)
        loss = loss_fn(w0 - u * c)
        if not np.isfinite(loss):
            raise DivergedError("non-finite loss during sharpness search")
        best = max(best, loss - base)

    ascend(np.zeros_like(w0))
    for r in range(cfg.pgd_restarts):
        v = streams.child("noise", "pgd", r).standard_normal(w0.size)
        vn = np.linalg.norm(v)
        if vn == 0:
            continue
        ascend(cfg.rho * v / vn)
    return best


def sharpness_avg(model: Model, sample: Dataset, cfg: SharpnessConfig,
                  streams: PrngStreams, scope=None) -> float:
    """Mean loss increase under Gaussian parameter noise of scaled radius rho."""
    scope = _scope_or_trainable(model, scope)
    pert = _Perturbed(model, scope)
    return sharpness_avg_objective(
        lambda w: pert.loss_at(w, sample.x, sample.y), pert.w0, cfg, streams)


def sharpness_worst(model: Model, sample: Dataset, cfg: SharpnessConfig,
                    streams: PrngStreams, scope=None) -> float:
    """Worst loss increase within the c-scaled L2 ball of radius rho,
    estimated by projected gradient ascent with restarts."""
    scope = _scope_or_trainable(model, scope)
    pert = _Perturbed(model, scope)
    return sharpness_worst_objective(
        lambda w: pert.loss_at(w, sample.x, sample.y),
        lambda w: pert.loss_grad_at(w, sample.x, sample.y),
        pert.w0, cfg, streams)


def grad_similarity(model: Model, minibatches, scope=None, step: int = 0) -> GsRecord:
    """Mean cosine similarity between minibatch gradients and the full-batch
    gradient, restricted to scope parameters."""
    if not minibatches:
        raise InputError("no minibatches given")
    scope = _scope_or_trainable(model, scope)
    blocks = model.scope_blocks(scope)

    def flat_grad(x, y):
        _, grads = loss_and_grad(model, x, y, scope)
        return Model.flatten_grads(grads, blocks)

    xs = np.concatenate([x for x, _ in minibatches])
    ys = np.concatenate([y for _, y in minibatches])
    ghat = flat_grad(xs, ys)
    ghat_norm = np.linalg.norm(ghat)
    if ghat_norm <= 1e-12:
        raise DegenerateGradientError("full-batch gradient norm is ~0")
    acc = 0.0
    for x, y in minibatches:
        g = flat_grad(x, y)
        gnorm = np.linalg.norm(g)
        if gnorm <= 1e-12:
            raise DegenerateGradientError("minibatch gradient norm is ~0")
        acc += float(g @ ghat) / (gnorm * ghat_norm)
    scope_tag = next(iter(scope)) if len(scope) == 1 else "global"
    return GsRecord(step=step, scope=scope_tag, gs=acc / len(minibatches))


def feature_rank(model: Model, sample: Dataset, rel_tol: float = 1e-3) -> int:
    """Numerical rank of the pre-head feature matrix on the sample."""
    if len(sample) == 0:
        raise InputError("empty metric sample")
    feats = model.features(sample.x)
    s = np.linalg.svd(feats, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > rel_tol * s[0]).sum())


def measure(model: Model, sample: Dataset, cfg: SharpnessConfig,
            streams: PrngStreams, scope, step: int, train_loss: float) -> MetricRecord:
    """One trace row: Fisher trace plus both sharpness estimates."""
    return MetricRecord(
        step=step,
        trf=trace_fisher(model, sample, streams, mode="exact", scope=scope),
        s_avg=sharpness_avg(model, sample, cfg, streams, scope=scope),
        s_worst=sharpness_worst(model, sample, cfg, streams, scope=scope),
        train_loss=train_loss,
        n_trainable=model.param_count(scope),
    )
