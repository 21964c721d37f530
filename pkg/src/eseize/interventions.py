"""Early-training interventions: gradual unfreezing, step learning-rate
warm-up, and a delayed Fisher penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EseizeError, InputError
from .nn import Model, loss_and_grad
from .optim import OptimizerState, optimizer_step


@dataclass
class UnfreezeSchedule:
    k: int          # unfreezing interval; 0 = standard training
    L: int          # number of non-head blocks
    order: str = "top_down"  # "top_down" | "bottom_up"

    def __post_init__(self):
        if self.k < 0:
            raise InputError("k must be >= 0")
        if self.order not in ("top_down", "bottom_up"):
            raise InputError(f"unknown unfreeze order: {self.order!r}")


@dataclass
class WarmupSchedule:
    base_lr: float
    divisor: float = 1.0
    switch_step: int = 0

    def __post_init__(self):
        if self.divisor <= 0:
            raise InputError("divisor must be > 0")


@dataclass
class FisherPenaltyConfig:
    alpha: float = 0.0
    every: int = 10
    delay: int = 0
    hvp_eps: float = 1e-3

    def __post_init__(self):
        if self.alpha < 0:
            raise InputError("alpha must be >= 0")
        if self.every < 1:
            raise InputError("every must be >= 1")


def trainable_set(schedule: UnfreezeSchedule, step: int) -> set:
    """Block ids trainable at (i.e. just before the update of) a 1-based step.

    Blocks are addressed by depth as "block0".."block{L-1}", head as "head".
    With k=0 everything is trainable from step 1; otherwise one block
    unfreezes every k steps, top-down by default.
    """
    if step < 1:
        raise InputError("step must be >= 1")
    ids = {"head"}
    if schedule.k == 0:
        ids.update(f"block{d}" for d in range(schedule.L))
        return ids
    count = min(step, schedule.k * schedule.L) // schedule.k
    if schedule.order == "top_down":
        depths = range(schedule.L - 1, schedule.L - 1 - count, -1)
    else:
        depths = range(count)
    ids.update(f"block{d}" for d in depths)
    return ids


def lr_at(warmup: WarmupSchedule, step: int) -> float:
    if step < 1:
        raise InputError("step must be >= 1")
    if step < warmup.switch_step:
        return warmup.base_lr / warmup.divisor
    return warmup.base_lr


def fisher_penalty_active(cfg: FisherPenaltyConfig, step: int) -> bool:
    return cfg.alpha > 0 and step >= cfg.delay and (step - cfg.delay) % cfg.every == 0


def fisher_penalty_grad(model: Model, x, y, cfg: FisherPenaltyConfig, scope=None) -> dict:
    """Gradient of alpha * ||grad J||^2 / P via a central-difference HVP.

    Returns a map block id -> gradient arrays over scope; a zero map when the
    task gradient (or alpha) is zero.
    """
    if scope is None:
        scope = model.trainable_ids()
    if "head" not in scope and not scope:
        raise InputError("at least one block must be trainable")
    blocks = model.scope_blocks(scope)

    def zero_map():
        return {b.id: [np.zeros_like(p) for p in b.params] for b in blocks}

    if cfg.alpha == 0:
        return zero_map()
    _, grads = loss_and_grad(model, x, y, scope)
    g = Model.flatten_grads(grads, blocks)
    gn = np.linalg.norm(g)
    if gn < 1e-12:
        return zero_map()
    w0 = model.get_flat(scope)
    v = g / gn
    eps = cfg.hvp_eps
    try:
        model.set_flat(scope, w0 + eps * v)
        _, gp = loss_and_grad(model, x, y, scope)
        model.set_flat(scope, w0 - eps * v)
        _, gm = loss_and_grad(model, x, y, scope)
    finally:
        model.set_flat(scope, w0)
    hv = (Model.flatten_grads(gp, blocks) - Model.flatten_grads(gm, blocks)) / (2 * eps)
    if not np.all(np.isfinite(hv)):
        raise EseizeError("non-finite intermediate in Fisher-penalty HVP")
    p_count = model.param_count(scope)
    flat = cfg.alpha * 2.0 * gn * hv / p_count
    out = {}
    i = 0
    for b in blocks:
        gs = []
        for p in b.params:
            gs.append(flat[i:i + p.size].reshape(p.shape).copy())
            i += p.size
        out[b.id] = gs
    return out


def apply_interventions(step: int, model: Model, opt: OptimizerState, batch,
                        unfreeze: UnfreezeSchedule, warmup: WarmupSchedule,
                        penalty: FisherPenaltyConfig):
    """One training update with all interventions composed.

    Unfreezing takes effect before the step's update; the Fisher penalty is
    added to the task gradient when its delay/cadence gate opens.
    Returns (loss, scope).
    """
    x, y = batch
    scope = trainable_set(unfreeze, step)
    model.set_trainable(scope)
    lr = lr_at(warmup, step)
    loss, grads = loss_and_grad(model, x, y, scope)
    if fisher_penalty_active(penalty, step):
        pen = fisher_penalty_grad(model, x, y, penalty, scope)
        for bid, gs in grads.items():
            grads[bid] = [g + pg for g, pg in zip(gs, pen[bid])]
    optimizer_step(opt, model, grads, lr=lr)
    return loss, scope
