"""SGD-with-momentum and AdamW over block-partitioned models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InputError
from .nn import Model


@dataclass
class OptimizerState:
    kind: str  # "sgd_momentum" | "adamw"
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    # moment buffers keyed by block id, created lazily on first update;
    # t tracks per-block update age for Adam bias correction (blocks that
    # unfreeze mid-run start their own schedule)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adamw"):
            raise InputError(f"unknown optimizer kind: {self.kind!r}")


def optimizer_step(opt: OptimizerState, model: Model, grads: dict, lr: float | None = None):
    """Apply one update in place. Frozen blocks must not appear in grads."""
    if lr is None:
        lr = opt.lr
    trainable = model.trainable_ids()
    for bid in grads:
        if bid not in trainable:
            raise ContractViolation(f"gradient supplied for frozen block {bid!r}")
    opt.step_count += 1
    for bid, gs in grads.items():
        blk = model.block_by_id(bid)
        if bid not in opt.m:
            opt.m[bid] = [np.zeros_like(p) for p in blk.params]
            opt.v[bid] = [np.zeros_like(p) for p in blk.params]
            opt.t[bid] = 0
        opt.t[bid] += 1
        for j, (p, g) in enumerate(zip(blk.params, gs)):
            if opt.kind == "sgd_momentum":
                if opt.weight_decay:
                    g = g + opt.weight_decay * p
                buf = opt.m[bid][j]
                buf *= opt.momentum
                buf += g
                blk.params[j] = p - lr * buf
            else:  # adamw, decoupled weight decay
                m = opt.m[bid][j]
                v = opt.v[bid][j]
                m *= opt.beta1
                m += (1.0 - opt.beta1) * g
                v *= opt.beta2
                v += (1.0 - opt.beta2) * g * g
                t = opt.t[bid]
                mhat = m / (1.0 - opt.beta1 ** t)
                vhat = v / (1.0 - opt.beta2 ** t)
                new = p - lr * mhat / (np.sqrt(vhat) + opt.eps)
                if opt.weight_decay:
                    new = new - lr * opt.weight_decay * p
                blk.params[j] = new
    return model, opt
