"""Minimal deterministic differentiable networks with block-partitioned parameters.

Two architectures: an all-dense ReLU MLP and a small conv net
(2 conv+pool stages, one dense stage). Every hidden stage is its own
parameter block; the classification head is a separate block that is
always present. All math is float64 numpy with explicit backprop, so
gradients can be checked against finite differences exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InputError
from .rng import PrngStreams

CHECKPOINT_MAGIC = b"ESNN"
CHECKPOINT_VERSION = 1


@dataclass
class ParamBlock:
    id: str
    depth: int  # 0 = input-nearest; -1 for the head
    params: list  # list of float64 ndarrays
    trainable: bool = True

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _relu(z):
    return np.maximum(z, 0.0)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _kaiming_uniform(rng, fan_in, shape, gain):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# conv helpers (3x3, stride 1, zero pad 1)

def _im2col(x):
    """x: (b, H, W, C) -> cols (b, H*W, 9*C), zero padding of 1."""
    b, h, w, c = x.shape
    padded = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    padded[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 3, 3, c), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = padded[:, di:di + h, dj:dj + w, :]
    return cols.reshape(b, h * w, 9 * c)


def _col2im(dcols, h, w, c):
    """Adjoint of _im2col. dcols: (b, H*W, 9*C) -> dx (b, H, W, C)."""
    b = dcols.shape[0]
    dcols = dcols.reshape(b, h, w, 3, 3, c)
    dpad = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dpad[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, di, dj, :]
    return dpad[:, 1:-1, 1:-1, :]


def _maxpool2(x):
    """2x2 max pool with floor semantics (odd trailing row/col cropped)."""
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, :h2 * 2, :w2 * 2, :]
    r = xc.reshape(b, h2, 2, w2, 2, c)
    out = r.max(axis=(2, 4))
    return out, xc

def _maxpool2_backward(dout, xc, out):
    b, h2, _, w2, _, c = (xc.shape[0], dout.shape[1], 2, dout.shape[2], 2, xc.shape[3])
    r = xc.reshape(b, h2, 2, w2, 2, c)
    mask = (r == out[:, :, None, :, None, :])
    dr = mask * dout[:, :, None, :, None, :]
    return dr.reshape(b, h2 * 2, w2 * 2, c)


# ---------------------------------------------------------------------------

class Model:
    """Block-partitioned network: ordered hidden blocks plus a head block.

    arch descriptors:
      {"kind": "mlp", "input_dim": d, "hidden": [h, ...], "n_classes": C}
      {"kind": "smallconv", "in_hw": [H, W], "channels": [c1, c2],
       "dense": d, "n_classes": C}
    """

    def __init__(self, arch: dict, blocks: list, head: ParamBlock):
        self.arch = arch
        self.blocks = blocks
        self.head = head
        self.n_classes = int(arch["n_classes"])

    # -- construction ------------------------------------------------------

    @staticmethod
    def build(arch: dict, streams: PrngStreams) -> "Model":
        rng = streams.stream("init")
        kind = arch["kind"]
        if kind == "mlp":
            dims = [int(arch["input_dim"])] + [int(h) for h in arch["hidden"]]
            blocks = []
            for i in range(len(dims) - 1):
                w = _kaiming_uniform(rng, dims[i], (dims[i], dims[i + 1]), np.sqrt(2.0))
                b = np.zeros(dims[i + 1])
                blocks.append(ParamBlock(f"block{i}", i, [w, b]))
            feat_dim = dims[-1]
        elif kind == "smallconv":
            h, w = arch["in_hw"]
            c1, c2 = arch["channels"]
            d = int(arch["dense"])
            w1 = _kaiming_uniform(rng, 9, (9, c1), np.sqrt(2.0))
            w2 = _kaiming_uniform(rng, 9 * c1, (9 * c1, c2), np.sqrt(2.0))
            fh, fw = (h // 2) // 2, (w // 2) // 2
            flat = fh * fw * c2
            w3 = _kaiming_uniform(rng, flat, (flat, d), np.sqrt(2.0))
            blocks = [
                ParamBlock("block0", 0, [w1, np.zeros(c1)]),
                ParamBlock("block1", 1, [w2, np.zeros(c2)]),
                ParamBlock("block2", 2, [w3, np.zeros(d)]),
            ]
            feat_dim = d
        else:
            raise InputError(f"unknown arch kind: {kind!r}")
        c = int(arch["n_classes"])
        if c < 2:
            raise InputError("n_classes must be >= 2")
        wh = _kaiming_uniform(rng, feat_dim, (feat_dim, c), 1.0)
        head = ParamBlock("head", -1, [wh, np.zeros(c)])
        return Model(dict(arch), blocks, head)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def feat_dim(self) -> int:
        return self.head.params[0].shape[0]

    def block_ids(self):
        return [b.id for b in self.blocks]

    def all_blocks(self):
        return self.blocks + [self.head]

    def block_by_id(self, bid: str) -> ParamBlock:
        for b in self.all_blocks():
            if b.id == bid:
                return b
        raise KeyError(bid)

    def set_trainable(self, scope) -> None:
        for b in self.all_blocks():
            b.trainable = b.id in scope

    def trainable_ids(self):
        return {b.id for b in self.all_blocks() if b.trainable}

    def param_count(self, scope=None) -> int:
        if scope is None:
            scope = self.trainable_ids()
        return sum(b.param_count() for b in self.all_blocks() if b.id in scope)

    def input_dim(self) -> int:
        if self.arch["kind"] == "mlp":
            return int(self.arch["input_dim"])
        h, w = self.arch["in_hw"]
        return h * w

    # -- flat parameter views (fixed order: blocks by list order, then head) --

    def scope_blocks(self, scope):
        return [b for b in self.all_blocks() if b.id in scope]

    def get_flat(self, scope) -> np.ndarray:
        return np.concatenate(
            [p.ravel() for b in self.scope_blocks(scope) for p in b.params]
        ) if self.param_count(scope) else np.zeros(0)

    def set_flat(self, scope, vec: np.ndarray) -> None:
        if vec.size != self.param_count(scope):
            raise ContractViolation("flat vector length does not match scope")
        i = 0
        for b in self.scope_blocks(scope):
            for j, p in enumerate(b.params):
                b.params[j] = vec[i:i + p.size].reshape(p.shape).copy()
                i += p.size

    @staticmethod
    def flatten_grads(grads: dict, scope_blocks) -> np.ndarray:
        return np.concatenate(
            [g.ravel() for b in scope_blocks for g in grads[b.id]]
        )

    def copy(self) -> "Model":
        blocks = [ParamBlock(b.id, b.depth, [p.copy() for p in b.params], b.trainable)
                  for b in self.blocks]
        h = self.head
        head = ParamBlock(h.id, h.depth, [p.copy() for p in h.params], h.trainable)
        return Model(dict(self.arch), blocks, head)

    # -- forward -------------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim():
            raise InputError(
                f"input shape {x.shape} does not match arch input dim {self.input_dim()}"
            )
        return x

    def forward(self, x) -> np.ndarray:
        logits, _ = self.forward_cache(x)
        return logits

    def features(self, x) -> np.ndarray:
        """Activations feeding the head. Read-only."""
        _, cache = self.forward_cache(x)
        return cache["feat"]

    def forward_cache(self, x):
        x = self._check_input(x)
        if x.shape[0] == 0:
            raise InputError("empty batch")
        if self.arch["kind"] == "mlp":
            return self._mlp_forward(x)
        return self._conv_forward(x)

    def _mlp_forward(self, x):
        acts = [x]
        a = x
        for b in self.blocks:
            w, bias = b.params
            a = _relu(a @ w + bias)
            acts.append(a)
        wh, bh = self.head.params
        logits = a @ wh + bh
        return logits, {"acts": acts, "feat": a}

    def _conv_forward(self, x):
        h, w = self.arch["in_hw"]
        bsz = x.shape[0]
        img = x.reshape(bsz, h, w, 1)
        cache = {"img": img}
        a = img
        for i, blk in enumerate(self.blocks[:2]):
            cw, cb = blk.params
            cols = _im2col(a)
            z = cols @ cw + cb
            r = _relu(z)
            hh, ww = a.shape[1], a.shape[2]
            rimg = r.reshape(bsz, hh, ww, -1)
            pooled, xc = _maxpool2(rimg)
            cache[f"conv{i}"] = (cols, z, rimg, xc, pooled)
            a = pooled
        flat = a.reshape(bsz, -1)
        dw, db = self.blocks[2].params
        zf = flat @ dw + db
        feat = _relu(zf)
        cache.update(flat=flat, zf=zf, feat=feat)
        wh, bh = self.head.params
        logits = feat @ wh + bh
        return logits, cache

    # -- backward ------------------------------------------------------------

    def backward(self, cache, dlogits, scope) -> dict:
        """Gradients w.r.t. parameters of blocks in scope, summed over batch.

        dlogits carries any loss normalization; parameters outside scope
        receive no entries.
        """
        per = self._backward_parts(cache, dlogits, scope)
        grads = {}
        for bid, parts in per.items():
            gs = []
            for kind, dat in parts:
                if kind == "dense":
                    a, delta = dat
                    gs.extend([a.T @ delta, delta.sum(axis=0)])
                else:  # conv: (cols, ddense) with ddense (b, P, out)
                    cols, dd = dat
                    gw = np.einsum("bpk,bpo->ko", cols, dd)
                    gs.extend([gw, dd.sum(axis=(0, 1))])
            grads[bid] = gs
        return grads

    def per_example_sq_grad_norms(self, cache, dlogits, scope) -> np.ndarray:
        """||per-example parameter gradient||^2 over scope, shape (batch,).

        Uses the separable structure of dense/conv gradients instead of one
        backward pass per example.
        """
        per = self._backward_parts(cache, dlogits, scope)
        bsz = dlogits.shape[0]
        total = np.zeros(bsz)
        for parts in per.values():
            for kind, dat in parts:
                if kind == "dense":
                    a, delta = dat
                    dsq = (delta ** 2).sum(axis=1)
                    total += (a ** 2).sum(axis=1) * dsq + dsq
                else:
                    cols, dd = dat
                    g = np.einsum("bpk,bpo->bko", cols, dd)
                    total += (g ** 2).sum(axis=(1, 2))
                    total += (dd.sum(axis=1) ** 2).sum(axis=1)
        return total

    def _backward_parts(self, cache, dlogits, scope):
        valid = {b.id for b in self.all_blocks()}
        unknown = set(scope) - valid
        if unknown:
            raise ContractViolation(f"scope names unknown blocks: {sorted(unknown)}")
        if self.arch["kind"] == "mlp":
            return self._mlp_backward_parts(cache, dlogits, scope)
        return self._conv_backward_parts(cache, dlogits, scope)

    def _mlp_backward_parts(self, cache, dlogits, scope):
        acts = cache["acts"]
        per = {}
        if self.head.id in scope:
            per[self.head.id] = [("dense", (acts[-1], dlogits))]
        # deepest-in-scope cutoff: no need to backprop past the shallowest block
        min_depth = min(
            [b.depth for b in self.blocks if b.id in scope], default=None
        )
        delta = dlogits @ self.head.params[0].T
        for i in range(len(self.blocks) - 1, -1, -1):
            if min_depth is None or i < min_depth:
                break
            blk = self.blocks[i]
            delta = delta * (acts[i + 1] > 0)
            if blk.id in scope:
                per[blk.id] = [("dense", (acts[i], delta))]
            if i > min_depth:
                delta = delta @ blk.params[0].T
        return per

    def _conv_backward_parts(self, cache, dlogits, scope):
        per = {}
        feat = cache["feat"]
        if self.head.id in scope:
            per[self.head.id] = [("dense", (feat, dlogits))]
        depths = [b.depth for b in self.blocks if b.id in scope]
        if not depths:
            return per
        min_depth = min(depths)
        dfeat = dlogits @ self.head.params[0].T
        dzf = dfeat * (cache["zf"] > 0)
        if self.blocks[2].id in scope:
            per[self.blocks[2].id] = [("dense", (cache["flat"], dzf))]
        if min_depth >= 2:
            return per
        dflat = dzf @ self.blocks[2].params[0].T
        dpool = dflat.reshape(cache["conv1"][4].shape)
        for i in (1, 0):
            cols, z, rimg, xc, pooled = cache[f"conv{i}"]
            drimg = _maxpool2_backward(dpool, xc, pooled)
            # pad back any cropped odd row/col with zero gradient
            if drimg.shape != rimg.shape:
                full = np.zeros_like(rimg)
                full[:, :drimg.shape[1], :drimg.shape[2], :] = drimg
                drimg = full
            bsz = rimg.shape[0]
            dz = (drimg.reshape(bsz, -1, rimg.shape[-1])) * (z > 0)
            blk = self.blocks[i]
            if blk.id in scope:
                per[blk.id] = [("conv", (cols, dz))]
            if i > min_depth:
                dcols = dz @ blk.params[0].T
                prev = cache["img"] if i == 0 else cache["conv0"][4]
                dpool = _col2im(dcols, prev.shape[1], prev.shape[2], prev.shape[3])
            else:
                break
        return per


# ---------------------------------------------------------------------------

def loss_and_grad(model: Model, x, y, scope):
    """Mean cross-entropy of softmax over the batch and its gradients.

    Returns (loss, grads) where grads maps block id -> list of gradient
    arrays, for blocks in scope only.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise InputError("empty batch")
    if x.shape[0] != y.shape[0]:
        raise InputError("batch x/y length mismatch")
    logits, cache = model.forward_cache(x)
    p = softmax(logits)
    n = x.shape[0]
    logp = _log_softmax(logits)[np.arange(n), y]
    loss = float(-logp.mean())
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = model.backward(cache, dlogits, scope)
    return loss, grads


def loss_only(model: Model, x, y) -> float:
    logits = model.forward(x)
    n = x.shape[0]
    return float(-_log_softmax(logits)[np.arange(n), np.asarray(y, dtype=np.int64)].mean())


# ---------------------------------------------------------------------------
# checkpoint format: "ESNN" magic, u32 version, arch JSON, blocks, CRC32.
# All integers little-endian; payloads little-endian float64. The CRC is
# computed over every preceding byte including the magic.

def save_checkpoint(model: Model, path) -> None:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    arch = json.dumps(model.arch, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(arch)) + arch
    blocks = model.all_blocks()
    out += struct.pack("<I", len(blocks))
    for b in blocks:
        bid = b.id.encode("utf-8")
        out += struct.pack("<I", len(bid)) + bid
        out += struct.pack("<iB", b.depth, 1 if b.trainable else 0)
        out += struct.pack("<I", len(b.params))
        for p in b.params:
            out += struct.pack("<I", p.ndim)
            out += struct.pack(f"<{p.ndim}I", *p.shape)
            out += np.ascontiguousarray(p, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise InputError("bad checkpoint magic")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise InputError("checkpoint CRC mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off); off += 4
    if version != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    (alen,) = struct.unpack_from("<I", raw, off); off += 4
    arch = json.loads(raw[off:off + alen].decode("utf-8")); off += alen
    (nblocks,) = struct.unpack_from("<I", raw, off); off += 4
    blocks = []
    for _ in range(nblocks):
        (idlen,) = struct.unpack_from("<I", raw, off); off += 4
        bid = raw[off:off + idlen].decode("utf-8"); off += idlen
        depth, trainable = struct.unpack_from("<iB", raw, off); off += 5
        (nparams,) = struct.unpack_from("<I", raw, off); off += 4
        params = []
        for _ in range(nparams):
            (ndim,) = struct.unpack_from("<I", raw, off); off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off); off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            params.append(arr.astype(np.float64))
        blocks.append(ParamBlock(bid, depth, params, bool(trainable)))
    head = blocks[-1]
    return Model(arch, blocks[:-1], head)
