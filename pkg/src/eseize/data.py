"""Datasets: IDX ingestion, synthetic tasks, and a deterministic corruption bench.

Image datasets keep a (H, W) shape tag so corruption kinds that need spatial
structure (blur, rotation) can reject non-image data. Pixel values always
live in [0, 1].
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError
from .rng import PrngStreams

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CORRUPTION_KINDS = (
    "gaussian_noise", "impulse_noise", "box_blur",
    "rotation", "contrast", "pixel_dropout",
)

# severity 1..5 parameter tables; strictly monotone in distortion
SEVERITY_TABLES = {
    "gaussian_noise": (0.05, 0.10, 0.15, 0.20, 0.25),     # sigma
    "impulse_noise": (0.02, 0.04, 0.07, 0.10, 0.15),      # flip probability
    "box_blur": (1, 2, 3, 4, 5),                          # 3x3 mean passes
    "rotation": (5.0, 10.0, 15.0, 20.0, 25.0),            # degrees
    "contrast": (0.75, 0.6, 0.5, 0.4, 0.3),               # factor about 0.5
    "pixel_dropout": (0.05, 0.10, 0.15, 0.20, 0.25),      # dropped fraction
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise InputError(f"unknown corruption kind: {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise InputError(f"severity out of range: {self.severity}")

    @property
    def param(self):
        return SEVERITY_TABLES[self.kind][self.severity - 1]


@dataclass
class Dataset:
    x: np.ndarray           # (n, features), float64 in [0, 1]
    y: np.ndarray           # (n,), int labels
    split: str              # train | val | test
    image_hw: tuple | None = None  # (H, W) when rows are flattened images

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise InputError("x and y length mismatch")
        if self.image_hw is not None:
            h, w = self.image_hw
            if h * w != self.x.shape[1]:
                raise InputError("image_hw inconsistent with feature count")

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def images(self) -> np.ndarray:
        if self.image_hw is None:
            raise InputError("dataset is not image-shaped")
        h, w = self.image_hw
        return self.x.reshape(-1, h, w)


# ---------------------------------------------------------------------------
# IDX format (big-endian dims, u8 payload)

def _read_idx(path, magic):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise InputError(f"truncated IDX file: {path}")
    got, = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise InputError(f"bad IDX magic in {path}: 0x{got:08x}")
    ndim = 1 if magic == IDX_LABELS_MAGIC else 3
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise InputError(f"truncated IDX header: {path}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise InputError(f"truncated IDX payload: {path}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, downsample_14: bool = False,
             subset_n: int | None = None, split: str = "train") -> Dataset:
    """Load an IDX image/label pair, scale pixels to [0, 1].

    Optional 2x2 average-pool downsample to half resolution and
    deterministic prefix subset.
    """
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise InputError("IDX image/label count mismatch")
    x = imgs.astype(np.float64) / 255.0
    if downsample_14:
        n, h, w = x.shape
        if h % 2 or w % 2:
            raise InputError("downsample requires even image dims")
        x = x.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    if subset_n is not None:
        x = x[:subset_n]
        labels = labels[:subset_n]
    n, h, w = x.shape
    return Dataset(x.reshape(n, h * w), labels.astype(np.int64), split, (h, w))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write u8 images (n, H, W) and labels (n,) in IDX format."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic tasks

def make_synthetic(task: str, n: int, noise_sd: float, seed: int,
                   split: str = "train") -> Dataset:
    """Balanced 2-class 2D toy tasks mapped into [0, 1]^2."""
    if n < 4:
        raise InputError("n must be >= 4")
    if noise_sd < 0:
        raise InputError("noise_sd must be >= 0")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    half = n // 2
    y = np.array([0] * half + [1] * (n - half), dtype=np.int64)
    if task == "gauss_blobs":
        means = np.array([[0.3, 0.3], [0.7, 0.7]])
        pts = means[y] + noise_sd * rng.standard_normal((n, 2))
    elif task == "two_rings":
        radii = np.where(y == 0, 0.25, 0.45)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        r = radii + noise_sd * rng.standard_normal(n)
        pts = 0.5 + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    else:
        raise InputError(f"unknown synthetic task: {task!r}")
    return Dataset(np.clip(pts, 0.0, 1.0), y, split)


def dataset_to_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow([f"f{i}" for i in range(ds.x.shape[1])] + ["label"])
        for row, label in zip(ds.x, ds.y):
            wr.writerow([repr(v) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# corruptions

def _blur_pass(imgs):
    """One 3x3 mean-filter pass with edge-replicate padding (constant images
    stay constant)."""
    padded = np.pad(imgs, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(imgs)
    h, w = imgs.shape[1:]
    for di in range(3):
        for dj in range(3):
            out += padded[:, di:di + h, dj:dj + w]
    return out / 9.0


def _rotate_bilinear(imgs, degrees):
    """Inverse-mapping bilinear rotation about the image center, zeros outside."""
    n, h, w = imgs.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # rotate sampling grid by -theta: source coords for each output pixel
    dy, dx = yy - cy, xx - cx
    sy = cy + np.cos(theta) * dy + np.sin(theta) * dx
    sx = cx - np.sin(theta) * dy + np.cos(theta) * dx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(imgs)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        out += wgt * valid * imgs[:, yc, xc]
    return out


def corrupt(ds: Dataset, spec: CorruptionSpec) -> Dataset:
    """Deterministically corrupted copy; labels and size unchanged."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    needs_image = spec.kind in ("box_blur", "rotation")
    if needs_image and ds.image_hw is None:
        raise InputError(f"{spec.kind} requires image-shaped data")
    if ds.image_hw is not None:
        vals = ds.images().copy()
    else:
        vals = ds.x.copy()
    p = spec.param
    if spec.kind == "gaussian_noise":
        vals = vals + p * rng.standard_normal(vals.shape)
    elif spec.kind == "impulse_noise":
        flip = rng.random(vals.shape) < p
        salt = rng.random(vals.shape) < 0.5
        vals = np.where(flip, np.where(salt, 1.0, 0.0), vals)
    elif spec.kind == "box_blur":
        for _ in range(int(p)):
            vals = _blur_pass(vals)
    elif spec.kind == "rotation":
        vals = _rotate_bilinear(vals, p)
    elif spec.kind == "contrast":
        vals = 0.5 + p * (vals - 0.5)
    elif spec.kind == "pixel_dropout":
        flat = vals.reshape(len(ds), -1)
        npix = flat.shape[1]
        ndrop = int(round(p * npix))
        for i in range(flat.shape[0]):
            idx = rng.choice(npix, size=ndrop, replace=False)
            flat[i, idx] = 0.0
        vals = flat
    vals = np.clip(vals, 0.0, 1.0)
    return replace(ds, x=vals.reshape(len(ds), -1), y=ds.y.copy())


def ood_suite(ds: Dataset, streams: PrngStreams):
    """All 6 corruption kinds x 5 severities; seeds from the corruption stream."""
    if ds.image_hw is None:
        raise InputError("OOD suite requires image data")
    out = []
    for kind in CORRUPTION_KINDS:
        for sev in range(1, 6):
            seed = int(streams.child("corruption", kind, sev).integers(2 ** 62))
            spec = CorruptionSpec(kind, sev, seed)
            out.append((spec, corrupt(ds, spec)))
    return out


def metric_sample(ds: Dataset, streams: PrngStreams, cap: int = 2048) -> Dataset:
    """Fixed un-augmented subset used for all metric evaluations in a run."""
    n = len(ds)
    take = min(cap, n)
    idx = streams.child("shuffle", "metric_sample").permutation(n)[:take]
    return Dataset(ds.x[idx].copy(), ds.y[idx].copy(), ds.split, ds.image_hw)


# ---------------------------------------------------------------------------
# bundled 14x14 handwritten-digits corpus (stand-in when no IDX files are
# supplied): upsampled from scikit-learn's offline 8x8 digits with
# deterministic shift/rotation augmentation.

def _upsample_bilinear(imgs, out_h, out_w):
    n, h, w = imgs.shape
    sy = np.linspace(0, h - 1, out_h)
    sx = np.linspace(0, w - 1, out_w)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[None, :, None]
    fx = (sx - x0)[None, None, :]
    a = imgs[:, y0][:, :, x0]
    b = imgs[:, y0][:, :, x1]
    c = imgs[:, y1][:, :, x0]
    d = imgs[:, y1][:, :, x1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    src_x = slice(max(0, -dx), w - max(0, dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def digits14(n_train: int, n_test: int, seed: int):
    """Deterministic 10-class 14x14 digit corpus (train, test) datasets."""
    from sklearn.datasets import load_digits

    base = load_digits()
    imgs = base.images / 16.0
    labels = base.target
    # per-class 80/20 base-image split so augmented variants never leak
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.where(labels == c)[0]
        cut = int(round(len(idx) * 0.8))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])

    def synth(pool_idx, n, stream_key, split):
        pool = _upsample_bilinear(imgs[pool_idx], 14, 14)
        pool_y = labels[pool_idx]
        r = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream_key])))
        picks = r.integers(0, len(pool), size=n)
        out = np.empty((n, 14, 14))
        for i, j in enumerate(picks):
            img = pool[j]
            deg = r.uniform(-8.0, 8.0)
            img = _rotate_bilinear(img[None], deg)[0]
            img = _shift(img, int(r.integers(-2, 3)), int(r.integers(-2, 3)))
            img = img + 0.02 * r.standard_normal(img.shape)
            out[i] = img
        out = np.clip(out, 0.0, 1.0)
        return Dataset(out.reshape(n, 196), pool_y[picks].astype(np.int64), split, (14, 14))

    return synth(train_idx, n_train, 1, "train"), synth(test_idx, n_test, 2, "test")
