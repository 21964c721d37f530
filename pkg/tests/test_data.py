"""IDX ingestion, synthetic tasks, corruption bench, and metric sampling."""

import struct

import numpy as np
import pytest

from eseize.data import (CORRUPTION_KINDS, CorruptionSpec, Dataset, corrupt,
                         dataset_to_csv, digits14, load_idx, make_synthetic,
                         metric_sample, ood_suite, write_idx)
from eseize.errors import InputError
from eseize.rng import PrngStreams


def write_pair(tmp_path, images, labels):
    ip = str(tmp_path / "imgs.idx")
    lp = str(tmp_path / "labels.idx")
    write_idx(np.asarray(images, dtype=np.uint8), labels, ip, lp)
    return ip, lp


# ---------------------------------------------------------------------------
# IDX format

def test_idx_roundtrip_labels(tmp_path):
    imgs = np.zeros((3, 4, 4), dtype=np.uint8)
    ip, lp = write_pair(tmp_path, imgs, [7, 2, 1])
    ds = load_idx(ip, lp)
    assert list(ds.y) == [7, 2, 1]
    assert ds.image_hw == (4, 4)


def test_idx_pixel_scaling(tmp_path):
    imgs = np.full((1, 2, 2), 255, dtype=np.uint8)
    ip, lp = write_pair(tmp_path, imgs, [0])
    ds = load_idx(ip, lp)
    assert np.all(ds.x == 1.0)


def test_idx_downsample_average_pools(tmp_path):
    img = np.zeros((1, 28, 28), dtype=np.uint8)
    img[0, 4:6, 10:12] = 255  # one aligned 2x2 block
    ip, lp = write_pair(tmp_path, img, [3])
    ds = load_idx(ip, lp, downsample_14=True)
    assert ds.image_hw == (14, 14)
    grid = ds.images()[0]
    assert grid[2, 5] == 1.0
    assert grid.sum() == 1.0


def test_idx_subset_is_prefix(tmp_path):
    imgs = np.arange(5 * 4, dtype=np.uint8).reshape(5, 2, 2)
    ip, lp = write_pair(tmp_path, imgs, [0, 1, 2, 3, 4])
    ds = load_idx(ip, lp, subset_n=2)
    assert len(ds) == 2 and list(ds.y) == [0, 1]


def test_idx_bad_magic_rejected(tmp_path):
    ip = str(tmp_path / "bad.idx")
    with open(ip, "wb") as f:
        f.write(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2) + b"\x00" * 4)
    lp = str(tmp_path / "labels.idx")
    with open(lp, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, 1) + b"\x00")
    with pytest.raises(InputError):
        load_idx(ip, lp)


def test_idx_truncated_payload_rejected(tmp_path):
    ip = str(tmp_path / "trunc.idx")
    with open(ip, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 5)
    lp = str(tmp_path / "labels.idx")
    with open(lp, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, 2) + b"\x00\x00")
    with pytest.raises(InputError):
        load_idx(ip, lp)


def test_idx_count_mismatch_rejected(tmp_path):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    ip, lp = write_pair(tmp_path, imgs, [0, 1, 2])
    lp2 = str(tmp_path / "short.idx")
    with open(lp2, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, 2) + b"\x00\x01")
    with pytest.raises(InputError):
        load_idx(ip, lp2)


# ---------------------------------------------------------------------------
# synthetic tasks

def test_gauss_blobs_zero_noise_sits_on_means():
    ds = make_synthetic("gauss_blobs", 10, 0.0, 0)
    for xi, yi in zip(ds.x, ds.y):
        expected = [0.3, 0.3] if yi == 0 else [0.7, 0.7]
        assert np.allclose(xi, expected)


def test_two_rings_radii_separate_classes():
    ds = make_synthetic("two_rings", 40, 0.0, 1)
    r = np.linalg.norm(ds.x - 0.5, axis=1)
    assert np.all(r[ds.y == 0] < r[ds.y == 1].min())


def test_synthetic_deterministic():
    a = make_synthetic("two_rings", 50, 0.05, 7)
    b = make_synthetic("two_rings", 50, 0.05, 7)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_synthetic_rejects_tiny_n():
    with pytest.raises(InputError):
        make_synthetic("gauss_blobs", 2, 0.0, 0)


def test_dataset_csv_header(tmp_path):
    ds = make_synthetic("gauss_blobs", 4, 0.0, 0)
    path = str(tmp_path / "ds.csv")
    dataset_to_csv(ds, path)
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == "f0,f1,label"
    assert len(lines) == 5


# ---------------------------------------------------------------------------
# corruptions

def image_dataset(n=20, hw=(8, 8), seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, hw[0] * hw[1]))
    y = rng.integers(0, 3, size=n)
    return Dataset(x, y, "test", hw)


def test_corrupt_preserves_labels_size_and_range():
    ds = image_dataset()
    for kind in CORRUPTION_KINDS:
        for sev in (1, 5):
            out = corrupt(ds, CorruptionSpec(kind, sev, seed=11))
            assert len(out) == len(ds)
            assert np.array_equal(out.y, ds.y)
            assert out.x.min() >= 0.0 and out.x.max() <= 1.0


def test_corrupt_deterministic_per_seed():
    ds = image_dataset()
    spec = CorruptionSpec("gaussian_noise", 3, seed=5)
    a = corrupt(ds, spec)
    b = corrupt(ds, spec)
    assert np.array_equal(a.x, b.x)
    c = corrupt(ds, CorruptionSpec("gaussian_noise", 3, seed=6))
    assert not np.array_equal(a.x, c.x)


def test_blur_of_constant_image_is_identity():
    ds = Dataset(np.full((2, 36), 0.4), np.zeros(2, dtype=int), "test", (6, 6))
    out = corrupt(ds, CorruptionSpec("box_blur", 5, seed=0))
    assert np.allclose(out.x, 0.4)


def test_pixel_dropout_drops_exact_count():
    ds = Dataset(np.ones((3, 100)), np.zeros(3, dtype=int), "test", (10, 10))
    out = corrupt(ds, CorruptionSpec("pixel_dropout", 5, seed=2))
    for row in out.x:
        assert (row == 0.0).sum() == 25  # round(0.25 * 100)


def test_contrast_pulls_toward_midpoint():
    ds = Dataset(np.array([[0.0, 1.0]]), np.zeros(1, dtype=int), "test", None)
    out = corrupt(ds, CorruptionSpec("contrast", 3, seed=0))
    assert np.allclose(out.x, [[0.25, 0.75]])  # factor 0.5 about 0.5


def test_rotation_zero_fills_corners():
    img = np.ones((1, 9, 9))
    ds = Dataset(img.reshape(1, 81), np.zeros(1, dtype=int), "test", (9, 9))
    out = corrupt(ds, CorruptionSpec("rotation", 5, seed=0))
    assert out.x.min() == 0.0  # corners rotate out of frame
    assert out.images()[0][4, 4] == pytest.approx(1.0)


def test_spatial_kinds_reject_flat_data():
    ds = Dataset(np.random.default_rng(0).random((4, 7)),
                 np.zeros(4, dtype=int), "test", None)
    for kind in ("box_blur", "rotation"):
        with pytest.raises(InputError):
            corrupt(ds, CorruptionSpec(kind, 1, seed=0))


def test_gaussian_noise_distortion_monotone_in_severity():
    ds = image_dataset(n=100, seed=3)
    dist = []
    for sev in range(1, 6):
        out = corrupt(ds, CorruptionSpec("gaussian_noise", sev, seed=9))
        dist.append(np.linalg.norm(out.x - ds.x, axis=1).mean())
    assert all(b >= a for a, b in zip(dist, dist[1:]))


def test_severity_parameter_tables_strictly_monotone():
    from eseize.data import SEVERITY_TABLES
    for kind, table in SEVERITY_TABLES.items():
        steps = np.diff(np.asarray(table, dtype=float))
        # contrast factors shrink toward 0 as distortion grows
        assert np.all(steps < 0) if kind == "contrast" else np.all(steps > 0)


def test_invalid_spec_rejected():
    with pytest.raises(InputError):
        CorruptionSpec("fog", 1, seed=0)
    with pytest.raises(InputError):
        CorruptionSpec("rotation", 6, seed=0)


def test_ood_suite_covers_all_cells_deterministically():
    ds = image_dataset()
    a = ood_suite(ds, PrngStreams(0))
    b = ood_suite(ds, PrngStreams(0))
    assert len(a) == 30
    assert {(s.kind, s.severity) for s, _ in a} == {
        (k, sev) for k in CORRUPTION_KINDS for sev in range(1, 6)}
    for (sa, da), (sb, db) in zip(a, b):
        assert sa == sb and np.array_equal(da.x, db.x)


def test_ood_suite_rejects_non_image():
    ds = make_synthetic("gauss_blobs", 8, 0.0, 0)
    with pytest.raises(InputError):
        ood_suite(ds, PrngStreams(0))


# ---------------------------------------------------------------------------
# metric sample and bundled corpus

def test_metric_sample_capped_and_stable():
    ds = image_dataset(n=50)
    a = metric_sample(ds, PrngStreams(4), cap=16)
    b = metric_sample(ds, PrngStreams(4), cap=16)
    assert len(a) == 16
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    full = metric_sample(ds, PrngStreams(4), cap=2048)
    assert len(full) == 50


def test_digits14_shapes_and_determinism():
    tr, te = digits14(200, 50, seed=0)
    tr2, _ = digits14(200, 50, seed=0)
    assert tr.image_hw == (14, 14) and te.image_hw == (14, 14)
    assert len(tr) == 200 and len(te) == 50
    assert tr.n_classes == 10
    assert tr.x.min() >= 0.0 and tr.x.max() <= 1.0
    assert np.array_equal(tr.x, tr2.x) and np.array_equal(tr.y, tr2.y)


def test_dataset_shape_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 4)), np.zeros(2, dtype=int), "train")
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 4)), np.zeros(3, dtype=int), "train", (3, 3))
