"""Experiment orchestration: configs, training runs, persistence, sweeps."""

import json
import os

import numpy as np
import pytest

from eseize.data import Dataset, ood_suite
from eseize.errors import InputError
from eseize.harness import (ExperimentConfig, auto_k_values, build_datasets,
                            evaluate, read_trace, run_dir_name, run_training,
                            sample_random_ks, save_run, sweep_k, write_trace)
from eseize.interventions import UnfreezeSchedule, trainable_set
from eseize.nn import Model, load_checkpoint, loss_and_grad
from eseize.optim import OptimizerState, optimizer_step
from eseize.rng import PrngStreams

SYNTH = {
    "dataset": {"kind": "synthetic", "task": "gauss_blobs",
                "n_train": 400, "n_test": 200, "noise_sd": 0.05, "seed": 0},
    "arch": {"kind": "mlp", "hidden": [8, 8]},
    "optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 0.0},
    "total_steps": 100,
    "batch_size": 32,
    "record_stride": 10,
    "metric_sample_cap": 64,
    "seeds": [0],
}

DIGITS_SMALL = {
    "dataset": {"kind": "digits14", "n_train": 400, "n_test": 120, "seed": 0},
    "arch": {"kind": "mlp", "hidden": [16, 16]},
    "optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 0.01},
    "total_steps": 60,
    "batch_size": 64,
    "record_stride": 10,
    "metric_sample_cap": 128,
    "seeds": [0],
}


def synth_config(**overrides):
    d = {**SYNTH, **overrides}
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# config handling

def test_unknown_config_key_rejected():
    with pytest.raises(InputError):
        ExperimentConfig.from_dict({"total_stepz": 100})
    with pytest.raises(InputError):
        ExperimentConfig.from_dict({"detector": {"window": 3}})


def test_config_defaults_and_hash_stability():
    a = ExperimentConfig.from_dict({})
    b = ExperimentConfig.from_dict({"record_stride": 10})
    assert a["record_stride"] == 10
    assert a["detector"] == {"tau": 3, "eps": 0.02}
    assert a.config_hash() == b.config_hash()
    c = a.with_updates(total_steps=123)
    assert c.config_hash() != a.config_hash()
    assert a["total_steps"] == 2000  # with_updates does not mutate


def test_config_k_max_equal_division():
    cfg = synth_config(total_steps=1000)
    assert cfg.n_blocks == 2
    assert cfg.k_max() == 500


def test_config_schema_version_checked():
    with pytest.raises(InputError):
        ExperimentConfig.from_dict({"schema_version": 99})


def test_build_datasets_synthetic_and_unknown_kind():
    train, test = build_datasets(synth_config())
    assert len(train) == 400 and len(test) == 200
    with pytest.raises(InputError):
        build_datasets(ExperimentConfig.from_dict(
            {"dataset": {"kind": "parquet"}}))


# ---------------------------------------------------------------------------
# training runs

def test_trace_row_count_matches_stride():
    cfg = synth_config(total_steps=100, record_stride=10)
    res = run_training(cfg, 0)
    assert len(res.records) == 10
    steps = [r.step for r in res.records]
    assert steps == list(range(0, 100, 10))


def test_run_training_deterministic_artifacts(tmp_path):
    cfg = synth_config()
    paths = []
    for tag in ("a", "b"):
        res = run_training(cfg, 0)
        out = os.path.join(tmp_path, tag)
        rd = save_run(out, cfg, res)
        paths.append(rd)
    for name in ("trace.csv", "report.json", "config.json", "model.ckpt"):
        with open(os.path.join(paths[0], name), "rb") as f:
            first = f.read()
        with open(os.path.join(paths[1], name), "rb") as f:
            second = f.read()
        assert first == second, name


def test_gauss_blobs_baseline_reaches_high_accuracy():
    cfg = synth_config(total_steps=300)
    res = run_training(cfg, 0, collect_metrics=False)
    assert not res.diverged
    assert res.id_acc >= 0.95
    assert res.ood_mean is None  # no image suite for flat features


def test_baseline_run_matches_plain_training_loop():
    cfg = synth_config(total_steps=50)
    res = run_training(cfg, 3, collect_metrics=False)

    # independent re-execution with bare nn-core pieces
    streams = PrngStreams(3)
    train, _ = build_datasets(cfg)
    arch = {"kind": "mlp", "hidden": [8, 8], "input_dim": 2, "n_classes": 2}
    model = Model.build(arch, streams)
    opt = OptimizerState(kind="adamw", lr=0.01, weight_decay=0.0)
    scope = {"head", "block0", "block1"}
    model.set_trainable(scope)
    shuffle = streams.stream("shuffle")
    order = shuffle.permutation(len(train))
    cursor = 0
    for _ in range(50):
        if cursor + 32 > len(train):
            order = shuffle.permutation(len(train))
            cursor = 0
        idx = order[cursor:cursor + 32]
        cursor += 32
        _, grads = loss_and_grad(model, train.x[idx], train.y[idx], scope)
        optimizer_step(opt, model, grads)
    for ba, bb in zip(res.model.all_blocks(), model.all_blocks()):
        for pa, pb in zip(ba.params, bb.params):
            assert np.array_equal(pa, pb)


def test_head_only_run_keeps_blocks_frozen():
    cfg = synth_config(total_steps=40)
    res = run_training(cfg, 1, head_only=True, collect_metrics=False)
    init = Model.build({"kind": "mlp", "hidden": [8, 8], "input_dim": 2,
                        "n_classes": 2}, PrngStreams(1))
    for bid in ("block0", "block1"):
        got = res.model.block_by_id(bid)
        want = init.block_by_id(bid)
        for pg, pw in zip(got.params, want.params):
            assert np.array_equal(pg, pw)
    assert res.final_scope == ["head"]


def test_unfreeze_schedule_reflected_in_trace_scope_counts():
    cfg = synth_config(total_steps=60, unfreeze={"k": 20, "order": "top_down"})
    res = run_training(cfg, 0)
    n_by_step = {r.step: r.n_trainable for r in res.records}
    sched = UnfreezeSchedule(k=20, L=2)
    model = res.model
    for step, n in n_by_step.items():
        scope = trainable_set(sched, max(step + 1, 1))
        assert n == model.param_count(scope)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_run_is_flagged():
    cfg = synth_config(total_steps=200,
                       optimizer={"kind": "sgd_momentum", "lr": 1e9,
                                  "momentum": 0.9})
    res = run_training(cfg, 0, collect_metrics=False)
    assert res.diverged
    assert res.report is None


# ---------------------------------------------------------------------------
# evaluation

def test_evaluate_uniform_predictor_near_chance():
    arch = {"kind": "mlp", "input_dim": 4, "hidden": [4], "n_classes": 5}
    model = Model.build(arch, PrngStreams(0))
    model.head.params = [np.zeros((4, 5)), np.zeros(5)]
    rng = np.random.default_rng(0)
    n = 10000
    test = Dataset(rng.random((n, 4)), rng.integers(0, 5, size=n), "test")
    rep = evaluate(model, test, [])
    # uniform logits always predict class 0; accuracy = freq of label 0
    sigma = np.sqrt(0.2 * 0.8 / n)
    assert abs(rep.id_acc - 0.2) < 3 * sigma


def test_evaluate_ood_mean_is_cell_average():
    arch = {"kind": "mlp", "input_dim": 16, "hidden": [8], "n_classes": 3}
    model = Model.build(arch, PrngStreams(1))
    rng = np.random.default_rng(1)
    test = Dataset(rng.random((30, 16)), rng.integers(0, 3, size=30),
                   "test", (4, 4))
    suite = ood_suite(test, PrngStreams(2))
    rep = evaluate(model, test, suite)
    cells = [acc for by_sev in rep.ood_cells.values() for acc in by_sev.values()]
    assert len(cells) == 30
    assert rep.ood_mean == pytest.approx(np.mean(cells), abs=1e-15)


def test_evaluate_memorizer_is_perfect():
    arch = {"kind": "mlp", "input_dim": 2, "hidden": [2], "n_classes": 2}
    model = Model.build(arch, PrngStreams(0))
    model.blocks[0].params = [np.eye(2), np.zeros(2)]
    model.head.params = [np.eye(2), np.zeros(2)]
    test = Dataset(np.array([[1.0, 0.0]]), np.array([0]), "test")
    assert evaluate(model, test, []).id_acc == 1.0


# ---------------------------------------------------------------------------
# trace files

def test_trace_roundtrip(tmp_path):
    cfg = synth_config()
    res = run_training(cfg, 0)
    path = os.path.join(tmp_path, "trace.csv")
    write_trace(path, res.records, {"stride": 10, "seed": 0})
    meta, cols = read_trace(path)
    assert meta["stride"] == "10"
    assert np.array_equal(cols["step"], [r.step for r in res.records])
    assert np.array_equal(cols["trf"], [r.trf for r in res.records])
    assert np.array_equal(cols["n_trainable"],
                          [r.n_trainable for r in res.records])


def test_trace_schema_enforced(tmp_path):
    path = os.path.join(tmp_path, "bad.csv")
    with open(path, "w") as f:
        f.write("step,fisher,loss\n0,1.0,2.0\n")
    with pytest.raises(InputError):
        read_trace(path)


def test_save_run_layout(tmp_path):
    cfg = synth_config()
    res = run_training(cfg, 0)
    rd = save_run(str(tmp_path), cfg, res)
    assert os.path.basename(rd) == run_dir_name(cfg, 0)
    assert rd.endswith(f"run_{cfg.config_hash()}_0")
    with open(os.path.join(rd, "report.json")) as f:
        report = json.load(f)
    assert report["config_hash"] == cfg.config_hash()
    assert report["seed"] == 0 and report["k"] == 0
    model = load_checkpoint(os.path.join(rd, "model.ckpt"))
    assert model.n_classes == 2


# ---------------------------------------------------------------------------
# sweeps and random k

def test_sweep_requires_baseline_and_unique_ks():
    cfg = synth_config(total_steps=20)
    with pytest.raises(InputError):
        sweep_k(cfg, [1, 5], [0])
    with pytest.raises(InputError):
        sweep_k(cfg, [0, 5, 5], [0])


def test_sweep_rows_sorted_with_zero_baseline_delta():
    cfg = synth_config(total_steps=40)
    rows, results = sweep_k(cfg, [10, 0, 5], [0, 1])
    assert [r["k"] for r in rows] == [0, 5, 10]
    assert rows[0]["mean_delta_id"] == 0.0
    assert rows[0]["n_seeds"] == 2 and rows[0]["excluded"] == 0
    assert set(results) == {(k, s) for k in (0, 5, 10) for s in (0, 1)}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_excludes_diverged_runs():
    cfg = synth_config(total_steps=40,
                       optimizer={"kind": "sgd_momentum", "lr": 1e9,
                                  "momentum": 0.0})
    rows, _ = sweep_k(cfg, [0, 5], [0])
    assert all(r["excluded"] == 1 and r["n_seeds"] == 0 for r in rows)


def test_auto_k_values_cover_bounds():
    cfg = synth_config(total_steps=1000)
    ks = auto_k_values(cfg)
    assert ks[0] == 0 and 1 in ks and ks[-1] == cfg.k_max()
    assert ks == sorted(set(ks))


def test_random_ks_reproducible_and_in_range():
    cfg = synth_config(total_steps=1000)
    a = sample_random_ks(cfg, seed=0, n=10)
    b = sample_random_ks(cfg, seed=0, n=10)
    assert a == b and len(a) == 10
    assert all(1 <= k <= cfg.k_max() for k in a)
    assert sample_random_ks(cfg, seed=1, n=10) != a


def test_digits_image_run_produces_ood_report():
    cfg = ExperimentConfig.from_dict(DIGITS_SMALL)
    res = run_training(cfg, 0, collect_metrics=False)
    assert not res.diverged
    assert res.ood_mean is not None
    cells = [a for by_sev in res.report.ood_cells.values()
             for a in by_sev.values()]
    assert len(cells) == 30
