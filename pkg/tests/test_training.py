import copy
import math

import numpy as np
import pytest

from biice.data import SynthConfig, generate_synthetic
from biice.grad import batch_loss, loss_and_grad
from biice.model import BiIceConfig
from biice.numerics import ContractError, TrainingError, make_rng
from biice.objectives import LossWeights
from biice.training import (
    AdamWState,
    TrainConfig,
    adamw_step,
    fit,
    gradient_check,
    init_state,
    iters_per_epoch,
    lr_at,
    train_epoch,
)
from conftest import random_params


@pytest.fixture(scope="module")
def tiny_data():
    ds, ann, planted = generate_synthetic(SynthConfig(n_classes=2, n_planted=4, dim=6, n_patches=4,
                                                      n_samples=40, n_global=1, seed=3))
    config = BiIceConfig(n_concepts=4, dim=6, n_patches=4, n_classes=2, n_global=1)
    return ds, ann, config


def _batch(config, rng, b=3):
    z = rng.normal(size=(b, config.n_patches, config.dim))
    labels = rng.integers(0, config.n_classes, size=b)
    qg = rng.integers(0, 2, size=(b, config.n_global)).astype(float)
    qs = rng.integers(0, 2, size=(b, config.n_patches, config.n_spatial)).astype(float)
    return z, labels, qg, qs


class TestSchedule:
    def test_warmup_boundary(self):
        assert lr_at(10, 1e-3, 10, 100) == 1e-3
        assert lr_at(9, 1e-3, 10, 100) == pytest.approx(1e-3)

    def test_first_step_nonzero(self):
        assert lr_at(0, 1e-3, 10, 100) == pytest.approx(1e-4)

    def test_final_iteration(self):
        assert abs(lr_at(99, 1e-3, 10, 100)) < 1e-12

    def test_midpoint(self):
        assert lr_at(10 + 89 / 2, 1.0, 10, 100) == pytest.approx(0.5, abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(ContractError):
            lr_at(0, 1e-3, 10, 10)

    def test_nonincreasing_after_warmup(self):
        lrs = [lr_at(i, 1.0, 5, 60) for i in range(5, 60)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestAdamW:
    def test_zero_grad_no_decay(self):
        theta = {"w": np.array([1.0, -2.0])}
        adamw_step(theta, {"w": np.zeros(2)}, AdamWState.zeros_like(theta), 0.1, 0.0)
        np.testing.assert_array_equal(theta["w"], [1.0, -2.0])

    def test_single_step_oracle(self):
        theta = {"w": np.array([1.0])}
        adamw_step(theta, {"w": np.array([1.0])}, AdamWState.zeros_like(theta), 0.1, 0.0)
        m_hat = (0.1 * 1.0) / (1 - 0.9)
        v_hat = (0.001 * 1.0) / (1 - 0.999)
        expected = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert theta["w"][0] == pytest.approx(expected, abs=1e-15)
        assert theta["w"][0] == pytest.approx(0.9, abs=1e-6)

    def test_decay_only(self):
        theta = {"w": np.array([2.0])}
        state = AdamWState.zeros_like(theta)
        for _ in range(3):
            adamw_step(theta, {"w": np.zeros(1)}, state, 1.0, 0.1)
        assert theta["w"][0] == pytest.approx(2.0 * 0.9 ** 3, abs=1e-15)

    def test_bank_and_biases_not_decayed(self):
        theta = {"zeta": np.ones(2), "cell.b_z": np.ones(2), "head": np.ones(2)}
        zero = {k: np.zeros(2) for k in theta}
        adamw_step(theta, zero, AdamWState.zeros_like(theta), 1.0, 0.5)
        assert np.array_equal(theta["zeta"], np.ones(2))
        assert np.array_equal(theta["cell.b_z"], np.ones(2))
        np.testing.assert_allclose(theta["head"], 0.5)

    def test_non_finite(self):
        theta = {"w": np.ones(1)}
        with pytest.raises(TrainingError):
            adamw_step(theta, {"w": np.array([np.nan])}, AdamWState.zeros_like(theta), 0.1, 0.0)


class TestGradients:
    @pytest.mark.parametrize("t_inner", [1, 2])
    @pytest.mark.parametrize("norm_axis", ["concepts", "patches"])
    def test_full_module(self, t_inner, norm_axis):
        config = BiIceConfig(n_concepts=4, dim=8, n_patches=6, n_classes=3, n_global=1,
                             t_inner=t_inner, norm_axis=norm_axis)
        params = random_params(config, seed=t_inner)
        z, y, qg, qs = _batch(config, make_rng(5))
        report = gradient_check(params, config, z, y, LossWeights(1.0, 0.5), qg, qs)
        assert max(report.values()) < 1e-4

    def test_near_linear_single_concept(self):
        config = BiIceConfig(n_concepts=1, dim=3, n_patches=2, n_classes=2)
        params = random_params(config, seed=8)
        z, y, _, _ = _batch(config, make_rng(6))
        report = gradient_check(params, config, z, y, LossWeights(0.0, 0.0))
        assert max(report.values()) < 1e-8

    def test_harness_detects_corruption(self, small_config, small_params):
        z, y, qg, qs = _batch(small_config, make_rng(7))
        w = LossWeights(1.0, 0.5)
        _, grads = loss_and_grad(small_params, small_config, z, y, w, qg, qs)
        grads["k_omega"][0, 0] += 1.0
        report = gradient_check(small_params, small_config, z, y, w, qg, qs, grads=grads,
                                entries_per_tensor=10 ** 6)
        assert report["k_omega"] > 1e-2

    def test_loss_matches_objectives(self, small_config, small_params):
        z, y, qg, qs = _batch(small_config, make_rng(9), b=1)
        w = LossWeights(1.0, 0.5)
        a, _ = loss_and_grad(small_params, small_config, z, y, w, qg, qs)
        b, _ = batch_loss(small_params, small_config, z, y, w, qg, qs)
        assert a.total == b.total


class TestEpochs:
    def test_zero_lr_keeps_params(self, tiny_data):
        ds, ann, config = tiny_data
        cfg = TrainConfig(batch_size=8, epochs=2, base_lr=0.0, lambda_expl=1.0, seed=1)
        state = init_state(config, cfg)
        before = copy.deepcopy(state.params)
        metrics = train_epoch(ds, state, config, cfg, make_rng(0), 20, ann)
        for name, t in state.params.named_tensors().items():
            assert np.array_equal(t, before.named_tensors()[name])
        assert 0.0 <= metrics["train_acc"] <= 1.0 and metrics["train_loss"] > 0

    def test_single_sample_loss(self, tiny_data):
        ds, ann, config = tiny_data
        one = ds.subset([0])
        cfg = TrainConfig(batch_size=4, epochs=1, warmup_iters=0, lambda_expl=1.0, lambda_sparse=0.5)
        state = init_state(config, cfg)
        expected = batch_loss(state.params, config, one.z, one.labels, cfg.weights,
                              ann.q_global[:1].astype(float), ann.q_spatial[:1].astype(float))[0].total
        metrics = train_epoch(one, state, config, cfg, make_rng(0), 1, ann.subset([0]))
        assert metrics["train_loss"] == pytest.approx(expected, abs=1e-15)

    def test_resume_replays_exactly(self, tiny_data):
        ds, ann, config = tiny_data
        cfg = TrainConfig(batch_size=8, epochs=2, warmup_iters=2, base_lr=1e-2, lambda_expl=1.0, seed=4)
        full = fit(ds, None, config, cfg, ann=ann)
        half = fit(ds, None, config, cfg, ann=ann, until=1)
        resumed = fit(ds, None, config, cfg, ann=ann, state=copy.deepcopy(half.state))
        for name, t in full.params.named_tensors().items():
            assert np.array_equal(t, resumed.params.named_tensors()[name])

    def test_bit_reproducible(self, tiny_data):
        ds, ann, config = tiny_data
        cfg = TrainConfig(batch_size=8, epochs=3, base_lr=1e-2, lambda_expl=1.0, lambda_sparse=0.5, seed=2)
        a = fit(ds, None, config, cfg, ann=ann)
        b = fit(ds, None, config, cfg, ann=ann)
        for name, t in a.params.named_tensors().items():
            assert np.array_equal(t, b.params.named_tensors()[name])
        assert [s.metrics for s in a.snapshots] == [s.metrics for s in b.snapshots]

    def test_one_epoch_one_snapshot(self, tiny_data):
        ds, ann, config = tiny_data
        res = fit(ds, ds, config, TrainConfig(batch_size=8, epochs=1, warmup_iters=2, lambda_expl=0.0))
        assert len(res.snapshots) == 1
        assert res.snapshots[0].epoch == 1 and res.snapshots[0].zeta.shape == (4, 6)
        assert set(res.snapshots[0].metrics) >= {"train_loss", "train_acc", "val_acc"}

    def test_snapshot_every(self, tiny_data):
        ds, _, config = tiny_data
        res = fit(ds, ds, config, TrainConfig(batch_size=8, epochs=5, snapshot_every=2, lambda_expl=0.0))
        assert [s.epoch for s in res.snapshots] == [2, 4, 5]

    def test_annotations_required(self, tiny_data):
        ds, _, config = tiny_data
        with pytest.raises(ContractError):
            fit(ds, None, config, TrainConfig(lambda_expl=1.0), ann=None)

    def test_float32_mode(self, tiny_data):
        ds, _, config = tiny_data
        res = fit(ds, ds, config, TrainConfig(batch_size=8, epochs=1, warmup_iters=2, lambda_expl=0.0, dtype="float32"))
        assert res.params.zeta.dtype == np.float32

    def test_degenerate_schedule_raises(self, tiny_data):
        ds, _, config = tiny_data
        with pytest.raises(ContractError, match="degenerate schedule"):
            fit(ds, ds, config, TrainConfig(batch_size=8, epochs=1, warmup_iters=10, lambda_expl=0.0))

    def test_config_guards(self):
        with pytest.raises(ContractError):
            TrainConfig(epochs=0)
        with pytest.raises(ContractError):
            TrainConfig(batch_size=0)

    def test_iters_per_epoch(self):
        assert iters_per_epoch(512, 64) == 8
        assert iters_per_epoch(461, 64) == 8
