import csv
import json

import numpy as np
import pytest

from biice import evaluation as ev
from biice.data import EmbeddingDataset, load_dataset
from biice.model import BiIceConfig, forward, split_composition
from biice.numerics import ContractError, make_rng
from conftest import random_params


@pytest.fixture
def setup(rng):
    config = BiIceConfig(n_concepts=5, dim=6, n_patches=4, n_classes=3, n_global=2)
    params = random_params(config, seed=11, jitter=0.6)
    ds = EmbeddingDataset(rng.normal(size=(30, 4, 6)), rng.integers(0, 3, 30), 3)
    return config, params, ds


def uniform_model(config):
    params = random_params(config, seed=2)
    params.zeta[:] = params.zeta[0]
    return params


class TestImportance:
    def test_single_sample_class(self, setup):
        config, params, ds = setup
        one = ds.subset([4])
        label = int(one.labels[0])
        rep = ev.concept_importance(params, config, one, label)
        g, s = split_composition(forward(one.z[0], params, config).phi, config.n_global)
        np.testing.assert_allclose(rep.global_scores, g, atol=1e-15)
        np.testing.assert_allclose(rep.samples[0]["phi_spatial"], s, atol=1e-15)

    def test_uniform_composition(self, setup, rng):
        config, _, ds = setup
        rep = ev.concept_importance(uniform_model(config), config, ds, 1)
        np.testing.assert_allclose(rep.global_scores, 1 / config.n_concepts, atol=1e-12)

    def test_two_sample_mean(self, setup):
        config, params, ds = setup
        idx = np.flatnonzero(ds.labels == 0)[:2]
        pair = ds.subset(idx)
        rep = ev.concept_importance(params, config, pair, 0)
        g0 = forward(pair.z[0], params, config).phi[:, :2].mean(axis=0)
        g1 = forward(pair.z[1], params, config).phi[:, :2].mean(axis=0)
        np.testing.assert_allclose(rep.global_scores, (g0 + g1) / 2, atol=1e-15)

    def test_empty_class(self, setup):
        config, params, ds = setup
        with pytest.raises(ContractError):
            ev.concept_importance(params, config, ds.subset(np.flatnonzero(ds.labels != 2)), 2)


class TestActivated:
    def test_uniform_has_none(self):
        assert ev.activated_patches(np.full((4, 2), 0.5)) == []

    def test_single_hit(self):
        phi = np.full((3, 3), 0.05)
        phi[1, 2] = 0.9
        assert ev.activated_patches(phi) == [(1, 2, 0.9)]

    def test_threshold_boundary_and_order(self):
        phi = np.zeros((3, 2))
        phi[0, 0], phi[1, 1], phi[2, 0] = 0.61, 0.7, 0.59
        assert ev.activated_patches(phi) == [(1, 1, 0.7), (0, 0, 0.61)]

    def test_offset(self):
        phi = np.array([[0.9, 0.1]])
        assert ev.activated_patches(phi, offset=3) == [(0, 3, 0.9)]


class TestMaskedLogits:
    def test_keep_all(self, setup):
        config, params, ds = setup
        full = forward(ds.z, params, config).logits
        np.testing.assert_allclose(ev.masked_logits(ds.z, params, config, range(5)), full, atol=1e-12)

    def test_keep_none(self, setup):
        config, params, ds = setup
        assert np.array_equal(ev.masked_logits(ds.z[0], params, config, []), np.zeros(3))

    def test_single_term(self, setup):
        config, params, ds = setup
        trace = forward(ds.z[3], params, config)
        weights = trace.zeta_refined @ params.v_omega @ params.head
        expected = trace.phi[:, 2].mean() * weights[2]
        np.testing.assert_allclose(ev.masked_logits(ds.z[3], params, config, [2]), expected, atol=1e-15)

    def test_cache_agrees(self, setup):
        config, params, ds = setup
        cache = ev.CompositionCache.build(params, config, ds, batch_size=7)
        np.testing.assert_allclose(cache.masked_logits([0, 3]), ev.masked_logits(ds.z, params, config, [0, 3]),
                                   atol=1e-14)


class TestCurves:
    def test_normalisation_endpoints(self, setup):
        config, params, ds = setup
        order = ev.importance_order(params, config, ds)
        dele = ev.c_deletion_curve(params, config, ds, order)
        ins = ev.c_insertion_curve(params, config, ds, order)
        assert dele.f[0] == 1.0 and ins.f[-1] == 1.0
        assert np.all((0 <= dele.f) & (dele.f <= 1))
        assert np.all(np.diff(dele.grid) > 0) and len(dele.grid) == 6

    def test_single_concept_two_points(self, rng):
        config = BiIceConfig(n_concepts=1, dim=3, n_patches=2, n_classes=2)
        params = random_params(config, 4)
        ds = EmbeddingDataset(rng.normal(size=(20, 2, 3)), rng.integers(0, 2, 20), 2)
        acc = ev.CompositionCache.build(params, config, ds).accuracy([0])
        if acc == 0:
            pytest.skip("degenerate random model")
        curve = ev.c_deletion_curve(params, config, ds, [0])
        assert curve.grid.tolist() == [0.0, 1.0] and curve.f[0] == 1.0

    def test_auc_trapezoid(self):
        grid = np.array([0, 0.5, 1.0])
        assert ev._auc(grid, np.array([1.0, 0.5, 0.0])) == pytest.approx(0.5)

    def test_rejects_bad_order(self, setup):
        config, params, ds = setup
        with pytest.raises(ContractError):
            ev.c_insertion_curve(params, config, ds, [0, 1, 2])

    def test_zero_accuracy_undefined(self, setup):
        config, params, ds = setup
        cache = ev.CompositionCache.build(params, config, ds)
        pred = cache.masked_logits(range(5)).argmax(axis=1)
        wrong = EmbeddingDataset(ds.z, (pred + 1) % 3, 3)
        with pytest.raises(ContractError):
            ev.c_deletion_curve(params, config, wrong, range(5))

    def test_random_single_order(self, setup):
        config, params, ds = setup
        rand = ev.random_baseline_curves(params, config, ds, "insertion", n_orders=1, seed=3)
        perm = make_rng(3).permutation(5)
        single = ev.c_insertion_curve(params, config, ds, perm)
        np.testing.assert_array_equal(rand.f, single.f)

    def test_random_mean_bounds(self, setup):
        config, params, ds = setup
        rand = ev.random_baseline_curves(params, config, ds, "deletion", n_orders=10, seed=1)
        rng = make_rng(1)
        fs = np.stack([ev.c_deletion_curve(params, config, ds, rng.permutation(5)).f for _ in range(10)])
        assert rand.std[0] == 0.0
        assert np.all(fs.min(axis=0) <= rand.f + 1e-15) and np.all(rand.f <= fs.max(axis=0) + 1e-15)


class TestOrder:
    def test_uniform_identity(self, setup):
        config, _, ds = setup
        assert ev.importance_order(uniform_model(config), config, ds) == [0, 1, 2, 3, 4]

    def test_dominant_first(self, setup):
        config, params, ds = setup
        cache = ev.CompositionCache.build(params, config, ds)
        cache.phi_bar = np.tile([0.1, 0.1, 0.6, 0.1, 0.1], (len(ds), 1))
        assert ev.importance_order(params, config, ds, cache)[0] == 2


class TestLocalization:
    def test_one_hot(self):
        phi = np.eye(4)[[2, 0, 3, 1]]
        grid = ev.localization_grid(phi, n_global=0)
        assert grid.shape == (2, 2) and grid.concept_ids == [[2, 0], [3, 1]]

    def test_constant_rows_lowest_id(self):
        grid = ev.localization_grid(np.full((3, 4), 0.25), n_global=5)
        assert grid.shape == (1, 3) and grid.concept_ids == [[5, 5, 5]]

    def test_argmax_oracle(self, rng):
        phi = rng.random((4, 3))
        grid = ev.localization_grid(phi, n_global=2)
        ids = [max(range(3), key=lambda k: phi[l, k]) + 2 for l in range(4)]
        assert sum(grid.concept_ids, []) == ids
        assert sum(grid.scores, []) == [phi[l, i - 2] for l, i in enumerate(ids)]

    def test_monotone_rescale_invariance(self, rng):
        phi = rng.random((9, 4))
        scaled = np.exp(3 * phi) + 2.0
        assert ev.localization_grid(phi, 1).concept_ids == ev.localization_grid(scaled, 1).concept_ids


class TestConvergence:
    def test_identical_snapshots(self, rng):
        z = rng.normal(size=(3, 4))
        assert ev.convergence_metrics([z, z.copy()])["drift"] == [0.0]

    def test_orthogonal_separation(self):
        assert ev.concept_separation(np.eye(4)[:3]) == pytest.approx(1.0)

    def test_loop_oracle(self, rng):
        snaps = [rng.normal(size=(3, 4)) for _ in range(3)]
        out = ev.convergence_metrics(snaps)
        for t in (1, 2):
            expected = sum((snaps[t][i, j] - snaps[t - 1][i, j]) ** 2 for i in range(3) for j in range(4)) ** 0.5
            assert out["drift"][t - 1] == pytest.approx(expected, abs=1e-14)
        for t, s in enumerate(snaps):
            best = max(
                float(s[a] @ s[b] / (np.linalg.norm(s[a]) * np.linalg.norm(s[b])))
                for a in range(3) for b in range(3) if a != b
            )
            assert out["separation"][t] == pytest.approx(1 - best, abs=1e-14)

    def test_needs_two(self, rng):
        with pytest.raises(ContractError):
            ev.convergence_metrics([rng.normal(size=(2, 2))])


class TestRecovery:
    def test_exact(self, rng):
        planted = np.linalg.qr(rng.normal(size=(6, 6)))[0][:4]
        assert ev.planted_recovery(planted[[2, 0, 3, 1]], planted) == pytest.approx(1.0)

    def test_orthogonal(self):
        planted = np.eye(6)[:3]
        assert ev.planted_recovery(np.eye(6)[3:], planted) == 0.0

    def test_small_noise(self, rng):
        planted = np.linalg.qr(rng.normal(size=(16, 16)))[0][:8]
        assert ev.planted_recovery(planted + rng.normal(0, 0.05, planted.shape), planted) > 0.95


class TestExport:
    def test_curve_csv(self, tmp_path):
        curve = ev.CurveResult(np.array([0, 0.5, 1.0]), np.array([1.0, 0.123456789, 0.0]), 0.5)
        path = tmp_path / "c.csv"
        ev.write_curve_csv(path, curve)
        lines = path.read_text().splitlines()
        assert len(lines) == 4
        assert lines[0] == "fraction,f" and lines[2] == "0.5,0.123457"

    def test_json_round_trip(self, tmp_path):
        grid = ev.localization_grid(np.eye(4), 1)
        path = tmp_path / "g.json"
        ev.write_json(path, grid.to_dict())
        assert json.loads(path.read_text()) == json.loads(json.dumps(grid.to_dict()))

    def test_concepts_round_trip(self, tmp_path, rng):
        banks = [rng.normal(size=(3, 5)).astype(np.float32) for _ in range(4)]
        path = tmp_path / "c.biem"
        ev.export_concepts(path, banks)
        loaded = load_dataset(path, dtype=np.float32)
        assert loaded.z.tobytes() == np.stack(banks).tobytes()

    def test_series_csv(self, tmp_path):
        path = tmp_path / "s.csv"
        ev.write_series_csv(path, {"drift": [0.5], "separation": [0.1, 0.2]})
        rows = list(csv.reader(path.open()))
        assert rows == [["snapshot", "drift", "separation"], ["0", "", "0.1"], ["1", "0.5", "0.2"]]

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError, match="cannot write"):
            ev.write_json(tmp_path / "missing" / "x.json", {})
