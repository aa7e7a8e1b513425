import math
from dataclasses import replace

import numpy as np
import pytest

from slopehazard.data import quickstart_generator, simulate
from slopehazard.network import init_parameters, trainable_paths, get_param, set_params
from slopehazard.training import (
    DEFAULT_GAMMA_GRID,
    Batch,
    LossConfig,
    OptimizerState,
    TrainConfig,
    TrainingDivergenceError,
    adam_step,
    egpd_nll,
    gradient,
    init_optimizer,
    joint_loss,
    loss_from_params,
    train,
    tune_gamma,
    weighted_bce,
)


def _small_dataset(n_sites=40, n_years=10, seed=4):
    gen = quickstart_generator(0)
    ds, _ = simulate(n_sites, n_years, gen, seed=seed)
    return ds


def _small_config(**over):
    base = TrainConfig(n_blocks=1, width=8, batch_size=64, val_crps_max_records=0)
    return replace(base, **over)


class _FakeOutputs:
    def __init__(self, p, sigma):
        self.p = np.asarray(p, dtype=float)
        self.sigma = np.asarray(sigma, dtype=float)


class _FakeBatch:
    def __init__(self, labels, areas):
        self.labels = np.asarray(labels)
        self.areas = np.asarray(areas, dtype=float)


class TestLoss:
    def test_hand_value_single_negative(self):
        batch = _FakeBatch([0], [0.0])
        out = _FakeOutputs([0.5], [1.0])
        cfg = LossConfig(gamma=0.5, class_weight_positive=0.9,
                         class_weight_negative=0.1, batch_size=1)
        # 0.5 * (-0.1 * log 0.5)
        expect = 0.5 * (-0.1 * math.log(0.5))
        assert joint_loss(batch, out, 2.0, 0.3, cfg) == pytest.approx(
            expect, abs=1e-15)
        assert expect == pytest.approx(0.03465735902799726, abs=1e-17)

    def test_decomposition_identity(self):
        rng = np.random.default_rng(0)
        n = 64
        labels = (rng.random(n) < 0.4).astype(int)
        areas = np.where(labels == 1, rng.uniform(0.01, 0.5, n), 0.0)
        p = rng.uniform(0.05, 0.95, n)
        sigma = rng.uniform(0.01, 0.2, n)
        out = _FakeOutputs(p, sigma)
        batch = _FakeBatch(labels, areas)
        bce = weighted_bce(labels, p, 0.9, 0.1)
        nll = egpd_nll(labels, areas, sigma, 2.0, 0.3)
        for gamma in (1.0 - 1e-12, 0.5, 1e-12):
            cfg = LossConfig(gamma=gamma, class_weight_positive=0.9,
                             class_weight_negative=0.1, batch_size=n)
            want = gamma * bce + (1.0 - gamma) * nll
            assert joint_loss(batch, out, 2.0, 0.3, cfg) == pytest.approx(
                want, abs=1e-9)

    def test_class_weight_scaling(self):
        labels = np.array([1, 0, 1, 0])
        p = np.array([0.7, 0.2, 0.9, 0.4])
        base = weighted_bce(labels, p, 0.9, 0.1)
        assert weighted_bce(labels, p, 1.8, 0.2) == pytest.approx(
            2.0 * base, rel=1e-14)

    def test_nll_only_positives(self):
        labels = np.array([0, 0, 0])
        assert egpd_nll(labels, np.zeros(3), np.ones(3), 2.0, 0.3) == 0.0

    def test_inconsistent_record_rejected(self):
        batch = _FakeBatch([1], [0.0])
        out = _FakeOutputs([0.5], [1.0])
        cfg = LossConfig(gamma=0.5, class_weight_positive=0.9,
                         class_weight_negative=0.1, batch_size=1)
        with pytest.raises(ValueError):
            joint_loss(batch, out, 2.0, 0.3, cfg)

    def test_gamma_bounds_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(gamma=1.0).validate()


class TestGradient:
    def _batch(self, n=32, seed=0, width=5):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, width))
        labels = (rng.random(n) < 0.5).astype(int)
        areas = np.where(labels == 1, rng.uniform(0.01, 0.5, n), 0.0)
        return Batch(X, labels, areas)

    def test_matches_finite_differences(self):
        batch = self._batch()
        params = init_parameters(5, 3, n_blocks=2, width=4, dropout_rate=0.2)
        cfg = LossConfig(gamma=0.5, class_weight_positive=0.9,
                         class_weight_negative=0.1, batch_size=32)
        result = gradient(batch, params.clone(), cfg, dropout_seed=7)
        for path in ["blocks.0.W", "blocks.1.bn_gamma", "head_p_w",
                     "head_s_b", "log_kappa", "log_xi"]:
            g = np.asarray(result.grads[path])
            value = np.asarray(get_param(params, path), dtype=float)
            it = np.ndindex(value.shape) if value.shape else [()]
            for index in list(it)[:3]:
                h = 1e-6 * max(1.0, abs(float(value[index])) if value.shape
                               else abs(float(value)))
                for sign, store in ((1, "hi"), (-1, "lo")):
                    trial = params.clone()
                    v = np.asarray(get_param(trial, path), dtype=float).copy()
                    if value.shape:
                        v[index] += sign * h
                    else:
                        v = v + sign * h
                    set_params(trial, {path: v})
                    if store == "hi":
                        hi = loss_from_params(batch, trial, cfg, dropout_seed=7)
                    else:
                        lo = loss_from_params(batch, trial, cfg, dropout_seed=7)
                fd = (hi - lo) / (2 * h)
                analytic = float(g[index]) if value.shape else float(g)
                assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-8), path

    def test_deterministic_per_dropout_seed(self):
        batch = self._batch()
        params = init_parameters(5, 3, n_blocks=2, width=4)
        cfg = LossConfig(gamma=0.5, class_weight_positive=0.9,
                         class_weight_negative=0.1, batch_size=32)
        a = gradient(batch, params.clone(), cfg, dropout_seed=11)
        b = gradient(batch, params.clone(), cfg, dropout_seed=11)
        assert a.loss == b.loss
        for path in a.grads:
            assert np.array_equal(a.grads[path], b.grads[path])

    def test_dead_paths_zero_without_positives(self):
        rng = np.random.default_rng(1)
        batch = Batch(rng.normal(size=(16, 5)), np.zeros(16, dtype=int),
                      np.zeros(16))
        params = init_parameters(5, 3, n_blocks=1, width=4, dropout_rate=0.0)
        cfg = LossConfig(gamma=0.5, class_weight_positive=0.9,
                         class_weight_negative=0.1, batch_size=16)
        result = gradient(batch, params, cfg, dropout_seed=0)
        assert np.all(np.asarray(result.grads["head_s_w"]) == 0.0)
        assert result.grads["head_s_b"] == 0.0
        assert result.grads["log_kappa"] == 0.0
        assert result.grads["log_xi"] == 0.0


class TestOptimizer:
    def test_staircase_schedule(self):
        params = init_parameters(3, 0, n_blocks=1, width=4)
        state = init_optimizer(params)
        assert state.learning_rate == pytest.approx(1e-3, abs=1e-18)
        state.step = 100_000
        # two 0.95 decays at the default 50k interval
        assert state.learning_rate == pytest.approx(9.025e-4, rel=1e-12)

    def test_zero_gradient_is_identity(self):
        params = init_parameters(3, 0, n_blocks=1, width=4)
        state = init_optimizer(params)
        zeros = {path: np.zeros_like(np.asarray(get_param(params, path),
                                                dtype=float))
                 for path in trainable_paths(params)}
        before = {path: np.array(get_param(params, path), dtype=float, copy=True)
                  for path in trainable_paths(params)}
        new_params, new_state = adam_step(params, zeros, state)
        assert new_state.step == 1
        for path, old in before.items():
            assert np.array_equal(
                np.asarray(get_param(new_params, path), dtype=float), old)

    def test_step_moves_against_gradient(self):
        params = init_parameters(3, 0, n_blocks=1, width=4)
        state = init_optimizer(params)
        grads = {path: np.zeros_like(np.asarray(get_param(params, path),
                                                dtype=float))
                 for path in trainable_paths(params)}
        grads["log_kappa"] = 1.0
        before = params.log_kappa
        new_params, _ = adam_step(params, grads, state)
        assert new_params.log_kappa < before


class TestTrain:
    def test_zero_epochs_returns_init(self):
        ds = _small_dataset()
        result = train(ds, _small_config(), 0, seed=1)
        assert result.trace == []
        assert result.best_epoch is None
        assert math.isnan(result.best_val_loss)

    def test_trace_shape_and_improvement(self):
        ds = _small_dataset()
        result = train(ds, _small_config(), 5, seed=1)
        assert [row.epoch for row in result.trace] == [1, 2, 3, 4, 5]
        assert all(math.isfinite(row.train_loss) for row in result.trace)
        assert all(math.isfinite(row.val_loss) for row in result.trace)
        assert result.best_val_loss <= result.trace[0].val_loss

    def test_bit_identical_reruns(self):
        ds = _small_dataset()
        r1 = train(ds, _small_config(), 3, seed=9)
        r2 = train(ds, _small_config(), 3, seed=9)
        assert [(t.train_loss, t.val_loss) for t in r1.trace] == \
               [(t.train_loss, t.val_loss) for t in r2.trace]
        out1 = r1.model.predict(ds.X)
        out2 = r2.model.predict(ds.X)
        assert np.array_equal(out1.p, out2.p)
        assert np.array_equal(out1.sigma, out2.sigma)

    def test_divergence_is_typed(self):
        ds = _small_dataset()
        with pytest.raises(TrainingDivergenceError):
            train(ds, _small_config(learning_rate_initial=1e9), 3, seed=1)

    def test_negative_epochs_rejected(self):
        ds = _small_dataset()
        with pytest.raises(ValueError):
            train(ds, _small_config(), -1, seed=1)


class TestTuneGamma:
    def test_default_grid(self):
        assert len(DEFAULT_GAMMA_GRID) == 9
        assert DEFAULT_GAMMA_GRID[0] == 0.30
        assert DEFAULT_GAMMA_GRID[-1] == 0.70

    def test_two_point_sweep(self):
        ds = _small_dataset()
        cfg = _small_config(val_crps_max_records=20)
        result = tune_gamma(ds, [0.4, 0.6], config=cfg, epochs=3, seed=2)
        assert [row.gamma for row in result.rows] == [0.4, 0.6]
        assert result.best_gamma in (0.4, 0.6)
        assert all(row.error is None for row in result.rows)

    def test_requires_crps_budget(self):
        ds = _small_dataset()
        with pytest.raises(ValueError, match="val_crps_max_records"):
            tune_gamma(ds, [0.5], config=_small_config(), epochs=1, seed=0)

    def test_grid_validated(self):
        ds = _small_dataset()
        with pytest.raises(ValueError):
            tune_gamma(ds, [], epochs=1, seed=0)
        with pytest.raises(ValueError):
            tune_gamma(ds, [0.0, 0.5], epochs=1, seed=0)
