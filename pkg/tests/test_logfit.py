"""Logistic baseline tests: planted recovery, Jacobian oracle, fit invariants."""

import math

import numpy as np
import pytest

from trajcast import logfit
from trajcast.datapipe import Trajectory, ValidationError
from trajcast.logfit import LogisticParams, fit_logistic, lm_refine, logistic_predict


def planted_curve(n=50, a=0.55, k=-4.0, l0=3.0, b=0.25, lo=1.8, hi=4.2):
    x = np.linspace(lo, hi, n)
    y = logistic_predict(LogisticParams(a, k, l0, b), x)
    return x, y, LogisticParams(a, k, l0, b)


class TestPredict:
    def test_midpoint(self):
        p = LogisticParams(a=0.6, k=2.0, l0=3.0, b=0.2)
        assert abs(logistic_predict(p, 3.0) - (0.3 + 0.2)) < 1e-15

    def test_asymptotes(self):
        p = LogisticParams(a=0.6, k=2.0, l0=3.0, b=0.2)
        assert abs(logistic_predict(p, 400.0) - 0.8) < 1e-12
        assert abs(logistic_predict(p, -400.0) - 0.2) < 1e-12

    def test_worked_value(self):
        # oracle: direct evaluation, b + a / (1 + exp(-k (x - l0)))
        p = LogisticParams(a=0.5, k=2.0, l0=3.0, b=0.25)
        expected = 0.25 + 0.5 / (1.0 + math.exp(-1.0))
        got = logistic_predict(p, 3.5)
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.6155293) < 1e-7

    def test_no_overflow_at_extreme_arguments(self):
        p = LogisticParams(a=1.0, k=100.0, l0=0.0, b=0.0)
        with np.errstate(over="raise"):
            assert logistic_predict(p, 7.0) == 1.0
            assert logistic_predict(p, -7.0) == pytest.approx(0.0, abs=1e-300)

    def test_monotone_for_fixed_params(self):
        p = LogisticParams(a=0.7, k=-3.0, l0=2.5, b=0.2)
        xs = np.linspace(0, 5, 50)
        ys = logistic_predict(p, xs)
        assert np.all(np.diff(ys) <= 1e-15)  # k < 0: decreasing in loss


class TestJacobian:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        theta = np.array(
            [rng.uniform(0.2, 1.0), rng.uniform(-5, 5), rng.uniform(1, 4),
             rng.uniform(0, 0.4)]
        )
        x = rng.uniform(0.5, 5.0, size=12)
        jac = logfit.logistic_jacobian(theta, x)
        h = 1e-6
        for j in range(4):
            up, down = theta.copy(), theta.copy()
            up[j] += h
            down[j] -= h
            fd = (
                logistic_predict(LogisticParams(*up), x)
                - logistic_predict(LogisticParams(*down), x)
            ) / (2 * h)
            scale = max(1.0, np.abs(fd).max())
            assert np.abs(jac[:, j] - fd).max() / scale <= 1e-6


class TestLMRefine:
    def test_sse_trace_never_increases(self):
        x, y, _ = planted_curve()
        rng = np.random.default_rng(0)
        yn = y + rng.normal(0, 0.02, y.size)
        res = lm_refine(x, yn, np.array([0.5, 1.0, 3.0, 0.0]))
        trace = np.array(res.sse_trace)
        assert np.all(np.diff(trace) <= 0)

    def test_terminates_by_gradient_or_cap(self):
        x, y, _ = planted_curve()
        res = lm_refine(x, y, np.array([0.5, -2.0, 3.0, 0.2]))
        assert res.iterations <= 200
        assert res.grad_norm <= 1e-8 or res.iterations == 200 or res.converged


class TestFit:
    def test_noiseless_planted_recovery(self):
        x, y, truth = planted_curve()
        fit = fit_logistic(zip(x, y))
        grid = np.linspace(x.min(), x.max(), 200)
        err = np.abs(
            logistic_predict(fit, grid) - logistic_predict(truth, grid)
        ).max()
        assert err <= 1e-6

    def test_noisy_recovery_within_tolerance(self):
        x, y, truth = planted_curve()
        rng = np.random.default_rng(7)
        fit = fit_logistic(zip(x, y + rng.normal(0, 0.01, y.size)))
        grid = np.linspace(x.min(), x.max(), 200)
        mae = np.abs(
            logistic_predict(fit, grid) - logistic_predict(truth, grid)
        ).mean()
        assert mae <= 0.015

    def test_constant_data_degenerates_cleanly(self):
        x = np.linspace(1, 4, 20)
        y = np.full(20, 0.42)
        fit = fit_logistic(zip(x, y))
        preds = logistic_predict(fit, x)
        assert np.abs(preds - 0.42).max() <= 1e-8

    def test_shuffle_invariance_is_exact(self):
        x, y, _ = planted_curve(n=40)
        rng = np.random.default_rng(3)
        yn = y + rng.normal(0, 0.01, y.size)
        pairs = list(zip(x, yn))
        fit_a = fit_logistic(pairs)
        shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
        fit_b = fit_logistic(shuffled)
        assert fit_a.theta().tolist() == fit_b.theta().tolist()

    def test_predictions_bounded_on_training_domain(self):
        x, y, _ = planted_curve()
        fit = fit_logistic(zip(x, y))
        grid = np.linspace(x.min(), x.max(), 100)
        preds = logistic_predict(fit, grid)
        assert np.all(preds >= -0.05) and np.all(preds <= 1.05)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValidationError):
            fit_logistic([(1.0, 0.5)] * 4)

    def test_chance_level_start_allows_offset_fit(self):
        x, y, truth = planted_curve(b=0.3)
        fit = fit_logistic(zip(x, y), chance_level=0.3)
        grid = np.linspace(x.min(), x.max(), 50)
        err = np.abs(logistic_predict(fit, grid) - logistic_predict(truth, grid)).max()
        assert err <= 1e-6


class TestEvaluate:
    def _traj(self, n=6):
        return Trajectory(
            run_id="r", task_id="t", accuracies=np.linspace(0.2, 0.7, n)
        )

    def test_empty_heldout_gives_empty(self):
        traj = self._traj(4)
        out = logfit.evaluate_logistic(
            traj, LogisticParams(0.5, -2, 3, 0.2), [], n_context=4
        )
        assert out.size == 0

    def test_predictions_clamped(self):
        traj = self._traj(4)
        params = LogisticParams(5.0, -2.0, 3.0, 0.2)  # can exceed 1
        out = logfit.evaluate_logistic(traj, params, [0.1, 0.2], n_context=2)
        assert np.all(out >= 0) and np.all(out <= 1)

    def test_monotone_in_loss(self):
        traj = self._traj(8)
        params = LogisticParams(0.6, -3.0, 2.0, 0.2)
        losses = np.linspace(3.0, 1.0, 6)  # improving loss
        out = logfit.evaluate_logistic(traj, params, losses, n_context=2)
        assert np.all(np.diff(out) >= -1e-12)

    def test_length_mismatch_rejected(self):
        traj = self._traj(6)
        with pytest.raises(ValidationError, match="oracle"):
            logfit.evaluate_logistic(
                traj, LogisticParams(0.5, -2, 3, 0.2), [1.0], n_context=2
            )


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        fits = {
            "task-a": LogisticParams(0.5, -2.0, 3.0, 0.25, sse=0.01, n_points=40),
            "task-b": LogisticParams(0.7, 1.0, 2.0, 0.1, sse=0.02, n_points=12),
        }
        path = tmp_path / "fits.json"
        logfit.write_params(path, fits)
        back = logfit.read_params(path)
        assert set(back) == {"task-a", "task-b"}
        assert back["task-a"].theta().tolist() == fits["task-a"].theta().tolist()
        assert back["task-b"].n_points == 12

    def test_single_object_accepted(self, tmp_path):
        path = tmp_path / "one.json"
        path.write_text(
            '{"task_id": "t", "a": 0.5, "k": -2.0, "L0": 3.0, "b": 0.2}',
            encoding="utf-8",
        )
        back = logfit.read_params(path)
        assert back["t"].k == -2.0
