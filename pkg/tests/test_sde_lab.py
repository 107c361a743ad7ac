"""Tests for path sampling, reference solutions, Euler-Maruyama, and datasets."""

import math

import numpy as np
import pytest

from sdeonet.chaos_basis import encode_components
from sdeonet.sde_lab import (
    CustomSde,
    DyadicPath,
    GaussianLangevin,
    GeometricBrownianMotion,
    IntegrationBlowupError,
    OrnsteinUhlenbeck,
    euler_maruyama,
    exact_solution,
    exact_trajectory,
    load_dataset,
    make_dataset,
    sample_brownian,
    sample_rng,
    save_dataset,
)

OU = OrnsteinUhlenbeck(theta=1.0, mean=1.2, sigma=1.3, x0=0.0, horizon=1.0)
GBM = GeometricBrownianMotion(mu=1.0, sigma=0.3, x0=1.0, horizon=1.0)


class TestBrownianSampling:
    def test_starts_at_zero(self):
        path = sample_brownian(6, 2.0, 3, rng=0)
        np.testing.assert_array_equal(path.values[:, 0], np.zeros(3))

    def test_same_seed_bit_identical(self):
        a = sample_brownian(8, 1.0, 2, rng=42)
        b = sample_brownian(8, 1.0, 2, rng=42)
        np.testing.assert_array_equal(a.values, b.values)

    def test_increment_variance(self):
        level, horizon, n = 3, 2.0, 40000
        rng = np.random.default_rng(17)
        increments = np.concatenate(
            [np.diff(sample_brownian(level, horizon, 1, rng).values[0]) for _ in range(n // 8)]
        )
        target = horizon / 2**level
        se = target * math.sqrt(2.0 / increments.size)
        assert abs(increments.var() - target) < 3 * se

    def test_restrict_keeps_values(self):
        path = sample_brownian(8, 1.0, 1, rng=3)
        coarse = path.restrict(5)
        np.testing.assert_array_equal(coarse.values[0], path.values[0][::8])

    def test_grid_index_rejects_off_grid(self):
        path = sample_brownian(4, 1.0, 1, rng=0)
        assert path.grid_index(0.25) == 4
        with pytest.raises(ValueError):
            path.grid_index(0.3)


class TestSpecValidation:
    def test_ou_needs_positive_rates(self):
        with pytest.raises(ValueError):
            OrnsteinUhlenbeck(theta=-1.0, mean=0.0, sigma=1.0)
        with pytest.raises(ValueError):
            OrnsteinUhlenbeck(theta=1.0, mean=0.0, sigma=0.0)

    def test_langevin_needs_spd_covariance(self):
        with pytest.raises(ValueError):
            GaussianLangevin(
                covariance=np.array([[1.0, 2.0], [2.0, 1.0]]),
                mean=np.zeros(2),
                x0=np.zeros(2),
            )
        with pytest.raises(ValueError):
            GaussianLangevin(
                covariance=np.array([[1.0, 0.5], [0.0, 1.0]]),
                mean=np.zeros(2),
                x0=np.zeros(2),
            )


class TestExactSolutions:
    def test_gbm_zero_path(self):
        values = np.zeros((1, 2**6 + 1))
        path = DyadicPath(horizon=1.0, level=6, values=values)
        for t in (0.25, 0.5, 1.0):
            got = exact_solution(GBM, path, t)
            want = GBM.x0 * math.exp((GBM.mu - 0.5 * GBM.sigma**2) * t)
            assert got == pytest.approx(want, rel=1e-14)

    def test_ou_deterministic_limit(self):
        # vanishing-noise integrator telescopes to the exact ODE solution
        tiny = OrnsteinUhlenbeck(theta=0.7, mean=1.2, sigma=1e-12, x0=2.0, horizon=1.0)
        values = np.zeros((1, 2**12 + 1))
        path = DyadicPath(horizon=1.0, level=12, values=values)
        for t in (0.25, 0.75, 1.0):
            want = tiny.mean + (tiny.x0 - tiny.mean) * math.exp(-tiny.theta * t)
            assert exact_solution(tiny, path, t) == pytest.approx(want, abs=1e-6)

    def test_gbm_mean_statistics(self):
        n = 100000
        rng = np.random.default_rng(11)
        w_t = rng.normal(0.0, 1.0, size=n)
        x = GBM.solution_from_w(1.0, w_t)
        want = GBM.x0 * math.exp(GBM.mu)
        se = x.std(ddof=1) / math.sqrt(n)
        assert abs(x.mean() - want) < 3 * se

    def test_unsupported_variant(self):
        lang = GaussianLangevin(covariance=np.eye(2), mean=np.zeros(2), x0=np.zeros(2))
        path = sample_brownian(4, 1.0, 2, rng=0)
        with pytest.raises(ValueError):
            exact_trajectory(lang, path)

    def test_ou_closed_form_matches_stepping(self):
        path = sample_brownian(8, 1.0, 1, rng=21)
        traj = exact_trajectory(OU, path)[0]
        dt = 1.0 / 2**8
        decay = math.exp(-OU.theta * dt)
        kick = OU.sigma * math.exp(-OU.theta * dt / 2.0)
        state = OU.x0
        increments = np.diff(path.values[0])
        for k, dw in enumerate(increments):
            state = OU.mean + (state - OU.mean) * decay + kick * dw
            assert traj[k + 1] == pytest.approx(state, rel=1e-10, abs=1e-12)


class TestEulerMaruyama:
    def test_zero_coefficients_constant(self):
        spec = CustomSde(
            drift_fn=lambda t, x: np.zeros_like(x),
            diffusion_fn=lambda t, x: np.zeros_like(x),
            x0=np.array([1.5]),
            horizon=1.0,
            dim=1,
        )
        path = sample_brownian(6, 1.0, 1, rng=4)
        traj = euler_maruyama(spec, path)
        np.testing.assert_array_equal(traj, np.full_like(traj, 1.5))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_blowup_diagnostic(self):
        spec = CustomSde(
            drift_fn=lambda t, x: x**3 * 1e6,
            diffusion_fn=lambda t, x: np.zeros_like(x),
            x0=np.array([10.0]),
            horizon=1.0,
            dim=1,
        )
        path = sample_brownian(4, 1.0, 1, rng=5)
        with pytest.raises(IntegrationBlowupError) as err:
            euler_maruyama(spec, path)
        assert err.value.step >= 1

    def test_gbm_strong_order_half(self):
        # strong error at the horizon across coarsened grids of shared fine paths
        from sdeonet.sde_lab import _em_batch

        levels = list(range(6, 13))
        n_paths = 400
        rng = np.random.default_rng(777)
        fine = rng.normal(0.0, math.sqrt(1.0 / 2**12), size=(n_paths, 1, 2**12))
        w_final = fine.sum(axis=2)[:, 0]
        exact = GBM.solution_from_w(1.0, w_final)
        rms = []
        for level in levels:
            coarse = fine.reshape(n_paths, 1, 2**level, -1).sum(axis=3)
            em = _em_batch(GBM, coarse, 1.0)[:, 0, -1]
            rms.append(math.sqrt(np.mean((em - exact) ** 2)))
        slope, _ = np.polyfit(levels, np.log2(rms), 1)
        assert 0.35 <= -slope <= 0.65

    def test_ou_em_close_to_integrator(self):
        gaps = []
        for level in (6, 8, 10):
            path = sample_brownian(12, 1.0, 1, rng=9).restrict(level)
            em = euler_maruyama(OU, path)[0]
            ref = exact_trajectory(OU, path)[0]
            gaps.append(np.abs(em - ref).max())
        # first-order gap shrinks roughly 4x per two levels
        assert gaps[1] < 0.6 * gaps[0]
        assert gaps[2] < 0.6 * gaps[1]

    def test_ou_stationary_statistics(self):
        spec = OrnsteinUhlenbeck(theta=1.0, mean=1.2, sigma=1.3, x0=0.0, horizon=6.0)
        n = 10000
        rng = np.random.default_rng(31)
        dt = spec.horizon / 2**9
        increments = rng.normal(0.0, math.sqrt(dt), size=(n, 2**9))
        from sdeonet.sde_lab import _ou_trajectory_from_increments

        finals = _ou_trajectory_from_increments(spec, increments, spec.horizon)[:, -1]
        se_mean = finals.std(ddof=1) / math.sqrt(n)
        assert abs(finals.mean() - spec.mean) < 3 * se_mean
        target_var = spec.sigma**2 / (2.0 * spec.theta)
        assert abs(finals.var(ddof=1) - target_var) < 0.05 * target_var


class TestDataset:
    def test_empty(self):
        assert make_dataset(OU, 0, 8, 8, seed=0) == []

    def test_pathwise_consistency(self):
        samples = make_dataset(GBM, 50, 8, 8, seed=123)
        for s in samples[:10]:
            rng = sample_rng(123, s.path_id)
            path = sample_brownian(8, GBM.horizon, 1, rng)
            np.testing.assert_array_equal(s.g, encode_components(path, 8))
            want = exact_solution(GBM, path, s.t)
            assert s.x[0] == pytest.approx(want, rel=1e-12)

    def test_gbm_closed_form_relation(self):
        samples = make_dataset(GBM, 30, 8, 8, seed=7)
        for s in samples:
            rng = sample_rng(7, s.path_id)
            path = sample_brownian(8, GBM.horizon, 1, rng)
            w_t = path.values[0][path.grid_index(s.t)]
            want = GBM.x0 * math.exp((GBM.mu - 0.5 * GBM.sigma**2) * s.t + GBM.sigma * w_t)
            assert s.x[0] == pytest.approx(want, rel=1e-12)

    def test_seed_reproducible(self):
        a = make_dataset(OU, 20, 8, 8, seed=5)
        b = make_dataset(OU, 20, 8, 8, seed=5)
        for sa, sb in zip(a, b):
            assert sa.t == sb.t
            np.testing.assert_array_equal(sa.x, sb.x)
            np.testing.assert_array_equal(sa.g, sb.g)

    def test_langevin_em_dataset(self):
        lang = GaussianLangevin(
            covariance=np.eye(2), mean=np.array([1.0, -1.0]), x0=np.zeros(2), horizon=1.0
        )
        samples = make_dataset(lang, 40, 4, 6, seed=9)
        assert len(samples) == 40
        assert samples[0].x.shape == (2,)
        assert samples[0].g.shape == (2, 4)

    def test_round_trip_file(self, tmp_path):
        samples = make_dataset(OU, 25, 8, 8, seed=11)
        path = str(tmp_path / "data.csv")
        save_dataset(samples, path)
        loaded = load_dataset(path)
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert a.path_id == b.path_id and a.t == b.t
            np.testing.assert_array_equal(a.x, b.x)
            np.testing.assert_array_equal(a.g, b.g)

    def test_header_layout(self, tmp_path):
        lang = GaussianLangevin(
            covariance=np.eye(2), mean=np.zeros(2), x0=np.zeros(2), horizon=1.0
        )
        samples = make_dataset(lang, 3, 4, 6, seed=1)
        path = str(tmp_path / "data.csv")
        save_dataset(samples, path)
        header = open(path).readline().strip().split(",")
        assert header == ["path_id", "t", "x_0", "x_1"] + [f"g_{i}" for i in range(8)]
