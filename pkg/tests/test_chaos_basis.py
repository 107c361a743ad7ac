"""Exactness tests for the Haar basis, Hermite polynomials, multi-indices,
and the pathwise encoder."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdeonet.chaos_basis import (
    GaussianFeatures,
    HaarIndex,
    MultiIndex,
    chaos_poly_eval,
    chaos_values,
    encode_path,
    encode_values,
    enumerate_multi_indices,
    haar_antiderivative,
    haar_antiderivative_curve,
    haar_eval,
    haar_sq_antiderivative_integral,
    haar_tail_energy,
    hermite_eval,
    reconstruct_path,
)
from sdeonet.sde_lab import sample_brownian


def haar_gram_entry(i: int, j: int, horizon: float, finest_level: int = 8) -> float:
    """Brute-force inner product of two basis functions on the finest dyadic grid.

    Both functions are constant on each finest piece, so midpoint sampling
    integrates exactly.
    """
    n = 1 << finest_level
    width = horizon / n
    mids = (np.arange(n) + 0.5) * width
    vi = np.array([haar_eval(i, t, horizon) for t in mids])
    vj = np.array([haar_eval(j, t, horizon) for t in mids])
    return float(np.sum(vi * vj) * width)


class TestHaarEval:
    def test_constant_slot(self):
        assert haar_eval(0, 0.3, 1.0) == 1.0
        assert haar_eval(0, 0.5, 4.0) == 0.5

    def test_level_one_signs(self):
        assert haar_eval(1, 0.25, 1.0) == 1.0
        assert haar_eval(1, 0.75, 1.0) == -1.0

    def test_level_two_amplitude(self):
        assert haar_eval(2, 0.1, 1.0) == pytest.approx(math.sqrt(2.0), abs=1e-15)

    def test_left_limit_at_interior_breakpoint(self):
        # the midpoint of the level-one wavelet keeps the left piece's value
        assert haar_eval(1, 0.5, 1.0) == 1.0
        # the right endpoint of the domain belongs to the closed last piece
        assert haar_eval(1, 1.0, 1.0) == -1.0

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            haar_eval(1, -0.1, 1.0)
        with pytest.raises(ValueError):
            haar_eval(1, 1.1, 1.0)

    def test_orthonormality_first_64(self):
        horizon = 1.0
        for i in range(64):
            for j in range(i, 64):
                expected = 1.0 if i == j else 0.0
                assert abs(haar_gram_entry(i, j, horizon) - expected) < 1e-12

    def test_index_round_trip(self):
        for i in range(1, 257):
            idx = HaarIndex(i)
            assert HaarIndex.from_level_position(idx.level, idx.position).i == i


class TestHaarAntiderivative:
    def test_constant_slot(self):
        assert haar_antiderivative(0, 1.0, 1.0) == 1.0

    def test_peak_value_and_energy(self):
        assert haar_antiderivative(1, 0.5, 1.0) == 0.5
        # peak squared value is horizon * 2^-(level + 1)
        for i in (1, 2, 5, 11):
            level = HaarIndex(i).level
            peak = max(
                haar_antiderivative(i, t, 1.0) ** 2 for t in np.linspace(0, 1, 4097)
            )
            assert peak == pytest.approx(2.0 ** -(level + 1), rel=1e-12)

    def test_wavelet_integrates_to_zero(self):
        assert haar_antiderivative(1, 1.0, 1.0) == 0.0

    def test_curve_matches_scalar(self):
        times = np.linspace(0.0, 2.0, 101)
        for i in (0, 1, 3, 6, 12):
            curve = haar_antiderivative_curve(i, times, 2.0)
            scalars = [haar_antiderivative(i, t, 2.0) for t in times]
            np.testing.assert_allclose(curve, scalars, atol=1e-15)

    def test_sq_integral_matches_quadrature(self):
        # trapezoid on a fine grid approximates the exact piecewise value
        times = np.linspace(0.0, 1.0, 2**14 + 1)
        for i in (0, 1, 2, 7):
            e_sq = haar_antiderivative_curve(i, times, 1.0) ** 2
            for t_idx in (2**12, 2**13, 2**14):
                approx = np.trapezoid(e_sq[: t_idx + 1], times[: t_idx + 1])
                exact = haar_sq_antiderivative_integral(i, times[t_idx], 1.0)
                assert abs(approx - exact) < 1e-8


class TestHaarTailEnergy:
    @staticmethod
    def brute_force(n, t, horizon, cap):
        total = 0.0
        for level in range(n + 1, cap + 1):
            for pos in range(1, 2 ** (level - 1) + 1):
                slot = 2 ** (level - 1) + pos - 1
                total += haar_antiderivative(slot, t, horizon) ** 2
                total += haar_sq_antiderivative_integral(slot, t, horizon)
        return total

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for horizon in (0.5, 1.0, 2.0):
            for n in (1, 2, 3):
                for t in rng.uniform(0.0, horizon, 5):
                    fast = haar_tail_energy(n, float(t), horizon, 8)
                    slow = self.brute_force(n, float(t), horizon, 8)
                    assert fast == pytest.approx(slow, rel=1e-12, abs=1e-15)

    def test_zero_at_time_zero(self):
        for n in (1, 4):
            assert haar_tail_energy(n, 0.0, 1.0, 12) == 0.0

    def test_bound_all_levels_and_horizons(self):
        for horizon in (0.5, 1.0, 2.0):
            grid = np.linspace(0.0, horizon, 33)
            for n in range(1, 9):
                for t in grid:
                    value = haar_tail_energy(n, float(t), horizon, 16)
                    bound = 2.0 * horizon * (1.0 + t) * 2.0 ** (-n)
                    assert value <= bound

    def test_monotone_in_cap(self):
        values = [haar_tail_energy(2, 0.7, 1.0, cap) for cap in range(3, 12)]
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestHermite:
    def test_degree_zero_is_one(self):
        for x in (-3.0, 0.0, 7.5):
            assert hermite_eval(0, x) == 1.0

    def test_degree_two_values(self):
        assert hermite_eval(2, 2.0) == pytest.approx(3.0 / math.sqrt(2.0), rel=1e-14)
        assert hermite_eval(2, 1.0) == 0.0

    def test_orthonormal_under_gaussian(self):
        # 64-node Gauss-Hermite rule is exact for polynomial integrands of
        # degree <= 127, so degrees up to 10 are covered with margin
        nodes, weights = np.polynomial.hermite_e.hermegauss(64)
        weights = weights / np.sqrt(2.0 * np.pi)
        for a in range(11):
            ha = hermite_eval(a, nodes)
            for b in range(a, 11):
                hb = hermite_eval(b, nodes)
                integral = float(np.sum(weights * ha * hb))
                expected = 1.0 if a == b else 0.0
                assert abs(integral - expected) < 1e-8

    def test_high_degree_is_finite(self):
        assert math.isfinite(hermite_eval(50, 1.7))


class TestMultiIndices:
    def test_graded_lex_small_case(self):
        got = [idx.alpha for idx in enumerate_multi_indices(2, 2)]
        assert got == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]

    def test_degree_zero(self):
        assert [idx.alpha for idx in enumerate_multi_indices(0, 3)] == [(0, 0, 0)]

    def test_degree_one_three_slots(self):
        assert len(enumerate_multi_indices(1, 3)) == 4

    @settings(max_examples=50, deadline=None)
    @given(p=st.integers(0, 5), k=st.integers(1, 6))
    def test_cardinality_and_uniqueness(self, p, k):
        indices = enumerate_multi_indices(p, k)
        assert len(indices) == math.comb(p + k, k)
        assert len({idx.alpha for idx in indices}) == len(indices)
        assert indices[0].is_zero
        degrees = [idx.degree for idx in indices]
        assert degrees == sorted(degrees)

    def test_support_and_lowering(self):
        idx = MultiIndex((0, 2, 1))
        assert idx.degree == 3
        assert idx.support_size == 2
        assert idx.lowered(1).alpha == (0, 1, 1)
        with pytest.raises(ValueError):
            idx.lowered(0)

    def test_label_round_trip(self):
        idx = MultiIndex((0, 2, 1))
        assert MultiIndex.from_label(idx.label()) == idx

    def test_negative_entries_rejected(self):
        with pytest.raises(ValueError):
            MultiIndex((1, -1))


class TestChaosPolyEval:
    def test_zero_index_is_one(self):
        feats = GaussianFeatures(g=np.array([0.3, -1.2]), horizon=1.0)
        assert chaos_poly_eval(MultiIndex((0, 0)), feats) == 1.0

    def test_degree_one_product(self):
        feats = GaussianFeatures(g=np.array([0.7, -0.4]), horizon=1.0)
        assert chaos_poly_eval(MultiIndex((1, 1)), feats) == pytest.approx(-0.28)

    def test_hermite_root_kills_product(self):
        feats = GaussianFeatures(g=np.array([1.0, 5.0]), horizon=1.0)
        assert chaos_poly_eval(MultiIndex((2, 0)), feats) == 0.0

    def test_length_mismatch(self):
        feats = GaussianFeatures(g=np.array([1.0]), horizon=1.0)
        with pytest.raises(ValueError):
            chaos_poly_eval(MultiIndex((1, 1)), feats)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(5)
        g = rng.normal(size=(20, 4))
        indices = enumerate_multi_indices(3, 4)
        batch = chaos_values(indices, g)
        for row in range(5):
            feats = GaussianFeatures(g=g[row], horizon=1.0)
            scalars = [chaos_poly_eval(a, feats) for a in indices]
            np.testing.assert_allclose(batch[row], scalars, rtol=1e-12, atol=1e-12)


class TestEncoder:
    def test_linear_path(self):
        values = np.linspace(0.0, 1.0, 17)
        np.testing.assert_allclose(encode_values(values, 1.0, 2), [1.0, 0.0], atol=1e-15)

    def test_zero_path(self):
        np.testing.assert_allclose(encode_values(np.zeros(17), 1.0, 8), np.zeros(8))

    def test_insufficient_resolution(self):
        with pytest.raises(ValueError):
            encode_values(np.zeros(5), 1.0, 8)

    def test_power_of_two_required(self):
        with pytest.raises(ValueError):
            encode_values(np.zeros(17), 1.0, 6)

    def test_standard_normal_features(self):
        # moment check at modest scale; the full-size version lives in the
        # acceptance suite
        rng = np.random.default_rng(123)
        n, level, m = 20000, 5, 8
        increments = rng.normal(0.0, math.sqrt(1.0 / 2**level), size=(n, 2**level))
        values = np.concatenate([np.zeros((n, 1)), np.cumsum(increments, axis=1)], axis=1)
        g = encode_values(values, 1.0, m)
        se_mean = 1.0 / math.sqrt(n)
        assert np.abs(g.mean(axis=0)).max() < 4 * se_mean
        assert np.abs(g.var(axis=0) - 1.0).max() < 4 * math.sqrt(2.0 / n)
        corr = np.corrcoef(g.T)
        off = corr[~np.eye(m, dtype=bool)]
        assert np.abs(off).max() < 4 * se_mean


class TestReconstruction:
    def test_hand_example(self):
        feats = GaussianFeatures(g=np.array([-0.2, 1.2]), horizon=1.0)
        assert reconstruct_path(feats, 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_zero_features(self):
        feats = GaussianFeatures(g=np.zeros(4), horizon=1.0)
        for t in np.linspace(0.0, 1.0, 9):
            assert reconstruct_path(feats, float(t)) == 0.0

    def test_dyadic_exactness(self):
        for seed in range(5):
            path = sample_brownian(7, 1.0, 1, rng=seed)
            m = 16
            feats = encode_path(path, m)
            level = m.bit_length() - 1
            stride = 1 << (7 - level)
            for k in range(m + 1):
                t = k / m
                recon = reconstruct_path(feats, t)
                assert abs(recon - path.values[0][k * stride]) < 1e-12
