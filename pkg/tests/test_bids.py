import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as npst

from storagebid.bids import (
    anchored_bid_curve,
    anchored_levels,
    compute_theta_segments,
    form_bids,
    perturb_bids,
)
from storagebid.domain import StorageParams, soc_grid

PAPER = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                      cost_linear=10.0, cost_quadratic=0.0, num_segments=10,
                      initial_soc=0.5)


class TestComputeThetaSegments:
    def test_constant_prices_at_cost_floor(self):
        """Prices never above the marginal cost leave stored energy worthless."""
        theta = compute_theta_segments(np.full(12, 10.0), PAPER, soc_grid(PAPER))
        np.testing.assert_allclose(theta, 0.0, atol=1e-6)

    def test_rising_prices_value_equals_future_price(self):
        params = StorageParams(power_rating=1.0, capacity=1.0, efficiency=1.0,
                               cost_linear=0.0, num_segments=4, initial_soc=0.5)
        theta = compute_theta_segments(np.array([10.0, 90.0]), params, soc_grid(params))
        np.testing.assert_allclose(theta, 90.0, atol=1e-5)

    def test_monotone_nonincreasing_across_levels(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            prices = np.maximum(40 + rng.normal(0, 15, 16), 0.5)
            theta = compute_theta_segments(prices, PAPER, soc_grid(PAPER))
            assert np.all(np.diff(theta) <= 1e-6)

    def test_no_tail_means_no_value(self):
        theta = compute_theta_segments(np.array([500.0]), PAPER, soc_grid(PAPER))
        np.testing.assert_allclose(theta, 0.0)


class TestFormBids:
    def test_zero_theta(self):
        curve = form_bids(np.zeros(10), PAPER)
        np.testing.assert_allclose(curve.discharge_prices, 10.0)
        np.testing.assert_allclose(curve.charge_prices, 0.0)

    def test_literal_evaluation(self):
        curve = form_bids(np.full(10, 18.0), PAPER)
        np.testing.assert_allclose(curve.discharge_prices, 30.0)
        np.testing.assert_allclose(curve.charge_prices, 16.2)

    def test_quantities_sum_to_power_rating(self):
        curve = form_bids(np.zeros(10), PAPER)
        assert curve.seg_quantity * curve.num_segments == pytest.approx(0.5)

    @given(
        theta=npst.arrays(np.float64, 10, elements=st.floats(0, 500)),
        eta=st.floats(0.5, 1.0),
        c1=st.floats(0, 50),
    )
    @settings(max_examples=100)
    def test_no_crossing_per_segment(self, theta, eta, c1):
        params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=eta,
                               cost_linear=c1, num_segments=10, initial_soc=0.5)
        curve = form_bids(theta, params)
        assert np.all(curve.discharge_prices - curve.charge_prices >= -1e-9)

    def test_supply_curve_monotone_when_theta_monotone(self):
        theta = np.array([50.0, 40.0, 30.0, 20.0])
        params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                               cost_linear=10.0, num_segments=4, initial_soc=0.5)
        curve = form_bids(theta, params)
        # cheapest discharge comes from the highest-SoC slice; cumulative
        # supply in merit order is the reversed vector, which must rise
        assert np.all(np.diff(curve.discharge_prices[::-1]) >= 0)


class TestPerturbBids:
    def test_tiny_epsilon_matches_unperturbed(self):
        theta = np.linspace(40, 10, 10)
        Z = np.random.default_rng(0).standard_normal(10)
        base = form_bids(theta, PAPER)
        pert = perturb_bids(theta, 1e-12, Z, PAPER)
        np.testing.assert_allclose(pert.discharge_prices, base.discharge_prices, atol=1e-9)

    def test_seeded_noise_reproducible(self):
        theta = np.linspace(40, 10, 10)
        z1 = np.random.default_rng(42).standard_normal(10)
        z2 = np.random.default_rng(42).standard_normal(10)
        a = perturb_bids(theta, 0.5, z1, PAPER)
        b = perturb_bids(theta, 0.5, z2, PAPER)
        np.testing.assert_array_equal(a.discharge_prices, b.discharge_prices)

    def test_mean_converges_to_unperturbed(self):
        theta = np.linspace(40, 10, 10)
        eps = 1.0
        rng = np.random.default_rng(1)
        draws = 10_000
        acc = np.zeros(10)
        for _ in range(draws):
            acc += perturb_bids(theta, eps, rng.standard_normal(10), PAPER).discharge_prices
        base = form_bids(theta, PAPER).discharge_prices
        sd = eps / PAPER.efficiency
        np.testing.assert_allclose(acc / draws, base, atol=3 * sd / 100)

    def test_rejects_nonpositive_epsilon(self):
        with pytest.raises(ValueError):
            perturb_bids(np.zeros(10), 0.0, np.zeros(10), PAPER)


class TestAnchoredCurve:
    def test_levels_straddle_the_anchor(self):
        down, up = anchored_levels(0.5, PAPER)
        assert np.all(down < 0.5) and np.all(up > 0.5)
        assert np.all(np.diff(down) < 0) and np.all(np.diff(up) > 0)

    def test_curves_monotone_and_non_crossing(self):
        rng = np.random.default_rng(5)
        prices = np.maximum(40 + rng.normal(0, 15, 24), 0.5)
        curve = anchored_bid_curve(prices, 0.5, PAPER)
        assert np.all(np.diff(curve.discharge_prices) >= -1e-7)
        assert np.all(np.diff(curve.charge_prices) <= 1e-7)
        assert curve.discharge_prices.min() >= curve.charge_prices.max() - 1e-7

    def test_empty_tail_prices_at_cost(self):
        curve = anchored_bid_curve(np.array([99.0]), 0.5, PAPER)
        np.testing.assert_allclose(curve.discharge_prices, 10.0)
        np.testing.assert_allclose(curve.charge_prices, 0.0)
