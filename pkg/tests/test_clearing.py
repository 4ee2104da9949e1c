import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storagebid.clearing import clear_price_maker, clear_price_taker, settle_profit
from storagebid.domain import BidCurve, SensitivityModel, StorageParams, ValidationError

PAPER = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                      cost_linear=10.0, cost_quadratic=0.0, num_segments=10,
                      initial_soc=0.5)


def make_bid(S, D, params):
    S = np.asarray(S, dtype=float)
    n = S.size
    return BidCurve(
        discharge_prices=S,
        charge_prices=np.asarray(D, dtype=float),
        seg_quantity=params.power_rating / n,
        soc_levels=np.linspace(0.1, 0.9, n),
    )


def enumerate_lp(S, D, qty, price, e_prev, params):
    """Exact LP optimum by vertex enumeration: every variable at a bound,
    except at most one fractional variable pinned by an active SoC window."""
    eta = params.efficiency
    n = len(S)
    lo, hi = -e_prev, params.capacity - e_prev
    margins = np.concatenate([price - np.asarray(S), np.asarray(D) - price])
    vcoef = np.concatenate([np.full(n, -1 / eta), np.full(n, eta)])
    best = 0.0
    for pattern in itertools.product([0.0, 1.0], repeat=2 * n):
        x = np.array(pattern) * qty
        v = float(vcoef @ x)
        if lo - 1e-12 <= v <= hi + 1e-12:
            best = max(best, float(margins @ x))
        for f in range(2 * n):
            if pattern[f] != 0.0:
                continue
            others = x.copy()
            others[f] = 0.0
            v0 = float(vcoef @ others)
            for bound in (lo, hi):
                xf = (bound - v0) / vcoef[f]
                if -1e-12 <= xf <= qty + 1e-12:
                    xx = others.copy()
                    xx[f] = min(max(xf, 0.0), qty)
                    v = float(vcoef @ xx)
                    if lo - 1e-9 <= v <= hi + 1e-9:
                        best = max(best, float(margins @ xx))
    return best


def objective_of(res, S, D):
    return res.realized_price * (res.p_total - res.b_total) - float(
        np.asarray(S) @ res.p_seg - np.asarray(D) @ res.b_seg
    )


class TestClearPriceTaker:
    def test_cheap_price_charges_to_window(self):
        S = np.full(10, 60.0)
        D = np.full(10, 30.0)
        bid = make_bid(S, D, PAPER)
        res = clear_price_taker(bid, 5.0, 0.0, PAPER)
        assert res.b_total == pytest.approx(min(0.5, 1.0 / 0.9), abs=1e-9)
        assert res.p_total == 0.0

    def test_dead_zone_no_dispatch(self):
        bid = make_bid(np.full(10, 60.0), np.full(10, 30.0), PAPER)
        res = clear_price_taker(bid, 45.0, 0.5, PAPER)
        assert res.p_total == 0.0 and res.b_total == 0.0

    def test_two_segment_example(self):
        params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                               cost_linear=10.0, num_segments=2, initial_soc=0.5)
        bid = make_bid([30.0, 40.0], [16.2, 10.0], params)
        res = clear_price_taker(bid, 35.0, 0.9, params)
        np.testing.assert_allclose(res.p_seg, [0.25, 0.0], atol=1e-9)
        assert res.b_total == 0.0

    def test_exact_tie_stays_idle(self):
        bid = make_bid(np.full(10, 35.0), np.full(10, 20.0), PAPER)
        res = clear_price_taker(bid, 35.0, 0.5, PAPER)
        assert res.p_total == 0.0 and res.b_total == 0.0

    @given(
        n=st.integers(1, 3),
        price=st.floats(0, 90),
        e_prev=st.floats(0, 1),
        seed=st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=150, deadline=None)
    def test_matches_lp_enumeration(self, n, price, e_prev, seed):
        rng = np.random.default_rng(seed)
        S = rng.uniform(0, 80, n)
        D = rng.uniform(0, 80, n)
        params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                               cost_linear=10.0, num_segments=n, initial_soc=0.5)
        bid = make_bid(S, D, params)
        res = clear_price_taker(bid, price, e_prev, params)
        got = objective_of(res, S, D)
        want = enumerate_lp(S, D, bid.seg_quantity, price, e_prev, params)
        assert got == pytest.approx(want, abs=1e-6)

    @staticmethod
    def value_anchored_bid(e_prev, params, rng):
        """Curve assembled from a random concave stored-energy value: a
        non-increasing marginal value evaluated at the anchored slices. This
        is the shape every curve the policy submits has."""
        from storagebid.bids import anchored_levels, bids_from_anchored

        knots = np.sort(rng.uniform(0, params.capacity, 3))
        vals = np.sort(rng.uniform(0, 80, 4))[::-1]

        def marginal(e):
            return vals[np.searchsorted(knots, e)]

        down, up = anchored_levels(e_prev, params)
        theta_s = np.array([marginal(e) for e in down])
        theta_d = np.array([marginal(e) for e in up])
        return bids_from_anchored(theta_s, theta_d, e_prev, params)

    @given(e_prev=st.floats(0, 1), seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_price(self, e_prev, seed):
        rng = np.random.default_rng(seed)
        params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                               cost_linear=10.0, num_segments=5, initial_soc=0.5)
        bid = self.value_anchored_bid(e_prev, params, rng)
        prev_p, prev_b = None, None
        for price in np.linspace(0, 80, 17):
            res = clear_price_taker(bid, price, e_prev, params)
            if prev_p is not None:
                assert res.p_total >= prev_p - 1e-9
                assert res.b_total <= prev_b + 1e-9
            prev_p, prev_b = res.p_total, res.b_total

    @given(
        price=st.floats(0, 100),
        e_prev=st.floats(0, 1),
        seed=st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=100, deadline=None)
    def test_never_violates_soc_window(self, price, e_prev, seed):
        rng = np.random.default_rng(seed)
        S = rng.uniform(0, 80, 4)
        D = rng.uniform(0, 80, 4)
        params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                               cost_linear=10.0, num_segments=4, initial_soc=0.5)
        res = clear_price_taker(make_bid(S, D, params), price, e_prev, params)
        assert -1e-9 <= res.soc_after <= params.capacity + 1e-9

    @given(
        price=st.floats(0, 100),
        e_prev=st.floats(0, 1),
        seed=st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=100, deadline=None)
    def test_no_simultaneous_dispatch_for_value_curves(self, price, e_prev, seed):
        """Curves priced off one non-increasing marginal value never make the
        exact clearing charge and discharge in the same interval."""
        rng = np.random.default_rng(seed)
        params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                               cost_linear=10.0, num_segments=5, initial_soc=0.5)
        bid = self.value_anchored_bid(e_prev, params, rng)
        res = clear_price_taker(bid, price, e_prev, params)
        assert res.p_total * res.b_total == pytest.approx(0.0, abs=1e-12)


class TestClearPriceMaker:
    def test_alpha_to_zero_matches_price_taker(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            S = np.sort(rng.uniform(20, 60, 3))
            D = -np.sort(-rng.uniform(0, 19, 3))
            price = rng.uniform(5, 70)
            e_prev = rng.uniform(0, 1)
            params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                                   cost_linear=10.0, num_segments=3, initial_soc=0.5)
            bid = make_bid(S, D, params)
            taker = clear_price_taker(bid, price, e_prev, params)
            maker = clear_price_maker(
                bid, price, SensitivityModel("linear", 1e-10), e_prev, params
            )
            assert abs(taker.p_total - maker.p_total) <= 1e-6
            assert abs(taker.b_total - maker.b_total) <= 1e-6

    def test_single_segment_linear_stationarity(self):
        params = StorageParams(power_rating=1.0, capacity=2.0, efficiency=1.0,
                               cost_linear=0.0, num_segments=1, initial_soc=2.0)
        bid = make_bid([0.0], [0.0], params)
        res = clear_price_maker(bid, 100.0, SensitivityModel("linear", 10.0), 2.0, params)
        assert res.p_total - res.b_total == pytest.approx(1.0, abs=1e-6)
        assert res.realized_price == pytest.approx(90.0, abs=1e-4)

    def test_single_segment_cubic_stationarity(self):
        params = StorageParams(power_rating=1.0, capacity=2.0, efficiency=1.0,
                               cost_linear=0.0, num_segments=1, initial_soc=2.0)
        bid = make_bid([0.0], [0.0], params)
        res = clear_price_maker(bid, 100.0, SensitivityModel("cubic", 100.0), 2.0, params)
        assert res.p_total - res.b_total == pytest.approx((100.0 / 400.0) ** (1 / 3), abs=1e-5)

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_grid_search(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        S = rng.uniform(0, 80, n)
        D = rng.uniform(0, 80, n)
        price = rng.uniform(0, 90)
        e_prev = rng.uniform(0, 1)
        kind, alpha = ("linear", 10.0) if seed % 2 == 0 else ("cubic", 100.0)
        params = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                               cost_linear=10.0, num_segments=n, initial_soc=0.5)
        bid = make_bid(S, D, params)
        sens = SensitivityModel(kind, alpha)
        res = clear_price_maker(bid, price, sens, e_prev, params)
        got = objective_of(res, S, D)

        eta = params.efficiency
        caps = n * bid.seg_quantity
        lo, hi = -e_prev, params.capacity - e_prev
        s_sorted = np.sort(S)
        d_sorted = -np.sort(-np.asarray(D, dtype=float))
        cumq = np.arange(n + 1) * bid.seg_quantity
        s_cost = np.concatenate([[0], np.cumsum(s_sorted * bid.seg_quantity)])
        d_gain = np.concatenate([[0], np.cumsum(d_sorted * bid.seg_quantity)])
        coef = eta - 1 / eta
        best = -np.inf
        y_max = min(caps, e_prev * eta)
        y_min = -min(caps, (params.capacity - e_prev) / eta)
        for y in np.arange(y_min, y_max + 1e-12, 1e-4):
            b_lo, b_hi = max(0.0, -y), min(caps, caps - y)
            if coef < 0:
                b_lo = max(b_lo, (hi + y / eta) / coef)
                b_hi = min(b_hi, (lo + y / eta) / coef)
            if b_lo > b_hi + 1e-12:
                continue
            cands = np.clip(np.concatenate([[b_lo, b_hi], cumq, cumq - y]), b_lo, b_hi)
            w = (-np.interp(cands + y, cumq, s_cost) + np.interp(cands, cumq, d_gain)).max()
            best = max(best, (price - sens.f(y)) * y + w)
        assert got >= best - 1e-3


class TestSettleProfit:
    def test_zero_dispatch(self):
        zeros = [
            clear_price_taker(
                make_bid(np.full(10, 60.0), np.full(10, 1.0), PAPER), 30.0, 0.5, PAPER
            )
        ]
        assert settle_profit(zeros, PAPER) == 0.0

    def test_replay_of_hindsight_dispatch(self):
        """Anchored bids from the true opportunity duals reproduce the
        hindsight dispatch, so the settled profit equals its objective."""
        from storagebid.bids import anchored_bid_curve

        params = StorageParams(power_rating=1.0, capacity=1.0, efficiency=0.9,
                               cost_linear=0.0, num_segments=10, initial_soc=0.0)
        prices = np.array([10.0, 50.0])
        results = []
        soc = 0.0
        for t in range(2):
            curve = anchored_bid_curve(prices[t:], soc, params)
            res = clear_price_taker(curve, prices[t], soc, params)
            results.append(res)
            soc = res.soc_after
        assert settle_profit(results, params) == pytest.approx(30.5, abs=1e-6)

    def test_price_maker_single_interval(self):
        params = StorageParams(power_rating=1.0, capacity=2.0, efficiency=1.0,
                               cost_linear=10.0, num_segments=1, initial_soc=2.0)
        bid = make_bid([10.0], [0.0], params)
        res = clear_price_maker(bid, 100.0, SensitivityModel("linear", 10.0), 2.0, params)
        # stationarity: 100 - 10 - 2*10*y = 0 caps at y = R = 1
        assert res.p_total == pytest.approx(1.0, abs=1e-6)
        assert settle_profit([res], params) == pytest.approx(80.0, abs=1e-4)

    def test_broken_chain_raises(self):
        bid = make_bid(np.full(10, 20.0), np.full(10, 1.0), PAPER)
        r1 = clear_price_taker(bid, 50.0, 0.5, PAPER)
        r2 = clear_price_taker(bid, 50.0, 0.5, PAPER)  # e_prev should be r1.soc_after
        if abs(r1.soc_after - 0.5) > 1e-6:
            with pytest.raises(ValidationError):
                settle_profit([r1, r2], PAPER)
