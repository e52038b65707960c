import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pstrat.errors import DegenerateMargin, DeltaUnderflow, InvalidTheta, ThetaOne
from pstrat.strata import (MarginPair, SensitivitySpec, cell_partials,
                           cell_probs, compute_delta, d_e11_dp)


def spec_const(t):
    return SensitivitySpec.constant(t)


class TestComputeDelta:
    def test_hand_evaluated_example(self):
        # [1 + (2-1)(0.4+0.6)]^2 - 4*2*(2-1)*0.4*0.6 = 4 - 1.92
        assert compute_delta(MarginPair(0.4, 0.6), 2.0) == pytest.approx(2.08, abs=1e-12)

    def test_exhaustive_root_search_agrees(self):
        # independent oracle: the e11 root of the odds-ratio equation on a grid
        p0, p1, theta = 0.4, 0.6, 2.0
        grid = np.linspace(1e-9, min(p0, p1) - 1e-9, 2_000_001)
        orr = grid * (1 - p0 - p1 + grid) / ((p0 - grid) * (p1 - grid))
        e11 = grid[np.argmin(np.abs(orr - theta))]
        b = 1 + (theta - 1) * (p0 + p1)
        delta_from_root = (b - 2 * (theta - 1) * e11) ** 2
        assert compute_delta(MarginPair(p0, p1), theta) == pytest.approx(
            delta_from_root, abs=1e-5)

    def test_theta_to_zero_collapses_to_square(self):
        d = compute_delta(MarginPair(0.7, 0.8), 1e-12)
        assert d == pytest.approx((1 - 0.7 - 0.8) ** 2, abs=1e-9)

    def test_theta_near_one_tends_to_one(self):
        d = compute_delta(MarginPair(0.5, 0.5), 1.0 + 1e-9)
        assert d == pytest.approx(1.0, abs=1e-8)

    def test_theta_one_rejected(self):
        with pytest.raises(ThetaOne):
            compute_delta(MarginPair(0.4, 0.6), 1.0)

    def test_degenerate_margin_rejected(self):
        with pytest.raises(DegenerateMargin):
            MarginPair(0.0, 0.6)
        with pytest.raises(DegenerateMargin):
            MarginPair(0.4, 1.0)

    def test_boundary_mode_accepts_endpoints(self):
        m = MarginPair(0.0, 0.6, allow_boundary=True)
        assert cell_probs(m, spec_const(2.0)).e11 == pytest.approx(0.0, abs=1e-15)


class TestCellProbs:
    def test_quadratic_example(self):
        pr = cell_probs(MarginPair(0.4, 0.6), spec_const(2.0))
        assert pr.e11 == pytest.approx(0.278890, abs=5e-7)
        assert pr.e01 == pytest.approx(0.321110, abs=5e-7)
        assert pr.e10 == pytest.approx(0.121110, abs=5e-7)
        assert pr.e00 == pytest.approx(0.278890, abs=5e-7)
        orr = pr.e11 * pr.e00 / (pr.e10 * pr.e01)
        assert orr == pytest.approx(2.0, rel=1e-10)

    def test_independence_is_product(self):
        pr = cell_probs(MarginPair(0.4, 0.6), SensitivitySpec.independence())
        assert pr.e11 == pytest.approx(0.24, abs=1e-15)

    def test_monotone_limit_is_lower_margin(self):
        pr = cell_probs(MarginPair(0.4, 0.6), SensitivitySpec.monotone())
        assert pr.e11 == pytest.approx(0.40, abs=1e-15)
        assert pr.e10 == pytest.approx(0.0, abs=1e-15)

    def test_theta_to_zero_limit(self):
        pr = cell_probs(MarginPair(0.7, 0.8), spec_const(1e-12))
        assert pr.e11 == pytest.approx(0.5, abs=1e-9)
        assert pr.e11 * pr.e00 == pytest.approx(0.0, abs=1e-12)

    def test_monotone_requires_flag(self):
        with pytest.raises(InvalidTheta):
            SensitivitySpec(mode="monotone")

    def test_invalid_theta(self):
        with pytest.raises(InvalidTheta):
            spec_const(-1.0)
        with pytest.raises(InvalidTheta):
            spec_const(0.0)
        with pytest.raises(InvalidTheta):
            SensitivitySpec.per_unit([1.0, np.inf])

    def test_margin_free_range_never_errors(self):
        rng = np.random.default_rng(7)
        m = MarginPair(rng.uniform(0.01, 0.99, 500), rng.uniform(0.01, 0.99, 500))
        for theta in (1e-8, 1e-4, 0.1, 0.999, 1.0, 1.001, 10.0, 1e4, 1e8, np.inf):
            pr = cell_probs(m, spec_const(theta))
            pr.validate(m, theta=np.full(500, theta))

    def test_removable_discontinuity(self):
        rng = np.random.default_rng(8)
        p0 = rng.uniform(0.05, 0.95, 200)
        p1 = rng.uniform(0.05, 0.95, 200)
        m = MarginPair(p0, p1)
        for t in (1 - 1e-6, 1 + 1e-6):
            e = cell_probs(m, spec_const(t)).e11
            assert np.max(np.abs(e - p0 * p1)) < 1e-5

    def test_monotone_increasing_in_theta(self):
        rng = np.random.default_rng(9)
        thetas = np.exp(np.linspace(np.log(1e-6), np.log(1e6), 100))
        for _ in range(20):
            p0, p1 = rng.uniform(0.05, 0.95, 2)
            m = MarginPair(np.full(100, p0), np.full(100, p1))
            e = cell_probs(m, SensitivitySpec.per_unit(thetas)).e11
            assert np.all(np.diff(e) > 0)

    def test_per_unit_length_checked(self):
        m = MarginPair(np.array([0.4, 0.5]), np.array([0.6, 0.5]))
        with pytest.raises(InvalidTheta):
            cell_probs(m, SensitivitySpec.per_unit([2.0, 2.0, 2.0]))


class TestPartials:
    def test_quadratic_derivative_example(self):
        g = d_e11_dp(MarginPair(0.4, 0.6), 2.0, arm=0)
        pr = cell_probs(MarginPair(0.4, 0.6), spec_const(2.0))
        expected = (2.0 * 0.6 - 1.0 * pr.e11) / np.sqrt(pr.delta)
        assert g == pytest.approx(expected, abs=1e-12)
        assert g == pytest.approx(0.638675, abs=5e-6)

    def test_independence_partials(self):
        m = MarginPair(0.4, 0.6)
        assert d_e11_dp(m, SensitivitySpec.independence(), 0) == pytest.approx(0.6)
        assert cell_partials(m, SensitivitySpec.independence(), "10") == (
            pytest.approx(1 - 0.6), pytest.approx(-0.4))

    def test_symmetric_margins(self):
        m = MarginPair(0.5, 0.5)
        assert d_e11_dp(m, 2.0, 0) == pytest.approx(d_e11_dp(m, 2.0, 1), abs=1e-14)

    def test_monotone_indicator_and_tie(self):
        assert d_e11_dp(MarginPair(0.4, 0.6), SensitivitySpec.monotone(), 0) == 1.0
        assert d_e11_dp(MarginPair(0.4, 0.6), SensitivitySpec.monotone(), 1) == 0.0
        assert d_e11_dp(MarginPair(0.5, 0.5), SensitivitySpec.monotone(), 0) == 0.5

    def test_partials_sum_to_zero_across_strata(self):
        m = MarginPair(0.4, 0.6)
        for arm in (0, 1):
            total = sum(cell_partials(m, 2.0, s)[arm] for s in ("00", "01", "10", "11"))
            assert total == pytest.approx(0.0, abs=1e-14)

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(10)
        p0 = rng.uniform(0.02, 0.98, 1000)
        p1 = rng.uniform(0.02, 0.98, 1000)
        h = 1e-5
        for theta in (0.3, 2.0, 7.0):
            s = spec_const(theta)
            for stratum in ("00", "01", "10", "11"):
                g0, g1 = cell_partials(MarginPair(p0, p1), s, stratum)
                fd0 = (cell_probs(MarginPair(p0 + h, p1), s).cell(stratum)
                       - cell_probs(MarginPair(p0 - h, p1), s).cell(stratum)) / (2 * h)
                fd1 = (cell_probs(MarginPair(p0, p1 + h), s).cell(stratum)
                       - cell_probs(MarginPair(p0, p1 - h), s).cell(stratum)) / (2 * h)
                assert np.max(np.abs(g0 - fd0)) < 1e-6
                assert np.max(np.abs(g1 - fd1)) < 1e-6

    def test_delta_underflow_guard(self):
        # p0 + p1 = 1 with theta -> 0 sends delta below the guard
        with pytest.raises(DeltaUnderflow):
            d_e11_dp(MarginPair(0.5, 0.5), 1e-16, 0)


class TestStrataProbsInvariants:
    @settings(max_examples=200, deadline=None)
    @given(p0=st.floats(0.011, 0.989), p1=st.floats(0.011, 0.989),
           log_theta=st.floats(np.log(1e-6), np.log(1e6)))
    def test_scalar_invariants(self, p0, p1, log_theta):
        theta = float(np.exp(log_theta))
        m = MarginPair(p0, p1)
        pr = cell_probs(m, spec_const(theta))
        pr.validate(m, theta=theta)

    def test_remark3_agreement_at_algebra_level(self):
        rng = np.random.default_rng(11)
        p0 = rng.uniform(0.05, 0.95, 1000)
        p1 = rng.uniform(0.05, 0.95, 1000)
        m = MarginPair(p0, p1)
        near = cell_probs(m, spec_const(0.999999)).e11
        exact = cell_probs(m, SensitivitySpec.independence()).e11
        assert np.max(np.abs(near - exact)) < 1e-7
