"""
Tests for services.resonance.

Screens are checked on frequencies with known continued-fraction behaviour;
measure estimates against interval widths computed by hand.
"""

import numpy as np
import pytest
from numpy.polynomial import Polynomial

from services.resonance import (GridTooCoarseError, RuessmannDegeneracyError, SublevelFloorError, b_bracketing,
                                excluded_measure, families, fit_power_law, k_hat, k_hat_prime, l_window_check,
                                matrix_divisor_screen, measure_sweep, russmann_index_amount,
                                screen_small_divisors, sublevel_measure, theoretical_bounds, theta_small_t_limit,
                                wilson_interval)
from services.model import EllipticNormalData, FrequencyMap, get_preset

RNG = np.random.default_rng(0)

GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


def _constant_frequency(value: float) -> FrequencyMap:
    """omega(xi) = value everywhere: no parameter can move it off a resonance."""
    return FrequencyMap(
        n=1,
        energy=lambda y: value * np.asarray(y)[:, 0],
        omega=lambda y: np.full_like(np.asarray(y, dtype=float), value),
        hessian=lambda y: np.zeros((np.asarray(y).shape[0], 1, 1)),
        lipschitz_bound=0.0,
        domain_low=np.array([0.0]),
        domain_high=np.array([1.0]),
    )


class TestFamilies:
    def test_counts(self):
        """m = 2: two theta_j, three sums (i <= j) and one difference."""
        conditions = [family[0] for family in families(2)]
        assert conditions.count(2) == 2
        assert conditions.count(3) == 3
        assert conditions.count(4) == 1

    def test_windows(self):
        assert k_hat(0.8) == pytest.approx(1.8)
        assert k_hat_prime(0.8, [0.7]) == pytest.approx(0.8 + 2.1 + 1.0)
        assert k_hat_prime(0.8, [0.7], eps=1e-3, drift_c=2.0) == pytest.approx(3.902)


class TestRuessmann:
    def test_linear_frequency(self):
        """omega = xi has index 1 and amount (1 - safety)."""
        data = russmann_index_amount(get_preset("twist-1-1").frequency)
        assert data.nbar == 1
        assert data.beta_amount == pytest.approx(0.95, rel=1e-12)

    def test_cubic_frequency(self):
        """omega = xi^2 on [-1/2, 1/2] needs the second derivative at 0."""
        data = russmann_index_amount(get_preset("ruessmann-degenerate-demo").frequency)
        assert data.nbar == 2
        assert data.beta_amount > 0

    def test_two_dimensional(self):
        data = russmann_index_amount(get_preset("twist-2-1").frequency, rng=np.random.default_rng(5))
        assert data.nbar == 1
        assert 0 < data.beta_amount < 1

    def test_finite_difference_path(self):
        """Without analytic derivatives the index is found from finite differences."""
        frequency = get_preset("ruessmann-degenerate-demo").frequency
        stripped = FrequencyMap(frequency.n, frequency.energy, frequency.omega, frequency.hessian,
                                frequency.lipschitz_bound, frequency.domain_low, frequency.domain_high)
        assert russmann_index_amount(stripped).nbar == 2

    def test_degenerate(self):
        """A constant frequency never reaches full rank."""
        with pytest.raises(RuessmannDegeneracyError) as info:
            russmann_index_amount(_constant_frequency(0.0), nbar_max=3)
        assert info.value.worst_xi is not None


class TestScreen:
    def test_golden_mean_passes(self):
        """The golden rotation number passes family 1 up to |k| = 50."""
        report = screen_small_divisors([2.0 * np.pi * GOLDEN], [], [0.0], 1e-3, 5.0, 1.0, 50)
        assert report.passed
        assert report.count > 0
        assert set(np.unique(report.condition)) == {1}

    def test_rational_fails(self):
        """t omega = 2 pi / 5 gives a vanishing divisor at k = 5, l = 1."""
        report = screen_small_divisors([2.0 * np.pi / 5.0], [0.3], [0.0], 1e-3, 2.0, 1.0, 10)
        assert not report.passed
        hits = [(k, l, condition) for k, l, _, condition, _ in report.violations]
        assert ((5,), 1, 1) in hits

    def test_theta_resonance(self):
        """k t omega = theta is reported as a condition-2 violation with its j."""
        theta = 0.4
        report = screen_small_divisors([0.2], [theta], [0.5], 1e-3, 2.0, 1.0, 4)
        found = [v for v in report.violations if v[3] == 2]
        assert found and found[0][2] == 0

    def test_frame(self):
        report = screen_small_divisors([GOLDEN, 0.3], [0.2, 0.5], [0.5, 0.5], 1e-4, 3.0, 0.1, 4)
        frame = report.to_frame()
        assert list(frame.columns) == ["condition", "k1", "k2", "l", "i", "j", "margin"]
        assert len(frame) == report.count
        assert set(frame["condition"]) == {1, 2, 3, 4}

    def test_window_reduction(self):
        """No violation hides outside the K_hat window."""
        assert l_window_check([GOLDEN, 0.3], [0.2, 0.5], 1e-2, 2.0, 0.5, 6, l_max=200) == []


class TestExcludedMeasure:
    def test_interval_width(self):
        """A single crossing omega = theta excludes an interval of width gamma / 2 at tau = 2."""
        frequency = get_preset("twist-1-1").frequency
        theta = np.array([np.arctan(0.7)])
        result = excluded_measure(frequency, theta, 0.02, 1.0, 1, 4096, 2.0)
        assert result.breakdown[2] == pytest.approx(0.01, rel=0.05)

    def test_linear_in_gamma(self):
        """The excluded measure scales like gamma (slope about 1 on a log-log fit)."""
        frequency = get_preset("twist-1-1").frequency
        theta = EllipticNormalData.from_rates([0.7], 1.0).theta
        frame = measure_sweep(frequency, theta, [0.02, 0.03, 0.05, 0.08, 0.12, 0.2], 1.0, 32, 2048, 2.0)
        assert np.all(np.diff(frame["excluded_measure"]) > 0)
        assert 0.9 <= frame["slope_running"].iloc[-1] <= 1.1

    def test_monte_carlo_interval(self):
        """The Monte-Carlo estimate agrees with the grid count within sampling error."""
        frequency = get_preset("twist-1-1").frequency
        theta = np.array([np.arctan(0.7)])
        result = excluded_measure(frequency, theta, 0.1, 1.0, 8, 2048, 2.0, mc_samples=4000,
                                  rng=np.random.default_rng(7))
        volume = frequency.volume
        spread = volume * np.sqrt(result.mc_fraction * (1.0 - result.mc_fraction) / 4000)
        assert abs(result.mc_fraction * volume - result.measure) <= 4.0 * spread + 1e-3
        assert result.ci_low <= result.mc_fraction * volume <= result.ci_high

    def test_later_steps_add_nothing_new(self):
        """v_max > 0 only adds smaller thresholds, which the v = 0 set already contains."""
        frequency = get_preset("twist-1-1").frequency
        theta = np.array([np.arctan(0.7)])
        first = excluded_measure(frequency, theta, 0.05, 1.0, 8, 1024, 2.0)
        later = excluded_measure(frequency, theta, 0.05, 1.0, 8, 1024, 2.0, v_max=3)
        assert later.measure == pytest.approx(first.measure, rel=1e-12)

    def test_grid_floor(self):
        with pytest.raises(ValueError):
            excluded_measure(get_preset("twist-1-1").frequency, [0.3], 0.1, 1.0, 4, 32, 2.0)

    def test_bounds(self):
        frequency = get_preset("twist-1-1").frequency
        bounds = theoretical_bounds(frequency, 0.1, 2.0, 4, 0.05)
        assert bounds["shape_c5"] == pytest.approx(0.1 * 0.6)
        assert bounds["c5"] == pytest.approx(0.05 / 0.06)
        assert bounds["shape_c3"] == pytest.approx(0.06 * 2 * (1 / 4 + 1 / 9 + 1 / 16 + 1 / 25))


class TestStatistics:
    def test_wilson(self):
        low, high = wilson_interval(50, 100)
        assert low == pytest.approx(0.4038, abs=1e-3)
        assert high == pytest.approx(0.5962, abs=1e-3)

    def test_wilson_empty(self):
        assert wilson_interval(0, 0) == (0.0, 1.0)

    def test_power_law(self):
        xs = np.array([1.0, 2.0, 4.0, 8.0])
        slope, intercept, r = fit_power_law(xs, 3.0 * xs ** 1.5)
        assert slope == pytest.approx(1.5, rel=1e-12)
        assert np.exp(intercept) == pytest.approx(3.0, rel=1e-12)
        assert r == pytest.approx(1.0)

    def test_power_law_needs_points(self):
        with pytest.raises(ValueError):
            fit_power_law([1.0, 2.0], [0.0, 1.0])


class TestSublevel:
    def test_linear(self):
        """|a x| < h on [-1, 1] has measure 2h/a, exactly the m = 1 bound."""
        result = sublevel_measure(Polynomial([0.0, 2.0]), (-1.0, 1.0), 1e-3, 1, 2.0)
        assert result.measure == pytest.approx(1e-3, rel=1e-9)
        assert result.bound_holds

    def test_quadratic(self):
        """|x^2| < h has measure 2 sqrt(h); the m = 2 bound is 2 sqrt(h)."""
        result = sublevel_measure(Polynomial([0.0, 0.0, 1.0]), (-1.0, 1.0), 1e-4, 2, 2.0)
        assert result.measure == pytest.approx(0.02, rel=1e-6)
        assert result.bound_holds

    def test_random_cubics(self):
        """The estimate holds for cubics with |g'''| = 6 |c3| >= d."""
        for _ in range(50):
            coeffs = RNG.uniform(-1.0, 1.0, 4)
            coeffs[3] = np.sign(coeffs[3]) * max(abs(coeffs[3]), 0.2)
            result = sublevel_measure(Polynomial(coeffs), (-1.0, 1.0), 1e-4, 3, 6.0 * abs(coeffs[3]))
            assert result.bound_holds

    def test_random_quartics(self):
        """The estimate holds for quartics with |g''''| = 24 |c4| >= d."""
        for _ in range(50):
            coeffs = RNG.uniform(-1.0, 1.0, 5)
            coeffs[4] = np.sign(coeffs[4]) * max(abs(coeffs[4]), 0.2)
            result = sublevel_measure(Polynomial(coeffs), (-1.0, 1.0), 1e-4, 4, 24.0 * abs(coeffs[4]))
            assert result.bound_holds

    def test_floor_violated(self):
        with pytest.raises(SublevelFloorError):
            sublevel_measure(Polynomial([0.0, 0.0, 1.0]), (-1.0, 1.0), 1e-3, 1, 0.5)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            sublevel_measure(Polynomial([0.0, 1.0]), (0.0, 1.0), 0.0, 1, 1.0)


class TestMatrixScreen:
    def test_scaling(self):
        """The bad fraction is proportional to alpha and decays with |k|."""
        frequency = get_preset("twist-1-1").frequency
        theta = float(np.arctan(0.7))
        tau, L = 2.0, 2

        def fraction(k, alpha):
            return matrix_divisor_screen(frequency, [k], theta, alpha, tau, 1.0, grid_points=200000).fraction

        assert fraction(10, 1.0) / fraction(10, 0.5) >= 0.7 * 2 ** (1.0 / L)
        sizes = np.array([10.0, 20.0, 40.0])
        slope = fit_power_law(sizes, [fraction(int(k), 1.0) for k in sizes])[0]
        assert slope <= -(tau - 1.0) / L + 0.3

    def test_grid_floor(self):
        with pytest.raises(GridTooCoarseError):
            matrix_divisor_screen(get_preset("twist-1-1").frequency, [3], 0.5, 1.0, 2.0, 1.0, grid_points=500)

    def test_zero_mode_rejected(self):
        """k_tilde = 0 has no divisor threshold and is refused before the grid is built."""
        with pytest.raises(ValueError, match="k_tilde"):
            matrix_divisor_screen(get_preset("twist-1-1").frequency, [0], 0.5, 1.0, 2.0, 1.0)


class TestEllipticChecks:
    def test_small_t_limit(self):
        """|theta^t| / t tends to |B| and stays under 3/2 |B|."""
        frame = theta_small_t_limit([0.7, 1.3], [0.1, 0.01, 0.001])
        assert frame["controlled"].all()
        last = frame[frame["t"] == 0.001]
        np.testing.assert_allclose(last["ratio"], last["rate"], rtol=1e-5)

    def test_bracketing(self):
        trace = [{"b_t": [0.07]}, {"b_t": [0.0701]}, {"b_t": [0.0699]}]
        assert b_bracketing(trace)["holds"]
        assert not b_bracketing(trace + [{"b_t": [0.2]}])["holds"]
