"""
Tests for services.homological.

The mode-wise solver is checked against a dense assembly of the same linear
operator, and the solved coefficients are pushed back through that operator.
"""

import numpy as np
import pytest

from services.fourier import FourierField, JetBlocks, mode_table, weighted_norm
from services.homological import (KamConstants, NormalForm, NormalizationError, SmallDivisorError,
                                  apply_linear_operator, dense_solve, divisor_threshold, homological_rhs,
                                  measure_jet, normalize, remainder_Q, solve_homological, solve_scalar_modes,
                                  solve_uv_modes, uv_determinant)
from services.model import standard_test_model
from services.sympmap import TwistMap

RNG = np.random.default_rng(0)

RTOL = 1e-10
ATOL = 1e-13


def _random_jet(rng, n: int, m: int, k_max: int) -> JetBlocks:
    """Complex random jet with symmetric quadratic blocks."""
    count = mode_table(n, k_max).shape[0]

    def draw(*shape):
        return rng.normal(size=(count,) + shape) + 1j * rng.normal(size=(count,) + shape)

    p020, p002 = draw(m, m), draw(m, m)
    return JetBlocks(n, m, k_max, draw(), draw(n), draw(m), draw(m), draw(m, m),
                     p020 + np.swapaxes(p020, 1, 2), p002 + np.swapaxes(p002, 1, 2))


def _blocks(jet: JetBlocks):
    return (jet.p000, jet.p100, jet.p010, jet.p001, jet.p011, jet.p020, jet.p002)


def _normal(m: int) -> NormalForm:
    """omega = 0.5, t = 0.1, unit twist, elliptic angles taken from (0.07, 0.31)."""
    theta = np.array([0.07, 0.31])[:m]
    return NormalForm(np.array([0.5]), theta, np.eye(1), 0.1)


def _rotation(theta: float) -> np.ndarray:
    return np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]])


class TestScalarModes:
    def test_cosine_coefficient(self):
        """R000 = cos x with t omega = 0.6 gives F_1 = (t/2)/(e^{0.6i} - 1)."""
        t, k_max = 0.1, 4
        modes = mode_table(1, k_max)
        index = {int(k[0]): idx for idx, k in enumerate(modes)}
        r000 = np.zeros(len(modes), dtype=complex)
        r000[index[1]] = r000[index[-1]] = 0.5
        f000, f100, mean, omega_hat = solve_scalar_modes(r000, np.zeros((len(modes), 1), dtype=complex),
                                                         [0.6], t, 1e-6, 2.0, k_max)
        assert f000[index[1]] == pytest.approx(0.5 * t / (np.exp(0.6j) - 1.0), rel=1e-14)
        assert f000[index[-1]] == pytest.approx(np.conj(f000[index[1]]), rel=1e-14)
        assert mean == 0
        np.testing.assert_array_equal(f100, 0)
        np.testing.assert_array_equal(omega_hat, [0.0])

    def test_frequency_correction(self):
        """The mean of R100 becomes omega_hat."""
        modes = mode_table(1, 2)
        r100 = np.zeros((len(modes), 1), dtype=complex)
        r100[np.flatnonzero(modes[:, 0] == 0)[0], 0] = 3e-7
        _, _, _, omega_hat = solve_scalar_modes(np.zeros(len(modes), dtype=complex), r100, [0.6], 0.1, 1e-6, 2.0, 2)
        np.testing.assert_allclose(omega_hat, [3e-7], rtol=1e-15)

    def test_small_divisor(self):
        """t omega just above 2 pi / 3 trips the k = 3 divisor."""
        modes = mode_table(1, 4)
        zeros = np.zeros(len(modes), dtype=complex)
        with pytest.raises(SmallDivisorError) as info:
            solve_scalar_modes(zeros, zeros[:, None], [2.0 * np.pi / 3.0 + 1e-9], 0.1, 1e-3, 2.0, 4)
        assert info.value.condition == 1
        assert abs(info.value.k[0]) == 3
        assert abs(info.value.l) == 1

    def test_threshold(self):
        modes = mode_table(2, 2)
        expected = 0.1 * 1e-3 / (1.0 + np.abs(modes).sum(axis=1)) ** 4
        np.testing.assert_allclose(divisor_threshold(modes, 0.1, 1e-3, 4.0), expected, rtol=1e-15)


class TestUvModes:
    def test_determinant_identity(self):
        """det M_k = 2 sec(theta) e^{i phi} (cos phi - cos theta)."""
        for phi, theta in RNG.uniform(-1.5, 1.5, (200, 2)):
            expected = 2.0 / np.cos(theta) * np.exp(1j * phi) * (np.cos(phi) - np.cos(theta))
            assert uv_determinant(phi, theta) == pytest.approx(expected, rel=1e-12, abs=1e-14)

    def test_rotation_resonance(self):
        """k t omega = theta (mod 2 pi) is a condition-2 small divisor."""
        modes = mode_table(1, 3)
        zeros = np.zeros((len(modes), 1), dtype=complex)
        with pytest.raises(SmallDivisorError) as info:
            solve_uv_modes(zeros, zeros, [0.2], [0.4 + 1e-10], 0.1, 1e-3, 2.0, 3)
        assert info.value.condition == 2


class TestModeWiseSolver:
    @pytest.mark.parametrize("m", [1, 2])
    def test_matches_dense(self, m):
        """Mode-wise solutions equal the dense solve of the full system up to |k| = 8."""
        jet = _random_jet(RNG, 1, m, 8)
        normal = _normal(m)
        solution = solve_homological(jet, normal, 1e-9, 2.0)
        dense = dense_solve(jet, normal.t * normal.omega, normal.theta, normal.t, normal.twist)
        for got, want in zip(_blocks(solution.blocks), _blocks(dense)):
            np.testing.assert_allclose(got, want, rtol=RTOL, atol=ATOL)

    @pytest.mark.parametrize("m", [1, 2])
    def test_operator_residual(self, m):
        """L F reproduces the right-hand side tR with its means removed."""
        jet = _random_jet(RNG, 1, m, 3)
        normal = _normal(m)
        solution = solve_homological(jet, normal, 1e-9, 2.0)
        image = apply_linear_operator(solution.blocks, normal.t * normal.omega, normal.theta, normal.t,
                                      normal.twist)
        for got, want in zip(_blocks(image), _blocks(homological_rhs(jet, normal.t))):
            np.testing.assert_allclose(got, want, rtol=RTOL, atol=ATOL)

    def test_normal_form_corrections(self):
        """Diagonal k = 0 quadratic means become (A_hat, B_hat, C_hat)."""
        jet = _random_jet(RNG, 1, 1, 2)
        solution = solve_homological(jet, _normal(1), 1e-9, 2.0)
        zero = np.flatnonzero(mode_table(1, 2)[:, 0] == 0)[0]
        assert solution.a_hat[0] == pytest.approx(jet.p011[zero, 0, 0].real)
        assert solution.b_hat[0] == pytest.approx(jet.p020[zero, 0, 0].real)
        assert solution.c_hat[0] == pytest.approx(jet.p002[zero, 0, 0].real)

    def test_divisor_log(self):
        solution = solve_homological(_random_jet(RNG, 1, 1, 2), _normal(1), 1e-9, 2.0)
        frame = solution.divisor_log.to_frame()
        assert set(frame["condition"]) == {1, 2, 3}
        assert solution.min_divisor_margin > 0


class TestNormalize:
    @pytest.mark.parametrize("theta", [0.05, 0.3, 1.0])
    def test_fixed_point(self, theta):
        """Blocks that already form a rotation give lambda = 1, beta = 0."""
        pair, theta_plus = normalize([1.0 / np.cos(theta)], [np.tan(theta)], [np.tan(theta)])
        np.testing.assert_allclose(pair.lam, [1.0], atol=1e-13)
        np.testing.assert_allclose(pair.beta_norm, [0.0], atol=1e-13)
        np.testing.assert_allclose(theta_plus, [theta], rtol=1e-13)

    def test_conjugates_to_rotation(self):
        """P^-1 M P is the rotation by theta_plus for perturbed blocks."""
        for _ in range(20):
            theta = RNG.uniform(0.05, 1.0)
            a, b, c = 1.0 / np.cos(theta) + RNG.uniform(-1e-3, 1e-3), *(np.tan(theta) + RNG.uniform(-1e-3, 1e-3, 2))
            pair, theta_plus = normalize([a], [b], [c])
            lam, beta = pair.lam[0], pair.beta_norm[0]
            linear = np.array([[(a * a - b * c) / a, c / a], [-b / a, 1.0 / a]])
            scaling = np.array([[1.0 / lam, -beta], [0.0, lam]])
            conjugated = np.linalg.inv(scaling) @ linear @ scaling
            np.testing.assert_allclose(conjugated, _rotation(theta_plus[0]), atol=1e-12)

    def test_hyperbolic_block(self):
        with pytest.raises(NormalizationError):
            normalize([3.0], [0.0], [0.0])


class TestConstants:
    def test_schedule(self):
        constants = KamConstants.build(n=1, gamma=0.05, nbar=1, L=2, s0=0.5)
        assert constants.tau == 8.0
        assert constants.gamma0 == pytest.approx(0.05 ** 4, rel=1e-15)
        assert constants.rho0 == pytest.approx(0.025)
        assert constants.gamma_v(2) == pytest.approx(constants.gamma0 / 2 ** 8, rel=1e-15)
        assert constants.s(3) == pytest.approx(0.5 - 5 * 0.025 * (1 + 0.5 + 0.25), rel=1e-15)

    def test_eta_is_clamped(self):
        constants = KamConstants.build(n=1, gamma=0.05, nbar=1)
        assert constants.eta(1.0, 0, 1) == constants.eta_max
        assert constants.eta(0.0, 0, 1) == constants.eta_max

    def test_explicit_tau(self):
        assert KamConstants.build(n=2, gamma=0.1, nbar=2, tau=5.0).tau == 5.0


class TestMeasuredJet:
    def test_twist_map_perturbation(self):
        """The jet of a twist map's own perturbation eps cos x is read back exactly."""
        eps, t, xi = 1e-4, 0.1, np.array([0.5])
        frequency, normal, hamiltonian = standard_test_model("twist-1-1", epsilon=eps, t=t, k_max=8)
        base = TwistMap(hamiltonian, center=xi)
        form = NormalForm(frequency.omega_at(xi), normal.theta, frequency.twist_at(xi), t)
        jet = measure_jet(base, form, 8)
        assert jet.coefficient((1,), (0,), (0,), (0,)) == pytest.approx(0.5 * eps, rel=1e-9)
        residual = jet - hamiltonian.perturbation
        assert weighted_norm(residual.prune(1e-15), 0.0, 1.0) <= 1e-12

    def test_quadratic_part(self):
        """A u^2 cos x_2 term is seen in the P020 block."""
        eps, t, xi = 1e-4, 0.1, np.array([0.5, 0.6])
        frequency, normal, hamiltonian = standard_test_model("twist-2-1", epsilon=eps, t=t, k_max=4)
        form = NormalForm(frequency.omega_at(xi), normal.theta, frequency.twist_at(xi), t)
        jet = measure_jet(TwistMap(hamiltonian, center=xi), form, 4)
        assert jet.coefficient((0, 1), (0, 0), (2,), (0,)) == pytest.approx(0.1 * eps, rel=1e-8)


class TestRemainder:
    @pytest.mark.slow
    def test_second_order(self):
        """Q is quadratic in the generator: doubling it multiplies |Q| by about 4."""
        t, xi = 0.1, np.array([0.5])
        frequency, normal, hamiltonian = standard_test_model("twist-1-1", epsilon=0.0, t=t, k_max=4)
        base = TwistMap(hamiltonian, center=xi)
        form = NormalForm(frequency.omega_at(xi), normal.theta, frequency.twist_at(xi), t)
        shape = FourierField.from_terms(1, 1, 4, {
            ((1,), (0,), (0,), (0,)): 0.5, ((-1,), (0,), (0,), (0,)): 0.5,
            ((1,), (0,), (1,), (0,)): 0.2j, ((-1,), (0,), (1,), (0,)): -0.2j,
        })
        norms = [weighted_norm(remainder_Q(base, form, shape.scale(g), 4), 0.0, 0.5) for g in (1e-3, 2e-3)]
        assert 3.6 <= norms[1] / norms[0] <= 4.4
