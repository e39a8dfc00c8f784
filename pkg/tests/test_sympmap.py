"""
Tests for services.sympmap.

The twist map is checked by substituting its output back into the four
generating relations; symplecticity through complex-step Jacobians.
"""

import numpy as np
import pytest

from services.model import (EllipticNormalData, GeneratingHamiltonian, get_preset, standard_scheme_model,
                            standard_test_model)
from services.sympmap import (Composition, ConjugatedMap, ImplicitSolveError, LinearNormalizer, MidpointScheme,
                              NearIdentityMap, PhasePoint, TwistMap, apply_scheme, apply_twist_map,
                              estimate_remainder_constant, fit_defect_order, inverse_twist_map, iterate_orbit, jacobian,
                              orbit_frame, scheme_step, symplecticity_defect, twist_step)
from services.fourier import FourierField

RNG = np.random.default_rng(0)

RTOL = 1e-12
ATOL = 1e-12


def _random_points(rng, preset: str, count: int):
    """Points with x on the torus, y in V and |u|, |v| <= 0.2."""
    frequency, normal, _ = standard_test_model(preset)
    n, m = frequency.n, normal.m
    return [PhasePoint(rng.uniform(0, 2 * np.pi, n), rng.uniform(-0.2, 0.2, m), frequency.sample(rng, 1)[0],
                       rng.uniform(-0.2, 0.2, m)) for _ in range(count)]


def _central_difference_jacobian(step, z: PhasePoint, h: float = 1e-6) -> np.ndarray:
    """Two-sided difference quotients of the map z -> z + step(z), columns ordered (x, u, y, v)."""
    base = z.batch().stack()[0]
    n, m = z.batch().x.shape[1], z.batch().u.shape[1]
    size = base.shape[0]
    shifts = h * np.eye(size)
    stacked = np.concatenate([base + shifts, base - shifts])
    moved = stacked + step(PhasePoint.from_stack(stacked, n, m)).stack()
    return (moved[:size] - moved[size:]).T / (2.0 * h)


def _small_generator(scale: float = 1e-3) -> FourierField:
    """A real order-two generator in (x, y, u, v) for n = m = 1."""
    return FourierField.from_terms(1, 1, 4, {
        ((1,), (0,), (0,), (0,)): 0.5 * scale, ((-1,), (0,), (0,), (0,)): 0.5 * scale,
        ((2,), (1,), (0,), (0,)): 0.25j * scale, ((-2,), (1,), (0,), (0,)): -0.25j * scale,
        ((1,), (0,), (1,), (1,)): 0.3 * scale, ((-1,), (0,), (1,), (1,)): 0.3 * scale,
    })


class TestTwistMap:
    def test_unperturbed_shift(self):
        """With P = 0 the torus y = xi, u = v = 0 is rotated by t omega(xi)."""
        _, _, hamiltonian = standard_test_model("twist-1-1", epsilon=0.0, t=0.1)
        image, report = apply_twist_map(hamiltonian, PhasePoint.of(1.0, 0.0, 0.5, 0.0))
        np.testing.assert_allclose(image.stack()[0], [1.05, 0.0, 0.5, 0.0], rtol=RTOL, atol=ATOL)
        assert report.converged

    def test_zero_step_is_identity(self):
        _, _, hamiltonian = standard_test_model("twist-1-1", epsilon=1e-3, t=0.0)
        z = PhasePoint.of(0.3, 0.1, 0.5, -0.2)
        image, _ = apply_twist_map(hamiltonian, z)
        np.testing.assert_allclose(image.stack()[0], z.stack()[0], rtol=RTOL, atol=1e-15)

    def test_generating_relations(self):
        """The image satisfies y = y^ + dH/dx, v = v^ + dH/du, x^ = x + dH/dy^, u^ = u + dH/dv^."""
        t, eps = 0.1, 1e-3
        _, normal, hamiltonian = standard_test_model("twist-1-1", epsilon=eps, t=t)
        a, b, c = normal.a_underline[0], normal.b_t[0], normal.c_t[0]
        x, u, y, v = 0.3, 0.1, 0.5, -0.2
        image, _ = apply_twist_map(hamiltonian, PhasePoint.of(x, u, y, v))
        x_hat, u_hat, y_hat, v_hat = image.lifted_x[0], image.u[0], image.y[0], image.v[0]
        residuals = [
            y_hat - t * eps * np.sin(x) - y,
            v_hat + (a - 1.0) * v_hat + b * u - v,
            x + t * y_hat - x_hat,
            u + (a - 1.0) * u + c * v_hat - u_hat,
        ]
        assert max(abs(r) for r in residuals) <= 1e-12

    def test_inverse(self):
        _, _, hamiltonian = standard_test_model("twist-2-1", epsilon=1e-3, t=0.1)
        for z in _random_points(RNG, "twist-2-1", 10):
            image, _ = apply_twist_map(hamiltonian, z)
            back, _ = inverse_twist_map(hamiltonian, PhasePoint(image.lifted_x, image.u, image.y, image.v))
            np.testing.assert_allclose(back.lifted_x, z.x, atol=1e-11)
            np.testing.assert_allclose(np.concatenate([back.u, back.y, back.v]), np.concatenate([z.u, z.y, z.v]),
                                       atol=1e-11)

    def test_non_contraction_rejected(self):
        """A perturbation with a large mixed derivative d2P/dxdy fails the contraction check."""
        frequency = get_preset("twist-1-1").frequency
        normal = EllipticNormalData.from_rates([0.7], 1.0)
        perturbation = FourierField.from_terms(1, 1, 4, {((1,), (2,), (0,), (0,)): 25.0,
                                                         ((-1,), (2,), (0,), (0,)): 25.0})
        hamiltonian = GeneratingHamiltonian.build(frequency, normal, perturbation, 50.0)
        with pytest.raises(ImplicitSolveError):
            apply_twist_map(hamiltonian, PhasePoint.of(0.3, 0.0, 0.5, 0.0))

    @pytest.mark.parametrize("preset", ["twist-1-1", "twist-2-1"])
    def test_symplectic(self, preset):
        """J^T S J = S on 100 random points."""
        frequency, normal, hamiltonian = standard_test_model(preset, epsilon=1e-3, t=0.1)
        step = twist_step(hamiltonian)
        worst = max(symplecticity_defect(jacobian(step, z), frequency.n, normal.m)
                    for z in _random_points(RNG, preset, 100))
        assert worst <= 1e-12

    def test_jacobian_matches_central_difference(self):
        """At eps = 0.1 the complex-step Jacobian sees the perturbation: dy^/dx = t eps cos x."""
        t, eps = 0.1, 0.1
        _, _, hamiltonian = standard_test_model("twist-1-1", epsilon=eps, t=t)
        step = twist_step(hamiltonian)
        z = PhasePoint.of(0.7, 0.1, 0.5, -0.1)
        jac = jacobian(step, z)
        assert jac[2, 0] == pytest.approx(t * eps * np.cos(0.7), rel=1e-12)
        np.testing.assert_allclose(jac, _central_difference_jacobian(step, z), rtol=1e-7, atol=1e-8)
        assert symplecticity_defect(jac, 1, 1) <= 1e-12

    def test_unperturbed_jacobian(self):
        """With P = 0: x^ = x + t y and a rotation by theta on (u, v)."""
        t = 0.1
        _, normal, hamiltonian = standard_test_model("twist-1-1", epsilon=0.0, t=t)
        theta = normal.theta[0]
        expected = np.array([[1.0, 0.0, t, 0.0],
                             [0.0, np.cos(theta), 0.0, np.sin(theta)],
                             [0.0, 0.0, 1.0, 0.0],
                             [0.0, -np.sin(theta), 0.0, np.cos(theta)]])
        jac = jacobian(twist_step(hamiltonian), PhasePoint.of(0.4, 0.05, 0.5, -0.1))
        np.testing.assert_allclose(jac, expected, rtol=RTOL, atol=1e-14)

    @pytest.mark.slow
    def test_unperturbed_invariance(self):
        """y and u^2 + v^2 stay fixed over 10^5 iterates when P = 0."""
        _, _, hamiltonian = standard_test_model("twist-1-1", epsilon=0.0, t=0.1)
        orbit = iterate_orbit(twist_step(hamiltonian), PhasePoint.of(0.0, 0.1, 0.5, 0.0), 100000)
        assert np.max(np.abs(orbit.points[:, 2] - 0.5)) <= 1e-11
        radius = orbit.points[:, 1] ** 2 + orbit.points[:, 3] ** 2
        assert np.max(np.abs(radius - 0.01)) <= 1e-11

    def test_newton_trace(self):
        """With trace the Newton iterates (x, u, y^, v^) are recorded, ending at the image actions."""
        _, _, hamiltonian = standard_test_model("twist-1-1", epsilon=1e-3, t=0.1)
        twist = TwistMap(hamiltonian)
        z = PhasePoint(np.array([[0.3]]), np.array([[0.1]]), np.array([[0.5]]), np.array([[-0.2]]))
        assert twist.step(z).trace == ()
        result = twist.step(z, trace=True)
        assert len(result.trace) == result.report.iterations >= 2
        np.testing.assert_array_equal(result.trace[0].y, z.y)
        np.testing.assert_allclose(result.trace[-1].y, z.y + result.dz.y, rtol=0, atol=1e-15)
        np.testing.assert_allclose(result.trace[-1].v, z.v + result.dz.v, rtol=0, atol=1e-15)
        backward = twist.inverse_step(z + result.dz, trace=True)
        np.testing.assert_allclose(backward.trace[-1].x, z.x, rtol=0, atol=1e-12)

    def test_centred_map_matches_absolute(self):
        """Centring at xi only shifts the y-coordinate."""
        _, _, hamiltonian = standard_test_model("twist-1-1", epsilon=1e-3, t=0.1)
        xi = np.array([0.5])
        z = PhasePoint(np.array([[0.3]]), np.array([[0.1]]), np.array([[0.52]]), np.array([[-0.2]]))
        local = PhasePoint(z.x, z.u, z.y - xi, z.v)
        absolute = TwistMap(hamiltonian).step(z).dz
        centred = TwistMap(hamiltonian, center=xi).step(local).dz
        np.testing.assert_allclose(centred.stack(), absolute.stack(), rtol=1e-10, atol=1e-15)


class TestMidpointScheme:
    def test_quadratic_invariants(self):
        """With eps = 0 the midpoint rule keeps y and u^2 + v^2 exactly."""
        model = standard_scheme_model("twist-1-1", epsilon=0.0)
        orbit = iterate_orbit(scheme_step(model, 0.1), PhasePoint.of(0.0, 0.1, 0.5, 0.05), 10000)
        assert np.max(np.abs(orbit.points[:, 2] - 0.5)) <= 1e-12
        radius = orbit.points[:, 1] ** 2 + orbit.points[:, 3] ** 2
        assert np.max(np.abs(radius - 0.0125)) <= 1e-10

    @pytest.mark.parametrize("preset", ["twist-1-1", "twist-2-1"])
    def test_symplectic(self, preset):
        """J^T S J = S on 100 random points of each preset."""
        model = standard_scheme_model(preset, epsilon=1e-3)
        step = scheme_step(model, 0.1)
        worst = max(symplecticity_defect(jacobian(step, z), model.n, model.m)
                    for z in _random_points(RNG, preset, 100))
        assert worst <= 1e-12

    def test_jacobian_sees_perturbation(self):
        """The complex-step Jacobian of the scheme agrees with central differences at eps = 0.1."""
        step = scheme_step(standard_scheme_model("twist-1-1", epsilon=0.1), 0.1)
        z = PhasePoint.of(0.7, 0.1, 0.5, -0.1)
        jac = jacobian(step, z)
        np.testing.assert_allclose(jac, _central_difference_jacobian(step, z), rtol=1e-7, atol=1e-8)
        assert abs(jac[2, 0]) > 1e-3
        assert symplecticity_defect(jac, 1, 1) <= 1e-12

    def test_newton_trace(self):
        """The scheme records one midpoint per Newton iterate, the last one at z + dz / 2."""
        scheme = MidpointScheme(standard_scheme_model("twist-1-1", epsilon=1e-3), 0.1)
        z = PhasePoint(np.array([[0.3]]), np.array([[0.1]]), np.array([[0.5]]), np.array([[-0.2]]))
        assert scheme.step(z).trace == ()
        result = scheme.step(z, trace=True)
        assert len(result.trace) == result.report.iterations
        np.testing.assert_allclose(result.trace[-1].stack(), (z.stack() + 0.5 * result.dz.stack()), rtol=RTOL,
                                   atol=1e-15)
        assert len(scheme.inverse_step(z, trace=True).trace) >= 2

    def test_local_error_order(self):
        """One-step defect against the exact flow scales like t^3."""
        model = standard_scheme_model("twist-1-1", epsilon=1e-3)
        slope = fit_defect_order(model, PhasePoint.of(0.3, 0.1, 0.5, -0.2), [0.1, 0.05, 0.025])
        assert 2.8 <= slope <= 3.2

    def test_remainder_constant(self):
        """The measured defect constant enters the perturbation bound with t^2."""
        model = standard_scheme_model("twist-1-1", epsilon=1e-3)
        points = [PhasePoint.of(0.3, 0.1, 0.5, -0.2), PhasePoint.of(2.0, -0.1, 0.4, 0.1)]
        measured = estimate_remainder_constant(model, points, 0.05)
        assert measured.m2 > 0
        expected = measured.m1 * 1e-3 + 2 * measured.m2 * measured.l_star * 0.05 ** 2
        assert measured.perturbation_bound(1e-3, 0.05) == pytest.approx(expected, rel=1e-12)

    def test_step_and_inverse(self):
        model = standard_scheme_model("twist-1-1", epsilon=1e-3)
        z = PhasePoint.of(0.3, 0.1, 0.5, -0.2)
        image, _ = apply_scheme(model, z, 0.1)
        back, _ = apply_scheme(model, PhasePoint(image.lifted_x, image.u, image.y, image.v), -0.1)
        np.testing.assert_allclose(back.lifted_x, z.x, atol=1e-12)
        np.testing.assert_allclose([back.u[0], back.y[0], back.v[0]], [0.1, 0.5, -0.2], atol=1e-12)


class TestTransforms:
    def test_near_identity_inverse(self):
        psi = NearIdentityMap(_small_generator())
        z = PhasePoint(RNG.uniform(0, 2 * np.pi, (8, 1)), *RNG.uniform(-0.2, 0.2, (3, 8, 1)))
        moved = z + psi.step(z).dz
        back = moved + psi.inverse_step(moved).dz
        np.testing.assert_allclose(back.stack(), z.stack(), rtol=1e-13, atol=1e-14)

    def test_near_identity_symplectic(self):
        psi = NearIdentityMap(_small_generator(1e-2))
        jac = jacobian(lambda z: psi.step(z).dz, PhasePoint.of(0.7, 0.1, 0.2, -0.1))
        assert symplecticity_defect(jac, 1, 1) <= 1e-12

    def test_linear_normalizer(self):
        """(u+, v+) -> (u+/lambda - beta v+, lambda v+) and back."""
        normalizer = LinearNormalizer(np.array([1.2]), np.array([0.3]))
        z = PhasePoint(np.zeros((1, 1)), np.array([[0.4]]), np.zeros((1, 1)), np.array([[0.5]]))
        moved = z + normalizer.step(z).dz
        np.testing.assert_allclose([moved.u[0, 0], moved.v[0, 0]], [0.4 / 1.2 - 0.15, 0.6], rtol=RTOL)
        back = moved + normalizer.inverse_step(moved).dz
        np.testing.assert_allclose(back.stack(), z.stack(), rtol=RTOL, atol=1e-15)
        jac = jacobian(lambda p: normalizer.step(p).dz, PhasePoint.of(0.0, 0.4, 0.0, 0.5))
        assert symplecticity_defect(jac, 1, 1) <= 1e-14

    def test_composition_order(self):
        """Composition([a, b]).step applies b first."""
        a = LinearNormalizer(np.array([2.0]), np.array([0.0]))
        b = NearIdentityMap(_small_generator())
        z = PhasePoint(np.array([[0.3]]), np.array([[0.1]]), np.array([[0.05]]), np.array([[0.2]]))
        after_b = z + b.step(z).dz
        expected = after_b + a.step(after_b).dz
        np.testing.assert_allclose((z + Composition([a, b]).step(z).dz).stack(), expected.stack(), rtol=RTOL)

    def test_conjugation_by_identity(self):
        _, _, hamiltonian = standard_test_model("twist-1-1", epsilon=1e-3, t=0.1)
        base = TwistMap(hamiltonian)
        z = PhasePoint(np.array([[0.3]]), np.array([[0.1]]), np.array([[0.5]]), np.array([[-0.2]]))
        conjugated = ConjugatedMap(base, [LinearNormalizer(np.array([1.0]), np.array([0.0]))]).step(z, trace=True)
        np.testing.assert_allclose(conjugated.dz.stack(), base.step(z).dz.stack(), rtol=RTOL, atol=1e-16)
        assert len(conjugated.trace) == 4


class TestOrbitTable:
    def test_columns(self):
        _, _, hamiltonian = standard_test_model("twist-2-1", epsilon=0.0, t=0.1)
        orbit = iterate_orbit(twist_step(hamiltonian), PhasePoint.of([0.0, 0.0], 0.0, [0.5, 0.6], 0.0), 5)
        frame = orbit_frame(orbit)
        assert list(frame.columns) == ["step", "x1", "x2", "u1", "y1", "y2", "v1", "lifted_x1", "lifted_x2"]
        assert len(frame) == 6
        np.testing.assert_allclose(frame["lifted_x2"].iloc[-1], 5 * 0.1 * 0.6, rtol=RTOL)
