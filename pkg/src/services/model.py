import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from services.fourier import FourierField, weighted_norm

logger = logging.getLogger(__name__)

SEC_TOL = 1e-12
NON_RESONANCE_MARGIN = 1e-8


class UnknownPresetError(Exception):
    """Raised when a model preset name is not registered"""
    pass


class DegenerateSecError(Exception):
    """Raised when sec(theta) is undefined (theta = pi/2 + k pi)"""

    def __init__(self, index: int, theta: float):
        self.index = index
        self.theta = theta
        super().__init__(f"degenerate sec: theta[{index}] = {theta!r} makes underline-A singular")


class NonResonanceError(Exception):
    """Raised when elliptic angles violate the non-resonance margin"""
    pass


def _wrap(angle):
    """Distance of angle to the nearest multiple of 2 pi."""
    return np.abs(angle - 2.0 * np.pi * np.round(angle / (2.0 * np.pi)))


@dataclass(frozen=True)
class FrequencyMap:
    """Integrable part h(y) with frequency map omega = h' on the box V."""

    n: int
    energy: Callable
    omega: Callable
    hessian: Callable
    lipschitz_bound: float
    domain_low: np.ndarray
    domain_high: np.ndarray
    margin: float = 0.0
    derivative: Optional[Callable] = None

    def omega_at(self, xi) -> np.ndarray:
        return np.asarray(self.omega(np.asarray(xi, dtype=float).reshape(1, self.n)))[0]

    def twist_at(self, xi) -> np.ndarray:
        return np.asarray(self.hessian(np.asarray(xi, dtype=float).reshape(1, self.n)))[0]

    @property
    def volume(self) -> float:
        return float(np.prod(self.domain_high - self.domain_low))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.domain_low, self.domain_high, size=(count, self.n))

    def lipschitz_defect(self, rng: np.random.Generator, pairs: int = 1000) -> float:
        """max(|w(a) - w(b)| - Theta |a - b|) over random pairs; <= 0 when the bound holds."""
        a = self.sample(rng, pairs)
        b = self.sample(rng, pairs)
        lhs = np.linalg.norm(self.omega(a) - self.omega(b), axis=1)
        rhs = self.lipschitz_bound * np.linalg.norm(a - b, axis=1)
        return float(np.max(lhs - rhs))

    def gradient_defect(self, rng: np.random.Generator, samples: int = 64, step: float = 1e-5) -> float:
        """max |omega - central finite-difference gradient of h| on random points."""
        points = self.sample(rng, samples)
        worst = 0.0
        for a in range(self.n):
            shift = np.zeros(self.n)
            shift[a] = step
            fd = (self.energy(points + shift) - self.energy(points - shift)) / (2.0 * step)
            worst = max(worst, float(np.max(np.abs(fd - self.omega(points)[:, a]))))
        return worst


@dataclass(frozen=True)
class EllipticNormalData:
    """Elliptic angles theta^t; A_t, B_t, C_t are always derived from them."""

    theta: np.ndarray
    t: float

    @classmethod
    def from_rates(cls, rates, t: float) -> "EllipticNormalData":
        """theta^t = arctan(t B) so that B_t = t B exactly."""
        return cls(np.arctan(t * np.asarray(rates, dtype=float).reshape(-1)), float(t))

    @property
    def m(self) -> int:
        return int(np.asarray(self.theta).shape[0])

    def _cos(self) -> np.ndarray:
        cos = np.cos(self.theta)
        bad = np.flatnonzero(np.abs(cos) < SEC_TOL)
        if bad.size:
            raise DegenerateSecError(int(bad[0]), float(self.theta[bad[0]]))
        return cos

    @property
    def a_underline(self) -> np.ndarray:
        return 1.0 / self._cos()

    @property
    def a_t(self) -> np.ndarray:
        return self.a_underline - 1.0

    @property
    def b_t(self) -> np.ndarray:
        return np.tan(self.theta)

    @property
    def c_t(self) -> np.ndarray:
        return np.tan(self.theta)

    def structural_defect(self) -> float:
        """max |A^2 - B^2 - 1| over the diagonal."""
        if self.m == 0:
            return 0.0
        return float(np.max(np.abs(self.a_underline ** 2 - self.b_t * self.c_t - 1.0)))

    def non_resonance_margin(self) -> float:
        """Smallest distance of theta_j, theta_i + theta_j, theta_i - theta_j (i != j) to 2 pi Z."""
        theta = np.asarray(self.theta, dtype=float)
        margins = [float(np.min(_wrap(theta)))] if self.m else [np.inf]
        for i in range(self.m):
            for j in range(self.m):
                margins.append(float(_wrap(theta[i] + theta[j])))
                if i != j:
                    margins.append(float(_wrap(theta[i] - theta[j])))
        return min(margins)

    def check_non_resonance(self, margin: float = NON_RESONANCE_MARGIN) -> float:
        worst = self.non_resonance_margin()
        if worst < margin:
            raise NonResonanceError(f"elliptic angles {self.theta} resonant: margin {worst:.3e} < {margin:.1e}")
        return worst


def build_omega_matrix(data: EllipticNormalData) -> np.ndarray:
    """
    Linear part of the P = 0 map on (u, v), assembled from the generating blocks.

    Returns:
        2m x 2m matrix [[A - C A^-T B, C A^-T], [-A^-T B, A^-T]], which equals
        the rotation [[cos, sin], [-sin, cos]] blockwise.
    """
    if data.m and data.non_resonance_margin() < NON_RESONANCE_MARGIN:
        logger.warning(f"build_omega_matrix: resonant angles {data.theta}")
    a = np.diag(data.a_underline)
    b = np.diag(data.b_t)
    c = np.diag(data.c_t)
    a_inv_t = np.linalg.inv(a).T
    return np.block([[a - c @ a_inv_t @ b, c @ a_inv_t],
                     [-a_inv_t @ b, a_inv_t]])


@dataclass(frozen=True)
class GeneratingHamiltonian:
    """tH = tN + tP with tN = t h(y) + <A_t u, v> + 1/2<B_t u,u> + 1/2<C_t v,v>."""

    frequency: FrequencyMap
    normal: EllipticNormalData
    perturbation: FourierField
    epsilon: float
    norm_factor: float = 1.0

    @classmethod
    def build(cls, frequency: FrequencyMap, normal: EllipticNormalData, perturbation: FourierField,
              epsilon: float) -> "GeneratingHamiltonian":
        norm = weighted_norm(perturbation, 0.0, 1.0)
        factor = norm / epsilon if epsilon > 0 else 1.0
        return cls(frequency, normal, perturbation, float(epsilon), float(factor))

    @property
    def t(self) -> float:
        return self.normal.t

    @property
    def n(self) -> int:
        return self.frequency.n

    @property
    def m(self) -> int:
        return self.normal.m

    def normal_value(self, x, u, y, v):
        u2, y2, v2 = (np.atleast_2d(np.asarray(a)) for a in (u, y, v))
        value = (self.t * self.frequency.energy(y2)
                 + np.sum(self.normal.a_t * u2 * v2, axis=1)
                 + 0.5 * np.sum(self.normal.b_t * u2 ** 2, axis=1)
                 + 0.5 * np.sum(self.normal.c_t * v2 ** 2, axis=1))
        return value if np.ndim(y) > 1 else value[0]

    def value(self, x, u, y, v):
        return self.normal_value(x, u, y, v) + self.t * self.perturbation.evaluate(x, y, u, v)

    def perturbation_norm(self, s: float, r: float) -> float:
        return weighted_norm(self.perturbation, s, r)


@dataclass(frozen=True)
class SchemeModel:
    """Continuous H_eps = H0 + eps H1, H0 = h(y) + <Au,v> + 1/2<Bu,u> + 1/2<Cv,v>."""

    frequency: FrequencyMap
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    h1: FourierField
    epsilon: float
    order: int = 2
    m1: float = 0.0
    m2: float = 0.0
    l_star: float = 1.0

    @property
    def n(self) -> int:
        return self.frequency.n

    @property
    def m(self) -> int:
        return int(self.b.shape[0])

    def h0(self, x, u, y, v):
        u2, y2, v2 = (np.atleast_2d(np.asarray(arr)) for arr in (u, y, v))
        value = (self.frequency.energy(y2) + np.sum(self.a * u2 * v2, axis=1)
                 + 0.5 * np.sum(self.b * u2 ** 2, axis=1) + 0.5 * np.sum(self.c * v2 ** 2, axis=1))
        return value if np.ndim(y) > 1 else value[0]

    def hamiltonian(self, x, u, y, v):
        return self.h0(x, u, y, v) + self.epsilon * self.h1.evaluate(x, y, u, v)

    def normal_data(self, t: float) -> EllipticNormalData:
        """Elliptic angles of one implicit-midpoint step on the quadratic (u, v) part."""
        if np.any(self.a != 0) or np.any(self.b != self.c):
            raise ValueError("normal_data needs A = 0 and B = C")
        return EllipticNormalData(2.0 * np.arctan(0.5 * t * self.b), float(t))

    def structure_defect(self, rng: np.random.Generator, probes: int = 8) -> float:
        """
        Compare H0 on monomial probes with its declared blocks.

        Each probe switches on one coordinate group (y only, u only, v only, or a u_j v_j
        pair) so every term of H0 is checked in isolation.
        """
        worst = 0.0
        zeros_n, zeros_m = np.zeros((probes, self.n)), np.zeros((probes, self.m))
        x = rng.uniform(0.0, 2.0 * np.pi, size=(probes, self.n))
        y = self.frequency.sample(rng, probes)
        worst = max(worst, float(np.max(np.abs(self.h0(x, zeros_m, y, zeros_m) - self.frequency.energy(y)))))
        base = self.frequency.energy(zeros_n)
        for j in range(self.m):
            u = np.zeros((probes, self.m))
            v = np.zeros((probes, self.m))
            u[:, j] = rng.uniform(-1.0, 1.0, probes)
            only_u = base + 0.5 * self.b[j] * u[:, j] ** 2
            worst = max(worst, float(np.max(np.abs(self.h0(x, u, zeros_n, v) - only_u))))
            v[:, j] = rng.uniform(-1.0, 1.0, probes)
            expected = (only_u + self.a[j] * u[:, j] * v[:, j] + 0.5 * self.c[j] * v[:, j] ** 2)
            worst = max(worst, float(np.max(np.abs(self.h0(x, u, zeros_n, v) - expected))))
        return worst

    def perturbation_bound(self, epsilon: float, t: float) -> float:
        """sup |P'| <= M1 eps + 2n M2 l_* t^s for the scheme's perturbation."""
        return self.m1 * epsilon + 2 * self.n * self.m2 * self.l_star * t ** self.order


@dataclass(frozen=True)
class ModelPreset:
    name: str
    n: int
    m: int
    frequency: FrequencyMap
    rates: np.ndarray
    default_xi: np.ndarray
    perturbation: Callable  # (epsilon, k_max, drift) -> FourierField


def _quadratic_frequency(n: int, low: float, high: float) -> FrequencyMap:
    def derivative(xi, order):
        if order == 0:
            return np.asarray(xi, dtype=float).copy()
        if order == 1:
            return np.eye(n)
        return np.zeros((n,) * (order + 1))

    return FrequencyMap(
        n=n,
        energy=lambda y: 0.5 * np.sum(np.asarray(y) ** 2, axis=1),
        omega=lambda y: np.asarray(y).copy(),
        hessian=lambda y: np.broadcast_to(np.eye(n), (np.asarray(y).shape[0], n, n)).copy(),
        lipschitz_bound=1.0,
        domain_low=np.full(n, low),
        domain_high=np.full(n, high),
        margin=0.05,
        derivative=derivative,
    )


def _cubic_frequency() -> FrequencyMap:
    """h = y^3/3, omega = y^2: omega' vanishes at 0 while omega'' = 2."""

    def derivative(xi, order):
        xi = float(np.asarray(xi).reshape(-1)[0])
        values = {0: xi ** 2, 1: 2.0 * xi, 2: 2.0}
        return np.full((1,) * (order + 1), values.get(order, 0.0))

    return FrequencyMap(
        n=1,
        energy=lambda y: np.asarray(y)[:, 0] ** 3 / 3.0,
        omega=lambda y: np.asarray(y) ** 2,
        hessian=lambda y: 2.0 * np.asarray(y)[:, :, None],
        lipschitz_bound=2.0 * 0.55,
        domain_low=np.array([-0.5]),
        domain_high=np.array([0.5]),
        margin=0.05,
        derivative=derivative,
    )


def _cos_perturbation(n: int, m: int):
    def build(epsilon: float, k_max: int, drift: float) -> FourierField:
        zero = ((0,) * n, (0,) * m, (0,) * m)
        k1 = (1,) + (0,) * (n - 1)
        coefficients = {
            (k1,) + zero: 0.5 * epsilon,
            (tuple(-c for c in k1),) + zero: 0.5 * epsilon,
        }
        if drift:
            coefficients[((0,) * n, (1,) + (0,) * (n - 1), (0,) * m, (0,) * m)] = epsilon * drift
        return FourierField.from_terms(n, m, k_max, coefficients)

    return build


def _twist_2_1_perturbation(epsilon: float, k_max: int, drift: float) -> FourierField:
    zero = ((0, 0), (0,), (0,))
    u_squared = ((0, 0), (2,), (0,))
    coefficients = {
        ((1, 0),) + zero: 0.5 * epsilon,
        ((-1, 0),) + zero: 0.5 * epsilon,
        ((1, 1),) + zero: 0.25 * epsilon,
        ((-1, -1),) + zero: 0.25 * epsilon,
        ((0, 1),) + u_squared: 0.1 * epsilon,
        ((0, -1),) + u_squared: 0.1 * epsilon,
    }
    if drift:
        coefficients[((0, 0), (1, 0), (0,), (0,))] = epsilon * drift
    return FourierField.from_terms(2, 1, k_max, coefficients)


PRESETS = {
    "twist-1-1": ModelPreset(
        "twist-1-1", 1, 1, _quadratic_frequency(1, 0.2, 0.8), np.array([0.7]), np.array([0.5]),
        _cos_perturbation(1, 1)),
    "twist-2-1": ModelPreset(
        "twist-2-1", 2, 1, _quadratic_frequency(2, 0.3, 0.7), np.array([0.7]),
        np.array([0.5, 0.5 * (np.sqrt(5.0) - 1.0)]), _twist_2_1_perturbation),
    "ruessmann-degenerate-demo": ModelPreset(
        "ruessmann-degenerate-demo", 1, 1, _cubic_frequency(), np.array([0.7]), np.array([0.3]),
        _cos_perturbation(1, 1)),
}


def get_preset(name: str) -> ModelPreset:
    if name not in PRESETS:
        raise UnknownPresetError(f"Unknown preset '{name}'. Available: {sorted(PRESETS)}")
    return PRESETS[name]


def default_k_max(n: int) -> int:
    return 32 if n == 1 else 16


def standard_test_model(preset: str, epsilon: float = 1e-6, t: float = 0.1, drift: float = 0.0,
                        k_max: int = 0):
    """
    Build a fully populated twist-map model from a preset.

    Args:
        preset: One of twist-1-1, twist-2-1, ruessmann-degenerate-demo
        epsilon: Perturbation size
        t: Time step
        drift: Optional coefficient of an action-linear term eps * drift * y_1
        k_max: Fourier truncation radius (0 selects the default for n)

    Returns:
        (FrequencyMap, EllipticNormalData, GeneratingHamiltonian)
    """
    spec = get_preset(preset)
    k_max = k_max or default_k_max(spec.n)
    normal = EllipticNormalData.from_rates(spec.rates, t)
    perturbation = spec.perturbation(epsilon, k_max, drift)
    hamiltonian = GeneratingHamiltonian.build(spec.frequency, normal, perturbation, epsilon)
    logger.debug(f"Built preset {preset}: n={spec.n}, m={spec.m}, eps={epsilon}, t={t}, k_max={k_max}")
    return spec.frequency, normal, hamiltonian


def standard_scheme_model(preset: str, epsilon: float = 1e-3, drift: float = 0.0, k_max: int = 0) -> SchemeModel:
    """Continuous Hamiltonian H0 + eps H1 of a preset, with A = 0 and B = C."""
    spec = get_preset(preset)
    k_max = k_max or default_k_max(spec.n)
    h1 = spec.perturbation(1.0, k_max, drift)
    # sup |H1| over the domain, bounded by summing coefficient moduli at the box corners
    corners = np.concatenate([spec.frequency.domain_low, spec.frequency.domain_high])
    reach = np.max(np.abs(corners)) + spec.frequency.margin
    m1 = sum(float(np.sum(np.abs(coeffs))) * max(reach, 1.0) ** (sum(mono[0]) + sum(mono[1]) + sum(mono[2]))
             for mono, coeffs in h1.terms.items())
    return SchemeModel(spec.frequency, np.zeros(spec.m), spec.rates.copy(), spec.rates.copy(), h1,
                       float(epsilon), order=2, m1=m1)
