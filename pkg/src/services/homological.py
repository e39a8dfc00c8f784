"""
One KAM step at a fixed parameter xi.

The order-two jet R of the current perturbation is removed by solving the
homological equations L F = tR - N_hat mode by mode. The near-identity map
generated by G = -F pushes R out of the map, the leftover means N_hat go into
the normal form, and a linear normalizer restores the sec/tan structure of the
(u, v) block. The new perturbation is then measured from forward evaluations
of the conjugated map, not assembled symbolically.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from services.fourier import (DROP_TOL, FourierField, JetBlocks, angle_grid, grid_coefficients, mode_table,
                              project_collocation, truncate_order2, weighted_norm)
from services.model import EllipticNormalData
from services.sympmap import ConjugatedMap, LinearNormalizer, NearIdentityMap, solve_mixed

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
COMPLEX_STEP = 1e-20
NORMALIZE_TOL = 1e-13
QUADRATURE_NODES = 8


class SmallDivisorError(Exception):
    """Raised when a divisor falls below its Diophantine floor"""

    def __init__(self, condition: int, k, l: int, i: Optional[int], j: Optional[int],
                 divisor: float, threshold: float):
        self.condition = condition
        self.k = tuple(int(c) for c in k)
        self.l = int(l)
        self.i = i
        self.j = j
        self.divisor = divisor
        self.threshold = threshold
        super().__init__(f"small divisor (condition {condition}) at k={self.k}, l={self.l}, i={i}, j={j}: "
                         f"{divisor:.3e} < {threshold:.3e}")


class NormalizationError(Exception):
    """Raised when the normalizing Newton iteration diverges"""

    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual={residual:.3e})")


class QuadratureError(Exception):
    """Raised when the quadrature of the Taylor remainder disagrees with its direct value"""

    def __init__(self, defect: float, worst_point):
        self.defect = defect
        self.worst_point = worst_point
        super().__init__(f"quadrature residual {defect:.3e} at {worst_point}")


class KamStepError(Exception):
    """Raised when a KAM step cannot be accepted"""
    pass


def _modes_norm(modes: np.ndarray) -> np.ndarray:
    return np.abs(modes).sum(axis=1)


def divisor_threshold(modes: np.ndarray, t: float, gamma_v: float, tau: float) -> np.ndarray:
    """t gamma_v / (1 + |k|)^tau per mode."""
    return t * gamma_v / (1.0 + _modes_norm(modes)) ** tau


@dataclass
class DivisorLog:
    """Every divisor consumed during one homological solve."""

    rows: list = field(default_factory=list)

    def add(self, condition: int, modes: np.ndarray, l: np.ndarray, i, j, divisor: np.ndarray,
            threshold: np.ndarray):
        for k, li, d, th in zip(modes, l, divisor, threshold):
            self.rows.append((condition, tuple(int(c) for c in k), int(li), i, j, float(d), float(th)))

    @property
    def min_margin(self) -> float:
        return min((d - th for *_, d, th in self.rows), default=float("inf"))

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=["condition", "k", "l", "i", "j", "divisor", "threshold"])
        frame["margin"] = frame["divisor"] - frame["threshold"]
        return frame


def _check_divisors(log: Optional[DivisorLog], condition: int, modes: np.ndarray, phase: np.ndarray,
                    sigma: float, threshold: np.ndarray, i=None, j=None):
    """Distance of phase + sigma to 2 pi Z must stay above threshold."""
    shifted = phase + sigma
    l = np.round(shifted / TWO_PI)
    distance = np.abs(shifted - TWO_PI * l)
    if log is not None:
        log.add(condition, modes, l, i, j, distance, threshold)
    bad = np.flatnonzero(distance < threshold)
    if bad.size:
        worst = bad[np.argmin(distance[bad] - threshold[bad])]
        raise SmallDivisorError(condition, modes[worst], l[worst], i, j,
                                float(distance[worst]), float(threshold[worst]))


def solve_scalar_modes(r000: np.ndarray, r100: np.ndarray, t_omega, t: float, gamma_v: float, tau: float,
                       k_max: int, twist=None, log: Optional[DivisorLog] = None):
    """
    Solve the angle-only equations F000(x + t omega) - F000(x) = tR000 - [tR000] and
    F100(x + t omega) - F100(x) + t h'' grad F000(x + t omega) = tR100 - t omega_hat.

    Returns:
        (F000 (M,), F100 (M, n), mean of R000, omega_hat (n,))
    """
    t_omega = np.asarray(t_omega, dtype=float)
    n = t_omega.shape[0]
    modes = mode_table(n, k_max)
    twist = np.zeros((n, n)) if twist is None else np.asarray(twist, dtype=float)
    phase = modes @ t_omega
    nonzero = np.any(modes != 0, axis=1)
    threshold = divisor_threshold(modes, t, gamma_v, tau)
    _check_divisors(log, 1, modes[nonzero], phase[nonzero], 0.0, threshold[nonzero])

    rotation = np.exp(1j * phase)
    denominator = rotation[nonzero] - 1.0
    f000 = np.zeros(modes.shape[0], dtype=complex)
    f000[nonzero] = t * r000[nonzero] / denominator
    coupling = 1j * t * rotation[:, None] * (modes @ twist.T)
    f100 = np.zeros((modes.shape[0], n), dtype=complex)
    f100[nonzero] = (t * r100[nonzero] - coupling[nonzero] * f000[nonzero, None]) / denominator[:, None]

    zero = np.flatnonzero(~nonzero)[0]
    return f000, f100, complex(r000[zero]), np.real(r100[zero]).astype(float)


def uv_determinant(phase, theta):
    """det M_k of the 2x2 (F010, F001) system."""
    sec, tan = 1.0 / np.cos(theta), np.tan(theta)
    rotation = np.exp(1j * np.asarray(phase))
    return (sec * rotation - 1.0) * (rotation - sec) + tan * tan * rotation


def solve_uv_modes(r010: np.ndarray, r001: np.ndarray, t_omega, theta, t: float, gamma_v: float, tau: float,
                   k_max: int, log: Optional[DivisorLog] = None):
    """
    Solve the m decoupled 2x2 systems for the terms linear in u and v, k = 0 included.

    Returns:
        (F010 (M, m), F001 (M, m))
    """
    t_omega = np.asarray(t_omega, dtype=float)
    modes = mode_table(t_omega.shape[0], k_max)
    elliptic = EllipticNormalData(np.asarray(theta, dtype=float), t)
    a, b, c = elliptic.a_underline, elliptic.b_t, elliptic.c_t
    phase = modes @ t_omega
    rotation = np.exp(1j * phase)
    threshold = divisor_threshold(modes, t, gamma_v, tau)
    f010 = np.zeros_like(r010, dtype=complex)
    f001 = np.zeros_like(r001, dtype=complex)
    for j in range(elliptic.m):
        for sign in (1.0, -1.0):
            _check_divisors(log, 2, modes, phase, sign * elliptic.theta[j], threshold, j=j)
        m11, m12 = a[j] * rotation - 1.0, -b[j] * np.ones_like(rotation)
        m21, m22 = c[j] * rotation, rotation - a[j]
        det = m11 * m22 - m12 * m21
        floor = 4.0 * abs(a[j]) * (threshold / np.pi) ** 2
        bad = np.flatnonzero(np.abs(det) < floor)
        if bad.size:
            k = modes[bad[0]]
            raise SmallDivisorError(2, k, 0, None, j, float(abs(det[bad[0]])), float(floor[bad[0]]))
        rhs1, rhs2 = t * r010[:, j], t * r001[:, j]
        f010[:, j] = (m22 * rhs1 - m12 * rhs2) / det
        f001[:, j] = (-m21 * rhs1 + m11 * rhs2) / det
    return f010, f001


def _quadratic_L(f011, f020, f002, rotation, a, b, c):
    """
    Quadratic part of L F for matrix coefficients (M, m, m).

    f011[r, c] multiplies u_c v_r; f020 and f002 are the symmetric matrices of
    1/2<F020 u, u> and 1/2<F002 v, v>.
    """
    e = rotation[:, None, None]
    a_r, a_c = a[:, None], a[None, :]
    b_r, b_c = b[:, None], b[None, :]
    c_r, c_c = c[:, None], c[None, :]
    f011_t = np.swapaxes(f011, 1, 2)
    l11 = e * f011 * a_c + e * c_r * f020 * a_c - a_r * f011 - a_r * f002 * b_c
    l20 = e * a_r * a_c * f020 - f020 - b_r * b_c * f002 - b_r * f011 - f011_t * b_c
    l02 = e * c_r * c_c * f020 + e * f002 - a_r * a_c * f002 + e * f011 * c_c + e * c_r * f011_t
    return l11, l20, l02


def _pair_slots(r: int, c: int):
    """Unknowns and equations of one (r, c) block, r <= c."""
    if r == c:
        unknowns = [("011", r, r), ("020", r, r), ("002", r, r)]
        equations = [("11", r, r), ("20", r, r), ("02", r, r)]
    else:
        unknowns = [("011", r, c), ("011", c, r), ("020", r, c), ("002", r, c)]
        equations = [("11", r, c), ("11", c, r), ("20", r, c), ("02", r, c)]
    return unknowns, equations


def _unit_quadratic(slot, count: int, m: int):
    blocks = {name: np.zeros((count, m, m), dtype=complex) for name in ("011", "020", "002")}
    name, r, c = slot
    blocks[name][:, r, c] = 1.0
    if name != "011":
        blocks[name][:, c, r] = 1.0
    return blocks["011"], blocks["020"], blocks["002"]


def solve_quadratic_modes(r011: np.ndarray, r020: np.ndarray, r002: np.ndarray, t_omega, theta, t: float,
                          gamma_v: float, tau: float, k_max: int, log: Optional[DivisorLog] = None):
    """
    Solve for the quadratic terms, one small dense system per (mode, index pair).

    The diagonal k = 0 means [R011^jj], [R020^jj], [R002^jj] are not solved but
    returned as (A_hat, B_hat, C_hat) for the normal form.
    """
    t_omega = np.asarray(t_omega, dtype=float)
    modes = mode_table(t_omega.shape[0], k_max)
    count = modes.shape[0]
    elliptic = EllipticNormalData(np.asarray(theta, dtype=float), t)
    a, b, c = elliptic.a_underline, elliptic.b_t, elliptic.c_t
    m = elliptic.m
    phase = modes @ t_omega
    rotation = np.exp(1j * phase)
    threshold = divisor_threshold(modes, t, gamma_v, tau)
    nonzero = np.any(modes != 0, axis=1)
    zero = np.flatnonzero(~nonzero)[0]
    rhs_blocks = {"11": t * r011, "20": t * r020, "02": t * r002}
    f011 = np.zeros((count, m, m), dtype=complex)
    f020 = np.zeros((count, m, m), dtype=complex)
    f002 = np.zeros((count, m, m), dtype=complex)
    targets = {"011": f011, "020": f020, "002": f002}

    for r in range(m):
        for col in range(r, m):
            unknowns, equations = _pair_slots(r, col)
            theta_sum = elliptic.theta[r] + elliptic.theta[col]
            mask = nonzero if r == col else np.ones(count, dtype=bool)
            for sign in (1.0, -1.0):
                _check_divisors(log, 3, modes[mask], phase[mask], sign * theta_sum, threshold[mask], r, col)
                if r != col:
                    theta_diff = elliptic.theta[r] - elliptic.theta[col]
                    _check_divisors(log, 4, modes, phase, sign * theta_diff, threshold, r, col)

            system = np.zeros((count, len(equations), len(unknowns)), dtype=complex)
            for q, slot in enumerate(unknowns):
                images = dict(zip(("11", "20", "02"), _quadratic_L(*_unit_quadratic(slot, count, m),
                                                                   rotation, a, b, c)))
                for e_idx, (name, er, ec) in enumerate(equations):
                    system[:, e_idx, q] = images[name][:, er, ec]
            rhs = np.stack([rhs_blocks[name][:, er, ec] for name, er, ec in equations], axis=1)
            try:
                solution = np.linalg.solve(system[mask], rhs[mask][..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise SmallDivisorError(3, modes[mask][0], 0, r, col, 0.0, float(threshold[0]))
            for q, (name, ur, uc) in enumerate(unknowns):
                targets[name][mask, ur, uc] = solution[:, q]
                if name != "011":
                    targets[name][mask, uc, ur] = solution[:, q]

    diag = np.arange(m)
    a_hat = np.real(r011[zero, diag, diag]).astype(float)
    b_hat = np.real(r020[zero, diag, diag]).astype(float)
    c_hat = np.real(r002[zero, diag, diag]).astype(float)
    return f011, f020, f002, a_hat, b_hat, c_hat


@dataclass(frozen=True)
class HomologicalSolution:
    F: FourierField
    blocks: JetBlocks
    omega_hat: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    c_hat: np.ndarray
    divisor_log: DivisorLog

    @property
    def min_divisor_margin(self) -> float:
        return self.divisor_log.min_margin


def solve_homological(jet: JetBlocks, normal: "NormalForm", gamma_v: float, tau: float,
                      drop_tol: float = DROP_TOL) -> HomologicalSolution:
    """All three mode-wise solves for one jet."""
    t = normal.t
    t_omega = t * normal.omega
    log = DivisorLog()
    f000, f100, _, omega_hat = solve_scalar_modes(jet.p000, jet.p100, t_omega, t, gamma_v, tau, jet.k_max,
                                                  twist=normal.twist, log=log)
    f010, f001 = solve_uv_modes(jet.p010, jet.p001, t_omega, normal.theta, t, gamma_v, tau, jet.k_max, log)
    f011, f020, f002, a_hat, b_hat, c_hat = solve_quadratic_modes(
        jet.p011, jet.p020, jet.p002, t_omega, normal.theta, t, gamma_v, tau, jet.k_max, log)
    blocks = JetBlocks(jet.n, jet.m, jet.k_max, f000, f100, f010, f001, f011, f020, f002)
    generator = blocks.to_field().symmetrize().prune(drop_tol)
    return HomologicalSolution(generator, blocks, omega_hat, a_hat, b_hat, c_hat, log)


def apply_linear_operator(blocks: JetBlocks, t_omega, theta, t: float, twist=None) -> JetBlocks:
    """Re-apply the L operator to solved coefficients (operator residual checks)."""
    t_omega = np.asarray(t_omega, dtype=float)
    n = t_omega.shape[0]
    modes = mode_table(n, blocks.k_max)
    twist = np.zeros((n, n)) if twist is None else np.asarray(twist, dtype=float)
    elliptic = EllipticNormalData(np.asarray(theta, dtype=float), t)
    a, b, c = elliptic.a_underline, elliptic.b_t, elliptic.c_t
    rotation = np.exp(1j * (modes @ t_omega))
    shift = (rotation - 1.0)
    l000 = shift * blocks.p000
    l100 = shift[:, None] * blocks.p100 + 1j * t * rotation[:, None] * (modes @ twist.T) * blocks.p000[:, None]
    l010 = (a * rotation[:, None] - 1.0) * blocks.p010 - b * blocks.p001
    l001 = c * rotation[:, None] * blocks.p010 + (rotation[:, None] - a) * blocks.p001
    l11, l20, l02 = _quadratic_L(blocks.p011, blocks.p020, blocks.p002, rotation, a, b, c)
    return JetBlocks(blocks.n, blocks.m, blocks.k_max, l000, l100, l010, l001, l11, l20, l02)


def homological_rhs(jet: JetBlocks, t: float) -> JetBlocks:
    """tR with the means that move into the normal form removed."""
    modes = mode_table(jet.n, jet.k_max)
    zero = np.flatnonzero(~np.any(modes != 0, axis=1))[0]
    out = JetBlocks(jet.n, jet.m, jet.k_max, *(t * np.array(block, dtype=complex) for block in (
        jet.p000, jet.p100, jet.p010, jet.p001, jet.p011, jet.p020, jet.p002)))
    out.p000[zero] = 0.0
    out.p100[zero] = 0.0
    diag = np.arange(jet.m)
    for block in (out.p011, out.p020, out.p002):
        block[zero, diag, diag] = 0.0
    return out


def _dense_slots(n: int, m: int, k_max: int) -> list:
    modes = mode_table(n, k_max)
    slots = []
    for idx, k in enumerate(modes):
        is_zero = not np.any(k)
        if not is_zero:
            slots.append(("p000", idx, ()))
            slots.extend(("p100", idx, (a,)) for a in range(n))
        slots.extend(("p010", idx, (a,)) for a in range(m))
        slots.extend(("p001", idx, (a,)) for a in range(m))
        for r in range(m):
            for c in range(m):
                if not (is_zero and r == c):
                    slots.append(("p011", idx, (r, c)))
        for name in ("p020", "p002"):
            for r in range(m):
                for c in range(r, m):
                    if not (is_zero and r == c):
                        slots.append((name, idx, (r, c)))
    return slots


def _unit_blocks(n: int, m: int, k_max: int, slot) -> JetBlocks:
    blocks = JetBlocks.zeros(n, m, k_max)
    name, idx, where = slot
    target = getattr(blocks, name)
    target[(idx,) + where] = 1.0
    if name in ("p020", "p002"):
        target[(idx,) + where[::-1]] = 1.0
    return blocks


def assemble_dense_system(jet: JetBlocks, t_omega, theta, t: float, twist=None):
    """
    All homological equations as one dense linear system (oracle for the mode-wise solver).

    Returns:
        (matrix, rhs, slots) where slots lists (block, mode index, entry) per unknown
    """
    slots = _dense_slots(jet.n, jet.m, jet.k_max)
    rhs_blocks = homological_rhs(jet, t)
    matrix = np.zeros((len(slots), len(slots)), dtype=complex)
    for col, slot in enumerate(slots):
        image = apply_linear_operator(_unit_blocks(jet.n, jet.m, jet.k_max, slot), t_omega, theta, t, twist)
        for row, (name, idx, where) in enumerate(slots):
            matrix[row, col] = getattr(image, name)[(idx,) + where]
    rhs = np.array([getattr(rhs_blocks, name)[(idx,) + where] for name, idx, where in slots])
    return matrix, rhs, slots


def dense_solve(jet: JetBlocks, t_omega, theta, t: float, twist=None) -> JetBlocks:
    matrix, rhs, slots = assemble_dense_system(jet, t_omega, theta, t, twist)
    solution = np.linalg.solve(matrix, rhs)
    blocks = JetBlocks.zeros(jet.n, jet.m, jet.k_max)
    for value, (name, idx, where) in zip(solution, slots):
        target = getattr(blocks, name)
        target[(idx,) + where] = value
        if name in ("p020", "p002"):
            target[(idx,) + where[::-1]] = value
    return blocks


@dataclass(frozen=True)
class NormalizationPair:
    lam: np.ndarray
    beta_norm: np.ndarray


def normalize(a_bar, b_bar, c_bar, tol: float = NORMALIZE_TOL, max_iter: int = 50):
    """
    Find (lambda, beta) per index so that the conjugated (u, v) block is a rotation.

    Args:
        a_bar, b_bar, c_bar: Diagonals of the perturbed generating blocks

    Returns:
        (NormalizationPair, theta_plus)
    """
    a_bar, b_bar, c_bar = (np.asarray(arr, dtype=float) for arr in (a_bar, b_bar, c_bar))
    m = a_bar.shape[0]
    lam, beta, theta_plus = np.ones(m), np.zeros(m), np.zeros(m)
    for j in range(m):
        a, b, c = a_bar[j], b_bar[j], c_bar[j]
        big11, big12, big21, big22 = (a * a - b * c) / a, c / a, -b / a, 1.0 / a
        lj, bj = 1.0, 0.0
        residual = np.inf
        for _ in range(max_iter):
            m12 = -lj * bj * big11 + lj * lj * big12 - bj * bj * big21 + lj * bj * big22
            m21 = big21 / lj ** 2
            m22 = big22 - bj * big21 / lj
            res = np.array([m12 + m21, m21 * m21 + m22 * m22 - 1.0])
            residual = float(np.max(np.abs(res)))
            if residual <= tol:
                break
            dm21_dl = -2.0 * big21 / lj ** 3
            dm22_dl, dm22_db = bj * big21 / lj ** 2, -big21 / lj
            dm12_dl = -bj * big11 + 2.0 * lj * big12 + bj * big22
            dm12_db = -lj * big11 - 2.0 * bj * big21 + lj * big22
            jac = np.array([[dm12_dl + dm21_dl, dm12_db],
                            [2.0 * m21 * dm21_dl + 2.0 * m22 * dm22_dl, 2.0 * m22 * dm22_db]])
            try:
                delta = np.linalg.solve(jac, res)
            except np.linalg.LinAlgError:
                raise NormalizationError("normalization diverged: singular Jacobian", residual)
            lj, bj = lj - delta[0], bj - delta[1]
            if not (np.isfinite(lj) and np.isfinite(bj)) or lj <= 0:
                raise NormalizationError("normalization diverged", residual)
        else:
            raise NormalizationError("normalization diverged", residual)
        lam[j], beta[j] = lj, bj
        theta_plus[j] = np.arctan2(-big21 / lj ** 2, big22 - bj * big21 / lj)
    return NormalizationPair(lam, beta), theta_plus


@dataclass(frozen=True)
class NormalForm:
    """Frequencies omega_v, elliptic angles theta_v, and the fixed twist h''(xi)."""

    omega: np.ndarray
    theta: np.ndarray
    twist: np.ndarray
    t: float

    @property
    def n(self) -> int:
        return int(self.omega.shape[0])

    @property
    def m(self) -> int:
        return int(self.theta.shape[0])

    @property
    def elliptic(self) -> EllipticNormalData:
        return EllipticNormalData(np.asarray(self.theta, dtype=float), self.t)


def measure_jet(map_, normal: NormalForm, k_max: int, drop_tol: float = DROP_TOL,
                points: Optional[int] = None) -> FourierField:
    """
    Order-two jet of the perturbation of a map at Y = u = V = 0.

    The map is probed through its mixed-variable generating function on an angle
    grid; quadratic coefficients come from complex-step derivatives in u and V.
    """
    n, m, t = normal.n, normal.m, normal.t
    points = points or 2 * k_max + 2
    grid = angle_grid(n, points)
    count = grid.shape[0]
    elliptic = normal.elliptic
    a_under, b, c = elliptic.a_underline, elliptic.b_t, elliptic.c_t
    zeros_n, zeros_m = np.zeros((count, n)), np.zeros((count, m))
    modes = mode_table(n, k_max)

    def coefficients(values):
        return grid_coefficients(values, n, points, k_max)

    base = solve_mixed(map_, grid, zeros_m, zeros_n, zeros_m, a_under, b)
    spectrum = coefficients(base.grad_x)
    norm2 = np.sum(modes ** 2, axis=1)
    nonzero = norm2 > 0
    jet = JetBlocks.zeros(n, m, k_max)
    jet.p000[nonzero] = np.sum(np.conj(1j * modes[nonzero]) * spectrum[nonzero], axis=1) / norm2[nonzero] / t
    jet.p100[:] = coefficients((base.grad_y - t * normal.omega) / t)
    jet.p010[:] = coefficients(base.grad_u / t)
    jet.p001[:] = coefficients(base.grad_v / t)

    for col in range(m):
        step = np.zeros((count, m), dtype=complex)
        step[:, col] = 1j * COMPLEX_STEP
        delta = np.zeros(m)
        delta[col] = 1.0
        probe = solve_mixed(map_, grid, step, zeros_n, zeros_m.astype(complex), a_under, b)
        jet.p020[:, :, col] = coefficients((np.imag(probe.grad_u) / COMPLEX_STEP - b * delta) / t)
        jet.p011[:, :, col] = coefficients((np.imag(probe.grad_v) / COMPLEX_STEP - (a_under - 1.0) * delta) / t)
        probe = solve_mixed(map_, grid, zeros_m.astype(complex), zeros_n, step, a_under, b)
        jet.p002[:, :, col] = coefficients((np.imag(probe.grad_v) / COMPLEX_STEP - c * delta) / t)

    symmetric = replace(jet, p020=0.5 * (jet.p020 + np.swapaxes(jet.p020, 1, 2)),
                        p002=0.5 * (jet.p002 + np.swapaxes(jet.p002, 1, 2)))
    return symmetric.to_field().symmetrize().prune(drop_tol)


def _collocation_nodes(dim: int, per_axis: int, radius: float) -> np.ndarray:
    axis = radius * np.cos(np.pi * (np.arange(per_axis) + 0.5) / per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _dot(blocks_a, blocks_b) -> np.ndarray:
    return sum(np.sum(a * b, axis=1) for a, b in zip(blocks_a, blocks_b))


def remainder_Q(current_map, normal: NormalForm, generator: FourierField, k_max: int, radius: float = 0.5,
                per_axis: int = 5, max_degree: int = 4, points: Optional[int] = None,
                drop_tol: float = DROP_TOL, return_parts: bool = False):
    """
    Second-order remainder Q = tH_bar - tH - (G(image) - G(source)) of conjugating by psi_G.

    tH_bar is the generating function of psi^-1 o map o psi, tH that of the map;
    image and source are taken along the normal-form map. The Taylor part Q1 is
    integrated with Gauss-Legendre nodes and cross-checked against its direct
    value. Both are projected onto FourierFields by collocation.
    """
    n, m, t = normal.n, normal.m, normal.t
    points = points or 2 * k_max + 2
    grid = angle_grid(n, points)
    nodes = _collocation_nodes(n + 2 * m, per_axis, radius)
    count, node_count = grid.shape[0], nodes.shape[0]
    x = np.repeat(grid, node_count, axis=0)
    tiled = np.tile(nodes, (count, 1))
    y, u, v = tiled[:, :n], tiled[:, n:n + m], tiled[:, n + m:]
    elliptic = normal.elliptic
    a_under, b, c = elliptic.a_underline, elliptic.b_t, elliptic.c_t

    outer = ConjugatedMap(current_map, [NearIdentityMap(generator)])
    bar = solve_mixed(outer, x, u, y, v, a_under, b, trace=True)
    _, moved, after, _ = bar.trace
    delta = (moved.x - x, moved.u - u, after.y - y, after.v - v)
    start = solve_mixed(current_map, x, u, y, v, a_under, b)
    start_grad = (start.grad_x, start.grad_u, start.grad_y, start.grad_v)

    nodes_s, weights_s = np.polynomial.legendre.leggauss(QUADRATURE_NODES)
    taylor = np.zeros(x.shape[0])
    for s, w in zip(0.5 * (nodes_s + 1.0), 0.5 * weights_s):
        point = solve_mixed(current_map, x + s * delta[0], u + s * delta[1], y + s * delta[2],
                            v + s * delta[3], a_under, b)
        grad = (point.grad_x, point.grad_u, point.grad_y, point.grad_v)
        taylor -= w * _dot([g - g0 for g, g0 in zip(grad, start_grad)], delta)

    end = solve_mixed(current_map, x + delta[0], u + delta[1], y + delta[2], v + delta[3], a_under, b)
    direct = start.value + _dot(start_grad, delta) - end.value
    defect = np.abs(taylor - direct)
    tolerance = 1e-12 + 1e-6 * float(np.max(np.abs(taylor)))
    if float(np.max(defect)) > tolerance:
        worst = int(np.argmax(defect))
        point = np.concatenate([x[worst], u[worst], y[worst], v[worst]])
        logger.error(f"Remainder quadrature failed: defect {defect[worst]:.3e}")
        raise QuadratureError(float(defect[worst]), point)

    x_image = x + t * (normal.omega + y @ normal.twist.T)
    u_image = a_under * u + c * v
    v_source = a_under * v + b * u
    linear = generator.evaluate(x_image, y, u_image, v) - generator.evaluate(x, y, u, v_source)
    total = bar.value - start.value - linear

    q_field = project_collocation(total.reshape(count, node_count), n, m, points, nodes, k_max,
                                  max_degree, radius, drop_tol)
    logger.debug(f"Remainder: max |Q| = {np.max(np.abs(total)):.3e}, max |Q1| = {np.max(np.abs(taylor)):.3e}")
    if not return_parts:
        return q_field
    q1_field = project_collocation(taylor.reshape(count, node_count), n, m, points, nodes, k_max,
                                   max_degree, radius, drop_tol)
    return q_field, q1_field


@dataclass(frozen=True)
class KamConstants:
    """Schedule constants; gamma0 = gamma^((nbar+1)L) and rho0 = s0/20."""

    gamma: float
    tau: float
    nbar: int
    L: int
    K0: int
    s0: float
    r0: float
    eta_max: float = 1.0

    @classmethod
    def build(cls, n: int, gamma: float, nbar: int, tau: float = 0.0, L: int = 2, K0: int = 10,
              s0: float = 0.5, r0: float = 1.0, eta_max: float = 1.0) -> "KamConstants":
        if tau <= 0:
            tau = max((n + 2) * (nbar + 1), (n + 2) * L + 1) + 1
        return cls(float(gamma), float(tau), int(nbar), int(L), int(K0), float(s0), float(r0), float(eta_max))

    @property
    def exponent(self) -> int:
        return (self.nbar + 1) * self.L

    @property
    def nu_bar(self) -> int:
        return self.nbar + 1

    def nu(self, n: int) -> float:
        return self.tau * (self.nbar + 1) + self.nbar + n

    @property
    def gamma0(self) -> float:
        return self.gamma ** self.exponent

    @property
    def rho0(self) -> float:
        return self.s0 / 20.0

    def rho(self, v: int) -> float:
        return self.rho0 / 2.0 ** v

    def gamma_v(self, v: int) -> float:
        return self.gamma0 / 2.0 ** (self.exponent * v)

    def s(self, v: int) -> float:
        value = self.s0
        for step in range(v):
            value -= 5.0 * self.rho(step)
        return value

    def eta(self, eps: float, v: int, n: int) -> float:
        if eps <= 0:
            return self.eta_max
        scale = self.gamma_v(v) ** self.nu_bar * self.rho(v) ** self.nu(n)
        if scale <= 0:
            return self.eta_max
        return min((eps / scale) ** (1.0 / 3.0), self.eta_max)


@dataclass(frozen=True)
class KamProblem:
    """What kam_step needs besides the state: the centred base map and solver settings."""

    base: object
    xi: np.ndarray
    k_max: int
    drop_tol: float = DROP_TOL
    track_remainder: bool = False
    remainder_radius: float = 0.5


@dataclass(frozen=True)
class KamState:
    v: int
    s: float
    r: float
    rho: float
    gamma_v: float
    eps: float
    eta: float
    normal: NormalForm
    perturbation: FourierField
    transforms: tuple
    constants: KamConstants
    trace: tuple = ()
    converged: bool = False

    def current_map(self, problem: KamProblem):
        return ConjugatedMap(problem.base, self.transforms) if self.transforms else problem.base


def step_record(state: KamState, min_margin: float = float("inf"), **extra) -> dict:
    record = {
        "v": state.v, "s_v": state.s, "r_v": state.r, "rho_v": state.rho, "gamma_v": state.gamma_v,
        "eps_v": state.eps, "eta_v": state.eta, "min_divisor_margin": min_margin,
        "omega": [float(w) for w in state.normal.omega], "theta": [float(th) for th in state.normal.theta],
        "b_t": [float(b) for b in np.tan(state.normal.theta)],
    }
    record.update(extra)
    return record


def kam_step(state: KamState, problem: KamProblem) -> KamState:
    """
    truncate -> solve -> normalize -> conjugate -> measure the new perturbation.

    The new perturbation is read off the conjugated map itself, so it is tP~ + Q
    re-expanded at the new normal form, up to grading two. With track_remainder
    the grading > 2 part of the measured Q is carried as well. The record keeps
    the weighted norm of everything drop_tol removed (eps_dropped), so an
    eps_next of zero always comes with the size of what was below resolution.

    Raises:
        SmallDivisorError, NormalizationError: propagated from the solves
        KamStepError: when the new norm does not contract
    """
    normal, constants = state.normal, state.constants
    t, n = normal.t, normal.n
    jet_field, _ = truncate_order2(state.perturbation)
    jet = JetBlocks.from_field(jet_field)
    solution = solve_homological(jet, normal, state.gamma_v, constants.tau, problem.drop_tol)

    elliptic = normal.elliptic
    a_bar = elliptic.a_underline + t * solution.a_hat
    b_bar = elliptic.b_t + t * solution.b_hat
    c_bar = elliptic.c_t + t * solution.c_hat
    pair, theta_plus = normalize(a_bar, b_bar, c_bar)
    generator = solution.F.scale(-1.0)
    transforms = state.transforms + (NearIdentityMap(generator), LinearNormalizer(pair.lam, pair.beta_norm))
    normal_plus = NormalForm(normal.omega + solution.omega_hat, theta_plus, normal.twist, t)

    v_next = state.v + 1
    eta = constants.eta(state.eps, state.v, n)
    r_next = eta * state.r
    s_next = state.s - 5.0 * state.rho
    if s_next <= 0:
        raise KamStepError(f"analyticity strip exhausted at step {v_next}: s = {s_next:.3e}")

    extra = {}
    higher = FourierField.zero(n, normal.m, problem.k_max)
    if problem.track_remainder and generator.terms:
        q_field = remainder_Q(state.current_map(problem), normal, generator, problem.k_max,
                              radius=problem.remainder_radius, drop_tol=problem.drop_tol)
        higher = truncate_order2(q_field)[1].scale(1.0 / t)
        extra["remainder_norm"] = weighted_norm(q_field, 0.0, problem.remainder_radius) / t
        extra["higher_norm"] = weighted_norm(higher, s_next, r_next)

    measured = measure_jet(ConjugatedMap(problem.base, transforms), normal_plus, problem.k_max, drop_tol=0.0)
    kept = measured.prune(problem.drop_tol)
    eps_dropped = weighted_norm(measured - kept, s_next, r_next)
    perturbation = kept + higher if higher.terms else kept
    eps_next = weighted_norm(perturbation, s_next, r_next)
    record = step_record(state, solution.min_divisor_margin, eps_next=eps_next, eps_dropped=eps_dropped,
                         theta_shift=float(np.max(np.abs(theta_plus - normal.theta), initial=0.0)), **extra)
    logger.debug(f"Step {state.v}: eps {state.eps:.3e} -> {eps_next:.3e}, "
                 f"min divisor margin {solution.min_divisor_margin:.3e}")
    if not perturbation.terms:
        logger.info(f"Step {state.v}: measured jet below coefficient resolution {problem.drop_tol:.0e} "
                    f"(dropped weighted norm {eps_dropped:.3e})")
    if state.eps > 0 and eps_next >= state.eps:
        raise KamStepError(f"norm did not contract at step {state.v}: {eps_next:.3e} >= {state.eps:.3e}")

    return replace(state, v=v_next, s=s_next, r=r_next, rho=constants.rho(v_next),
                   gamma_v=constants.gamma_v(v_next), eps=eps_next, eta=constants.eta(eps_next, v_next, n),
                   normal=normal_plus, perturbation=perturbation, transforms=transforms,
                   trace=state.trace + (record,))
