import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd

from services.homological import KamProblem, KamState
from services.kamflow import KamIterationError, KamSettings, evaluate_conjugacy, run_iteration, schedule_constants
from services.model import SchemeModel, default_k_max, standard_test_model
from services.resonance import fit_power_law, screen_small_divisors
from services.sympmap import ImplicitSolveError, MidpointScheme, PhasePoint, TwistMap, reduce_angle

# Get logger for this module
logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
MIN_ORBIT = 1000
SURVIVAL_COLUMNS = ["eps", "t", "screen_pass", "converged", "residual_ok", "fraction"]


class SchemeComparisonError(Exception):
    """Raised when one of the two pipelines of a step-size comparison fails"""

    def __init__(self, label: str, cause: Exception):
        self.label = label
        super().__init__(f"{label}: {str(cause)}")


@dataclass(frozen=True)
class RotationEstimate:
    rotation: np.ndarray
    error: float


def _bump_weights(count: int) -> np.ndarray:
    s = (np.arange(count) + 0.5) / count
    weights = np.exp(-1.0 / (s * (1.0 - s)))
    return weights / weights.sum()


def _weighted_average(increments: np.ndarray) -> np.ndarray:
    return _bump_weights(increments.shape[0]) @ increments


def rotation_vector(lifted_angles) -> RotationEstimate:
    """
    Rotation per step from lifted angles, shape (N + 1, n).

    Weighted Birkhoff average of the increments with the bump exp(-1/(s(1-s)));
    the error estimate compares the two halves of the orbit.
    """
    angles = np.asarray(lifted_angles, dtype=float)
    if angles.ndim == 1:
        angles = angles[:, None]
    if not np.all(np.isfinite(angles)):
        raise ValueError("rotation_vector: orbit contains non-finite angles")
    if angles.shape[0] - 1 < MIN_ORBIT:
        raise ValueError(f"rotation_vector: orbit needs at least {MIN_ORBIT} steps, got {angles.shape[0] - 1}")
    increments = np.diff(angles, axis=0)
    rotation = _weighted_average(increments)
    half = increments.shape[0] // 2
    error = float(np.max(np.abs(_weighted_average(increments[:half]) - _weighted_average(increments[half:]))))
    return RotationEstimate(rotation, error)


def _absolute_map(base):
    if isinstance(base, TwistMap):
        return TwistMap(base.hamiltonian, tol=base.tol, max_iter=base.max_iter)
    if isinstance(base, MidpointScheme):
        return MidpointScheme(base.model, base.t, tol=base.tol, max_iter=base.max_iter)
    raise TypeError(f"no absolute form for {type(base).__name__}")


def _phase_gap(a: PhasePoint, b: PhasePoint) -> float:
    """Max of component sup-norms, angles compared on the cover and then reduced."""
    dx = a.x - b.x
    dx = reduce_angle(dx + np.pi) - np.pi
    parts = [np.abs(dx), np.abs(a.u - b.u), np.abs(a.y - b.y), np.abs(a.v - b.v)]
    return float(max((np.max(p) for p in parts if p.size), default=0.0))


def torus_samples(n: int, n_phi: int) -> np.ndarray:
    """n_phi equispaced angles per axis (n_phi^n points)."""
    axes = [TWO_PI * np.arange(n_phi) / n_phi] * n
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def invariance_residual(state: KamState, problem: KamProblem, n_phi: int = 64, omega_offset: float = 0.0,
                        absolute: bool = False) -> float:
    """
    max over phi of |F(Psi(phi)) - Psi(phi + t omega_inf)| for the converged conjugacy Psi.

    omega_offset shifts omega_inf (negative control). With absolute=True the uncentred
    map is applied to y = xi + Y.
    """
    phi = torus_samples(state.normal.n, n_phi)
    t = state.normal.t
    torus = evaluate_conjugacy(state, problem, phi)
    target = evaluate_conjugacy(state, problem, phi + t * (state.normal.omega + omega_offset))
    if absolute:
        image = torus + _absolute_map(problem.base).step(torus).dz
    else:
        local = PhasePoint(torus.x, torus.u, torus.y - problem.xi, torus.v)
        image = torus + problem.base.step(local).dz
    return _phase_gap(image, target)


@dataclass(frozen=True)
class TwoStepComparison:
    t1: float
    t2: float
    omega_diff: float
    psi_diff: float
    omega1: np.ndarray
    omega2: np.ndarray


def _run_labeled(model: SchemeModel, xi, settings: KamSettings, t: float):
    try:
        state, _, problem = run_iteration(model, xi, settings, t=t)
    except (KamIterationError, ImplicitSolveError) as e:
        logger.error(f"Scheme pipeline at t={t} failed: {str(e)}")
        raise SchemeComparisonError(f"t={t}", e) from e
    if not state.converged:
        raise SchemeComparisonError(f"t={t}", RuntimeError(f"no convergence, eps={state.eps:.3e}"))
    return state, problem


def scheme_two_step_compare(model: SchemeModel, xi, t1: float, t2: float, settings: Optional[KamSettings] = None,
                            n_phi: int = 16, runs: Optional[dict] = None) -> TwoStepComparison:
    """
    Run the KAM pipeline on the implicit midpoint scheme at steps t1 and t2.

    Returns the difference of the limit frequencies and the sup difference of the two
    conjugacies on a torus grid. runs caches pipeline results by step.
    """
    settings = settings or KamSettings.from_config()
    runs = {} if runs is None else runs
    for t in (t1, t2):
        if t not in runs:
            runs[t] = _run_labeled(model, xi, settings, t)
    (state1, problem1), (state2, problem2) = runs[t1], runs[t2]
    omega_diff = float(np.max(np.abs(state1.normal.omega - state2.normal.omega)))
    phi = torus_samples(model.n, n_phi)
    psi_diff = _phase_gap(evaluate_conjugacy(state1, problem1, phi), evaluate_conjugacy(state2, problem2, phi))
    logger.debug(f"t1={t1}, t2={t2}: |omega diff|={omega_diff:.3e}, |Psi diff|={psi_diff:.3e}")
    return TwoStepComparison(t1, t2, omega_diff, psi_diff, state1.normal.omega, state2.normal.omega)


def scheme_ladder(model: SchemeModel, xi, ladder, settings: Optional[KamSettings] = None):
    """
    Two-step comparisons on consecutive pairs of a decreasing t-ladder.

    Returns:
        (DataFrame t1,t2,omega_diff,psi_diff,scale,ratio, fitted exponent of omega_diff against scale)
    """
    logger.info("=== Scheme step-size ladder ===")
    ladder = sorted((float(t) for t in ladder), reverse=True)
    if len(ladder) < 2:
        raise ValueError("scheme_ladder needs at least two step sizes")
    half_order = model.order / 2.0
    runs, rows = {}, []
    for t1, t2 in zip(ladder[:-1], ladder[1:]):
        result = scheme_two_step_compare(model, xi, t1, t2, settings, runs=runs)
        scale = t1 ** half_order - t2 ** half_order
        rows.append({"t1": t1, "t2": t2, "omega_diff": result.omega_diff, "psi_diff": result.psi_diff,
                     "scale": scale, "ratio": result.omega_diff / scale})
        logger.info(f"t1={t1}, t2={t2}: omega diff {result.omega_diff:.3e}, ratio {rows[-1]['ratio']:.3e}")
    frame = pd.DataFrame(rows)
    try:
        exponent = fit_power_law(frame["scale"], frame["omega_diff"])[0]
    except ValueError:
        exponent = float("nan")
    return frame, exponent


@dataclass(frozen=True)
class SurvivalCell:
    eps: float
    t: float
    screened: np.ndarray
    converged: np.ndarray
    residual_ok: np.ndarray

    def row(self) -> dict:
        count = max(self.screened.shape[0], 1)
        survivors = self.screened & self.converged & self.residual_ok
        return {"eps": self.eps, "t": self.t, "screen_pass": float(self.screened.sum()) / count,
                "converged": float(self.converged.sum()) / count,
                "residual_ok": float(self.residual_ok.sum()) / count,
                "fraction": float(survivors.sum()) / count}


def _survival_cell(preset: str, eps: float, t: float, xis: np.ndarray, settings: KamSettings,
                   drift: float, residual_tol: float, n_phi: int) -> SurvivalCell:
    frequency, normal, hamiltonian = standard_test_model(preset, eps, t, drift, settings.k_max)
    k_max = settings.k_max or default_k_max(frequency.n)
    constants = schedule_constants(frequency, settings)
    count = xis.shape[0]
    screened, converged, residual_ok = (np.zeros(count, dtype=bool) for _ in range(3))
    for index, xi in enumerate(xis):
        report = screen_small_divisors(frequency.omega_at(xi), normal.theta, xi, constants.gamma0, constants.tau,
                                       t, k_max)
        screened[index] = report.passed
        if not report.passed:
            continue
        try:
            state, _, problem = run_iteration(hamiltonian, xi, settings)
        except (KamIterationError, ImplicitSolveError) as e:
            logger.debug(f"eps={eps}, t={t}, xi={xi}: KAM failed ({str(e)})")
            continue
        converged[index] = state.converged
        if state.converged:
            residual_ok[index] = invariance_residual(state, problem, n_phi) <= residual_tol
    return SurvivalCell(eps, t, screened, converged, residual_ok)


def survival_sweep(preset: str, eps_grid, t_grid, gamma: float, xi_samples: int = 8,
                   settings: Optional[KamSettings] = None, drift: float = 0.0, residual_tol: float = 1e-8,
                   n_phi: int = 16, threads: int = 1, rng: Optional[np.random.Generator] = None) -> pd.DataFrame:
    """
    Fraction of xi-samples that pass the screen, converge and certify, per (eps, t) cell.

    The same xi-samples are used in every cell; rows come back in grid order.
    """
    eps_grid, t_grid = list(eps_grid), list(t_grid)
    if not eps_grid or not t_grid or xi_samples < 1:
        raise ValueError("survival_sweep needs nonempty eps and t grids and xi_samples >= 1")
    logger.info("=== Survival sweep ===")
    settings = replace(settings or KamSettings.from_config(), gamma=gamma)
    rng = rng or np.random.default_rng(0)
    frequency = standard_test_model(preset, 0.0, t_grid[0])[0]
    xis = frequency.sample(rng, xi_samples)
    cells = [(eps, t) for eps in eps_grid for t in t_grid]

    def work(cell):
        return _survival_cell(preset, cell[0], cell[1], xis, settings, drift, residual_tol, n_phi)

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        results = list(pool.map(work, cells))
    rows = [result.row() for result in results]
    for row in rows:
        logger.info(f"eps={row['eps']:.1e}, t={row['t']}: screen {row['screen_pass']:.2f}, "
                    f"survival {row['fraction']:.2f}")
    return pd.DataFrame(rows, columns=SURVIVAL_COLUMNS)

