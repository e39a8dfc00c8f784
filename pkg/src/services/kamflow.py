import logging
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
import pandas as pd

from services.config_manager import ConfigManager
from services.fourier import DROP_TOL, weighted_norm
from services.homological import (KamConstants, KamProblem, KamState, NormalForm, kam_step, measure_jet,
                                  step_record)
from services.model import GeneratingHamiltonian, SchemeModel, default_k_max
from services.resonance import russmann_index_amount
from services.sympmap import Composition, MidpointScheme, PhasePoint, TwistMap

# Get logger for this module
logger = logging.getLogger(__name__)

__all__ = ["KamSettings", "KamState", "KamConstants", "KamProblem", "NormalForm", "KamLimit",
           "KamIterationError", "schedule_constants", "build_problem", "initial_state", "run_iteration",
           "evaluate_conjugacy", "schedule_table", "check_schedule"]


class KamIterationError(Exception):
    """Raised when a KAM iteration aborts; carries the trace recorded so far"""

    def __init__(self, message: str, trace: tuple = (), state: Optional[KamState] = None):
        self.trace = trace
        self.state = state
        super().__init__(message)


@dataclass(frozen=True)
class KamSettings:
    gamma: float = 0.05
    tau: float = 0.0
    nbar: int = 0
    nbar_max: int = 4
    L: int = 2
    K0: int = 10
    s0: float = 0.5
    r0: float = 1.0
    k_max: int = 0
    stop_eps: float = 1e-13
    max_steps: int = 12
    eta_max: float = 1.0
    drop_tol: float = DROP_TOL
    track_remainder: bool = False
    newton_tol: float = 1e-13
    newton_max_iter: int = 50

    @classmethod
    def from_config(cls, config: Optional[ConfigManager] = None) -> "KamSettings":
        config = config or ConfigManager()
        values = {name: config.get_config(f"kam.{name}") for name in (
            "gamma", "tau", "nbar", "nbar_max", "L", "K0", "s0", "r0", "k_max", "stop_eps", "max_steps",
            "eta_max", "drop_tol", "track_remainder")}
        values["newton_tol"] = config.get_config("sympmap.newton_tol")
        values["newton_max_iter"] = config.get_config("sympmap.newton_max_iter")
        return cls(**values)


@dataclass(frozen=True)
class KamLimit:
    """Limit frequencies with their measured drift from the starting normal form."""

    omega: np.ndarray
    theta: np.ndarray
    omega_drift: float
    theta_drift: float
    eps_sum: float

    @property
    def drift_constant(self) -> float:
        return self.omega_drift / self.eps_sum if self.eps_sum > 0 else 0.0


def _nbar(frequency, settings: KamSettings) -> int:
    if settings.nbar > 0:
        return settings.nbar
    return russmann_index_amount(frequency, settings.nbar_max).nbar


def schedule_constants(frequency, settings: KamSettings) -> KamConstants:
    return KamConstants.build(frequency.n, settings.gamma, _nbar(frequency, settings), settings.tau, settings.L,
                              settings.K0, settings.s0, settings.r0, settings.eta_max)


def build_problem(model: Union[GeneratingHamiltonian, SchemeModel], xi, settings: KamSettings,
                  t: Optional[float] = None):
    """
    Centre the map at xi and read off its starting normal form.

    Args:
        model: GeneratingHamiltonian (twist map) or SchemeModel (implicit midpoint, needs t)
        xi: Action value of the torus

    Returns:
        (KamProblem, NormalForm, KamConstants)
    """
    xi = np.asarray(xi, dtype=float).reshape(model.n)
    frequency = model.frequency
    if isinstance(model, GeneratingHamiltonian):
        base = TwistMap(model, center=xi, tol=settings.newton_tol, max_iter=settings.newton_max_iter)
        t, theta = model.t, np.asarray(model.normal.theta, dtype=float)
    else:
        if t is None:
            raise ValueError("build_problem: a SchemeModel needs the step t")
        base = MidpointScheme(model, t, center=xi, tol=settings.newton_tol, max_iter=settings.newton_max_iter)
        theta = np.asarray(model.normal_data(t).theta, dtype=float)
    k_max = settings.k_max or default_k_max(model.n)
    problem = KamProblem(base, xi, k_max, settings.drop_tol, settings.track_remainder)
    normal = NormalForm(frequency.omega_at(xi), theta, frequency.twist_at(xi), float(t))
    constants = schedule_constants(frequency, settings)
    return problem, normal, constants


def initial_state(problem: KamProblem, normal: NormalForm, constants: KamConstants) -> KamState:
    perturbation = measure_jet(problem.base, normal, problem.k_max, problem.drop_tol)
    eps = weighted_norm(perturbation, constants.s0, constants.r0)
    return KamState(v=0, s=constants.s0, r=constants.r0, rho=constants.rho(0), gamma_v=constants.gamma_v(0),
                    eps=eps, eta=constants.eta(eps, 0, normal.n), normal=normal, perturbation=perturbation,
                    transforms=(), constants=constants)


def run_iteration(model: Union[GeneratingHamiltonian, SchemeModel], xi, settings: Optional[KamSettings] = None,
                  t: Optional[float] = None, max_steps: Optional[int] = None, stop_eps: Optional[float] = None):
    """
    Iterate kam_step until eps_v <= stop_eps or max_steps.

    Returns:
        (final KamState, KamLimit, KamProblem); the problem is needed to evaluate the conjugacy

    Raises:
        KamIterationError: wraps any step failure, with the trace so far
    """
    settings = settings or KamSettings.from_config()
    max_steps = settings.max_steps if max_steps is None else max_steps
    stop_eps = settings.stop_eps if stop_eps is None else stop_eps
    logger.info("=== KAM iteration ===")
    problem, normal, constants = build_problem(model, xi, settings, t)
    logger.info(f"xi={problem.xi.tolist()}, t={normal.t}, k_max={problem.k_max}, tau={constants.tau}, "
                f"nbar={constants.nbar}, gamma0={constants.gamma0:.3e}")
    state = initial_state(problem, normal, constants)
    eps_values = [state.eps]

    while state.eps > stop_eps and state.v < max_steps:
        logger.debug(f"Step {state.v}: eps={state.eps:.3e}, s={state.s:.4f}, gamma_v={state.gamma_v:.3e}")
        try:
            state = kam_step(state, problem)
        except Exception as e:
            logger.error(f"KAM step {state.v} failed: {str(e)}")
            raise KamIterationError(f"step {state.v} failed: {str(e)}", state.trace, state) from e
        eps_values.append(state.eps)

    converged = state.eps <= stop_eps
    state = replace(state, converged=converged, trace=state.trace + (step_record(state),))
    if converged:
        logger.info(f"Converged after {state.v} steps: eps={state.eps:.3e}")
    else:
        logger.warning(f"No convergence after {state.v} steps: eps={state.eps:.3e} > {stop_eps:.1e}")

    limit = KamLimit(state.normal.omega, state.normal.theta,
                     float(np.max(np.abs(state.normal.omega - normal.omega), initial=0.0)),
                     float(np.max(np.abs(state.normal.theta - normal.theta), initial=0.0)),
                     float(sum(eps_values[:-1])))
    return state, limit, problem


def evaluate_conjugacy(state: KamState, problem: KamProblem, phi) -> PhasePoint:
    """Psi^v at (phi, u=0, Y=0, v=0), returned in original coordinates (y = xi + Y)."""
    if not state.converged:
        raise KamIterationError("evaluate_conjugacy needs a converged state", state.trace, state)
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    count, n, m = phi.shape[0], state.normal.n, state.normal.m
    start = PhasePoint(phi, np.zeros((count, m)), np.zeros((count, n)), np.zeros((count, m)))
    dz = Composition(state.transforms).step(start).dz
    return PhasePoint(phi + dz.x, dz.u, problem.xi + dz.y, dz.v)


def schedule_table(state: KamState) -> pd.DataFrame:
    """The schedule recomputed from step 0 next to the recorded eps_v and r_v."""
    constants = state.constants
    recorded = {record["v"]: record for record in state.trace}
    rows = []
    for v in range(state.v + 1):
        record = recorded.get(v, {})
        rows.append({"v": v, "s_v": constants.s(v), "rho_v": constants.rho(v), "gamma_v": constants.gamma_v(v),
                     "r_v": record.get("r_v", np.nan), "eps_v": record.get("eps_v", np.nan)})
    return pd.DataFrame(rows)


def check_schedule(state: KamState) -> bool:
    """Recorded schedule scalars equal the values recomputed from step 0."""
    table = schedule_table(state)
    for record in state.trace:
        row = table.iloc[record["v"]]
        if (record["s_v"] != row["s_v"] or record["rho_v"] != row["rho_v"]
                or record["gamma_v"] != row["gamma_v"]):
            logger.error(f"Schedule mismatch at step {record['v']}")
            return False
    r = state.constants.r0
    for record in state.trace:
        if not np.isclose(record["r_v"], r, rtol=1e-15, atol=0.0):
            return False
        r = record["eta_v"] * r
    return True
