"""
Small-divisor screening and measure estimates over the parameter box.

Four families of divisors are screened, with sigma the shift added to <k, t omega>:
  1: sigma = 0 (k != 0)
  2: sigma = +-theta_j
  3: sigma = +-(theta_i + theta_j), i <= j
  4: sigma = +-(theta_i - theta_j), i < j
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import pandas as pd
from numpy.polynomial import Polynomial
from scipy.optimize import brentq
from scipy.stats import linregress, norm

from services.fourier import mode_table
from services.model import EllipticNormalData, FrequencyMap

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
RANK_TOL = 1e-8
FD_STEP = 1e-4
MIN_SCREEN_POINTS = 1000


class RuessmannDegeneracyError(Exception):
    """Raised when the frequency map is degenerate up to the largest index tried"""

    def __init__(self, message: str, worst_xi=None):
        self.worst_xi = worst_xi
        super().__init__(message)


class SublevelFloorError(Exception):
    """Raised when the derivative floor of a sublevel estimate is violated"""

    def __init__(self, minimum: float, floor: float, where: float):
        self.minimum = minimum
        self.floor = floor
        self.where = where
        super().__init__(f"derivative floor violated: min |g^(m)| = {minimum:.3e} < {floor:.3e} at x = {where:.6f}")


class GridTooCoarseError(Exception):
    """Raised when a screening grid has too few points"""
    pass


def families(m: int) -> list:
    """(condition, i, j, coefficient of theta_i, coefficient of theta_j) for every shifted family."""
    out = []
    for j in range(m):
        out.append((2, -1, j, 0, 1))
    for i in range(m):
        for j in range(i, m):
            out.append((3, i, j, 1, 1))
            if i < j:
                out.append((4, i, j, 1, -1))
    return out


def family_shift(theta: np.ndarray, family) -> float:
    _, i, j, ci, cj = family
    return (ci * theta[i] if i >= 0 else 0.0) + cj * theta[j]


# ---------------------------------------------------------------------------
# Ruessmann index and amount


@dataclass(frozen=True)
class RuessmannData:
    nbar: int
    beta_amount: float
    grid: np.ndarray
    worst_xi: np.ndarray
    probes: np.ndarray


def _fd_tensor(omega: Callable, points: np.ndarray, order: int, step: float) -> np.ndarray:
    """Central-difference derivative tensor of omega, Richardson-extrapolated once; shape (N, n, n^order)."""
    if order == 0:
        return np.asarray(omega(points), dtype=float)
    n = points.shape[1]

    def central(h):
        parts = []
        for b in range(n):
            shift = np.zeros(n)
            shift[b] = h
            lower = _fd_tensor(omega, points + shift, order - 1, step)
            upper_minus = _fd_tensor(omega, points - shift, order - 1, step)
            parts.append((lower - upper_minus) / (2.0 * h))
        return np.stack(parts, axis=-1)

    coarse = central(step)
    fine = central(0.5 * step)
    return (4.0 * fine - coarse) / 3.0


def derivative_tensors(frequency: FrequencyMap, points: np.ndarray, order: int) -> np.ndarray:
    """D^order omega at each point, shape (N, n, n, ..., n) with order trailing axes."""
    n = frequency.n
    if frequency.derivative is not None:
        return np.stack([np.asarray(frequency.derivative(xi, order), dtype=float).reshape((n,) * (order + 1))
                         for xi in points])
    # the stencil grows with the order, so the step is widened to keep round-off below truncation
    step = FD_STEP ** (1.0 / max(order, 1))
    return _fd_tensor(frequency.omega, points, order, step).reshape((points.shape[0],) + (n,) * (order + 1))


def _parameter_grid(frequency: FrequencyMap, per_axis: Optional[int] = None) -> np.ndarray:
    per_axis = per_axis or (65 if frequency.n == 1 else 17)
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(frequency.domain_low, frequency.domain_high)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _probe_modes(n: int, rng: np.random.Generator, count: int, bound: int) -> np.ndarray:
    probes = [np.eye(n, dtype=int)[a] for a in range(n)]
    while len(probes) < n + count:
        k = rng.integers(-bound, bound + 1, size=n)
        if 0 < np.abs(k).sum() <= bound:
            probes.append(k)
    return np.array(probes)


def russmann_index_amount(frequency: FrequencyMap, nbar_max: int = 4, safety: float = 0.05,
                          rng: Optional[np.random.Generator] = None, random_probes: int = 64,
                          probe_bound: int = 20, per_axis: Optional[int] = None) -> RuessmannData:
    """
    Smallest nbar with rank{d^i omega : |i| <= nbar} = n on the grid, and the amount

        beta = (1 - safety) min_xi max_{v <= nbar} |D^v <k, omega>| / |k|

    minimised over unit and random probe modes. The index is reported as at least 1.
    """
    if nbar_max < 1:
        raise ValueError("nbar_max must be >= 1")
    rng = rng or np.random.default_rng(0)
    n = frequency.n
    grid = _parameter_grid(frequency, per_axis)
    tensors = [derivative_tensors(frequency, grid, order) for order in range(nbar_max + 1)]

    nbar = None
    worst_xi = grid[0]
    for candidate in range(0, nbar_max + 1):
        columns = [tensors[order].reshape(grid.shape[0], n, -1) for order in range(candidate + 1)]
        stacked = np.concatenate(columns, axis=2)
        ranks = np.array([np.linalg.matrix_rank(block, tol=RANK_TOL) for block in stacked])
        if np.all(ranks == n):
            nbar = max(candidate, 1)
            break
        worst_xi = grid[int(np.argmin(ranks))]
    if nbar is None:
        logger.error(f"Frequency map degenerate up to order {nbar_max}, worst xi={worst_xi}")
        raise RuessmannDegeneracyError(f"rank condition unmet at nbar_max={nbar_max}", worst_xi)

    probes = _probe_modes(n, rng, random_probes, probe_bound)
    best = np.inf
    for k in probes:
        size = float(np.abs(k).sum())
        strongest = np.zeros(grid.shape[0])
        for order in range(nbar + 1):
            contracted = np.tensordot(tensors[order], k, axes=([1], [0]))
            magnitude = np.sqrt(np.sum(contracted.reshape(grid.shape[0], -1) ** 2, axis=1))
            strongest = np.maximum(strongest, magnitude)
        ratio = strongest / size
        if ratio.min() < best:
            best = float(ratio.min())
            worst_xi = grid[int(np.argmin(ratio))]
    beta = (1.0 - safety) * best
    if beta <= 0:
        raise RuessmannDegeneracyError(f"Ruessmann amount vanishes (beta={beta:.3e})", worst_xi)
    logger.debug(f"Ruessmann index {nbar}, amount {beta:.4f} (worst xi {worst_xi})")
    return RuessmannData(nbar, beta, grid, worst_xi, probes)


# ---------------------------------------------------------------------------
# Small-divisor screening


def k_hat(omega_sup: float, eps: float = 0.0, drift_c: float = 1.0) -> float:
    return omega_sup + drift_c * eps + 1.0


def k_hat_prime(omega_sup: float, b0, eps: float = 0.0, drift_c: float = 1.0) -> float:
    b0 = np.asarray(b0, dtype=float)
    return omega_sup + drift_c * eps + (3.0 * float(np.max(np.abs(b0))) if b0.size else 0.0) + 1.0


def l_window(modes: np.ndarray, window: float) -> np.ndarray:
    return np.ceil(np.maximum(np.abs(modes).sum(axis=1), 1) * window).astype(int)


@dataclass
class ResonanceReport:
    """Every margin screened at one parameter; a negative margin is a violation."""

    xi: np.ndarray
    condition: np.ndarray
    k: np.ndarray
    l: np.ndarray
    i: np.ndarray
    j: np.ndarray
    margin: np.ndarray

    @property
    def violations(self) -> list:
        bad = np.flatnonzero(self.margin < 0)
        return [(tuple(int(c) for c in self.k[r]), int(self.l[r]), int(self.j[r]), int(self.condition[r]),
                 float(self.margin[r])) for r in bad]

    @property
    def passed(self) -> bool:
        return not np.any(self.margin < 0)

    @property
    def count(self) -> int:
        return int(self.margin.shape[0])

    @property
    def min_margin(self) -> float:
        return float(self.margin.min()) if self.margin.size else float("inf")

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"condition": self.condition, "l": self.l, "i": self.i, "j": self.j,
                              "margin": self.margin})
        for a in range(self.k.shape[1]):
            frame.insert(1 + a, f"k{a + 1}", self.k[:, a])
        return frame


def screen_small_divisors(omega_v, theta_v, xi, gamma_v: float, tau: float, t: float, k_max: int,
                          omega_sup: Optional[float] = None, eps: float = 0.0, drift_c: float = 1.0,
                          b0=None) -> ResonanceReport:
    """
    Exhaustive margins |<k, t omega> + sigma - 2 pi l| - t gamma_v/(1+|k|)^tau.

    l runs over |l| <= ceil(max(|k|, 1) K_hat) with K_hat for family 1 and K_hat' for
    the shifted families.
    """
    omega_v = np.asarray(omega_v, dtype=float).reshape(-1)
    theta_v = np.asarray(theta_v, dtype=float).reshape(-1)
    n, m = omega_v.shape[0], theta_v.shape[0]
    omega_sup = float(np.max(np.abs(omega_v))) if omega_sup is None else omega_sup
    b0 = np.tan(theta_v) / t if b0 is None else b0
    modes = mode_table(n, k_max)
    nonzero = np.any(modes != 0, axis=1)
    phase = t * (modes @ omega_v)
    threshold = t * gamma_v / (1.0 + np.abs(modes).sum(axis=1)) ** tau

    chunks = []

    def scan(condition, i, j, sigma, select, window):
        sel_modes = modes[select]
        limits = l_window(sel_modes, window)
        ls = np.arange(-limits.max(), limits.max() + 1) if sel_modes.size else np.zeros(0, dtype=int)
        keep = np.abs(ls)[None, :] <= limits[:, None]
        rows, cols = np.nonzero(keep)
        margin = np.abs(phase[select][rows] + sigma - TWO_PI * ls[cols]) - threshold[select][rows]
        count = rows.shape[0]
        chunks.append((np.full(count, condition), sel_modes[rows], ls[cols], np.full(count, i),
                       np.full(count, j), margin))

    scan(1, -1, -1, 0.0, nonzero, k_hat(omega_sup, eps, drift_c))
    window = k_hat_prime(omega_sup, b0, eps, drift_c)
    everything = np.ones(modes.shape[0], dtype=bool)
    for family in families(m):
        shift = family_shift(theta_v, family)
        for sign in (1.0, -1.0):
            scan(family[0], family[1], family[2], sign * shift, everything, window)

    condition, k, l, i, j, margin = (np.concatenate(parts) for parts in zip(*chunks))
    report = ResonanceReport(np.asarray(xi, dtype=float), condition, k.reshape(-1, n), l, i, j, margin)
    if not report.passed:
        logger.debug(f"Screen at xi={report.xi}: {len(report.violations)} violations, "
                     f"min margin {report.min_margin:.3e}")
    return report


def l_window_check(omega_v, theta_v, gamma_v: float, tau: float, t: float, k_max: int,
                   l_max: int = 1000, eps: float = 0.0, drift_c: float = 1.0) -> list:
    """
    Violations found with an unrestricted |l| <= l_max scan that fall outside the K_hat window.

    An empty list confirms the range reduction.
    """
    omega_v = np.asarray(omega_v, dtype=float).reshape(-1)
    theta_v = np.asarray(theta_v, dtype=float).reshape(-1)
    n, m = omega_v.shape[0], theta_v.shape[0]
    omega_sup = float(np.max(np.abs(omega_v)))
    modes = mode_table(n, k_max)
    phase = t * (modes @ omega_v)
    threshold = t * gamma_v / (1.0 + np.abs(modes).sum(axis=1)) ** tau
    ls = np.arange(-l_max, l_max + 1)
    outside = []
    shifts = [(1, 0.0, k_hat(omega_sup, eps, drift_c))]
    window = k_hat_prime(omega_sup, np.tan(theta_v) / t, eps, drift_c)
    for family in families(m):
        shift = family_shift(theta_v, family)
        shifts.extend([(family[0], shift, window), (family[0], -shift, window)])
    for condition, sigma, win in shifts:
        margin = np.abs(phase[:, None] + sigma - TWO_PI * ls[None, :]) - threshold[:, None]
        if condition == 1:
            margin[~np.any(modes != 0, axis=1)] = np.inf
        limits = l_window(modes, win)
        rows, cols = np.nonzero((margin < 0) & (np.abs(ls)[None, :] > limits[:, None]))
        outside.extend((condition, tuple(int(c) for c in modes[r]), int(ls[c])) for r, c in zip(rows, cols))
    return outside


# ---------------------------------------------------------------------------
# Excluded measure


def wilson_interval(successes: int, trials: int, confidence: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return 0.0, 1.0
    z = float(norm.ppf(0.5 + 0.5 * confidence))
    p = successes / trials
    denominator = 1.0 + z * z / trials
    centre = (p + z * z / (2.0 * trials)) / denominator
    half = z * math.sqrt(p * (1.0 - p) / trials + z * z / (4.0 * trials * trials)) / denominator
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class ExcludedMeasure:
    gamma: float
    measure: float
    fraction: float
    breakdown: dict
    excluded: np.ndarray
    mc_fraction: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")


def _excluded_mask(frequency: FrequencyMap, points: np.ndarray, theta: np.ndarray, gamma: float, t: float,
                   tau: float, k_max: int, exponent: int, v_max: int) -> dict:
    """Per-family masks of points violating any condition for any v <= v_max."""
    n, m = frequency.n, theta.shape[0]
    modes = mode_table(n, k_max)
    omega = np.asarray(frequency.omega(points), dtype=float)
    masks = {c: np.zeros(points.shape[0], dtype=bool) for c in (1, 2, 3, 4)}
    shifts = [(1, 0.0)]
    for family in families(m):
        shift = family_shift(theta, family)
        shifts.extend([(family[0], shift), (family[0], -shift)])
    for v in range(v_max + 1):
        gamma_v = gamma / 2.0 ** (exponent * v)
        for k in modes:
            size = int(np.abs(k).sum())
            phase = t * (omega @ k)
            threshold = t * gamma_v / (1.0 + size) ** tau
            for condition, sigma in shifts:
                if condition == 1 and size == 0:
                    continue
                shifted = phase + sigma
                distance = np.abs(shifted - TWO_PI * np.round(shifted / TWO_PI))
                masks[condition] |= distance < threshold
    return masks


def excluded_measure(frequency: FrequencyMap, theta, gamma: float, t: float, k_max: int, grid_res: int,
                     tau: float, nbar: int = 1, L: int = 2, v_max: int = 0, mc_samples: int = 0,
                     rng: Optional[np.random.Generator] = None) -> ExcludedMeasure:
    """
    Measure of parameters in V removed by the four families, counted on cell centres.

    gamma is the threshold constant; later steps use gamma / 2^((nbar+1)L v).
    A Monte-Carlo estimate with a 95% Wilson interval is added when mc_samples > 0.
    """
    if grid_res < 64:
        raise ValueError(f"grid_res must be >= 64, got {grid_res}")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    n = frequency.n
    exponent = (nbar + 1) * L
    widths = (frequency.domain_high - frequency.domain_low) / grid_res
    axes = [lo + (np.arange(grid_res) + 0.5) * w for lo, w in zip(frequency.domain_low, widths)]
    mesh = np.meshgrid(*axes, indexing="ij")
    centres = np.stack([g.ravel() for g in mesh], axis=1)

    masks = _excluded_mask(frequency, centres, theta, gamma, t, tau, k_max, exponent, v_max)
    excluded = np.zeros(centres.shape[0], dtype=bool)
    for mask in masks.values():
        excluded |= mask
    fraction = float(excluded.mean())
    volume = frequency.volume
    breakdown = {c: float(mask.mean()) * volume for c, mask in masks.items()}
    result = ExcludedMeasure(gamma, fraction * volume, fraction, breakdown, excluded.reshape((grid_res,) * n))

    if mc_samples > 0:
        rng = rng or np.random.default_rng(0)
        samples = frequency.sample(rng, mc_samples)
        mc_masks = _excluded_mask(frequency, samples, theta, gamma, t, tau, k_max, exponent, v_max)
        hits = np.zeros(mc_samples, dtype=bool)
        for mask in mc_masks.values():
            hits |= mask
        low, high = wilson_interval(int(hits.sum()), mc_samples)
        result.mc_fraction = float(hits.mean())
        result.ci_low, result.ci_high = low * volume, high * volume
    logger.debug(f"gamma={gamma:.3e}: excluded measure {result.measure:.4e} ({fraction:.4%} of V)")
    return result


def fit_power_law(xs, ys):
    """Slope and intercept of log y against log x (non-positive pairs are skipped)."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    keep = (xs > 0) & (ys > 0)
    if keep.sum() < 2:
        raise ValueError("fit_power_law needs at least two positive pairs")
    fit = linregress(np.log(xs[keep]), np.log(ys[keep]))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue)


def measure_sweep(frequency: FrequencyMap, theta, gammas, t: float, k_max: int, grid_res: int, tau: float,
                  nbar: int = 1, L: int = 2, v_max: int = 0, mc_samples: int = 0,
                  rng: Optional[np.random.Generator] = None) -> pd.DataFrame:
    """Excluded measure along a gamma ladder with the running log-log slope."""
    logger.info("=== Measure sweep ===")
    rows, measures = [], []
    for gamma in sorted(gammas):
        result = excluded_measure(frequency, theta, gamma, t, k_max, grid_res, tau, nbar, L, v_max,
                                  mc_samples, rng)
        measures.append(result.measure)
        used = sorted(gammas)[:len(measures)]
        slope = fit_power_law(used, measures)[0] if sum(m > 0 for m in measures) >= 2 else float("nan")
        rows.append({"gamma": gamma, "excluded_measure": result.measure, "ci_low": result.ci_low,
                     "ci_high": result.ci_high, "slope_running": slope})
        logger.info(f"gamma={gamma:.4g}: measure={result.measure:.4e}, running slope={slope:.3f}")
    return pd.DataFrame(rows, columns=["gamma", "excluded_measure", "ci_low", "ci_high", "slope_running"])


def theoretical_bounds(frequency: FrequencyMap, gamma: float, tau: float, k_max: int, measured: float) -> dict:
    """Bound shapes gamma d^n sum (1+|k|)^-tau and gamma d^n, with the measured ratios."""
    n = frequency.n
    diameter = float(np.max(frequency.domain_high - frequency.domain_low))
    modes = mode_table(n, k_max)
    sizes = np.abs(modes).sum(axis=1)
    series = float(np.sum((1.0 + sizes[sizes > 0]) ** (-tau)))
    shape3 = gamma * diameter ** n * series
    shape5 = gamma * diameter ** n
    return {"shape_c3": shape3, "shape_c5": shape5,
            "c3": measured / shape3 if shape3 > 0 else float("nan"),
            "c5": measured / shape5 if shape5 > 0 else float("nan")}


# ---------------------------------------------------------------------------
# Sublevel sets


@dataclass(frozen=True)
class SublevelResult:
    measure: float
    bound: float
    bound_holds: bool
    min_derivative: float


def _roots(poly: Polynomial, low: float, high: float, samples: int) -> list:
    xs = np.linspace(low, high, samples)
    values = poly(xs)
    roots = [float(x) for x, value in zip(xs, values) if value == 0.0]
    for a, b, fa, fb in zip(xs[:-1], xs[1:], values[:-1], values[1:]):
        if fa * fb < 0:
            roots.append(brentq(poly, a, b, xtol=1e-14))
    return roots


def sublevel_measure(g: Polynomial, interval, h: float, m_order: int, d_floor: float,
                     samples: int = 20001) -> SublevelResult:
    """
    Measure of {x in I : |g(x)| < h}, with the floor |g^(m)| >= d checked on a grid.

    The estimate 2 (m! h / d)^(1/m) is reported through bound_holds instead of raised.
    """
    low, high = (float(v) for v in interval)
    if h <= 0 or d_floor <= 0 or m_order < 1:
        raise ValueError("sublevel_measure needs h > 0, d_floor > 0 and m_order >= 1")
    g = Polynomial(g) if not isinstance(g, Polynomial) else g
    xs = np.linspace(low, high, samples)
    derivative = np.abs(g.deriv(m_order)(xs))
    worst = int(np.argmin(derivative))
    if derivative[worst] < d_floor * (1.0 - 1e-12):
        raise SublevelFloorError(float(derivative[worst]), d_floor, float(xs[worst]))

    breaks = sorted({low, high, *_roots(g - h, low, high, samples), *_roots(g + h, low, high, samples)})
    measure = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        if abs(g(0.5 * (a + b))) < h:
            measure += b - a
    bound = 2.0 * (math.factorial(m_order) * h / d_floor) ** (1.0 / m_order)
    holds = measure <= bound * (1.0 + 1e-9)
    if not holds:
        logger.warning(f"Sublevel estimate exceeded: measure {measure:.6e} > bound {bound:.6e}")
    return SublevelResult(measure, bound, holds, float(derivative[worst]))


# ---------------------------------------------------------------------------
# Matrix screen for one 1x1 block


@dataclass(frozen=True)
class MatrixScreenResult:
    fraction: float
    threshold: float
    points: int


def matrix_divisor_screen(frequency: FrequencyMap, k_tilde, theta_j: float, alpha: float, tau: float, t: float,
                          grid_points: int = 20000, perturbation: Optional[Callable] = None) -> MatrixScreenResult:
    """
    Fraction of the parameter grid where |M^-1| > |k|^tau/(t alpha) for
    M = <k, t omega(xi)> - theta_j + P_t(xi), reduced to the nearest 2 pi l.
    """
    n = frequency.n
    k = np.asarray(k_tilde, dtype=float).reshape(n)
    if not np.any(k):
        raise ValueError(f"matrix_divisor_screen: k_tilde must be nonzero, got {k.tolist()}")
    per_axis = int(round(grid_points ** (1.0 / n)))
    if per_axis ** n < MIN_SCREEN_POINTS:
        raise GridTooCoarseError(f"screen grid has {per_axis ** n} points, need at least {MIN_SCREEN_POINTS}")
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(frequency.domain_low, frequency.domain_high)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in mesh], axis=1)
    value = t * (np.asarray(frequency.omega(points)) @ k) - theta_j
    if perturbation is not None:
        value = value + perturbation(points)
    value = np.abs(value - TWO_PI * np.round(value / TWO_PI))
    threshold = t * alpha / float(np.abs(k).sum()) ** tau
    fraction = float(np.mean(value < threshold))
    return MatrixScreenResult(fraction, threshold, points.shape[0])


# ---------------------------------------------------------------------------
# Structural checks on the elliptic part


def theta_small_t_limit(rates, t_values) -> pd.DataFrame:
    """|theta_j^t| / t against |B_j| and the (3/2)|B_j| t control."""
    rates = np.asarray(rates, dtype=float)
    rows = []
    for t in t_values:
        theta = EllipticNormalData.from_rates(rates, t).theta
        for j, (th, b) in enumerate(zip(theta, rates)):
            rows.append({"t": t, "j": j, "theta": float(th), "ratio": abs(th) / t, "rate": abs(b),
                         "controlled": bool(abs(th) <= 1.5 * abs(b) * t)})
    return pd.DataFrame(rows)


def b_bracketing(trace) -> dict:
    """1/2 |B^0 t| <= |B^v t| <= 2 |B^0 t| over all recorded steps."""
    records = [record for record in trace if "b_t" in record]
    if not records:
        return {"holds": True, "min_ratio": 1.0, "max_ratio": 1.0}
    base = np.abs(np.asarray(records[0]["b_t"], dtype=float))
    ratios = np.array([np.abs(np.asarray(record["b_t"], dtype=float)) / base for record in records])
    low, high = float(ratios.min()), float(ratios.max())
    return {"holds": bool(low >= 0.5 and high <= 2.0), "min_ratio": low, "max_ratio": high}
