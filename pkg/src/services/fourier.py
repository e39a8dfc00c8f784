"""
Truncated Fourier fields on the n-torus with polynomial dependence on (y, u, v).

A field is stored densely: every monomial y^l u^i v^j carries one complex
coefficient per Fourier mode k with |k|_1 <= k_max. All fields of a given
(n, k_max) share the same mode table, so evaluation can reuse one cos/sin table.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

logger = logging.getLogger(__name__)

DROP_TOL = 1e-16

Monomial = tuple  # (l, i, j): exponent tuples for y (n), u (m) and v (m)


@lru_cache(maxsize=None)
def _mode_table(n: int, k_max: int) -> np.ndarray:
    modes = [k for k in itertools.product(range(-k_max, k_max + 1), repeat=n)
             if sum(abs(c) for c in k) <= k_max]
    table = np.array(modes, dtype=int).reshape(len(modes), n)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def _mode_index(n: int, k_max: int) -> dict:
    return {tuple(int(c) for c in k): idx for idx, k in enumerate(_mode_table(n, k_max))}


@lru_cache(maxsize=None)
def _negated_index(n: int, k_max: int) -> np.ndarray:
    index = _mode_index(n, k_max)
    return np.array([index[tuple(-int(c) for c in k)] for k in _mode_table(n, k_max)], dtype=int)


def mode_table(n: int, k_max: int) -> np.ndarray:
    """All k in Z^n with |k|_1 <= k_max, shape (M, n), in a fixed order."""
    return _mode_table(n, k_max)


def grading(monomial: Monomial) -> int:
    l, i, j = monomial
    return 2 * sum(l) + sum(i) + sum(j)


def degree(monomial: Monomial) -> int:
    l, i, j = monomial
    return sum(l) + sum(i) + sum(j)


def _batch(values, dim: int):
    """Return (2-D array, single) so callers can accept one point or a batch."""
    arr = np.asarray(values)
    if arr.ndim <= 1:
        return arr.reshape(1, dim), True
    return arr, False


def _monomial_factor(monomial: Monomial, y, u, v):
    l, i, j = monomial
    factor = np.ones(y.shape[0], dtype=np.result_type(y, u, v, float))
    for arr, exps in ((y, l), (u, i), (v, j)):
        for axis, power in enumerate(exps):
            if power:
                factor = factor * arr[:, axis] ** power
    return factor


@dataclass(frozen=True, eq=False)
class FourierField:
    """Sum over monomials of (sum_k c_k e^{i<k,x>}) y^l u^i v^j."""

    n: int
    m: int
    k_max: int
    terms: dict = field(default_factory=dict)

    @property
    def modes(self) -> np.ndarray:
        return _mode_table(self.n, self.k_max)

    @property
    def mode_count(self) -> int:
        return self.modes.shape[0]

    @classmethod
    def zero(cls, n: int, m: int, k_max: int) -> "FourierField":
        return cls(n, m, k_max, {})

    @classmethod
    def from_terms(cls, n: int, m: int, k_max: int, coefficients: dict) -> "FourierField":
        """Build from a mapping (k, l, i, j) -> complex coefficient."""
        index = _mode_index(n, k_max)
        terms = {}
        for (k, l, i, j), value in coefficients.items():
            key = (tuple(l), tuple(i), tuple(j))
            if len(key[0]) != n or len(key[1]) != m or len(key[2]) != m:
                raise ValueError(f"Monomial {key} does not match n={n}, m={m}")
            k = tuple(int(c) for c in k)
            if k not in index:
                raise ValueError(f"Mode {k} outside |k|_1 <= {k_max}")
            coeffs = terms.setdefault(key, np.zeros(len(index), dtype=complex))
            coeffs[index[k]] += value
        return cls(n, m, k_max, terms)

    @classmethod
    def from_records(cls, n: int, m: int, k_max: int, records: list) -> "FourierField":
        """Inverse of to_records (JSON coefficient table)."""
        return cls.from_terms(n, m, k_max, {
            (tuple(rec["k"]), tuple(rec["l"]), tuple(rec["i"]), tuple(rec["j"])): complex(rec["re"], rec["im"])
            for rec in records
        })

    def to_records(self) -> list:
        records = []
        for (l, i, j), coeffs in sorted(self.terms.items()):
            for idx in np.flatnonzero(coeffs):
                records.append({
                    "k": [int(c) for c in self.modes[idx]],
                    "l": list(l), "i": list(i), "j": list(j),
                    "re": float(coeffs[idx].real), "im": float(coeffs[idx].imag),
                })
        return records

    def coefficient(self, k, l, i, j) -> complex:
        coeffs = self.terms.get((tuple(l), tuple(i), tuple(j)))
        if coeffs is None:
            return 0j
        idx = _mode_index(self.n, self.k_max).get(tuple(int(c) for c in k))
        return 0j if idx is None else complex(coeffs[idx])

    def component(self, monomial: Monomial) -> np.ndarray:
        coeffs = self.terms.get(monomial)
        return np.zeros(self.mode_count, dtype=complex) if coeffs is None else coeffs

    def _check_compatible(self, other: "FourierField"):
        if (self.n, self.m, self.k_max) != (other.n, other.m, other.k_max):
            raise ValueError(
                f"Incompatible fields: (n, m, k_max) {(self.n, self.m, self.k_max)} vs "
                f"{(other.n, other.m, other.k_max)}"
            )

    def __add__(self, other: "FourierField") -> "FourierField":
        self._check_compatible(other)
        terms = {mono: coeffs.copy() for mono, coeffs in self.terms.items()}
        for mono, coeffs in other.terms.items():
            terms[mono] = terms[mono] + coeffs if mono in terms else coeffs.copy()
        return FourierField(self.n, self.m, self.k_max, terms)

    def __neg__(self) -> "FourierField":
        return self.scale(-1.0)

    def __sub__(self, other: "FourierField") -> "FourierField":
        return self + (-other)

    def scale(self, factor: complex) -> "FourierField":
        return FourierField(self.n, self.m, self.k_max,
                            {mono: coeffs * factor for mono, coeffs in self.terms.items()})

    def prune(self, tol: float = DROP_TOL) -> "FourierField":
        terms = {}
        for mono, coeffs in self.terms.items():
            kept = np.where(np.abs(coeffs) < tol, 0j, coeffs)
            if np.any(kept):
                terms[mono] = kept
        return FourierField(self.n, self.m, self.k_max, terms)

    def symmetrize(self) -> "FourierField":
        """Enforce reality: c_{-k} = conj(c_k)."""
        neg = _negated_index(self.n, self.k_max)
        return FourierField(self.n, self.m, self.k_max, {
            mono: 0.5 * (coeffs + np.conj(coeffs[neg])) for mono, coeffs in self.terms.items()
        })

    def reality_defect(self) -> float:
        neg = _negated_index(self.n, self.k_max)
        return max((float(np.max(np.abs(coeffs - np.conj(coeffs[neg])))) for coeffs in self.terms.values()),
                   default=0.0)

    def derivative(self, variable: str, index: int) -> "FourierField":
        """Partial derivative in x_index, y_index, u_index or v_index."""
        if variable == "x":
            factor = 1j * self.modes[:, index]
            return FourierField(self.n, self.m, self.k_max,
                                {mono: coeffs * factor for mono, coeffs in self.terms.items()})
        slot = {"y": 0, "u": 1, "v": 2}[variable]
        terms = {}
        for mono, coeffs in self.terms.items():
            power = mono[slot][index]
            if power == 0:
                continue
            exps = list(mono[slot])
            exps[index] -= 1
            lowered = tuple(tuple(exps) if s == slot else mono[s] for s in range(3))
            terms[lowered] = terms.get(lowered, 0) + coeffs * power
        return FourierField(self.n, self.m, self.k_max, terms)

    def evaluate(self, x, y, u, v):
        """Evaluate at one point or a batch; complex inputs give the analytic continuation."""
        return evaluate_fields([self], x, y, u, v)[0]


def _trig_coefficients(fld: FourierField, mono: Monomial):
    """(alpha, beta) with sum_k c_k e^{i<k,x>} = cos(<k,x>) @ alpha + sin(<k,x>) @ beta."""
    coeffs = fld.terms[mono]
    mirrored = coeffs[_negated_index(fld.n, fld.k_max)]
    alpha = 0.5 * (coeffs + mirrored)
    beta = 0.5j * (coeffs - mirrored)
    # a real field has exactly real alpha and beta
    if not np.any(alpha.imag) and not np.any(beta.imag):
        return alpha.real, beta.real
    return alpha, beta


def evaluate_fields(fields, x, y, u, v) -> list:
    """
    Evaluate several fields sharing one mode table with a single cos/sin table.

    Pairing k with -k keeps real fields real for real x, so a complex step in
    any variable carries only the derivative in its imaginary part.
    """
    first = fields[0]
    n, m = first.n, first.m
    xb, single = _batch(x, n)
    yb, _ = _batch(y, n)
    ub, _ = _batch(u, m)
    vb, _ = _batch(v, m)
    real_input = all(np.isrealobj(arr) for arr in (xb, yb, ub, vb))

    tables = {}
    factors = {}
    results = []
    for fld in fields:
        key = (fld.n, fld.k_max)
        if key not in tables:
            angles = xb @ fld.modes.T
            tables[key] = (np.cos(angles), np.sin(angles))
        cos_table, sin_table = tables[key]
        total = np.zeros(xb.shape[0], dtype=complex)
        for mono in fld.terms:
            if mono not in factors:
                factors[mono] = _monomial_factor(mono, yb, ub, vb)
            alpha, beta = _trig_coefficients(fld, mono)
            total = total + (cos_table @ alpha + sin_table @ beta) * factors[mono]
        if real_input:
            total = total.real
        results.append(total[0] if single else total)
    return results


def weighted_norm(field: FourierField, s: float, r: float) -> float:
    """
    Weighted vector-field norm of X_P on D(s, r).

    Each partial derivative G contributes sum_k e^{s|k|} sum |c| r^{grading},
    combined as ||d_y P|| (max) + ||d_v P||/r (Euclidean) + ||d_x P||/r^2 (sum)
    + ||d_u P||/r (Euclidean).
    """
    if r == 0:
        raise ValueError("weighted_norm: division guard, r must be positive")
    if r < 0 or s < 0:
        raise ValueError(f"weighted_norm: need s >= 0 and r > 0, got s={s}, r={r}")

    weights = np.exp(s * np.abs(field.modes).sum(axis=1))

    def partial_norm(derived: FourierField) -> float:
        total = 0.0
        for mono, coeffs in derived.terms.items():
            total += float(np.sum(weights * np.abs(coeffs))) * r ** grading(mono)
        return total

    dy = max((partial_norm(field.derivative("y", a)) for a in range(field.n)), default=0.0)
    dx = sum(partial_norm(field.derivative("x", a)) for a in range(field.n))
    du = float(np.sqrt(sum(partial_norm(field.derivative("u", a)) ** 2 for a in range(field.m))))
    dv = float(np.sqrt(sum(partial_norm(field.derivative("v", a)) ** 2 for a in range(field.m))))
    return dy + dv / r + dx / r ** 2 + du / r


def truncate_order2(field: FourierField):
    """Split into R (grading 2l+i+j <= 2) and Ptilde = field - R."""
    low = {mono: coeffs for mono, coeffs in field.terms.items() if grading(mono) <= 2}
    high = {mono: coeffs for mono, coeffs in field.terms.items() if grading(mono) > 2}
    return (FourierField(field.n, field.m, field.k_max, low),
            FourierField(field.n, field.m, field.k_max, high))


def shift_angle(field: FourierField, delta) -> FourierField:
    """Compose with x -> x + delta."""
    multiplier = np.exp(1j * (field.modes @ np.asarray(delta, dtype=float).reshape(field.n)))
    return FourierField(field.n, field.m, field.k_max,
                        {mono: coeffs * multiplier for mono, coeffs in field.terms.items()})


def recenter_actions(field: FourierField, xi) -> FourierField:
    """Re-expand y^l around xi: returns G with G(x, Y, u, v) = P(x, xi + Y, u, v)."""
    xi = np.asarray(xi, dtype=float).reshape(field.n)
    terms = {}
    for (l, i, j), coeffs in field.terms.items():
        for lowered in itertools.product(*(range(p + 1) for p in l)):
            weight = 1.0
            for axis, (p, a) in enumerate(zip(l, lowered)):
                weight *= comb(p, a) * xi[axis] ** (p - a)
            if weight == 0.0:
                continue
            key = (tuple(lowered), i, j)
            terms[key] = terms.get(key, 0) + coeffs * weight
    return FourierField(field.n, field.m, field.k_max, terms)


def unit(size: int, axis: int) -> tuple:
    return tuple(1 if a == axis else 0 for a in range(size))


def pair(size: int, first: int, second: int) -> tuple:
    exps = [0] * size
    exps[first] += 1
    exps[second] += 1
    return tuple(exps)


@dataclass(frozen=True, eq=False)
class JetBlocks:
    """
    Order-two jet P000 + <P100,y> + <P010,u> + <P001,v> + <P011 u,v>
    + 1/2<P020 u,u> + 1/2<P002 v,v>, each block stored per mode.
    """

    n: int
    m: int
    k_max: int
    p000: np.ndarray  # (M,)
    p100: np.ndarray  # (M, n)
    p010: np.ndarray  # (M, m)
    p001: np.ndarray  # (M, m)
    p011: np.ndarray  # (M, m, m), row = v index, column = u index
    p020: np.ndarray  # (M, m, m), symmetric
    p002: np.ndarray  # (M, m, m), symmetric

    @classmethod
    def zeros(cls, n: int, m: int, k_max: int) -> "JetBlocks":
        count = mode_table(n, k_max).shape[0]
        return cls(n, m, k_max,
                   np.zeros(count, dtype=complex), np.zeros((count, n), dtype=complex),
                   np.zeros((count, m), dtype=complex), np.zeros((count, m), dtype=complex),
                   np.zeros((count, m, m), dtype=complex), np.zeros((count, m, m), dtype=complex),
                   np.zeros((count, m, m), dtype=complex))

    @classmethod
    def from_field(cls, field: FourierField) -> "JetBlocks":
        n, m = field.n, field.m
        zero_n, zero_m = (0,) * n, (0,) * m
        jet = cls.zeros(n, m, field.k_max)
        jet.p000[:] = field.component((zero_n, zero_m, zero_m))
        for a in range(n):
            jet.p100[:, a] = field.component((unit(n, a), zero_m, zero_m))
        for a in range(m):
            jet.p010[:, a] = field.component((zero_n, unit(m, a), zero_m))
            jet.p001[:, a] = field.component((zero_n, zero_m, unit(m, a)))
        for r in range(m):
            for c in range(m):
                jet.p011[:, r, c] = field.component((zero_n, unit(m, c), unit(m, r)))
            jet.p020[:, r, r] = 2.0 * field.component((zero_n, pair(m, r, r), zero_m))
            jet.p002[:, r, r] = 2.0 * field.component((zero_n, zero_m, pair(m, r, r)))
            for c in range(r + 1, m):
                jet.p020[:, r, c] = jet.p020[:, c, r] = field.component((zero_n, pair(m, r, c), zero_m))
                jet.p002[:, r, c] = jet.p002[:, c, r] = field.component((zero_n, zero_m, pair(m, r, c)))
        return jet

    def to_field(self, tol: float = 0.0) -> FourierField:
        n, m = self.n, self.m
        zero_n, zero_m = (0,) * n, (0,) * m
        terms = {(zero_n, zero_m, zero_m): self.p000}
        for a in range(n):
            terms[(unit(n, a), zero_m, zero_m)] = self.p100[:, a]
        for a in range(m):
            terms[(zero_n, unit(m, a), zero_m)] = self.p010[:, a]
            terms[(zero_n, zero_m, unit(m, a))] = self.p001[:, a]
        for r in range(m):
            for c in range(m):
                terms[(zero_n, unit(m, c), unit(m, r))] = self.p011[:, r, c]
            terms[(zero_n, pair(m, r, r), zero_m)] = 0.5 * self.p020[:, r, r]
            terms[(zero_n, zero_m, pair(m, r, r))] = 0.5 * self.p002[:, r, r]
            for c in range(r + 1, m):
                terms[(zero_n, pair(m, r, c), zero_m)] = 0.5 * (self.p020[:, r, c] + self.p020[:, c, r])
                terms[(zero_n, zero_m, pair(m, r, c))] = 0.5 * (self.p002[:, r, c] + self.p002[:, c, r])
        fld = FourierField(n, m, self.k_max, {mono: np.array(c, dtype=complex) for mono, c in terms.items()})
        return fld.prune(tol) if tol > 0 else fld.prune(0.0)


def angle_grid(n: int, points: int) -> np.ndarray:
    """Uniform tensor grid on the n-torus, shape (points**n, n), 'ij' ordering."""
    axes = [np.arange(points) * (2.0 * np.pi / points)] * n
    if n == 0:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def grid_coefficients(values: np.ndarray, n: int, points: int, k_max: int) -> np.ndarray:
    """
    Fourier coefficients c_k (|k|_1 <= k_max) of samples on angle_grid(n, points).

    values has shape (points**n, ...); the result has shape (M, ...).
    """
    if n == 0:
        return np.asarray(values, dtype=complex).reshape((1,) + np.shape(values)[1:])
    if points < 2 * k_max + 1:
        raise ValueError(f"grid of {points} points cannot resolve modes up to {k_max}")
    values = np.asarray(values)
    tail = values.shape[1:]
    spectrum = np.fft.fftn(values.reshape((points,) * n + tail), axes=tuple(range(n))) / points ** n
    modes = mode_table(n, k_max) % points
    return spectrum[tuple(modes[:, a] for a in range(n))]


def coefficients_to_field(n: int, m: int, k_max: int, components: dict, tol: float = DROP_TOL) -> FourierField:
    fld = FourierField(n, m, k_max, {mono: np.asarray(c, dtype=complex) for mono, c in components.items()})
    return fld.symmetrize().prune(tol)


def monomial_basis(n: int, m: int, max_degree: int) -> list:
    """Monomials (l, i, j) of total degree <= max_degree, lowest degree first."""
    size = n + 2 * m
    basis = []
    for total in range(max_degree + 1):
        for exps in itertools.product(range(total + 1), repeat=size):
            if sum(exps) == total:
                basis.append((tuple(exps[:n]), tuple(exps[n:n + m]), tuple(exps[n + m:])))
    return basis


def project_collocation(values: np.ndarray, n: int, m: int, points: int, nodes: np.ndarray,
                        k_max: int, max_degree: int = 4, radius: float = 1.0,
                        tol: float = DROP_TOL) -> FourierField:
    """
    Project samples on (angle grid) x (action nodes) onto a FourierField.

    Args:
        values: Samples, shape (points**n, len(nodes))
        nodes: Action nodes, shape (N_nodes, n + 2m), columns ordered (y, u, v)
        radius: Scale of the nodes; monomials are fitted in scaled variables

    Returns:
        FourierField of total polynomial degree <= max_degree
    """
    coeffs = grid_coefficients(values, n, points, k_max)  # (M, N_nodes)
    basis = monomial_basis(n, m, max_degree)
    scaled = np.asarray(nodes, dtype=float) / radius
    design = np.stack([
        _monomial_factor(mono, scaled[:, :n], scaled[:, n:n + m], scaled[:, n + m:]) for mono in basis
    ], axis=1)
    solution, _, rank, _ = np.linalg.lstsq(design, coeffs.T, rcond=None)
    if rank < len(basis):
        logger.warning(f"Collocation design has rank {rank} < {len(basis)} monomials")
    components = {mono: solution[b] / radius ** degree(mono) for b, mono in enumerate(basis)}
    return coefficients_to_field(n, m, k_max, components, tol)
