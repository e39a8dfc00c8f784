"""
Symplectic maps in mixed-variable form.

Every map here follows one protocol: ``step(z)`` takes a batch of points and
returns a StepResult with the lifted increment ``dz`` (so image = z + dz with
unreduced angles) and the primitive D of the map, q'dp' - q dp = dD. Maps can
be centred at an action value xi; their y-coordinate is then y - xi. Keeping
increments and local coordinates separate is what lets conjugated maps be
evaluated to round-off relative to the size of the perturbation.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp
from scipy.stats import linregress

from services.fourier import FourierField, evaluate_fields, recenter_actions
from services.model import GeneratingHamiltonian, SchemeModel

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
NEWTON_TOL = 1e-13
NEWTON_MAX_ITER = 50
FIXED_POINT_RTOL = 1e-15
COMPLEX_STEP = 1e-20


class ImplicitSolveError(Exception):
    """Raised when an implicit relation cannot be solved"""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")


def reduce_angle(x):
    """x mod 2 pi, also valid for complex-step inputs (only the real part is wrapped)."""
    return x - TWO_PI * np.floor(np.real(x) / TWO_PI)


@dataclass(frozen=True)
class PhasePoint:
    """(x, u, y, v); arrays are (n,)/(m,) for one point or (N, n)/(N, m) for a batch."""

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    v: np.ndarray
    lifted_x: Optional[np.ndarray] = None

    @classmethod
    def of(cls, x, u, y, v) -> "PhasePoint":
        return cls(*(np.atleast_1d(np.asarray(a)) for a in (x, u, y, v)))

    @property
    def is_batch(self) -> bool:
        return np.ndim(self.x) == 2

    @property
    def size(self) -> int:
        return self.x.shape[0] if self.is_batch else 1

    def batch(self) -> "PhasePoint":
        if self.is_batch:
            return self
        lifted = None if self.lifted_x is None else self.lifted_x.reshape(1, -1)
        return PhasePoint(self.x.reshape(1, -1), self.u.reshape(1, -1), self.y.reshape(1, -1),
                          self.v.reshape(1, -1), lifted)

    def single(self) -> "PhasePoint":
        lifted = None if self.lifted_x is None else self.lifted_x[0]
        return PhasePoint(self.x[0], self.u[0], self.y[0], self.v[0], lifted)

    def stack(self) -> np.ndarray:
        """Coordinates in column order (x, u, y, v)."""
        b = self.batch()
        return np.concatenate([b.x, b.u, b.y, b.v], axis=1)

    @classmethod
    def from_stack(cls, arr: np.ndarray, n: int, m: int) -> "PhasePoint":
        arr = np.atleast_2d(arr)
        return cls(arr[:, :n], arr[:, n:n + m], arr[:, n + m:2 * n + m], arr[:, 2 * n + m:])

    def __add__(self, other: "PhasePoint") -> "PhasePoint":
        return PhasePoint(self.x + other.x, self.u + other.u, self.y + other.y, self.v + other.v)

    def zeros_like(self) -> "PhasePoint":
        return PhasePoint(*(np.zeros_like(a) for a in (self.x, self.u, self.y, self.v)))

    def reduced(self) -> "PhasePoint":
        """Angles wrapped to [0, 2 pi); the lift is kept in lifted_x."""
        lifted = self.x if self.lifted_x is None else self.lifted_x
        return PhasePoint(reduce_angle(self.x), self.u, self.y, self.v, lifted)


@dataclass(frozen=True)
class ImplicitSolveReport:
    iterations: int
    residual: float
    converged: bool

    @staticmethod
    def merge(reports) -> "ImplicitSolveReport":
        reports = list(reports)
        if not reports:
            return ImplicitSolveReport(0, 0.0, True)
        return ImplicitSolveReport(sum(r.iterations for r in reports), max(r.residual for r in reports),
                                   all(r.converged for r in reports))


@dataclass(frozen=True)
class StepResult:
    dz: PhasePoint
    primitive: np.ndarray
    report: ImplicitSolveReport
    trace: tuple = ()


class _FieldCache:
    """First and second partial derivative fields of one FourierField."""

    def __init__(self, fld: FourierField):
        self.field = fld
        self.dims = {"x": fld.n, "y": fld.n, "u": fld.m, "v": fld.m}
        self.first = {var: [fld.derivative(var, a) for a in range(size)] for var, size in self.dims.items()}
        self._second = {}

    def second(self, var1: str, var2: str) -> list:
        key = (var1, var2)
        if key not in self._second:
            self._second[key] = [[d.derivative(var2, b) for b in range(self.dims[var2])] for d in self.first[var1]]
        return self._second[key]

    def evaluate(self, groups, x, y, u, v) -> list:
        """Evaluate lists (and lists of lists) of fields with one shared phase matrix."""
        flat = []
        shapes = []
        for group in groups:
            if group and isinstance(group[0], list):
                shapes.append((len(group), len(group[0]) if group else 0))
                flat.extend(f for row in group for f in row)
            else:
                shapes.append((len(group),))
                flat.extend(group)
        rows = x.shape[0]
        values = evaluate_fields(flat, x, y, u, v) if flat else []
        out, pos = [], 0
        for shape in shapes:
            count = int(np.prod(shape))
            chunk = values[pos:pos + count]
            pos += count
            if count:
                arr = np.stack(chunk, axis=-1)
            else:
                dtype = np.result_type(x, y, u, v, float)
                arr = np.zeros((rows, 0), dtype=dtype)
            out.append(arr.reshape((rows,) + shape))
        return out


class TwistMap:
    """The implicit twist map generated by tH = tN + tP, optionally centred at xi."""

    def __init__(self, hamiltonian: GeneratingHamiltonian, center=None,
                 tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
        self.hamiltonian = hamiltonian
        self.n, self.m, self.t = hamiltonian.n, hamiltonian.m, hamiltonian.t
        self.center = np.zeros(self.n) if center is None else np.asarray(center, dtype=float).reshape(self.n)
        self.tol = tol
        self.max_iter = max_iter
        perturbation = hamiltonian.perturbation
        if np.any(self.center):
            perturbation = recenter_actions(perturbation, self.center)
        self.perturbation = perturbation
        self.fields = _FieldCache(perturbation)
        normal = hamiltonian.normal
        self.a_under = normal.a_underline
        self.b = normal.b_t
        self.c = normal.c_t
        self.frequency = hamiltonian.frequency

    def _omega(self, y_local):
        return self.frequency.omega(self.center + y_local)

    def _energy(self, y_local):
        return self.frequency.energy(self.center + y_local) - self.frequency.energy(self.center.reshape(1, -1))

    def generating_value(self, x, u, y_hat, v_hat):
        """tH(p, q_hat) in local coordinates."""
        value = (self.t * self._energy(y_hat)
                 + np.sum((self.a_under - 1.0) * u * v_hat, axis=1)
                 + 0.5 * np.sum(self.b * u ** 2, axis=1) + 0.5 * np.sum(self.c * v_hat ** 2, axis=1))
        return value + self.t * self.perturbation.evaluate(x, y_hat, u, v_hat) if self.perturbation.terms else value

    def step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        f = self.fields
        t = self.t
        x, u, y, v = z.x, z.u, z.y, z.v
        rows = x.shape[0]
        y_hat = y.copy()
        v_hat = (v - self.b * u) / self.a_under
        size = self.n + self.m
        eye = np.eye(size)
        polished = False
        residual = np.inf
        iterates = [PhasePoint(x, u, y_hat, v_hat)] if trace else []
        for iteration in range(1, self.max_iter + 1):
            px, pu, pxy, pxv, puy, puv = f.evaluate(
                [f.first["x"], f.first["u"], f.second("x", "y"), f.second("x", "v"),
                 f.second("u", "y"), f.second("u", "v")], x, y_hat, u, v_hat)
            res = np.concatenate([y_hat + t * px - y, self.a_under * v_hat + self.b * u + t * pu - v], axis=1)
            residual = float(np.max(np.abs(res))) if res.size else 0.0
            if residual <= self.tol:
                if polished or not f.field.terms:
                    break
                polished = True
            jac = np.zeros((rows, size, size), dtype=res.dtype)
            jac[:, :self.n, :self.n] = eye[:self.n, :self.n] + t * pxy
            jac[:, :self.n, self.n:] = t * pxv
            jac[:, self.n:, :self.n] = t * puy
            jac[:, self.n:, self.n:] = np.diag(self.a_under) + t * puv
            if iteration == 1 and f.field.terms:
                self._check_contraction(jac)
            try:
                delta = np.linalg.solve(jac, res[..., None])[..., 0]
            except np.linalg.LinAlgError:
                logger.error("Twist map Newton Jacobian is singular")
                raise ImplicitSolveError("singular Newton Jacobian", residual, iteration)
            y_hat = y_hat - delta[:, :self.n]
            v_hat = v_hat - delta[:, self.n:]
            if trace:
                iterates.append(PhasePoint(x, u, y_hat, v_hat))
        else:
            logger.warning(f"Twist map Newton did not converge: residual {residual:.3e}")
            raise ImplicitSolveError("Newton did not converge", residual, self.max_iter)

        py, pv = f.evaluate([f.first["y"], f.first["v"]], x, y_hat, u, v_hat)
        dx = t * self._omega(y_hat) + t * py
        du = (self.a_under - 1.0) * u + self.c * v_hat + t * pv
        dz = PhasePoint(dx, du, y_hat - y, v_hat - v)
        primitive = (np.sum(dx * y_hat, axis=1) + np.sum(du * v_hat, axis=1)
                     - self.generating_value(x, u, y_hat, v_hat))
        return StepResult(dz, primitive, ImplicitSolveReport(iteration, residual, True), tuple(iterates))

    def _check_contraction(self, jac):
        """The implicit system must be a contraction around its linear part."""
        base = np.concatenate([np.ones(self.n), self.a_under])
        offset = np.abs(jac - np.diag(base)) / np.abs(base)[None, :, None]
        contraction = float(np.max(np.sum(offset, axis=2))) if offset.size else 0.0
        if contraction >= 1.0:
            raise ImplicitSolveError(f"implicit system is not a contraction ({contraction:.3f} >= 1)")

    def inverse_step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        """Inverse map: Newton on (x, u) from x_hat = x + dH/dy_hat, u_hat = u + dH/dv_hat."""
        f = self.fields
        t = self.t
        x_hat, u_hat, y_hat, v_hat = z.x, z.u, z.y, z.v
        rows = x_hat.shape[0]
        x = x_hat - t * self._omega(y_hat)
        u = (u_hat - self.c * v_hat) / self.a_under
        size = self.n + self.m
        polished = False
        residual = np.inf
        iterates = [PhasePoint(x, u, y_hat, v_hat)] if trace else []
        for iteration in range(1, self.max_iter + 1):
            py, pv, pyx, pyu, pvx, pvu = f.evaluate(
                [f.first["y"], f.first["v"], f.second("y", "x"), f.second("y", "u"),
                 f.second("v", "x"), f.second("v", "u")], x, y_hat, u, v_hat)
            res = np.concatenate([x + t * self._omega(y_hat) + t * py - x_hat,
                                  self.a_under * u + self.c * v_hat + t * pv - u_hat], axis=1)
            residual = float(np.max(np.abs(res))) if res.size else 0.0
            if residual <= self.tol:
                if polished or not f.field.terms:
                    break
                polished = True
            jac = np.zeros((rows, size, size), dtype=res.dtype)
            jac[:, :self.n, :self.n] = np.eye(self.n) + t * pyx
            jac[:, :self.n, self.n:] = t * pyu
            jac[:, self.n:, :self.n] = t * pvx
            jac[:, self.n:, self.n:] = np.diag(self.a_under) + t * pvu
            try:
                delta = np.linalg.solve(jac, res[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise ImplicitSolveError("singular Newton Jacobian", residual, iteration)
            x = x - delta[:, :self.n]
            u = u - delta[:, self.n:]
            if trace:
                iterates.append(PhasePoint(x, u, y_hat, v_hat))
        else:
            raise ImplicitSolveError("inverse Newton did not converge", residual, self.max_iter)

        px, pu = f.evaluate([f.first["x"], f.first["u"]], x, y_hat, u, v_hat)
        y = y_hat + t * px
        v = self.a_under * v_hat + self.b * u + t * pu
        dz = PhasePoint(x - x_hat, u - u_hat, y - y_hat, v - v_hat)
        forward_primitive = (np.sum((x_hat - x) * y_hat, axis=1) + np.sum((u_hat - u) * v_hat, axis=1)
                             - self.generating_value(x, u, y_hat, v_hat))
        return StepResult(dz, -forward_primitive, ImplicitSolveReport(iteration, residual, True), tuple(iterates))


class MidpointScheme:
    """Implicit midpoint rule for H_eps = H0 + eps H1 with step t."""

    def __init__(self, model: SchemeModel, t: float, center=None,
                 tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
        self.model = model
        self.n, self.m, self.t = model.n, model.m, float(t)
        self.center = np.zeros(self.n) if center is None else np.asarray(center, dtype=float).reshape(self.n)
        self.tol = tol
        self.max_iter = max_iter
        h1 = model.h1
        if np.any(self.center):
            h1 = recenter_actions(h1, self.center)
        self.fields = _FieldCache(h1.scale(model.epsilon))
        self.order = ("x", "u", "y", "v")

    def _split(self, z: PhasePoint):
        return z.x, z.u, z.y, z.v

    def gradient(self, z: PhasePoint) -> np.ndarray:
        """grad H in column order (x, u, y, v)."""
        f = self.fields
        x, u, y, v = self._split(z)
        px, pu, py, pv = f.evaluate([f.first["x"], f.first["u"], f.first["y"], f.first["v"]], x, y, u, v)
        freq = self.model.frequency.omega(self.center + y)
        a, b, c = self.model.a, self.model.b, self.model.c
        return np.concatenate([px, a * v + b * u + pu, freq + py, a * u + c * v + pv], axis=1)

    def hessian(self, z: PhasePoint) -> np.ndarray:
        f = self.fields
        x, u, y, v = self._split(z)
        rows = x.shape[0]
        groups = [f.second(v1, v2) for v1 in self.order for v2 in self.order]
        values = f.evaluate(groups, x, y, u, v)
        dims = {"x": self.n, "u": self.m, "y": self.n, "v": self.m}
        offsets = {"x": 0, "u": self.n, "y": self.n + self.m, "v": 2 * self.n + self.m}
        size = 2 * (self.n + self.m)
        hess = np.zeros((rows, size, size), dtype=np.result_type(x, y, u, v, float))
        pos = 0
        for v1 in self.order:
            for v2 in self.order:
                block = values[pos]
                pos += 1
                o1, o2 = offsets[v1], offsets[v2]
                hess[:, o1:o1 + dims[v1], o2:o2 + dims[v2]] += block
        yo, uo, vo = offsets["y"], offsets["u"], offsets["v"]
        hess[:, yo:yo + self.n, yo:yo + self.n] += self.model.frequency.hessian(self.center + y)
        m = self.m
        hess[:, uo:uo + m, uo:uo + m] += np.diag(self.model.b)
        hess[:, vo:vo + m, vo:vo + m] += np.diag(self.model.c)
        hess[:, uo:uo + m, vo:vo + m] += np.diag(self.model.a)
        hess[:, vo:vo + m, uo:uo + m] += np.diag(self.model.a)
        return hess

    def value(self, z: PhasePoint) -> np.ndarray:
        """H in local coordinates, with h(xi) subtracted."""
        x, u, y, v = self._split(z)
        freq = self.model.frequency
        value = (freq.energy(self.center + y) - freq.energy(self.center.reshape(1, -1))
                 + np.sum(self.model.a * u * v, axis=1)
                 + 0.5 * np.sum(self.model.b * u ** 2, axis=1) + 0.5 * np.sum(self.model.c * v ** 2, axis=1))
        if self.fields.field.terms:
            value = value + self.fields.field.evaluate(x, y, u, v)
        return value

    def _vector_field(self, grad: np.ndarray) -> np.ndarray:
        p = self.n + self.m
        return np.concatenate([grad[:, p:], -grad[:, :p]], axis=1)

    def _solve(self, z: PhasePoint, t: float, trace: bool = False) -> StepResult:
        """Newton on the midpoint relation; with trace, the midpoints of every iterate."""
        n, m = self.n, self.m
        base = z.stack()
        size = base.shape[1]
        p = n + m
        symplectic = np.block([[np.zeros((p, p)), np.eye(p)], [-np.eye(p), np.zeros((p, p))]])
        dz = t * self._vector_field(self.gradient(z))
        polished = False
        residual = np.inf
        iterates = []
        for iteration in range(1, self.max_iter + 1):
            mid = PhasePoint.from_stack(base + 0.5 * dz, n, m)
            if trace:
                iterates.append(mid)
            res = dz - t * self._vector_field(self.gradient(mid))
            residual = float(np.max(np.abs(res)))
            if residual <= self.tol:
                if polished:
                    break
                polished = True
            jac = np.eye(size) - 0.5 * t * symplectic @ self.hessian(mid)
            try:
                dz = dz - np.linalg.solve(jac, res[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise ImplicitSolveError("singular Newton Jacobian", residual, iteration)
        else:
            logger.warning(f"Midpoint Newton did not converge: residual {residual:.3e}")
            raise ImplicitSolveError("Newton did not converge", residual, self.max_iter)

        mid = PhasePoint.from_stack(base + 0.5 * dz, n, m)
        q_mid = base[:, p:] + 0.5 * dz[:, p:]
        primitive = np.sum(q_mid * dz[:, :p], axis=1) - t * self.value(mid)
        return StepResult(PhasePoint.from_stack(dz, n, m), primitive,
                          ImplicitSolveReport(iteration, residual, True), tuple(iterates))

    def step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        return self._solve(z, self.t, trace)

    def inverse_step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        # the midpoint rule is symmetric: its inverse is the step with -t
        return self._solve(z, -self.t, trace)


class NearIdentityMap:
    """
    psi: (p+, q+) -> (p, q) defined by p+ = p + F_q(p, q+), q = q+ + F_p(p, q+).

    The generator is a FourierField in (x, y, u, v) whose y and v slots hold q+.
    """

    def __init__(self, generator: FourierField, max_iter: int = 100, rtol: float = FIXED_POINT_RTOL):
        self.generator = generator
        self.fields = _FieldCache(generator)
        self.max_iter = max_iter
        self.rtol = rtol

    def _gradients(self, x, u, y, v):
        f = self.fields
        return f.evaluate([f.first["x"], f.first["u"], f.first["y"], f.first["v"]], x, y, u, v)

    def _iterate(self, update: Callable, start):
        current = start
        change = np.inf
        for iteration in range(1, self.max_iter + 1):
            new = update(current)
            change = max((float(np.max(np.abs(a - b))) if a.size else 0.0) for a, b in zip(new, current))
            scale = max((float(np.max(np.abs(a))) if a.size else 0.0) for a in new)
            current = new
            if change == 0.0 or change <= self.rtol * scale:
                return current, ImplicitSolveReport(iteration, change, True)
        raise ImplicitSolveError("near-identity fixed point did not converge", change, self.max_iter)

    def step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        if not self.generator.terms:
            return StepResult(z.zeros_like(), np.zeros(z.x.shape[0]), ImplicitSolveReport(0, 0.0, True))
        x_plus, u_plus, y_plus, v_plus = z.x, z.u, z.y, z.v
        iterates = []

        def update(dp):
            if trace:
                iterates.append(PhasePoint(x_plus + dp[0], u_plus + dp[1], y_plus, v_plus))
            _, _, fy, fv = self._gradients(x_plus + dp[0], u_plus + dp[1], y_plus, v_plus)
            return (-fy, -fv)

        (dx, du), report = self._iterate(update, (np.zeros_like(x_plus), np.zeros_like(u_plus)))
        x, u = x_plus + dx, u_plus + du
        fx, fu, _, _ = self._gradients(x, u, y_plus, v_plus)
        value = self.generator.evaluate(x, y_plus, u, v_plus)
        primitive = value + np.sum(dx * y_plus, axis=1) + np.sum(du * v_plus, axis=1)
        return StepResult(PhasePoint(dx, du, fx, fu), primitive, report, tuple(iterates))

    def inverse_step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        if not self.generator.terms:
            return StepResult(z.zeros_like(), np.zeros(z.x.shape[0]), ImplicitSolveReport(0, 0.0, True))
        x, u, y, v = z.x, z.u, z.y, z.v
        iterates = []

        def update(dq):
            if trace:
                iterates.append(PhasePoint(x, u, y + dq[0], v + dq[1]))
            fx, fu, _, _ = self._gradients(x, u, y + dq[0], v + dq[1])
            return (-fx, -fu)

        (dy, dv), report = self._iterate(update, (np.zeros_like(y), np.zeros_like(v)))
        y_plus, v_plus = y + dy, v + dv
        _, _, fy, fv = self._gradients(x, u, y_plus, v_plus)
        value = self.generator.evaluate(x, y_plus, u, v_plus)
        primitive = -value + np.sum(fy * y_plus, axis=1) + np.sum(fv * v_plus, axis=1)
        return StepResult(PhasePoint(fy, fv, dy, dv), primitive, report, tuple(iterates))


class LinearNormalizer:
    """psi_bar: (u+, v+) -> (u, v) = (u+/lambda - beta v+, lambda v+), identity on (x, y)."""

    def __init__(self, lam, beta):
        self.lam = np.asarray(lam, dtype=float)
        self.beta = np.asarray(beta, dtype=float)

    def step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        u_plus, v_plus = z.u, z.v
        du = u_plus * (1.0 / self.lam - 1.0) - self.beta * v_plus
        dv = (self.lam - 1.0) * v_plus
        primitive = -0.5 * np.sum(self.lam * self.beta * v_plus ** 2, axis=1)
        dz = PhasePoint(np.zeros_like(z.x), du, np.zeros_like(z.y), dv)
        return StepResult(dz, primitive, ImplicitSolveReport(0, 0.0, True), (z, z + dz) if trace else ())

    def inverse_step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        v_plus = z.v / self.lam
        u_plus = self.lam * (z.u + self.beta * v_plus)
        primitive = 0.5 * np.sum(self.lam * self.beta * v_plus ** 2, axis=1)
        dz = PhasePoint(np.zeros_like(z.x), u_plus - z.u, np.zeros_like(z.y), v_plus - z.v)
        return StepResult(dz, primitive, ImplicitSolveReport(0, 0.0, True), (z, z + dz) if trace else ())


class Composition:
    """Psi = e_0 o e_1 o ... o e_L; e_L is applied first."""

    def __init__(self, elements):
        self.elements = list(elements)

    def step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        point, total, primitive, reports, points = z, z.zeros_like(), np.zeros(z.x.shape[0]), [], [z]
        for element in reversed(self.elements):
            result = element.step(point)
            total = total + result.dz
            primitive = primitive + result.primitive
            point = z + total
            reports.append(result.report)
            points.append(point)
        return StepResult(total, primitive, ImplicitSolveReport.merge(reports), tuple(points) if trace else ())

    def inverse_step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        point, total, primitive, reports, points = z, z.zeros_like(), np.zeros(z.x.shape[0]), [], [z]
        for element in self.elements:
            result = element.inverse_step(point)
            total = total + result.dz
            primitive = primitive + result.primitive
            point = z + total
            reports.append(result.report)
            points.append(point)
        return StepResult(total, primitive, ImplicitSolveReport.merge(reports), tuple(points) if trace else ())


class ConjugatedMap:
    """Psi^-1 o base o Psi for a Composition Psi; trace records (z, Psi z, base Psi z, image)."""

    def __init__(self, base, transforms):
        self.base = base
        self.transform = transforms if isinstance(transforms, Composition) else Composition(transforms)

    def step(self, z: PhasePoint, trace: bool = False) -> StepResult:
        inner = self.transform.step(z)
        moved = z + inner.dz
        core = self.base.step(moved)
        after = moved + core.dz
        outer = self.transform.inverse_step(after)
        total = inner.dz + core.dz + outer.dz
        primitive = inner.primitive + core.primitive + outer.primitive
        report = ImplicitSolveReport.merge([inner.report, core.report, outer.report])
        return StepResult(total, primitive, report, (z, moved, after, z + total) if trace else ())


@dataclass(frozen=True)
class MixedSolution:
    """Generating-function data of a map at mixed points (p, q_hat)."""

    start: PhasePoint
    dz: PhasePoint
    value: np.ndarray
    grad_x: np.ndarray
    grad_u: np.ndarray
    grad_y: np.ndarray
    grad_v: np.ndarray
    trace: tuple = ()
    iterations: int = 0


def solve_mixed(map_, x, u, y_hat, v_hat, a_underline, b, rtol: float = FIXED_POINT_RTOL,
                max_iter: int = 100, trace: bool = False) -> MixedSolution:
    """
    Find q with map(p, q) = (p_hat, q_hat) for given (p, q_hat) by a chord iteration.

    The chord matrix is the unperturbed dq_hat/dq = diag(I, 1/a_underline). The
    result carries the generating function tH(p, q_hat) = <p_hat - p, q_hat> - D
    and its gradient (q - q_hat, p_hat - p).
    """
    y = np.array(y_hat, copy=True)
    v = a_underline * v_hat + b * u
    history = []
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        start = PhasePoint(x, u, y, v)
        result = map_.step(start, trace=trace)
        res_y = y + result.dz.y - y_hat
        res_v = v + result.dz.v - v_hat
        residual = max((float(np.max(np.abs(r))) if r.size else 0.0) for r in (res_y, res_v))
        scale = max((float(np.max(np.abs(a))) if a.size else 0.0) for a in (y, v, y_hat, v_hat))
        history.append(residual)
        converged = residual == 0.0 or residual <= rtol * scale
        stagnated = (len(history) > 3 and residual >= 0.5 * history[-4]
                     and residual <= 1e-12 * (1.0 + scale))
        if converged or stagnated:
            break
        y = y - res_y
        v = v - a_underline * res_v
    else:
        logger.warning(f"Mixed-variable chord iteration stalled at residual {residual:.3e}")
        raise ImplicitSolveError("mixed-variable solve did not converge", residual, max_iter)

    dz = result.dz
    value = np.sum(dz.x * y_hat, axis=1) + np.sum(dz.u * v_hat, axis=1) - result.primitive
    return MixedSolution(start, dz, value, y - y_hat, v - v_hat, dz.x, dz.u, result.trace, iteration)


def apply_twist_map(hamiltonian: GeneratingHamiltonian, z: PhasePoint,
                    tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
    """
    One step of the twist map generated by tH.

    Args:
        hamiltonian: Generating Hamiltonian tH = tN + tP
        z: PhasePoint (single point or batch)

    Returns:
        (image PhasePoint with x reduced mod 2 pi and lifted_x kept, ImplicitSolveReport)
    """
    batch = z.batch()
    result = TwistMap(hamiltonian, tol=tol, max_iter=max_iter).step(batch)
    image = _image(batch, result.dz)
    return (image if z.is_batch else image.single()), result.report


def inverse_twist_map(hamiltonian: GeneratingHamiltonian, z: PhasePoint,
                      tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
    batch = z.batch()
    result = TwistMap(hamiltonian, tol=tol, max_iter=max_iter).inverse_step(batch)
    image = _image(batch, result.dz)
    return (image if z.is_batch else image.single()), result.report


def apply_scheme(model: SchemeModel, z: PhasePoint, t: float,
                 tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER):
    """One implicit-midpoint step of H_eps with step t."""
    batch = z.batch()
    result = MidpointScheme(model, t, tol=tol, max_iter=max_iter).step(batch)
    image = _image(batch, result.dz)
    return (image if z.is_batch else image.single()), result.report


def _image(z: PhasePoint, dz: PhasePoint) -> PhasePoint:
    lifted = (z.x if z.lifted_x is None else z.lifted_x) + dz.x
    moved = z + dz
    return PhasePoint(reduce_angle(moved.x), moved.u, moved.y, moved.v, lifted)


def jacobian(step: Callable, z: PhasePoint, h: float = COMPLEX_STEP) -> np.ndarray:
    """
    Complex-step Jacobian of a map, columns ordered (x, u, y, v).

    Args:
        step: Callable taking a batch PhasePoint and returning its increment PhasePoint
        z: Base point (single)
    """
    base = z.batch().stack()
    n, m = z.batch().x.shape[1], z.batch().u.shape[1]
    size = base.shape[1]
    perturbed = np.repeat(base.astype(complex), size, axis=0) + 1j * h * np.eye(size)
    dz = step(PhasePoint.from_stack(perturbed, n, m)).stack()
    return np.eye(size) + np.imag(dz).T / h


def twist_step(hamiltonian: GeneratingHamiltonian, **kwargs) -> Callable:
    twist = TwistMap(hamiltonian, **kwargs)
    return lambda z: twist.step(z).dz


def scheme_step(model: SchemeModel, t: float, **kwargs) -> Callable:
    scheme = MidpointScheme(model, t, **kwargs)
    return lambda z: scheme.step(z).dz


def symplectic_form(n: int, m: int) -> np.ndarray:
    p = n + m
    return np.block([[np.zeros((p, p)), np.eye(p)], [-np.eye(p), np.zeros((p, p))]])


def symplecticity_defect(jac: np.ndarray, n: int, m: int) -> float:
    """||J^T S J - S||_inf for the standard form sum dx^dy + sum du^dv."""
    form = symplectic_form(n, m)
    return float(np.max(np.abs(jac.T @ form @ jac - form)))


@dataclass(frozen=True)
class Orbit:
    points: np.ndarray  # (steps + 1, 2(n + m)) with reduced x
    lifted_x: np.ndarray  # (steps + 1, n)
    n: int
    m: int


def iterate_orbit(step: Callable, z0: PhasePoint, steps: int) -> Orbit:
    """Iterate a map given as an increment function, keeping the lifted angles."""
    point = z0.batch()
    n, m = point.x.shape[1], point.u.shape[1]
    lifted = point.x.copy() if point.lifted_x is None else point.lifted_x.copy()
    points = [point.stack()[0]]
    lifts = [lifted[0].copy()]
    for _ in range(steps):
        dz = step(point)
        lifted = lifted + dz.x
        point = _image(point, dz)
        points.append(point.stack()[0])
        lifts.append(lifted[0].copy())
    return Orbit(np.array(points), np.array(lifts), n, m)


def orbit_frame(orbit: Orbit) -> pd.DataFrame:
    """Orbit table with header step,x...,u...,y...,v...,lifted_x..."""
    n, m = orbit.n, orbit.m
    columns = ([f"x{a + 1}" for a in range(n)] + [f"u{a + 1}" for a in range(m)]
               + [f"y{a + 1}" for a in range(n)] + [f"v{a + 1}" for a in range(m)])
    frame = pd.DataFrame(orbit.points, columns=columns)
    for a in range(n):
        frame[f"lifted_x{a + 1}"] = orbit.lifted_x[:, a]
    frame.insert(0, "step", np.arange(len(frame)))
    return frame


def reference_flow(model: SchemeModel, z: PhasePoint, t: float) -> PhasePoint:
    """Exact flow surrogate: DOP853 with tight tolerances, lifted angles."""
    scheme = MidpointScheme(model, t)
    start = z.batch()
    n, m = start.x.shape[1], start.u.shape[1]

    def rhs(_, state):
        point = PhasePoint.from_stack(state.reshape(1, -1), n, m)
        return scheme._vector_field(scheme.gradient(point))[0]

    solution = solve_ivp(rhs, (0.0, t), start.stack()[0], method="DOP853", rtol=1e-13, atol=1e-15)
    if not solution.success:
        raise ImplicitSolveError(f"reference integrator failed: {solution.message}")
    return PhasePoint.from_stack(solution.y[:, -1].reshape(1, -1), n, m)


def scheme_defect(model: SchemeModel, z: PhasePoint, t: float) -> float:
    """One-step distance between implicit midpoint and the reference flow (lifted angles)."""
    start = z.batch()
    step = MidpointScheme(model, t).step(start)
    exact = reference_flow(model, start, t)
    return float(np.max(np.abs((start + step.dz).stack() - exact.stack())))


def fit_defect_order(model: SchemeModel, z: PhasePoint, t_values) -> float:
    """Slope of log(defect) against log(t); about s + 1 for a method of order s."""
    defects = [scheme_defect(model, z, t) for t in t_values]
    fit = linregress(np.log(t_values), np.log(defects))
    logger.debug(f"Scheme defects {defects} -> fitted exponent {fit.slope:.3f}")
    return float(fit.slope)


def estimate_remainder_constant(model: SchemeModel, points, t: float) -> SchemeModel:
    """Measured M2 = max defect / t^(s+1); returns the model with m2 filled in."""
    worst = max(scheme_defect(model, z, t) for z in points)
    return replace(model, m2=worst / t ** (model.order + 1))
