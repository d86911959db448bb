"""Value types for control-affine systems, barrier functions and sets, plus ZOH simulation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class EvaluationError(ValueError):
    """A dynamics or barrier evaluation produced non-finite values."""


class DivergenceError(RuntimeError):
    """A rollout left the declared validity box."""


class ControllerFailure(RuntimeError):
    """Raised when a controller fails during a rollout; carries the failing step."""

    def __init__(self, message: str, step: int, time: float):
        super().__init__(f"{message} (step {step}, t={time:.6g} s)")
        self.step = step
        self.time = time


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Central finite-difference Jacobian with step 1e-6*(1+|x_j|).

    Returns an array of shape ``fun(x).shape + (n,)``.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x), dtype=float)
    jac = np.empty(f0.shape + (x.size,))
    for j in range(x.size):
        step = 1e-6 * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        jac[..., j] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * step)
    return jac


def _check_finite(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"non-finite value in {what}: {arr!r}")
    return arr


@dataclass(frozen=True)
class Hyperrectangle:
    """Axis-aligned box ``{x | lo <= x <= hi}``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("lo and hi must have the same shape")
        if np.any(lo > hi):
            raise ValueError("lo must be <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def centered(cls, half_width) -> "Hyperrectangle":
        hw = np.atleast_1d(np.asarray(half_width, dtype=float))
        return cls(-hw, hw)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def vertices(self) -> np.ndarray:
        """All 2^n corners, shape (2^n, n). Degenerate axes still count twice."""
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float).reshape(-1, self.dim)

    def grid(self, per_dim: int) -> np.ndarray:
        """Regular grid with ``per_dim`` points on every non-degenerate axis."""
        axes = [np.unique(np.linspace(l, h, per_dim)) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def scaled(self, factor: float) -> "Hyperrectangle":
        c, hw = self.center, self.half_width
        return Hyperrectangle(c - factor * hw, c + factor * hw)


@dataclass(frozen=True)
class Polytope:
    """H-representation ``{u | A u <= b}``; nonemptiness is certified by an LP at construction."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape[0] != b.size:
            raise ValueError("A and b row counts differ")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        from .opt.lp import solve_lp

        res = solve_lp(np.zeros(A.shape[1]), A, b)
        if res.status == "infeasible":
            raise ValueError("polytope is empty")

    @classmethod
    def from_box(cls, lo, hi) -> "Polytope":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        m = lo.size
        return cls(np.vstack([np.eye(m), -np.eye(m)]), np.concatenate([hi, -lo]))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def contains(self, u, tol: float = 1e-9) -> bool:
        return bool(np.all(self.A @ np.atleast_1d(u) <= self.b + tol))

    def is_bounded(self) -> bool:
        from .opt.lp import solve_lp

        for j in range(self.dim):
            for sgn in (1.0, -1.0):
                c = np.zeros(self.dim)
                c[j] = sgn
                if solve_lp(c, self.A, self.b).status != "optimal":
                    return False
        return True

    def bounding_box(self) -> Hyperrectangle:
        from .opt.lp import solve_lp

        lo = np.empty(self.dim)
        hi = np.empty(self.dim)
        for j in range(self.dim):
            c = np.zeros(self.dim)
            c[j] = 1.0
            r_lo = solve_lp(c, self.A, self.b)
            r_hi = solve_lp(c, self.A, self.b, sense="max")
            if r_lo.status != "optimal" or r_hi.status != "optimal":
                raise ValueError("polytope is unbounded")
            lo[j], hi[j] = r_lo.value, r_hi.value
        return Hyperrectangle(lo, hi)

    def vertices(self, tol: float = 1e-9) -> np.ndarray:
        """Vertex enumeration by brute force over m-subsets of facets (small m only)."""
        if not self.is_bounded():
            raise ValueError("polytope is unbounded")
        m = self.dim
        found = []
        for rows in itertools.combinations(range(self.A.shape[0]), m):
            Asub = self.A[list(rows)]
            if abs(np.linalg.det(Asub)) < 1e-12:
                continue
            v = np.linalg.solve(Asub, self.b[list(rows)])
            if self.contains(v, tol) and not any(np.allclose(v, w, atol=1e-9) for w in found):
                found.append(v)
        return np.array(found).reshape(-1, m)


@dataclass(frozen=True)
class ControlAffineSystem:
    """Dynamics ``xdot = f(x) + B(x) u``.

    ``df_dx`` and ``dB_dx`` default to central finite differences. ``validity``
    is an optional box outside which rollouts raise :class:`DivergenceError`.
    """

    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    B: Callable[[np.ndarray], np.ndarray]
    df_dx: Optional[Callable[[np.ndarray], np.ndarray]] = None
    dB_dx: Optional[Callable[[np.ndarray], np.ndarray]] = None
    validity: Optional[Hyperrectangle] = None
    F: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None  # fused f + B u, for speed

    def drift(self, x) -> np.ndarray:
        return _check_finite(np.reshape(self.f(np.asarray(x, dtype=float)), (self.n,)), "f(x)")

    def input_matrix(self, x) -> np.ndarray:
        return _check_finite(np.reshape(self.B(np.asarray(x, dtype=float)), (self.n, self.m)), "B(x)")

    def xdot(self, x, u) -> np.ndarray:
        u = np.reshape(np.asarray(u, dtype=float), (self.m,))
        if self.F is not None:
            return self.F(np.asarray(x, dtype=float), u)
        return self.drift(x) + self.input_matrix(x) @ u

    def jac_f(self, x) -> np.ndarray:
        if self.df_dx is not None:
            return np.asarray(self.df_dx(x), dtype=float)
        return fd_jacobian(self.drift, x)

    def jac_B(self, x) -> np.ndarray:
        """Derivative of B, shape (n, m, n)."""
        if self.dB_dx is not None:
            return np.asarray(self.dB_dx(x), dtype=float)
        return fd_jacobian(self.input_matrix, x)


def _identity(r):
    return r


@dataclass(frozen=True)
class Cbf:
    """Barrier ``h`` with gradient and extended class-K rate ``alpha``."""

    h: Callable[[np.ndarray], float]
    grad_h: Callable[[np.ndarray], np.ndarray]
    alpha: Callable[[float], float] = _identity
    # Hessian of h, shape (n, n); finite differences of grad_h when missing.
    hess_h: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def value(self, x) -> float:
        return float(_check_finite(self.h(np.asarray(x, dtype=float)), "h(x)"))

    def gradient(self, x) -> np.ndarray:
        return _check_finite(self.grad_h(np.asarray(x, dtype=float)), "grad_h(x)")

    def hessian(self, x) -> np.ndarray:
        if self.hess_h is not None:
            return np.asarray(self.hess_h(x), dtype=float)
        return fd_jacobian(self.gradient, x)


def linear_alpha(gamma: float) -> Callable[[float], float]:
    """Extended class-K function ``r -> gamma * r``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")

    def alpha(r):
        return gamma * r

    alpha.gamma = gamma
    return alpha


def quadratic_cbf(P, c: float = 1.0, alpha=_identity, center=None) -> Cbf:
    """``h(x) = c - (x-center)^T P (x-center)``."""
    P = np.asarray(P, dtype=float)
    center = np.zeros(P.shape[0]) if center is None else np.asarray(center, dtype=float)

    def h(x):
        d = x - center
        return c - d @ P @ d

    def grad(x):
        return -2.0 * P @ (x - center)

    def hess(x):
        return -2.0 * P

    cbf = Cbf(h, grad, alpha, hess)
    object.__setattr__(cbf, "P", P)
    object.__setattr__(cbf, "level", c)
    return cbf


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    h_values: Optional[np.ndarray] = None
    # index into times of each control-interval start
    sample_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.states.shape[0] != self.times.size:
            raise ValueError("states and times lengths differ")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def eval_cbf_condition(sys: ControlAffineSystem, cbf: Cbf, x, u) -> float:
    """Affine CBF condition ``grad_h(x)^T (f(x) + B(x) u) + alpha(h(x))``."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.size != sys.n or u.size != sys.m:
        raise ValueError(f"dimension mismatch: x has {x.size} (n={sys.n}), u has {u.size} (m={sys.m})")
    g = cbf.gradient(x)
    val = g @ (sys.drift(x) + sys.input_matrix(x) @ u) + cbf.alpha(cbf.value(x))
    return float(_check_finite(val, "CBF condition"))


def rk4_step(sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = sys.xdot(x, u)
    k2 = sys.xdot(x + 0.5 * dt * k1, u)
    k3 = sys.xdot(x + 0.5 * dt * k2, u)
    k4 = sys.xdot(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_interval(sys: ControlAffineSystem, x0, u, period: float, substeps: int,
                       validity: Optional[Hyperrectangle] = None) -> np.ndarray:
    """States at every substep of one held-input interval, shape (substeps+1, n)."""
    validity = validity if validity is not None else sys.validity
    dt = period / substeps
    out = np.empty((substeps + 1, sys.n))
    out[0] = x0
    for i in range(substeps):
        out[i + 1] = rk4_step(sys, out[i], u, dt)
        if validity is not None and not validity.contains(out[i + 1]):
            raise DivergenceError(f"state left validity box: {out[i + 1]!r}")
    return out


def zoh_rollout(sys: ControlAffineSystem, controller: Callable[[np.ndarray, float], np.ndarray],
                x0, horizon: float, control_period: float, substeps: int = 10,
                cbf: Optional[Cbf] = None) -> Trajectory:
    """Closed loop with the controller sampled every ``control_period`` and fixed-step RK4 in between."""
    if control_period <= 0:
        raise ValueError("control_period must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    n_int = int(round(horizon / control_period))
    if not np.isclose(n_int * control_period, horizon, rtol=1e-9, atol=1e-12):
        n_int = int(np.ceil(horizon / control_period - 1e-9))
    x = np.asarray(x0, dtype=float).copy()
    times = [0.0]
    states = [x.copy()]
    inputs = []
    sample_index = []
    for k in range(n_int):
        t_k = k * control_period
        period = min(control_period, horizon - t_k)
        try:
            u = np.atleast_1d(np.asarray(controller(x, t_k), dtype=float))
        except ControllerFailure:
            raise
        except Exception as exc:  # noqa: BLE001 - rethrown with step info
            raise ControllerFailure(str(exc), k, t_k) from exc
        inputs.append(u)
        sample_index.append(len(times) - 1)
        seg = integrate_interval(sys, x, u, period, substeps)
        dt = period / substeps
        times.extend(t_k + dt * np.arange(1, substeps + 1))
        states.extend(seg[1:])
        x = seg[-1]
    h_values = None
    if cbf is not None:
        h_values = np.array([cbf.value(s) for s in states])
    return Trajectory(np.array(times), np.array(states), np.array(inputs).reshape(-1, sys.m),
                      h_values, np.array(sample_index, dtype=int))
