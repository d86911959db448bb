"""Lipschitz-like constants and the inter-sample disturbance hypercubes.

Along any trajectory of ``xdot = f(x) + B(x) u`` inside ``X``, a map ``phi``
changes at most at rate ``L_phi * v_max`` where ``L_phi`` bounds the gradient
of ``phi`` and ``v_max`` the speed of the vector field. Over one sampling
period ``T`` the drift of ``phi`` therefore stays in a box of half-width
``L_phi * v_max * T``. Maxima are taken over regular grids and inflated by a
safety factor instead of being computed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core_model import Cbf, ControlAffineSystem, EvaluationError, Hyperrectangle, Polytope, fd_jacobian

DEFAULT_INFLATION = 1.1


@dataclass(frozen=True)
class LipschitzBudget:
    """Gradient bound ``L_phi`` and speed bound ``v_max`` of the vector field.

    Either ``L_phi`` is a vector (one bound per output of ``phi``) and
    ``v_max`` the scalar speed bound, or ``L_phi`` is a matrix of
    ``max |d phi_k / d x_j|`` and ``v_max`` holds ``max |xdot_j|`` per state
    dimension. ``L_tilde`` is the product in both cases.
    """

    L_phi: np.ndarray
    v_max: np.ndarray | float
    T: Optional[float] = None

    def __post_init__(self):
        L = np.asarray(self.L_phi, dtype=float)
        L = L if L.ndim == 2 else np.atleast_1d(L)
        v = np.asarray(self.v_max, dtype=float)
        if np.any(L < 0) or np.any(v < 0):
            raise ValueError("Lipschitz budgets must be nonnegative")
        if L.ndim == 2 and v.shape != (L.shape[1],):
            raise ValueError("a per-dimension gradient bound needs a per-dimension speed bound")
        object.__setattr__(self, "L_phi", L)
        object.__setattr__(self, "v_max", float(v) if v.ndim == 0 else v)

    @property
    def L_tilde(self) -> np.ndarray:
        if self.L_phi.ndim == 2:
            return self.L_phi @ self.v_max
        return self.L_phi * self.v_max


@dataclass(frozen=True)
class DisturbanceSet:
    """Product ``W_f x W_B x W_h x W_grad_h`` of origin-centered boxes."""

    W_f: Hyperrectangle
    W_B: Hyperrectangle  # B flattened row-major, n*m entries
    W_h: Hyperrectangle  # 1-D
    W_grad_h: Hyperrectangle
    T: float = 0.0

    @classmethod
    def zero(cls, n: int, m: int) -> "DisturbanceSet":
        z = lambda k: Hyperrectangle(np.zeros(k), np.zeros(k))  # noqa: E731
        return cls(z(n), z(n * m), z(1), z(n))

    @classmethod
    def from_half_widths(cls, f, B, h, grad_h, T: float = 0.0) -> "DisturbanceSet":
        return cls(Hyperrectangle.centered(f), Hyperrectangle.centered(np.ravel(B)),
                   Hyperrectangle.centered(h), Hyperrectangle.centered(grad_h), T)

    @property
    def n(self) -> int:
        return self.W_f.dim

    @property
    def m(self) -> int:
        return self.W_B.dim // self.W_f.dim

    def contains(self, w_f, w_B, w_h, w_grad_h, tol: float = 0.0) -> bool:
        return (self.W_f.contains(w_f, tol) and self.W_B.contains(np.ravel(w_B), tol)
                and self.W_h.contains(np.atleast_1d(w_h), tol) and self.W_grad_h.contains(w_grad_h, tol))

    def is_zero(self) -> bool:
        return all(np.all(b.half_width == 0) for b in (self.W_f, self.W_B, self.W_h, self.W_grad_h))


def estimate_velocity_bound(sys: ControlAffineSystem, X: Hyperrectangle, U: Polytope,
                            grid_per_dim: int = 9, inflation: float = DEFAULT_INFLATION,
                            per_dimension: bool = False):
    """Inflated grid maximum of ``||f(x) + B(x) u||`` over ``X`` times the vertices of ``U``.

    The maximand is affine in ``u``, so the vertices of ``U`` suffice. With
    ``per_dimension`` the result is the vector of ``max |xdot_j|`` instead.
    """
    if grid_per_dim < 2:
        raise ValueError("grid_per_dim must be >= 2")
    if not np.all(np.isfinite(X.lo)) or not np.all(np.isfinite(X.hi)):
        raise ValueError("X must be bounded")
    verts = U.vertices()  # raises on unbounded U
    best = np.zeros(sys.n) if per_dimension else 0.0
    for x in X.grid(grid_per_dim):
        v = sys.drift(x)[None, :] + verts @ sys.input_matrix(x).T
        if per_dimension:
            best = np.maximum(best, np.max(np.abs(v), axis=0))
        else:
            best = max(best, float(np.max(np.linalg.norm(v, axis=1))))
    return inflation * best


def estimate_gradient_bound(phi: Callable[[np.ndarray], np.ndarray], X: Hyperrectangle,
                            grid_per_dim: int = 9, jacobian: Optional[Callable] = None,
                            inflation: float = DEFAULT_INFLATION, mode: str = "output") -> np.ndarray:
    """Grid maximum of the gradient of ``phi`` over ``X``, inflated.

    ``mode="output"``: one Euclidean gradient norm per output component.
    ``mode="scalar"``: the spectral norm of the Jacobian, repeated per output.
    ``mode="per_dimension"``: the matrix of ``max |d phi_k / d x_j|``.
    """
    if mode not in ("output", "scalar", "per_dimension"):
        raise ValueError(f"unknown mode {mode!r}")
    if grid_per_dim < 2:
        raise ValueError("grid_per_dim must be >= 2")
    if not np.all(np.isfinite(X.lo)) or not np.all(np.isfinite(X.hi)):
        raise ValueError("X must be bounded")
    jac = jacobian if jacobian is not None else (lambda x: fd_jacobian(phi, x))
    best = None
    for x in X.grid(grid_per_dim):
        J = np.asarray(jac(x), dtype=float).reshape(-1, X.dim)
        if not np.all(np.isfinite(J)):
            raise EvaluationError(f"non-finite gradient at {x!r}")
        if mode == "per_dimension":
            val = np.abs(J)
        elif mode == "output":
            val = np.linalg.norm(J, axis=1)
        else:
            val = np.full(J.shape[0], np.linalg.norm(J, 2))
        best = val if best is None else np.maximum(best, val)
    return inflation * best


def build_disturbance_set(T: float, f: LipschitzBudget, B: LipschitzBudget, h: LipschitzBudget,
                          grad_h: LipschitzBudget) -> DisturbanceSet:
    """Boxes of half-width ``L_tilde * T`` for each of ``f``, ``B``, ``h`` and ``grad_h``."""
    if not T > 0:
        raise ValueError("T must be positive")
    for b in (f, B, h, grad_h):
        if not np.all(np.isfinite(b.L_tilde)):
            raise ValueError("budgets must be finite")
    return DisturbanceSet.from_half_widths(f.L_tilde * T, B.L_tilde * T, h.L_tilde * T, grad_h.L_tilde * T, T)


@dataclass(frozen=True)
class SystemBudgets:
    f: LipschitzBudget
    B: LipschitzBudget
    h: LipschitzBudget
    grad_h: LipschitzBudget

    def disturbance_set(self, T: float) -> DisturbanceSet:
        return build_disturbance_set(T, self.f, self.B, self.h, self.grad_h)


def system_budgets(sys: ControlAffineSystem, cbf: Cbf, X: Hyperrectangle, U: Polytope,
                   grid_per_dim: int = 9, inflation: float = DEFAULT_INFLATION,
                   mode: str = "per_dimension") -> SystemBudgets:
    """Budgets for all four maps entering the barrier condition, sharing one speed bound."""
    v = estimate_velocity_bound(sys, X, U, grid_per_dim, inflation, per_dimension=mode == "per_dimension")
    kw = dict(grid_per_dim=grid_per_dim, inflation=inflation, mode=mode)
    L_f = estimate_gradient_bound(sys.drift, X, jacobian=sys.jac_f, **kw)
    L_B = estimate_gradient_bound(lambda x: sys.input_matrix(x).ravel(), X,
                                  jacobian=lambda x: sys.jac_B(x).reshape(sys.n * sys.m, sys.n), **kw)
    L_h = estimate_gradient_bound(lambda x: np.atleast_1d(cbf.value(x)), X,
                                  jacobian=lambda x: cbf.gradient(x)[None, :], **kw)
    L_g = estimate_gradient_bound(cbf.gradient, X, jacobian=cbf.hessian, **kw)
    return SystemBudgets(LipschitzBudget(L_f, v), LipschitzBudget(L_B, v), LipschitzBudget(L_h, v),
                         LipschitzBudget(L_g, v))
