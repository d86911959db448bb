"""Robust discrete barrier condition and the QP safety filter built on it.

The condition is written as ``DBC(x, u, w) = -a(x, w)^T u - b(x, w)``.
Both ``a_j`` and ``b`` are multilinear in the disturbance coordinates (``alpha``
enters monotonically), so their extrema over a box ``W`` sit at vertices of
the coordinates they actually depend on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bounds import DisturbanceSet
from .core_model import Cbf, ControlAffineSystem, Polytope
from .opt.qp import QpNonConvergence, QpProblem, solve_qp

DEFAULT_VERTEX_CAP = 2 ** 20


class VertexCapExceeded(ValueError):
    pass


@dataclass(frozen=True)
class Disturbance:
    w_f: np.ndarray
    w_B: np.ndarray  # (n, m)
    w_h: float
    w_grad_h: np.ndarray

    @classmethod
    def zero(cls, n: int, m: int) -> "Disturbance":
        return cls(np.zeros(n), np.zeros((n, m)), 0.0, np.zeros(n))


class AffineCoefficients:
    """``a(x, w)`` and ``b(x, w)`` for a system/barrier pair."""

    def __init__(self, sys: ControlAffineSystem, cbf: Cbf):
        self.sys = sys
        self.cbf = cbf

    def a(self, x, w: Disturbance) -> np.ndarray:
        Bx = self.sys.input_matrix(x) + np.reshape(w.w_B, (self.sys.n, self.sys.m))
        return -Bx.T @ (self.cbf.gradient(x) + w.w_grad_h)

    def b(self, x, w: Disturbance) -> float:
        g = self.cbf.gradient(x) + w.w_grad_h
        return float(-g @ (self.sys.drift(x) + w.w_f) - self.cbf.alpha(self.cbf.value(x) + w.w_h))


def eval_dbc(sys: ControlAffineSystem, cbf: Cbf, x, u, w: Disturbance) -> float:
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.size != sys.n or u.size != sys.m:
        raise ValueError("dimension mismatch")
    g = cbf.gradient(x) + w.w_grad_h
    Bx = sys.input_matrix(x) + np.reshape(w.w_B, (sys.n, sys.m))
    return float(g @ (sys.drift(x) + w.w_f + Bx @ u) + cbf.alpha(cbf.value(x) + w.w_h))


@dataclass(frozen=True)
class CoefficientBounds:
    a_lo: np.ndarray
    a_hi: np.ndarray
    b_lo: float
    b_hi: float

    @property
    def m(self) -> int:
        return self.a_lo.size

    def max_value(self, u) -> float:
        """``max (a~^T u + b~)`` over the coefficient rectangle, in closed form."""
        u = np.atleast_1d(u)
        return float(np.sum(np.maximum(self.a_hi * u, self.a_lo * u)) + self.b_hi)


def _axes(lo: np.ndarray, hi: np.ndarray) -> list[np.ndarray]:
    """Per-coordinate candidate values: both endpoints, or the single value of a degenerate axis."""
    return [np.array([l]) if l == h else np.array([l, h]) for l, h in zip(lo, hi)]


def _enumerate(axes: list[np.ndarray], cap: int) -> np.ndarray:
    _check_cap(axes, cap)
    if not axes:
        return np.zeros((1, 0))
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([gr.ravel() for gr in grids], axis=1).astype(float)


def _check_cap(axes: list[np.ndarray], cap: int) -> None:
    count = int(np.prod([a.size for a in axes], dtype=float)) if axes else 1
    if count > cap:
        raise VertexCapExceeded(
            f"{count} vertices exceed the cap of {cap}; decompose the disturbance set component-wise")


def _bilinear_range(c, p_lo, p_hi, d, q_lo, q_hi) -> tuple[float, float]:
    """Range of ``sum_i (c_i + p_i)(d_i + q_i)`` over independent intervals ``p_i``, ``q_i``.

    The sum separates per coordinate and each term is bilinear, so its
    extremes sit at the four corners of each ``(p_i, q_i)`` rectangle. This
    equals the extremes over all joint vertices without enumerating them.
    """
    corners = np.stack([(c + p_lo) * (d + q_lo), (c + p_lo) * (d + q_hi),
                        (c + p_hi) * (d + q_lo), (c + p_hi) * (d + q_hi)])
    return float(np.sum(corners.min(axis=0))), float(np.sum(corners.max(axis=0)))


def coefficient_bounds(sys: ControlAffineSystem, cbf: Cbf, x, W: DisturbanceSet,
                       vertex_cap: int = DEFAULT_VERTEX_CAP) -> CoefficientBounds:
    """Exact extrema of ``a_j(x, .)`` and ``b(x, .)`` over ``W``.

    ``vertex_cap`` bounds the vertex count of each enumerated sub-box as in
    the brute-force oracle, although the extremes are computed per coordinate.
    """
    x = np.asarray(x, dtype=float)
    n, m = sys.n, sys.m
    f = sys.drift(x)
    Bx = sys.input_matrix(x)
    g = cbf.gradient(x)
    h = cbf.value(x)
    wB_lo = W.W_B.lo.reshape(n, m)
    wB_hi = W.W_B.hi.reshape(n, m)
    g_lo, g_hi = W.W_grad_h.lo, W.W_grad_h.hi
    g_axes = _axes(g_lo, g_hi)

    a_lo = np.empty(m)
    a_hi = np.empty(m)
    for j in range(m):
        _check_cap(_axes(wB_lo[:, j], wB_hi[:, j]) + g_axes, vertex_cap)
        lo, hi = _bilinear_range(Bx[:, j], wB_lo[:, j], wB_hi[:, j], g, g_lo, g_hi)
        a_lo[j], a_hi[j] = -hi, -lo

    _check_cap(g_axes + _axes(W.W_f.lo, W.W_f.hi), vertex_cap)
    lo, hi = _bilinear_range(g, g_lo, g_hi, f, W.W_f.lo, W.W_f.hi)
    # alpha is increasing, so -alpha(h + w_h) is extremal at the ends of W_h
    alpha_hi = cbf.alpha(h + W.W_h.hi[0])
    alpha_lo = cbf.alpha(h + W.W_h.lo[0])
    return CoefficientBounds(a_lo, a_hi, float(-hi - alpha_hi), float(-lo - alpha_lo))


def robust_dbc_margin(sys: ControlAffineSystem, cbf: Cbf, W: DisturbanceSet, x, u,
                      vertex_cap: int = DEFAULT_VERTEX_CAP) -> float:
    """``max_{w in W} (a(x,w)^T u + b(x,w))`` by joint enumeration of every vertex of ``W``."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n, m = sys.n, sys.m
    f = sys.drift(x)
    Bx = sys.input_matrix(x)
    g = cbf.gradient(x)
    h = cbf.value(x)
    axes = (_axes(W.W_f.lo, W.W_f.hi) + _axes(W.W_B.lo, W.W_B.hi)
            + _axes(W.W_h.lo, W.W_h.hi) + _axes(W.W_grad_h.lo, W.W_grad_h.hi))
    V = _enumerate(axes, vertex_cap)
    wf = V[:, :n]
    wB = V[:, n:n + n * m].reshape(-1, n, m)
    wh = V[:, n + n * m]
    wg = V[:, n + n * m + 1:]
    gg = g + wg
    xdot = f + wf + np.einsum("vij,j->vi", Bx + wB, u)
    levels, which = np.unique(wh, return_inverse=True)
    alpha_vals = np.array([cbf.alpha(h + w) for w in levels])[which.ravel()]
    dbc = np.sum(gg * xdot, axis=1) + alpha_vals
    return float(np.max(-dbc))


def robust_dbc_holds(sys: ControlAffineSystem, cbf: Cbf, W: DisturbanceSet, x, u, tol: float = 0.0,
                     vertex_cap: int = DEFAULT_VERTEX_CAP) -> bool:
    """Brute-force check that ``DBC(x, u, w) >= 0`` for every ``w`` in ``W``."""
    return robust_dbc_margin(sys, cbf, W, x, u, vertex_cap) <= tol


@dataclass(frozen=True)
class AffineConditions:
    """``d^T lam <= 0``, ``D^T lam = [u, 1]``, ``lam >= 0`` in the variables ``(u, lam)``."""

    D: np.ndarray  # (2(m+1), m+1)
    d: np.ndarray  # (2(m+1),)

    @property
    def m(self) -> int:
        return self.D.shape[1] - 1

    def constraint_matrices(self):
        """``(A_eq, b_eq, A_in, b_in)`` over the stacked variable ``[u, lam]``."""
        m = self.m
        k = self.d.size
        A_eq = np.hstack([np.vstack([-np.eye(m), np.zeros((1, m))]), self.D.T])
        b_eq = np.concatenate([np.zeros(m), [1.0]])
        A_in = np.vstack([np.concatenate([np.zeros(m), self.d])[None, :],
                          np.hstack([np.zeros((k, m)), -np.eye(k)])])
        b_in = np.zeros(k + 1)
        return A_eq, b_eq, A_in, b_in

    def satisfied(self, u, lam, tol: float = 1e-9) -> bool:
        u = np.atleast_1d(u)
        lam = np.asarray(lam, dtype=float)
        u_tilde = np.concatenate([u, [1.0]])
        return bool(self.d @ lam <= tol and np.all(lam >= -tol)
                    and np.allclose(self.D.T @ lam, u_tilde, atol=tol, rtol=0.0))

    def minimal_multiplier(self, u) -> np.ndarray:
        """The ``lam`` minimizing ``d^T lam`` for a given ``u``: split each entry into its signed parts."""
        u_tilde = np.concatenate([np.atleast_1d(u), [1.0]])
        lam = np.empty(self.d.size)
        lam[0::2] = np.maximum(u_tilde, 0.0)
        lam[1::2] = np.maximum(-u_tilde, 0.0)
        return lam


def affine_safety_conditions(bounds: CoefficientBounds) -> AffineConditions:
    m = bounds.m
    D = np.zeros((2 * (m + 1), m + 1))
    for j in range(m + 1):
        D[2 * j, j] = 1.0
        D[2 * j + 1, j] = -1.0
    d = np.empty(2 * (m + 1))
    d[0:2 * m:2] = bounds.a_hi
    d[1:2 * m:2] = -bounds.a_lo
    d[2 * m] = bounds.b_hi
    d[2 * m + 1] = -bounds.b_lo
    if not np.all(np.isfinite(d)):
        raise ValueError("coefficient bounds must be finite")
    return AffineConditions(D, d)


@dataclass
class FilterResult:
    u: Optional[np.ndarray]
    feasible: bool
    x: np.ndarray
    h: float
    lam: Optional[np.ndarray] = None
    iterations: int = 0
    bounds: Optional[CoefficientBounds] = None

    def __bool__(self) -> bool:
        return self.feasible


def filter_qp(conditions: AffineConditions, u_nom, U: Polytope) -> QpProblem:
    m = conditions.m
    k = conditions.d.size
    u_nom = np.atleast_1d(np.asarray(u_nom, dtype=float))
    H = np.zeros((m + k, m + k))
    H[:m, :m] = 2.0 * np.eye(m)
    g = np.concatenate([-2.0 * u_nom, np.zeros(k)])
    A_eq, b_eq, A_in, b_in = conditions.constraint_matrices()
    A_U = np.hstack([U.A, np.zeros((U.A.shape[0], k))])
    return QpProblem(H, g, A_eq, b_eq, np.vstack([A_in, A_U]), np.concatenate([b_in, U.b]))


def _single_input_interval(bounds: CoefficientBounds, U: Polytope) -> tuple[float, float]:
    """Feasible inputs for ``m = 1``: ``U`` cut by ``a_hi u + b_hi <= 0`` and ``a_lo u + b_hi <= 0``."""
    lo, hi = -np.inf, np.inf
    rows = [(a[0], b) for a, b in zip(U.A, U.b)] + [(bounds.a_hi[0], -bounds.b_hi), (bounds.a_lo[0], -bounds.b_hi)]
    for a, b in rows:
        if a > 0:
            hi = min(hi, b / a)
        elif a < 0:
            lo = max(lo, b / a)
        elif b < 0:
            return np.inf, -np.inf
    return lo, hi


def safety_filter(sys: ControlAffineSystem, cbf: Cbf, W: DisturbanceSet, x, u_nom, U: Polytope,
                  vertex_cap: int = DEFAULT_VERTEX_CAP, bounds: Optional[CoefficientBounds] = None,
                  closed_form: bool = True) -> FilterResult:
    """Closest input to ``u_nom`` that satisfies the robust affine conditions and ``U``.

    With one input the feasible set is an interval and the minimizer is
    ``u_nom`` clipped to it, paired with the minimal multiplier; pass
    ``closed_form=False`` to force the QP. ``bounds`` reuses coefficient
    bounds already computed at ``x``. Infeasibility comes back as
    ``FilterResult(feasible=False)``; :class:`QpNonConvergence` propagates.
    """
    x = np.asarray(x, dtype=float)
    if bounds is None:
        bounds = coefficient_bounds(sys, cbf, x, W, vertex_cap)
    cond = affine_safety_conditions(bounds)
    if closed_form and sys.m == 1:
        lo, hi = _single_input_interval(bounds, U)
        h = cbf.value(x)
        if lo > hi:
            return FilterResult(None, False, x, h, bounds=bounds)
        u = np.clip(np.atleast_1d(np.asarray(u_nom, dtype=float)), lo, hi)
        return FilterResult(u, True, x, h, cond.minimal_multiplier(u), 0, bounds)
    qp = filter_qp(cond, u_nom, U)
    u_nom = np.atleast_1d(np.asarray(u_nom, dtype=float))
    start = np.concatenate([u_nom, cond.minimal_multiplier(u_nom)])
    res = solve_qp(qp, x0=start)
    h = cbf.value(x)
    if res.status != "optimal":
        if res.status == "unbounded":
            raise QpNonConvergence(res.iterations)
        return FilterResult(None, False, x, h, iterations=res.iterations, bounds=bounds)
    m = sys.m
    return FilterResult(res.x[:m], True, x, h, res.x[m:], res.iterations, bounds)


class DbcController:
    """Nominal controller wrapped by the robust filter.

    ``nominal(t, x)`` proposes an input; the filter returns the closest input
    satisfying the robust condition. A clearly satisfied condition skips the
    QP (its optimum is then the nominal input itself). On infeasibility the
    previous applied input is held and the step is flagged.
    """

    def __init__(self, sys: ControlAffineSystem, cbf: Cbf, W: DisturbanceSet, U: Polytope, nominal,
                 vertex_cap: int = DEFAULT_VERTEX_CAP):
        self.sys = sys
        self.cbf = cbf
        self.W = W
        self.U = U
        self.nominal = nominal
        self.vertex_cap = vertex_cap
        self.u_prev = np.zeros(sys.m)
        self.infeasible = 0

    def reset(self, x0) -> None:
        self.u_prev = np.zeros(self.sys.m)
        self.infeasible = 0

    def step(self, t: float, x):
        from .loop import ControlOutput

        u_nom = np.atleast_1d(np.asarray(self.nominal(t, x), dtype=float))
        bounds = coefficient_bounds(self.sys, self.cbf, x, self.W, self.vertex_cap)
        if bounds.max_value(u_nom) <= 0 and self.U.contains(u_nom, 0.0):
            self.u_prev = u_nom
            return ControlOutput(u_nom, u_nom.copy(), self.cbf.value(x))
        res = safety_filter(self.sys, self.cbf, self.W, x, u_nom, self.U, self.vertex_cap, bounds)
        if not res.feasible:
            self.infeasible += 1
            return ControlOutput(self.u_prev.copy(), u_nom, self.cbf.value(x), qp_iters=res.iterations,
                                 infeasible=True)
        self.u_prev = res.u
        return ControlOutput(res.u.copy(), u_nom, self.cbf.value(x), qp_iters=res.iterations)

    def after_interval(self, x_next) -> bool:
        return True
