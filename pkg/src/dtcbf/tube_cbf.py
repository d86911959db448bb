"""Tube barrier machinery: auxiliary feedback, invariant error box, tightened sets.

The applied input is ``u = u_bar + kappa(x, x_bar)`` with
``kappa(x, x_bar) = K_aux (x_bar - x)``. The anchor ``x_bar`` is kept inside
the reduced safe set ``C'`` while the error ``x - x_bar`` stays in the box
``Omega``; ``C' + Omega`` inside ``C`` then makes ``x`` safe. Error-box axes
with infinite half-width (e.g. a position the barrier ignores) are allowed
as long as neither the gain nor the barrier depends on them.
"""

from __future__ import annotations

import itertools
from decimal import Decimal
from fractions import Fraction
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core_model import (Cbf, ControlAffineSystem, Hyperrectangle, Polytope, fd_jacobian, integrate_interval,
                         quadratic_cbf)
from .loop import ControlOutput
from .opt.qp import QpProblem, solve_qp
from .opt.polyfit import polyfit
from .opt.riccati import lqr_gain


class TighteningError(ValueError):
    pass


class AuditFailure(ValueError):
    def __init__(self, message: str, worst_state=None, worst_value: float = np.nan):
        super().__init__(message)
        self.worst_state = worst_state
        self.worst_value = worst_value


class TubeEstimateError(RuntimeError):
    pass


class TubeBreach(RuntimeError):
    pass


class TubeFilterInfeasible(RuntimeError):
    pass


def _finite_axes(box: Hyperrectangle) -> np.ndarray:
    return np.isfinite(box.lo) & np.isfinite(box.hi)


def _box_vertices(box: Hyperrectangle) -> np.ndarray:
    """Vertices over the finite axes; infinite axes are pinned to 0."""
    fin = _finite_axes(box)
    axes = [np.unique([l, h]) if f else np.array([0.0]) for l, h, f in zip(box.lo, box.hi, fin)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _image_support(K: np.ndarray, omega: Hyperrectangle, a: np.ndarray) -> float:
    """``max a^T K z`` over ``z`` in ``omega`` (symmetric box), exact."""
    w = np.abs(K.T @ a)
    hw = omega.half_width
    live = w != 0.0
    if not np.all(np.isfinite(hw[live])):
        return float(np.inf)
    # exact sum of exact products, rounded once
    return float(sum((Fraction(float(wi)) * Fraction(float(hi)) for wi, hi in zip(w[live], hw[live])), Fraction(0)))


@dataclass(frozen=True)
class TubeSpec:
    K_aux: np.ndarray  # (m, n)
    Omega: Hyperrectangle
    G: Polytope
    U: Polytope
    U_tight: Polytope

    def kappa(self, x, x_bar) -> np.ndarray:
        return self.K_aux @ (np.asarray(x_bar, dtype=float) - np.asarray(x, dtype=float))

    def check(self, tol: float = 1e-9) -> None:
        """Vertex-arithmetic checks of ``kappa(Omega) in G`` and ``U_tight + G in U``."""
        for z in _box_vertices(self.Omega):
            if not self.G.contains(self.K_aux @ (-z), tol):
                raise TighteningError("G does not contain the image of an Omega vertex")
        for v in self.U_tight.vertices():
            for g in self.G.vertices():
                if not self.U.contains(v + g, tol):
                    raise TighteningError("U_tight + G leaves U")


def _box_polytope(lo, hi) -> Polytope:
    return Polytope.from_box(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))


def _inner_difference(b: float, s: float) -> float:
    """``b - s`` through the shortest decimal forms, lowered until it is <= the exact binary difference.

    Plain float subtraction gives 5.4 - 1.8 = 3.6000000000000005, slightly
    above the true difference; this returns 3.6 and never rounds outward.
    """
    if not (np.isfinite(b) and np.isfinite(s)):
        return b - s
    exact = Fraction(float(b)) - Fraction(float(s))
    d = float(Decimal(repr(float(b))) - Decimal(repr(float(s))))
    while Fraction(d) > exact:
        d = float(np.nextafter(d, -np.inf))
    return d


def tighten(U: Polytope, K: np.ndarray, omega: Hyperrectangle) -> tuple[Polytope, Polytope]:
    """``(G, U - G)``: the hull of ``K (-Omega)`` and the Pontryagin difference.

    For one input the hull is an interval and exact; with several inputs the
    axis-aligned bounding box of the zonotope is used. The difference uses the
    exact support function of the image, row by row.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    m = K.shape[0]
    g_hi = np.array([_image_support(K, omega, e) for e in np.eye(m)])
    G = _box_polytope(-g_hi, g_hi)
    b = np.array([_inner_difference(bi, _image_support(K, omega, ai)) for ai, bi in zip(U.A, U.b)])
    if not np.all(np.isfinite(b)):
        raise TighteningError("tightening exceeds input authority: unbounded auxiliary input")
    try:
        U_tight = Polytope(U.A.copy(), b)
    except ValueError as exc:
        raise TighteningError("tightening exceeds input authority") from exc
    return G, U_tight


def linearize(sys: ControlAffineSystem, x_eq=None, u_eq=None) -> tuple[np.ndarray, np.ndarray]:
    x_eq = np.zeros(sys.n) if x_eq is None else np.asarray(x_eq, dtype=float)
    u_eq = np.zeros(sys.m) if u_eq is None else np.atleast_1d(u_eq)
    A = fd_jacobian(lambda x: sys.xdot(x, u_eq), x_eq)
    return A, sys.input_matrix(x_eq)


def aux_gain(sys: ControlAffineSystem, Q, R, subspace=None) -> np.ndarray:
    """LQR gain of the origin linearization, optionally computed on a coordinate subspace and embedded."""
    A, B = linearize(sys)
    idx = list(range(sys.n)) if subspace is None else list(subspace)
    K_sub = lqr_gain(A[np.ix_(idx, idx)], B[idx], Q, R).K
    K = np.zeros((sys.m, sys.n))
    K[:, idx] = K_sub
    return K


def build_tube_spec(sys: ControlAffineSystem, U: Polytope, Q=None, R=None, omega: Hyperrectangle = None,
                    K_aux=None, subspace=None) -> TubeSpec:
    """Tube from the LQR gain (or a given ``K_aux``) and an error box ``omega``."""
    if omega is None:
        raise ValueError("the error box omega must be supplied")
    if K_aux is None:
        if Q is None or R is None:
            raise ValueError("need (Q, R) or K_aux")
        K_aux = aux_gain(sys, Q, R, subspace)
    K = np.atleast_2d(np.asarray(K_aux, dtype=float))
    if not np.all(omega.lo <= 0) or not np.all(omega.hi >= 0):
        raise ValueError("omega must contain the origin")
    G, U_tight = tighten(U, K, omega)
    spec = TubeSpec(K, omega, G, U, U_tight)
    spec.check()
    return spec


def omega_for_fraction(K_aux, U: Polytope, fraction: float, shape) -> Hyperrectangle:
    """Error box proportional to ``shape`` sized so the auxiliary input uses ``fraction`` of ``U``.

    ``fraction`` is measured against the smallest offset of ``U`` from the
    origin, so for a symmetric interval ``[-v, v]`` the hull is ``[-f v, f v]``.
    Infinite ``shape`` entries must meet zero gain columns.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    K = np.atleast_2d(np.asarray(K_aux, dtype=float))
    shape = np.asarray(shape, dtype=float)
    unit = Hyperrectangle.centered(shape)
    worst = max(_image_support(K, unit, a) / b for a, b in zip(U.A, U.b))
    if not np.isfinite(worst):
        raise TighteningError("infinite error-box axis meets a nonzero gain")
    if worst == 0:
        raise TighteningError("auxiliary gain vanishes on the error box")
    # Size against the binding offset row, then set the largest contributing half-width
    # exactly so the hull meets the target rounded up at 15 significant digits
    # (5.4 V / 3 -> 1.8 V); float rounding then never leaves the hull short of the share.
    a, b = max(zip(U.A, U.b), key=lambda ab: _image_support(K, unit, ab[0]) / ab[1])
    raw = fraction * float(b)
    target = max(raw, float(f"{raw:.15g}"))
    half = shape * (fraction / worst)
    w = np.abs(K.T @ a)
    finite = np.isfinite(half) & (w != 0.0)
    j = int(np.argmax(np.where(finite, w * np.where(finite, half, 0.0), -1.0)))
    rest = sum((Fraction(float(w[i])) * Fraction(float(half[i])) for i in np.flatnonzero(finite) if i != j),
               Fraction(0))
    need = (Fraction(target) - rest) / Fraction(float(w[j]))
    hj = float(need)
    while Fraction(hj) < need:
        hj = float(np.nextafter(hj, np.inf))
    if hj > 0:
        half = half.copy()
        half[j] = hj
    return Hyperrectangle.centered(half)


@dataclass
class TubeCertificate:
    trials: int
    escaped: int
    rounds: int
    horizon: float

    @property
    def escape_fraction(self) -> float:
        return self.escaped / max(self.trials, 1)


def _boundary_seeds(half: np.ndarray, count: int, rng) -> np.ndarray:
    """Box vertices plus random points pushed onto a random face."""
    n = half.size
    verts = np.array(list(itertools.product(*[[-h, h] for h in half])))
    pts = rng.uniform(-1.0, 1.0, size=(count, n))
    face = rng.integers(0, n, size=count)
    pts[np.arange(count), face] = np.sign(pts[np.arange(count), face]) + (pts[np.arange(count), face] == 0)
    return np.vstack([verts, pts * half])


def estimate_tube(sys: ControlAffineSystem, K_aux, T: float, trials: int = 200, disturbance_free: bool = True,
                  seed_box=None, horizon: float = 3.0, substeps: int = 5, dims=None, disturbance=None,
                  growth_cap: float = 100.0, max_rounds: int = 20, inflation: float = 1.2,
                  seed: int = 0) -> tuple[Hyperrectangle, TubeCertificate]:
    """Monte-Carlo error box: the box reached from the seed box, inflated.

    The error ``z = x - x_bar`` is rolled out around the origin under the
    sampled feedback ``u = -K_aux z_k`` from seeds on the boundary of
    ``seed_box``. The componentwise reach over ``horizon``, inflated by
    ``inflation``, is the candidate; a fresh batch of seeds then has to stay
    inside it, otherwise the candidate grows to cover the batch and is checked
    again. Axes outside ``dims`` get infinite half-width. With
    ``disturbance_free`` off, a uniform additive term with half-widths
    ``disturbance`` perturbs the error rate, held constant over each sample.
    This is an empirical surrogate, not a proof.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    K = np.atleast_2d(np.asarray(K_aux, dtype=float))
    n = sys.n
    dims = list(range(n)) if dims is None else list(dims)
    if seed_box is None:
        seed_box = np.full(len(dims), 1e-2)
    half0 = np.asarray(seed_box, dtype=float)
    if half0.shape != (len(dims),) or np.any(half0 <= 0):
        raise ValueError("seed_box needs one positive half-width per tracked axis")
    wd = None if disturbance_free else np.asarray(disturbance, dtype=float)
    rng = np.random.default_rng(seed)
    steps = int(np.ceil(horizon / T))

    def reach(batch):
        zmax = np.zeros(len(dims))
        for z0s in _boundary_seeds(half0, batch, rng):
            z = np.zeros(n)
            z[dims] = z0s
            for _ in range(steps):
                u = -K @ z
                if wd is None:
                    seg = integrate_interval(sys, z, u, T, substeps)
                else:
                    w = rng.uniform(-wd, wd)
                    pert = ControlAffineSystem(n, sys.m, lambda x, w=w: sys.drift(x) + w, sys.input_matrix)
                    seg = integrate_interval(pert, z, u, T, substeps)
                zmax = np.maximum(zmax, np.max(np.abs(seg[:, dims]), axis=0))
                z = seg[-1]
                if not np.all(np.isfinite(z)) or np.any(zmax > growth_cap * half0):
                    raise TubeEstimateError("error rollouts leave the growth cap; no trapping box")
        return zmax

    box_half = inflation * np.maximum(half0, reach(trials))
    for rnd in range(1, max_rounds + 1):
        check = reach(trials)
        if np.all(check <= box_half * (1 + 1e-9)):
            lo = np.full(n, -np.inf)
            hi = np.full(n, np.inf)
            lo[dims], hi[dims] = -box_half, box_half
            return Hyperrectangle(lo, hi), TubeCertificate(trials + 2 ** len(dims), 0, rnd, horizon)
        box_half = np.maximum(box_half, inflation * check)
    raise TubeEstimateError("verification batches kept escaping the candidate box")


# ---------------------------------------------------------------------------
# reduced safe set

@dataclass
class ReducedSafeSet:
    cbf_prime: Cbf
    cbf: Cbf
    Omega: Hyperrectangle
    containment_margin: float  # min over samples of h(x + z), z over Omega vertices
    viability_margin: float  # min over boundary samples of the best vertex value of the barrier condition
    samples: int = 0
    P: Optional[np.ndarray] = None
    level: Optional[float] = None


def star_shell(h: Callable, center, region: Hyperrectangle, count: int, rng, dims=None,
               iters: int = 60) -> np.ndarray:
    """Points on ``{h = 0}`` found by bisection along random rays from ``center``.

    Rays only move the ``dims`` coordinates; a ray that never leaves the set
    inside ``region`` is dropped.
    """
    center = np.asarray(center, dtype=float)
    n = center.size
    dims = list(range(n)) if dims is None else list(dims)
    if h(center) <= 0:
        raise ValueError("center must lie strictly inside the set")
    pts = []
    for _ in range(count):
        d = np.zeros(n)
        d[dims] = rng.normal(size=len(dims))
        d /= np.linalg.norm(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            up = np.where(d > 0, (region.hi - center) / d, np.where(d < 0, (region.lo - center) / d, np.inf))
        t_max = float(np.min(up))
        if not np.isfinite(t_max) or h(center + t_max * d) > 0:
            continue
        lo, hi = 0.0, t_max
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if h(center + mid * d) > 0:
                lo = mid
            else:
                hi = mid
        pts.append(center + lo * d)
    return np.array(pts).reshape(-1, n)


def _check_ignored_axes(cbf: Cbf, Omega: Hyperrectangle, x) -> None:
    inf_axes = ~_finite_axes(Omega)
    if np.any(inf_axes) and np.any(np.abs(cbf.gradient(x)[inf_axes]) > 1e-12):
        raise AuditFailure("barrier depends on an axis with unbounded tube width", x)


def containment_margin(cbf: Cbf, cbf_prime: Cbf, Omega: Hyperrectangle, states) -> tuple[float, Optional[np.ndarray]]:
    """``min h(x + z)`` over samples with ``h'(x) >= 0`` and Omega vertices ``z``."""
    verts = _box_vertices(Omega)
    worst, arg = np.inf, None
    for x in states:
        if cbf_prime.value(x) < 0:
            continue
        _check_ignored_axes(cbf, Omega, x)
        for z in verts:
            v = cbf.value(x + z)
            if v < worst:
                worst, arg = v, x + z
    return worst, arg


def viability_margin(sys: ControlAffineSystem, cbf: Cbf, U: Polytope, states) -> tuple[float, Optional[np.ndarray]]:
    """``min_x max_{u in vert(U)} grad h^T (f + B u) + alpha(h)`` over the samples."""
    verts = U.vertices()
    worst, arg = np.inf, None
    for x in states:
        g = cbf.gradient(x)
        best = max(g @ (sys.drift(x) + sys.input_matrix(x) @ u) for u in verts) + cbf.alpha(cbf.value(x))
        if best < worst:
            worst, arg = best, x
    return worst, arg


def quadratic_from_fit(states, values, level: float, alpha) -> Cbf:
    """Barrier ``level - p(x)`` with ``p`` a least-squares quadratic fit of value-function samples."""
    poly = polyfit(states, values, degree=2)
    return Cbf(h=lambda x: level - poly(x), grad_h=lambda x: -poly.gradient(x), alpha=alpha,
               hess_h=lambda x: fd_jacobian(lambda y: -poly.gradient(y), x))


def build_reduced_cbf(sys: ControlAffineSystem, cbf: Cbf, Omega: Hyperrectangle, U_tight: Polytope,
                      P=None, c: Optional[float] = None, fit=None, region: Hyperrectangle = None,
                      center=None, samples: int = 400, dims=None, seed: int = 0) -> ReducedSafeSet:
    """Barrier for ``C'`` plus sampled containment and viability audits.

    Either ``(P, c)`` gives ``h'(x) = c - x^T P x``, or ``fit=(states, values,
    level)`` fits a quadratic to value-function samples and uses
    ``h' = level - fit``. ``region`` bounds the sampling; ``dims`` restricts
    the sampled directions. Failing audits raise :class:`AuditFailure`.
    """
    if (P is None) == (fit is None):
        raise ValueError("give exactly one of (P, c) or fit")
    if P is not None:
        P = np.asarray(P, dtype=float)
        if c is None or not c > 0:
            raise ValueError("level c must be positive")
        sub = np.ix_(dims, dims) if dims is not None else slice(None)
        if np.min(np.linalg.eigvalsh(0.5 * (P + P.T)[sub])) <= 0:
            raise ValueError("P must be positive definite on the barrier subspace")
        prime = quadratic_cbf(P, c, cbf.alpha)
    else:
        states, values, level = fit
        prime = quadratic_from_fit(states, values, level, cbf.alpha)
    n = sys.n
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    if region is None:
        raise ValueError("a sampling region is required")
    rng = np.random.default_rng(seed)
    shell = star_shell(prime.value, center, region, samples, rng, dims)
    if shell.shape[0] == 0:
        raise AuditFailure("no boundary samples of the reduced set inside the region")
    # interior samples: scaled copies of the shell
    interior = center + (shell - center) * rng.uniform(0.0, 1.0, size=(shell.shape[0], 1))
    cm, c_arg = containment_margin(cbf, prime, Omega, np.vstack([shell, interior]))
    if cm < 0:
        raise AuditFailure(f"containment audit failed: h = {cm:.3e} at a shifted sample", c_arg, cm)
    vm, v_arg = viability_margin(sys, prime, U_tight, shell)
    if vm < 0:
        raise AuditFailure(f"viability audit failed: best barrier rate {vm:.3e} on the boundary", v_arg, vm)
    return ReducedSafeSet(prime, cbf, Omega, cm, vm, shell.shape[0] * 2,
                          P if P is not None else None, c if P is not None else None)


# ---------------------------------------------------------------------------
# the tube loop

def barrier_filter(sys: ControlAffineSystem, cbf: Cbf, x, u_cand, U: Polytope) -> Optional[np.ndarray]:
    """Closest input to ``u_cand`` in ``U`` meeting the barrier condition at ``x``; ``None`` if none exists."""
    u_cand = np.atleast_1d(np.asarray(u_cand, dtype=float))
    g = cbf.gradient(x)
    a = -sys.input_matrix(x).T @ g
    b = float(-g @ sys.drift(x) - cbf.alpha(cbf.value(x)))
    if a @ u_cand + b <= 0 and U.contains(u_cand, 0.0):
        return u_cand
    m = u_cand.size
    qp = QpProblem(2.0 * np.eye(m), -2.0 * u_cand, A_in=np.vstack([a[None, :], U.A]),
                   b_in=np.concatenate([[-b], U.b]))
    res = solve_qp(qp)
    if res.status != "optimal":
        return None
    return res.x


def reanchor(reduced: ReducedSafeSet, Omega: Hyperrectangle, x_next, x_bar_prop, passes: int = 5,
             margin: float = 1e-9) -> Optional[np.ndarray]:
    """Anchor for the next interval, or ``None`` on a tube breach.

    Keeps the propagated anchor when it is valid; otherwise projects it onto
    ``{x_bar : |x_next - x_bar| <= Omega, h'(x_bar) >= 0}`` with a linearized
    barrier row re-linearized up to ``passes`` times. Axes with infinite
    tube width follow the measurement.
    """
    hp = reduced.cbf_prime
    x_next = np.asarray(x_next, dtype=float)
    fin = _finite_axes(Omega)
    prop = np.asarray(x_bar_prop, dtype=float).copy()
    prop[~fin] = x_next[~fin]
    if Omega.contains(x_next - prop) and hp.value(prop) >= 0:
        return prop
    lo = np.where(fin, x_next - Omega.hi, -np.inf)
    hi = np.where(fin, x_next - Omega.lo, np.inf)
    idx = np.where(fin)[0]
    y = np.clip(prop, lo, hi)
    for _ in range(passes):
        if hp.value(y) >= 0 and np.all(y >= lo) and np.all(y <= hi):
            return y
        g = hp.gradient(y)[idx]
        # h'(y) + g^T (x - y) >= margin  ->  -g^T x <= h'(y) - g^T y - margin
        A_in = np.vstack([-g[None, :], np.eye(idx.size), -np.eye(idx.size)])
        b_in = np.concatenate([[hp.value(y) - g @ y[idx] - margin], hi[idx], -lo[idx]])
        qp = QpProblem(2.0 * np.eye(idx.size), -2.0 * prop[idx], A_in=A_in, b_in=b_in)
        res = solve_qp(qp)
        if res.status != "optimal":
            return None
        y = y.copy()
        y[idx] = res.x
    if hp.value(y) >= 0 and np.all(y >= lo - 1e-12) and np.all(y <= hi + 1e-12):
        return y
    return None


def tube_cbf_step(spec: TubeSpec, reduced: ReducedSafeSet, sys: ControlAffineSystem,
                  nominal_input_source: Callable[[np.ndarray], np.ndarray], x_measured, x_bar,
                  plant_step: Callable[[np.ndarray], np.ndarray], period: float, substeps: int = 10):
    """One interval of the tube loop. Returns ``(u_applied, u_bar, x_bar_next, x_next)``.

    ``plant_step(u)`` applies ``u`` for one period and returns the measured
    next state. Raises :class:`TubeFilterInfeasible` or :class:`TubeBreach`.
    """
    x = np.asarray(x_measured, dtype=float)
    x_bar = np.asarray(x_bar, dtype=float)
    u_cand = nominal_input_source(x_bar)
    u_bar = barrier_filter(sys, reduced.cbf_prime, x_bar, u_cand, spec.U_tight)
    if u_bar is None:
        raise TubeFilterInfeasible("no tightened input satisfies the reduced barrier at the anchor")
    u = u_bar + spec.kappa(x, x_bar)
    x_next = plant_step(u)
    x_bar_prop = integrate_interval(sys, x_bar, u_bar, period, substeps)[-1]
    new_anchor = reanchor(reduced, spec.Omega, x_next, x_bar_prop)
    if new_anchor is None:
        raise TubeBreach("no anchor in the reduced set keeps the state inside the tube")
    return u, u_bar, new_anchor, x_next


class TubeController:
    """Stateful tube loop around a nominal source ``nominal(x_bar, t) -> (u_bar, info)``.

    ``info`` may carry ``slack_norm``, ``qp_iters`` and ``solve_time_us``.
    Infeasible nominal inputs and tube breaches are counted and the loop
    continues with a fallback, so a run always completes.
    """

    def __init__(self, spec: TubeSpec, reduced: ReducedSafeSet, sys: ControlAffineSystem, nominal,
                 period: float, substeps: int = 10):
        self.spec = spec
        self.reduced = reduced
        self.sys = sys
        self.nominal = nominal
        self.period = period
        self.substeps = substeps
        self.x_bar = None
        self.u_bar = None
        self.infeasible = 0
        self.breaches = 0

    def reset(self, x0) -> None:
        self.x_bar = np.asarray(x0, dtype=float).copy()  # z(t0) = 0
        if self.reduced.cbf_prime.value(self.x_bar) < 0:
            raise ValueError("initial state outside the reduced safe set")

    def step(self, t: float, x) -> ControlOutput:
        info = {}
        infeasible = False
        try:
            u_cand, info = self.nominal(self.x_bar, t)
            u_bar = barrier_filter(self.sys, self.reduced.cbf_prime, self.x_bar, u_cand, self.spec.U_tight)
        except TubeFilterInfeasible:
            u_bar = None
        if u_bar is None:
            infeasible = True
            self.infeasible += 1
            if self.u_bar is None:
                bb = self.spec.U_tight.bounding_box()
                u_bar = np.clip(np.zeros(self.sys.m), bb.lo, bb.hi)
            else:
                u_bar = self.u_bar
        self.u_bar = np.asarray(u_bar, dtype=float)
        u = self.u_bar + self.spec.kappa(x, self.x_bar)
        return ControlOutput(u, self.u_bar.copy(), self.reduced.cbf_prime.value(self.x_bar),
                              info.get("slack_norm", 0.0), info.get("qp_iters", 0),
                              info.get("solve_time_us", 0.0), infeasible)

    def after_interval(self, x_next) -> bool:
        """Propagate and re-anchor; returns ``False`` on a tube breach."""
        prop = integrate_interval(self.sys, self.x_bar, self.u_bar, self.period, self.substeps)[-1]
        new = reanchor(self.reduced, self.spec.Omega, x_next, prop)
        if new is None:
            self.breaches += 1
            self.x_bar = prop
            return False
        self.x_bar = new
        return True
