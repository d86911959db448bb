"""Multiple-shooting NMPC with soft state constraints and the real-time iteration.

Decision variables per stage are the state ``x_k``, the input ``u_k`` and one
nonnegative slack per softened constraint row at stages ``1..N``. Every QP is
condensed: the linearized dynamics eliminate the state deltas, leaving input
deltas and slacks as unknowns. The cost is a sum of squares of residuals that
are linear in ``(x, u)``, so the Gauss-Newton Hessian is the exact cost
Hessian and the dynamics curvature is dropped.

With slacks constrained to be nonnegative the exact penalty ``||s||_1``
equals ``sum(s)``, so the epigraph variables of the general reformulation
coincide with the slacks themselves and the QP stays exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core_model import Cbf, ControlAffineSystem, Polytope, fd_jacobian
from .opt.qp import QpNonConvergence, QpProblem, QpResult, solve_qp
from .opt.riccati import lqr_gain


class QpFailure(RuntimeError):
    def __init__(self, message: str, result: Optional[QpResult] = None):
        super().__init__(message)
        self.result = result


class HardRowInfeasible(QpFailure):
    """The hard barrier row and the tightened input bounds admit no ``u_0``."""


@dataclass
class DiscreteDynamics:
    """RK4 over one shooting interval (``steps`` equal sub-steps) with forward sensitivities."""

    sys: ControlAffineSystem
    T_s: float
    steps: int = 1

    def __post_init__(self):
        if not self.T_s > 0:
            raise ValueError("T_s must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def _F(self, x, u):
        return self.sys.drift(x) + self.sys.input_matrix(x) @ u

    def _dF(self, x, u):
        Fx = self.sys.jac_f(x) + np.einsum("ijk,j->ik", self.sys.jac_B(x), u)
        return Fx, self.sys.input_matrix(x)

    def __call__(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        h = self.T_s / self.steps
        for _ in range(self.steps):
            k1 = self._F(x, u)
            k2 = self._F(x + 0.5 * h * k1, u)
            k3 = self._F(x + 0.5 * h * k2, u)
            k4 = self._F(x + h * k3, u)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    def linearize(self, x, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(x_next, d x_next / d x, d x_next / d u)`` by the chain rule through the RK4 stages."""
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        n, m = x.size, u.size
        h = self.T_s / self.steps
        Sx = np.eye(n)
        Su = np.zeros((n, m))
        for _ in range(self.steps):
            stages = []
            xs, dxs_x, dxs_u = x, np.eye(n), np.zeros((n, m))
            for c in (0.5, 0.5, 1.0, None):
                k = self._F(xs, u)
                Fx, Fu = self._dF(xs, u)
                dk_x = Fx @ dxs_x
                dk_u = Fx @ dxs_u + Fu
                stages.append((k, dk_x, dk_u))
                if c is not None:
                    xs = x + c * h * k
                    dxs_x = np.eye(n) + c * h * dk_x
                    dxs_u = c * h * dk_u
            w = (1.0, 2.0, 2.0, 1.0)
            x = x + h / 6.0 * sum(wi * s[0] for wi, s in zip(w, stages))
            step_x = np.eye(n) + h / 6.0 * sum(wi * s[1] for wi, s in zip(w, stages))
            step_u = h / 6.0 * sum(wi * s[2] for wi, s in zip(w, stages))
            Sx, Su = step_x @ Sx, step_x @ Su + step_u
        return x, Sx, Su


def discretize_rk4(sys: ControlAffineSystem, T_s: float, steps: int = 1) -> DiscreteDynamics:
    return DiscreteDynamics(sys, T_s, steps)


@dataclass
class NlpProblem:
    """Tracking NLP over ``N`` shooting intervals.

    Stage cost ``(x - x_ref)^T Q (x - x_ref) + du^T R1 du + u^T R2 u`` with
    ``du_k = u_k - u_{k-1}`` (``u_{-1}`` is the previously applied input),
    terminal cost ``(x_N - x_ref)^T P_N (x_N - x_ref)``. ``constraint(x) <= 0``
    is softened at stages ``1..N`` with penalty ``rho1 * s + rho2 * s^2``;
    the input set ``U`` is hard.
    """

    dyn: DiscreteDynamics
    N: int
    Q: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    P_N: np.ndarray
    U: Polytope
    constraint: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constraint_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    rho1: float = 1e5
    rho2: float = 1e6
    x_ref: Optional[np.ndarray] = None
    K_pre: Optional[np.ndarray] = None  # condensing pre-stabilization, see build_rti_qp

    def __post_init__(self):
        n, m = self.n, self.m
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R1 = np.atleast_2d(np.asarray(self.R1, dtype=float))
        self.R2 = np.atleast_2d(np.asarray(self.R2, dtype=float))
        self.P_N = np.atleast_2d(np.asarray(self.P_N, dtype=float))
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if self.Q.shape != (n, n) or self.P_N.shape != (n, n):
            raise ValueError("state weights must be n x n")
        if self.R1.shape != (m, m) or self.R2.shape != (m, m):
            raise ValueError("input weights must be m x m")
        for name, W in (("Q", self.Q), ("P_N", self.P_N), ("R1", self.R1), ("R2", self.R2)):
            if np.min(np.linalg.eigvalsh(0.5 * (W + W.T))) < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(self.R1 + self.R2)) <= 0:
            raise ValueError("R1 + R2 must be positive definite")
        if self.U.dim != m:
            raise ValueError("input set dimension mismatch")
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("slack penalties must be nonnegative")
        self.x_ref = np.zeros(n) if self.x_ref is None else np.asarray(self.x_ref, dtype=float)
        self.n_con = 0 if self.constraint is None else int(np.atleast_1d(self.constraint(np.zeros(n))).size)

    @property
    def n(self) -> int:
        return self.dyn.sys.n

    @property
    def m(self) -> int:
        return self.dyn.sys.m

    def g(self, x) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.constraint(x), dtype=float))

    def g_jac(self, x) -> np.ndarray:
        if self.constraint_jac is not None:
            return np.atleast_2d(self.constraint_jac(x))
        return fd_jacobian(self.g, x).reshape(self.n_con, self.n)


def terminal_weight(sys: ControlAffineSystem, T_s: float, Q, R, steps: int = 1, x_eq=None) -> np.ndarray:
    """DARE solution for the RK4 discretization of the linearization at ``x_eq``."""
    dyn = DiscreteDynamics(sys, T_s, steps)
    x_eq = np.zeros(sys.n) if x_eq is None else np.asarray(x_eq, dtype=float)
    _, A, B = dyn.linearize(x_eq, np.zeros(sys.m))
    return lqr_gain(A, B, Q, R, discrete=True).P


def prestabilizing_gain(sys: ControlAffineSystem, T_s: float, Q, R, steps: int = 1, x_eq=None) -> np.ndarray:
    """Discrete LQR gain of the same linearization, for use as ``NlpProblem.K_pre``."""
    dyn = DiscreteDynamics(sys, T_s, steps)
    x_eq = np.zeros(sys.n) if x_eq is None else np.asarray(x_eq, dtype=float)
    _, A, B = dyn.linearize(x_eq, np.zeros(sys.m))
    return lqr_gain(A, B, Q, R, discrete=True).K


def barrier_constraint(cbf: Cbf):
    """``(g, dg/dx)`` for the state constraint ``-h(x) <= 0``."""
    return (lambda x: np.array([-cbf.value(x)]), lambda x: -cbf.gradient(x)[None, :])


@dataclass
class RtiState:
    """Current iterate ``v = [X, U, S]``, QP multipliers and warm-start data."""

    X: np.ndarray  # (N+1, n)
    U: np.ndarray  # (N, m)
    S: np.ndarray  # (N, n_con)
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    u_prev: Optional[np.ndarray] = None
    active: tuple = ()
    elapsed: float = 0.0  # time since the last shift

    @classmethod
    def initial(cls, p: NlpProblem, x0, u0=None) -> "RtiState":
        x0 = np.asarray(x0, dtype=float)
        u0 = np.zeros(p.m) if u0 is None else np.atleast_1d(np.asarray(u0, dtype=float))
        return cls(np.tile(x0, (p.N + 1, 1)), np.tile(u0, (p.N, 1)), np.zeros((p.N, p.n_con)),
                   u_prev=u0.copy())

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.X.ravel(), self.U.ravel(), self.S.ravel()])

    def copy(self) -> "RtiState":
        return RtiState(self.X.copy(), self.U.copy(), self.S.copy(), self.mu.copy(),
                        None if self.u_prev is None else self.u_prev.copy(), self.active, self.elapsed)

    def shift(self) -> None:
        """Drop stage 0 and duplicate the terminal stage."""
        self.X = np.vstack([self.X[1:], self.X[-1:]])
        self.U = np.vstack([self.U[1:], self.U[-1:]])
        self.S = np.vstack([self.S[1:], self.S[-1:]])
        self.active = ()

    def advance(self, dt: float, T_s: float) -> int:
        """Account for ``dt`` seconds of elapsed time; shift once per completed shooting interval."""
        self.elapsed += dt
        shifts = 0
        while self.elapsed >= T_s - 1e-12:
            self.shift()
            self.elapsed -= T_s
            shifts += 1
        return shifts


def x0_selector(p: NlpProblem) -> np.ndarray:
    """Index selection of ``x_0`` from ``v``."""
    E = np.zeros((p.n, (p.N + 1) * p.n + p.N * p.m + p.N * p.n_con))
    E[:, :p.n] = np.eye(p.n)
    return E


def u0_selector(p: NlpProblem) -> np.ndarray:
    """Index selection of ``u_0`` from ``v``."""
    off = (p.N + 1) * p.n
    E = np.zeros((p.m, off + p.N * p.m + p.N * p.n_con))
    E[:, off:off + p.m] = np.eye(p.m)
    return E


@dataclass
class CondensedQp:
    qp: QpProblem
    E: np.ndarray  # free part of the stacked state deltas, ((N+1) n,)
    Gam: np.ndarray  # sensitivity of the state deltas to v, ((N+1) n, N m)
    F: np.ndarray  # free part of the input deltas, (N m,)
    M: np.ndarray  # sensitivity of the input deltas to v, (N m, N m), unit lower triangular
    n_u: int
    n_s: int
    row_kinds: list  # label per inequality row: "U", "U0", "soft", "slack", "cbf"


@dataclass
class HardRows:
    """Extra hard rows on ``u_0``: ``a^T u_0 + b <= 0`` and ``u_0`` in ``U0``."""

    a: Optional[np.ndarray] = None
    b: float = 0.0
    U0: Optional[Polytope] = None


def build_rti_qp(p: NlpProblem, s: RtiState, x_hat, hard: Optional[HardRows] = None) -> CondensedQp:
    """Gauss-Newton QP in ``y = [v, S_new]`` linearized at the iterate in ``s``.

    Input deltas are parametrized as ``du_k = -K_pre dx_k + v_k``. This is a
    bijective change of variables (the map from ``v`` to ``dU`` is unit lower
    triangular), so the QP is the same; a stabilizing ``K_pre`` only keeps
    the condensed matrices bounded over long horizons of unstable dynamics.
    """
    n, m, N, c = p.n, p.m, p.N, p.n_con
    x_hat = np.asarray(x_hat, dtype=float)
    if s.X.shape != (N + 1, n) or s.U.shape != (N, m) or s.S.shape != (N, c) or x_hat.shape != (n,):
        raise ValueError("iterate dimensions do not match the problem")
    nu, ns = N * m, N * c
    K = np.zeros((m, n)) if p.K_pre is None else p.K_pre
    E = np.zeros((N + 1, n))
    Gam = np.zeros((N + 1, n, nu))
    F = np.zeros((N, m))
    M = np.zeros((N, m, nu))
    E[0] = x_hat - s.X[0]
    for k in range(N):
        x_next, A, B = p.dyn.linearize(s.X[k], s.U[k])
        F[k] = -K @ E[k]
        M[k] = -K @ Gam[k]
        M[k][:, k * m:(k + 1) * m] += np.eye(m)
        E[k + 1] = A @ E[k] + B @ F[k] + x_next - s.X[k + 1]
        Gam[k + 1] = A @ Gam[k] + B @ M[k]
    Fv = F.ravel()
    Mv = M.reshape(nu, nu)

    H = np.zeros((nu + ns, nu + ns))
    g = np.zeros(nu + ns)
    Hvv = H[:nu, :nu]
    # state tracking
    for k in range(N + 1):
        W = p.P_N if k == N else p.Q
        r0 = s.X[k] + E[k] - p.x_ref
        Hvv += 2.0 * Gam[k].T @ W @ Gam[k]
        g[:nu] += 2.0 * Gam[k].T @ W @ r0
    # input rate and magnitude, in u = U + F + M v
    Dm = np.eye(nu) - np.eye(nu, k=-m)
    u_prev = np.zeros(m) if s.u_prev is None else np.atleast_1d(s.u_prev)
    u0 = s.U.ravel() + Fv
    d0 = Dm @ u0
    d0[:m] -= u_prev
    R1b = np.kron(np.eye(N), p.R1)
    R2b = np.kron(np.eye(N), p.R2)
    DM = Dm @ Mv
    Hvv += 2.0 * (DM.T @ R1b @ DM + Mv.T @ R2b @ Mv)
    g[:nu] += 2.0 * (DM.T @ R1b @ d0 + Mv.T @ R2b @ u0)
    # slack penalty
    H[nu:, nu:] = 2.0 * p.rho2 * np.eye(ns)
    g[nu:] = p.rho1

    rows, rhs, kinds = [], [], []
    for k in range(N):
        Uk = hard.U0 if (k == 0 and hard is not None and hard.U0 is not None) else p.U
        base = s.U[k] + F[k]
        for ai, bi in zip(Uk.A, Uk.b):
            r = np.zeros(nu + ns)
            r[:nu] = ai @ M[k]
            rows.append(r)
            rhs.append(bi - ai @ base)
            kinds.append("U0" if (k == 0 and Uk is not p.U) else "U")
    for k in range(1, N + 1):
        if c == 0:
            break
        gk = p.g(s.X[k])
        Gk = p.g_jac(s.X[k])
        for i in range(c):
            r = np.zeros(nu + ns)
            r[:nu] = Gk[i] @ Gam[k]
            r[nu + (k - 1) * c + i] = -1.0
            rows.append(r)
            rhs.append(-(gk[i] + Gk[i] @ E[k]))
            kinds.append("soft")
    for j in range(ns):
        r = np.zeros(nu + ns)
        r[nu + j] = -1.0
        rows.append(r)
        rhs.append(0.0)
        kinds.append("slack")
    if hard is not None and hard.a is not None:
        r = np.zeros(nu + ns)
        r[:nu] = hard.a @ M[0]
        rows.append(r)
        rhs.append(-(hard.b + hard.a @ (s.U[0] + F[0])))
        kinds.append("cbf")
    A_in = np.array(rows) if rows else None
    b_in = np.array(rhs) if rows else None
    H = 0.5 * (H + H.T)
    return CondensedQp(QpProblem(H, g, A_in=A_in, b_in=b_in), E.ravel(), Gam.reshape((N + 1) * n, nu),
                       Fv, Mv, nu, ns, kinds)


def _feasible_start(cq: CondensedQp, p: NlpProblem, s: RtiState) -> Optional[np.ndarray]:
    """Inputs projected into a box-shaped ``U`` with minimal slacks; ``None`` when an LP start is needed."""
    if "cbf" in cq.row_kinds or "U0" in cq.row_kinds:
        return None
    if not np.all(np.count_nonzero(p.U.A, axis=1) == 1):
        return None
    A, b = cq.qp.A_in, cq.qp.b_in
    bb = p.U.bounding_box()
    dU = (np.clip(s.U, bb.lo, bb.hi) - s.U).ravel()
    y = np.zeros(cq.n_u + cq.n_s)
    y[:cq.n_u] = np.linalg.solve(cq.M, dU - cq.F)
    soft = np.where(np.array(cq.row_kinds) == "soft")[0]
    if soft.size:
        viol = A[soft, :cq.n_u] @ y[:cq.n_u] - b[soft]
        y[cq.n_u:] = np.maximum(viol, 0.0)
    if np.any(A @ y - b > 1e-9):
        return None
    return y


@dataclass
class RtiStepResult:
    u0: np.ndarray
    state: RtiState
    qp: QpResult
    slack_norm: float
    iterations: int
    step_norm: float
    solve_time_us: float = 0.0
    cbf_active: bool = False


def _solve(cq: CondensedQp, p: NlpProblem, s: RtiState) -> QpResult:
    y0 = _feasible_start(cq, p, s)
    n_rows = 0 if cq.qp.A_in is None else cq.qp.A_in.shape[0]
    active0 = tuple(i for i in s.active if i < n_rows) if y0 is not None else ()
    if y0 is not None and active0:
        # keep only warm-start rows that are tight at the start point
        slack = cq.qp.b_in - cq.qp.A_in @ y0
        active0 = tuple(i for i in active0 if abs(slack[i]) <= 1e-9)
    try:
        return solve_qp(cq.qp, x0=y0, active0=active0)
    except QpNonConvergence as exc:
        raise QpFailure(f"QP did not converge in {exc.iterations} iterations") from exc


def _apply(cq: CondensedQp, p: NlpProblem, s: RtiState, res: QpResult) -> tuple[RtiState, float]:
    n, m, N, c = p.n, p.m, p.N, p.n_con
    v = res.x[:cq.n_u]
    dU = cq.F + cq.M @ v
    dX = cq.E + cq.Gam @ v
    new = s.copy()
    new.X = s.X + dX.reshape(N + 1, n)
    new.U = s.U + dU.reshape(N, m)
    new.S = res.x[cq.n_u:].reshape(N, c)
    new.mu = res.mu_in.copy()
    new.active = tuple(res.active)
    step = float(np.max(np.abs(np.concatenate([dX, dU, new.S.ravel() - s.S.ravel()])))) if dX.size else 0.0
    return new, step


def rti_step(p: NlpProblem, s: RtiState, x_hat, hard: Optional[HardRows] = None) -> RtiStepResult:
    """One full Gauss-Newton SQP step from the warm start ``s`` (no line search)."""
    t0 = time.perf_counter()
    cq = build_rti_qp(p, s, x_hat, hard)
    res = _solve(cq, p, s)
    if res.status != "optimal":
        cls = HardRowInfeasible if hard is not None and res.status == "infeasible" else QpFailure
        raise cls(f"RTI QP returned status {res.status!r}", res)
    new, step = _apply(cq, p, s, res)
    kinds = np.array(cq.row_kinds)
    cbf_rows = np.where(kinds == "cbf")[0]
    active = bool(cbf_rows.size and cbf_rows[0] in res.active)
    return RtiStepResult(new.U[0].copy(), new, res, float(np.linalg.norm(new.S.ravel())), res.iterations, step,
                         (time.perf_counter() - t0) * 1e6, active)


@dataclass
class FullSolveResult:
    u0: np.ndarray
    state: RtiState
    converged: bool
    iterations: int
    step_norm: float
    defect_norm: float
    qp_iterations: int


def defect_norm(p: NlpProblem, s: RtiState, x_hat) -> float:
    d = [np.max(np.abs(s.X[0] - x_hat))]
    for k in range(p.N):
        d.append(np.max(np.abs(p.dyn(s.X[k], s.U[k]) - s.X[k + 1])))
    return float(max(d))


def full_nmpc_solve(p: NlpProblem, x_hat, state: Optional[RtiState] = None, max_iters: int = 50,
                    tol: float = 1e-6) -> FullSolveResult:
    """SQP iterated to a step and dynamics-defect tolerance; the converged-NLP baseline."""
    x_hat = np.asarray(x_hat, dtype=float)
    s = RtiState.initial(p, x_hat) if state is None else state.copy()
    qp_iters = 0
    step = np.inf
    for it in range(1, max_iters + 1):
        r = rti_step(p, s, x_hat)
        s = r.state
        qp_iters += r.iterations
        step = r.step_norm
        if step <= tol and defect_norm(p, s, x_hat) <= tol:
            return FullSolveResult(s.U[0].copy(), s, True, it, step, defect_norm(p, s, x_hat), qp_iters)
    return FullSolveResult(s.U[0].copy(), s, False, max_iters, step, defect_norm(p, s, x_hat), qp_iters)


def cbf_hard_row(sys: ControlAffineSystem, cbf: Cbf, x) -> tuple[np.ndarray, float]:
    """``(a, b)`` with ``a^T u + b <= 0`` equivalent to the barrier condition at ``x``."""
    gr = cbf.gradient(x)
    a = -sys.input_matrix(x).T @ gr
    b = float(-gr @ sys.drift(x) - cbf.alpha(cbf.value(x)))
    return a, b


def cbf_rti_step(p: NlpProblem, s: RtiState, x_hat, cbf_prime: Cbf, U_tight: Polytope) -> RtiStepResult:
    """RTI step with a hard barrier row at ``x_0 = x_hat`` and ``u_0`` in ``U_tight``.

    The barrier condition is affine in ``u_0`` and evaluated at the fixed
    anchor state, so the row carries no linearization error.
    """
    a, b = cbf_hard_row(p.dyn.sys, cbf_prime, x_hat)
    return rti_step(p, s, x_hat, HardRows(a, b, U_tight))


class RtiController:
    """Closed-loop wrapper: ``kind`` is ``"rti"``, ``"full"`` or ``"rti+cbf"``.

    ``reference(t)`` sets the tracked state at each sample (no preview). The
    ``"rti+cbf"`` kind adds the hard barrier row for ``cbf`` at the measured
    state with ``u_0`` in ``U_tight``; when those rows are infeasible the
    step is counted and the softened QP without them supplies the input.
    """

    def __init__(self, p: NlpProblem, period: float, kind: str = "rti",
                 reference: Optional[Callable[[float], np.ndarray]] = None, cbf: Optional[Cbf] = None,
                 U_tight: Optional[Polytope] = None, max_iters: int = 50):
        if kind not in ("rti", "full", "rti+cbf"):
            raise ValueError(f"unknown controller kind {kind!r}")
        if kind == "rti+cbf" and (cbf is None or U_tight is None):
            raise ValueError("the barrier-augmented RTI needs a barrier and a tightened input set")
        self.p = p
        self.kind = kind
        self.reference = reference
        self.cbf = cbf
        self.U_tight = U_tight
        self.max_iters = max_iters
        self.state: Optional[RtiState] = None
        self.period = period
        self.hard_row_infeasible = 0
        self.unconverged = 0

    def reset(self, x0) -> None:
        self.state = RtiState.initial(self.p, x0)

    def _set_reference(self, t: float) -> None:
        if self.reference is not None:
            self.p.x_ref = np.asarray(self.reference(t), dtype=float)

    def solve(self, t: float, x) -> tuple[RtiStepResult, bool]:
        self._set_reference(t)
        infeasible = False
        if self.kind == "full":
            t0 = time.perf_counter()
            r = full_nmpc_solve(self.p, x, self.state, self.max_iters)
            self.unconverged += int(not r.converged)
            res = RtiStepResult(r.u0, r.state, None, float(np.linalg.norm(r.state.S.ravel())), r.qp_iterations,
                                r.step_norm, (time.perf_counter() - t0) * 1e6)
        elif self.kind == "rti+cbf":
            try:
                res = cbf_rti_step(self.p, self.state, x, self.cbf, self.U_tight)
            except HardRowInfeasible:
                infeasible = True
                self.hard_row_infeasible += 1
                res = rti_step(self.p, self.state, x)
        else:
            res = rti_step(self.p, self.state, x)
        return res, infeasible

    def step(self, t: float, x):
        from .loop import ControlOutput

        res, infeasible = self.solve(t, x)
        self.state = res.state
        u = res.u0.copy()
        h_prime = self.cbf.value(x) if self.cbf is not None else float("nan")
        return ControlOutput(u, u.copy(), h_prime, res.slack_norm, res.iterations, res.solve_time_us, infeasible)

    def commit(self, u_applied, period: float) -> None:
        self.state.u_prev = np.atleast_1d(np.asarray(u_applied, dtype=float)).copy()
        self.state.advance(period, self.p.dyn.T_s)

    def after_interval(self, x_next) -> bool:
        self.commit(self.state.U[0], self.period)
        return True


class RtiTubeNominal:
    """Nominal source for the tube loop: a barrier-augmented RTI step at the anchor.

    The hard rows use the reduced barrier and the tightened inputs; their
    infeasibility surfaces as :class:`HardRowInfeasible`.
    """

    def __init__(self, p: NlpProblem, cbf_prime: Cbf, U_tight: Polytope, period: float,
                 reference: Optional[Callable[[float], np.ndarray]] = None):
        self.p = p
        self.cbf_prime = cbf_prime
        self.U_tight = U_tight
        self.period = period
        self.reference = reference
        self.state: Optional[RtiState] = None

    def __call__(self, x_bar, t: float):
        if self.state is None:
            self.state = RtiState.initial(self.p, x_bar)
        else:
            self.state.advance(self.period, self.p.dyn.T_s)
        if self.reference is not None:
            self.p.x_ref = np.asarray(self.reference(t), dtype=float)
        res = cbf_rti_step(self.p, self.state, x_bar, self.cbf_prime, self.U_tight)
        self.state = res.state
        self.state.u_prev = res.u0.copy()
        return res.u0.copy(), {"slack_norm": res.slack_norm, "qp_iters": res.iterations,
                               "solve_time_us": res.solve_time_us}


def tube_rti_controller(p: NlpProblem, tube, reduced, period: float, substeps: int = 10,
                        reference: Optional[Callable[[float], np.ndarray]] = None):
    """Tube loop whose nominal input comes from the barrier-augmented RTI at the anchor."""
    from .tube_cbf import TubeController, TubeFilterInfeasible

    source = RtiTubeNominal(p, reduced.cbf_prime, tube.U_tight, period, reference)

    def nominal(x_bar, t):
        try:
            return source(x_bar, t)
        except HardRowInfeasible as exc:
            raise TubeFilterInfeasible(str(exc)) from exc

    return TubeController(tube, reduced, p.dyn.sys, nominal, period, substeps)


def run_tube_rti(p: NlpProblem, tube, reduced, plant: ControlAffineSystem, cbf: Cbf, x0, duration: float,
                 period: float, substeps: int = 10, reference: Optional[Callable[[float], np.ndarray]] = None,
                 u_limit=None):
    """RTI with the tube barrier: anchor at ``x0``, hard-row QP at the anchor, ``u = u_bar + kappa``, re-anchor."""
    from .loop import simulate

    ctrl = tube_rti_controller(p, tube, reduced, period, substeps, reference)
    return simulate(ctrl, plant, x0, duration, period, substeps, cbf, u_limit=u_limit)
