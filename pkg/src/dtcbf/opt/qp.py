"""Primal active-set solver for small dense convex QPs.

    min 1/2 z^T H z + g^T z   s.t.  A_eq z = b_eq,  A_in z <= b_in

H only needs to be positive semidefinite. Each iteration solves the
equality-constrained subproblem on the working set with a null-space
method; directions of zero curvature are followed until a constraint blocks
them, and an unblocked one means the problem is unbounded. A feasible start
comes from the caller (warm start) or from a phase-1 LP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .lp import solve_lp


class QpNonConvergence(RuntimeError):
    def __init__(self, iterations: int):
        super().__init__(f"active-set QP did not converge in {iterations} iterations")
        self.iterations = iterations


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        d = self.g.size
        if self.H.shape != (d, d):
            raise ValueError(f"H has shape {self.H.shape}, expected {(d, d)}")
        if not np.allclose(self.H, self.H.T, atol=1e-10, rtol=0.0):
            raise ValueError("H must be symmetric")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, d)
        self.A_in, self.b_in = _rows(self.A_in, self.b_in, d)

    @property
    def dim(self) -> int:
        return self.g.size


def _rows(A, b, d):
    if A is None:
        return np.zeros((0, d)), np.zeros(0)
    A = np.asarray(A, dtype=float).reshape(-1, d)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if b.size != A.shape[0]:
        raise ValueError("constraint matrix and vector sizes differ")
    return A, b


@dataclass
class QpResult:
    x: Optional[np.ndarray]
    status: str  # "optimal" | "infeasible" | "unbounded"
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    active: list = field(default_factory=list)


def _independent(rows: np.ndarray, candidate: np.ndarray, tol: float = 1e-10) -> bool:
    if rows.shape[0] == 0:
        return np.linalg.norm(candidate) > tol
    stacked = np.vstack([rows, candidate])
    s = np.linalg.svd(stacked, compute_uv=False)
    return s[-1] > tol * max(1.0, s[0])


def _null_space(A: np.ndarray, d: int) -> np.ndarray:
    k = A.shape[0]
    if k == 0:
        return np.eye(d)
    Q, _ = np.linalg.qr(A.T, mode="complete")
    return Q[:, k:]


def kkt_residual(p: QpProblem, res: QpResult) -> float:
    r = p.H @ res.x + p.g + p.A_eq.T @ res.y_eq + p.A_in.T @ res.mu_in
    return float(np.linalg.norm(r))


def solve_qp(p: QpProblem, x0=None, active0: Sequence[int] = (), max_iter: Optional[int] = None,
             tol: float = 1e-9) -> QpResult:
    """Solve ``p``; ``x0``/``active0`` warm-start the iterate and working set."""
    d = p.dim
    H = 0.5 * (p.H + p.H.T)
    if d:
        eig_min = np.linalg.eigvalsh(H)[0]
        scale = max(1.0, np.max(np.abs(H)))
        if eig_min < -1e-8 * scale:
            raise ValueError(f"H is not positive semidefinite (min eigenvalue {eig_min:.3g})")
        if eig_min < 0.0:
            H = H + 1e-9 * np.eye(d)
    max_iter = max(50, 50 * d) if max_iter is None else max_iter
    A_eq, b_eq, A_in, b_in = p.A_eq, p.b_eq, p.A_in, p.b_in
    n_eq, n_in = A_eq.shape[0], A_in.shape[0]
    feas_tol = 1e-9 * max(1.0, np.max(np.abs(np.concatenate([b_eq, b_in])), initial=0.0))

    def feasible(x):
        return (np.all(np.abs(A_eq @ x - b_eq) <= feas_tol * 10)
                and np.all(A_in @ x - b_in <= feas_tol * 10))

    x = None
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if feasible(x0):
            x = x0.copy()
    if x is None:
        lp = solve_lp(np.zeros(d), A_in if n_in else None, b_in if n_in else None,
                      A_eq=A_eq if n_eq else None, b_eq=b_eq if n_eq else None)
        if lp.status == "infeasible":
            return QpResult(None, "infeasible", np.zeros(n_eq), np.zeros(n_in))
        if lp.status != "optimal":
            raise QpNonConvergence(lp.iterations)
        x = lp.x

    # working set entries: ("e", i) for equalities, ("i", j) for inequalities
    work: list[tuple[str, int]] = []
    rows = np.zeros((0, d))
    for i in range(n_eq):
        if _independent(rows, A_eq[i]):
            work.append(("e", i))
            rows = np.vstack([rows, A_eq[i]])
    for j in active0:
        if 0 <= j < n_in and abs(A_in[j] @ x - b_in[j]) <= feas_tol * 10 and _independent(rows, A_in[j]):
            work.append(("i", j))
            rows = np.vstack([rows, A_in[j]])

    degenerate = False
    for it in range(1, max_iter + 1):
        grad = H @ x + p.g
        Z = _null_space(rows, d)
        step = np.zeros(d)
        ray = False
        if Z.shape[1]:
            Hr = Z.T @ H @ Z
            gr = Z.T @ grad
            w, V = np.linalg.eigh(Hr)
            wtol = 1e-10 * max(1.0, np.max(np.abs(w)))
            coeff = V.T @ gr
            flat = w <= wtol
            gtol = 1e-11 * max(1.0, np.linalg.norm(grad))
            if np.any(flat & (np.abs(coeff) > gtol)):
                ray = True
                step = -Z @ (V[:, flat] @ coeff[flat])
            else:
                c = np.zeros_like(coeff)
                c[~flat] = -coeff[~flat] / w[~flat]
                step = Z @ (V @ c)

        # ratio test against constraints outside the working set
        in_work = {j for kind, j in work if kind == "i"}
        alpha = np.inf if ray else 1.0
        block = None
        if n_in and np.any(step):
            Ap = A_in @ step
            slack = b_in - A_in @ x
            ptol = 1e-12 * max(1.0, np.linalg.norm(step))
            for j in range(n_in):
                if j in in_work or Ap[j] <= ptol:
                    continue
                r = max(slack[j], 0.0) / Ap[j]
                if r < alpha - 1e-15 or (block is not None and r <= alpha + 1e-15 and j < block):
                    alpha, block = r, j
        if block is None and ray:
            return QpResult(None, "unbounded", np.zeros(n_eq), np.zeros(n_in), it)
        if np.any(step):
            degenerate = alpha <= 1e-14
            x = x + alpha * step
        if block is not None:
            work.append(("i", block))
            rows = np.vstack([rows, A_in[block]])
            continue

        # x minimizes over the working set: check multiplier signs
        grad = H @ x + p.g
        lam = np.linalg.lstsq(rows.T, -grad, rcond=None)[0] if rows.shape[0] else np.zeros(0)
        y_eq = np.zeros(n_eq)
        mu = np.zeros(n_in)
        worst, worst_k = 0.0, None
        mtol = tol * max(1.0, np.linalg.norm(grad))
        for k, (kind, idx) in enumerate(work):
            if kind == "e":
                y_eq[idx] = lam[k]
                continue
            mu[idx] = lam[k]
            if lam[k] >= -mtol:
                continue
            if degenerate:
                # Bland: smallest constraint index among the negative multipliers
                if worst_k is None or idx < work[worst_k][1]:
                    worst, worst_k = lam[k], k
            elif lam[k] < worst:
                worst, worst_k = lam[k], k
        if worst_k is None:
            mu = np.maximum(mu, 0.0)
            return QpResult(x, "optimal", y_eq, mu, it, sorted(j for kind, j in work if kind == "i"))
        work.pop(worst_k)
        rows = np.delete(rows, worst_k, axis=0)
    raise QpNonConvergence(max_iter)
