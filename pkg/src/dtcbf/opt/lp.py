"""Dense two-phase tableau simplex for small LPs.

Solves ``min/max c^T z  s.t.  A z <= b,  A_eq z = b_eq`` with ``z`` free.
Dantzig pricing, switching to Bland's rule after a degenerate pivot so the
method cannot cycle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

_TOL = 1e-9


@dataclass
class LpResult:
    x: Optional[np.ndarray]
    value: float
    status: str  # "optimal" | "infeasible" | "unbounded" | "iteration_limit"
    iterations: int = 0


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    col_vals = T[:, col].copy()
    col_vals[row] = 0.0
    T -= np.outer(col_vals, T[row])


def _run_simplex(T: np.ndarray, basis: list[int], n_cols: int, max_iter: int) -> tuple[str, int]:
    """Minimize the objective held in the last row of T over the first n_cols columns."""
    bland = False
    it = 0
    m = T.shape[0] - 1
    while it < max_iter:
        obj = T[-1, :n_cols]
        scale = max(1.0, np.max(np.abs(obj)))
        candidates = np.flatnonzero(obj < -_TOL * scale)
        if candidates.size == 0:
            return "optimal", it
        col = int(candidates[0]) if bland else int(candidates[np.argmin(obj[candidates])])
        column = T[:m, col]
        pos = column > _TOL
        if not np.any(pos):
            return "unbounded", it
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / column[pos]
        best = np.min(ratios)
        ties = np.flatnonzero(ratios <= best + _TOL * max(1.0, abs(best)))
        row = int(min(ties, key=lambda r: basis[r]))
        degenerate = best <= _TOL
        _pivot(T, row, col)
        basis[row] = col
        bland = bland or degenerate
        it += 1
    return "iteration_limit", it


def solve_lp(c, A=None, b=None, sense: str = "min", A_eq=None, b_eq=None,
             max_iter: int = 5000) -> LpResult:
    """Solve a small dense LP in free variables."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    d = c.size
    A = np.zeros((0, d)) if A is None else np.atleast_2d(np.asarray(A, dtype=float)).reshape(-1, d)
    b = np.zeros(0) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    A_eq = np.zeros((0, d)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float)).reshape(-1, d)
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=float))
    if sense not in ("min", "max"):
        raise ValueError("sense must be 'min' or 'max'")
    cost = c if sense == "min" else -c

    p, q = A.shape[0], A_eq.shape[0]
    rows = p + q
    # columns: z+ (d), z- (d), slacks (p), artificials (rows), rhs
    n_struct = 2 * d + p
    n_cols = n_struct + rows
    T = np.zeros((rows + 1, n_cols + 1))
    T[:p, :d] = A
    T[:p, d:2 * d] = -A
    T[:p, 2 * d:n_struct] = np.eye(p)
    T[:p, -1] = b
    T[p:rows, :d] = A_eq
    T[p:rows, d:2 * d] = -A_eq
    T[p:rows, -1] = b_eq
    neg = T[:rows, -1] < 0
    T[:rows][neg] *= -1.0

    basis = []
    needs_art = []
    for i in range(rows):
        if i < p and not neg[i]:
            basis.append(2 * d + i)
        else:
            basis.append(n_struct + i)
            T[i, n_struct + i] = 1.0
            needs_art.append(i)

    iters = 0
    if needs_art:
        # phase 1: minimize sum of artificials
        T[-1, :] = 0.0
        for i in needs_art:
            T[-1, :] -= T[i, :]
            T[-1, n_struct + i] += 1.0
        status, it = _run_simplex(T, basis, n_cols, max_iter)
        iters += it
        if status == "iteration_limit":
            return LpResult(None, np.nan, status, iters)
        scale = max(1.0, np.max(np.abs(T[:rows, -1]), initial=0.0))
        if -T[-1, -1] > 1e-8 * scale:
            return LpResult(None, np.nan, "infeasible", iters)
        # drive remaining artificials out of the basis
        keep = []
        for r in range(rows):
            if basis[r] >= n_struct:
                nz = np.flatnonzero(np.abs(T[r, :n_struct]) > 1e-9)
                if nz.size:
                    _pivot(T, r, int(nz[0]))
                    basis[r] = int(nz[0])
                    keep.append(r)
            else:
                keep.append(r)
        T = np.vstack([T[keep], T[-1:]])
        basis = [basis[r] for r in keep]
        rows = len(keep)

    # phase 2 on structural columns only
    T = np.hstack([T[:, :n_struct], T[:, -1:]])
    T[-1, :] = 0.0
    T[-1, :d] = cost
    T[-1, d:2 * d] = -cost
    for r, j in enumerate(basis):
        if T[-1, j] != 0.0:
            T[-1, :] -= T[-1, j] * T[r, :]
    status, it = _run_simplex(T, basis, n_struct, max_iter)
    iters += it
    if status != "optimal":
        return LpResult(None, np.nan, status, iters)
    sol = np.zeros(n_struct)
    for r, j in enumerate(basis):
        sol[j] = T[r, -1]
    x = sol[:d] - sol[d:2 * d]
    value = float(c @ x)
    return LpResult(x, value, "optimal", iters)
