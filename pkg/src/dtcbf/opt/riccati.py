"""LQR gains via Kleinman (continuous) and Hewer (discrete) policy iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_continuous_lyapunov, solve_discrete_lyapunov


class RiccatiError(RuntimeError):
    pass


@dataclass(frozen=True)
class LqrGain:
    K: np.ndarray
    P: np.ndarray
    discrete: bool = False


def care_residual(A, B, Q, R, P) -> np.ndarray:
    return A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q


def dare_residual(A, B, Q, R, P) -> np.ndarray:
    S = R + B.T @ P @ B
    return A.T @ P @ A - P - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A) + Q


def _is_stable(Acl: np.ndarray, discrete: bool, margin: float = 1e-9) -> bool:
    eig = np.linalg.eigvals(Acl)
    if discrete:
        return bool(np.max(np.abs(eig)) < 1.0 - margin)
    return bool(np.max(eig.real) < -margin)


def _continuous_seed(A, B) -> np.ndarray:
    # Bass: shift A so -(A + beta I) is Hurwitz, then K = B^T X^-1 stabilizes A - B K.
    n = A.shape[0]
    beta = np.linalg.norm(A, 2) + 1.0
    X = solve_continuous_lyapunov(A + beta * np.eye(n), 2.0 * B @ B.T)
    X = 0.5 * (X + X.T)
    return B.T @ np.linalg.pinv(X)


def _discrete_seed(A, B, R, max_iter: int = 10000) -> np.ndarray:
    # Riccati difference iteration from P = I until the induced gain is stabilizing.
    n = A.shape[0]
    P = np.eye(n)
    Qs = np.eye(n)
    for k in range(max_iter):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        if _is_stable(A - B @ K, True):
            return K
        P = Qs + A.T @ P @ A - A.T @ P @ B @ K
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            break
    raise RiccatiError("could not find a stabilizing seed gain; (A, B) may not be stabilizable")


def lqr_gain(A, B, Q, R, discrete: bool = False, max_iter: int = 200, tol: float = 1e-13) -> LqrGain:
    """Stabilizing Riccati solution and gain ``K`` (control law ``u = -K x``)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ValueError("R must be positive definite")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ValueError("Q must be positive semidefinite")

    K = _discrete_seed(A, B, R) if discrete else _continuous_seed(A, B)
    if not _is_stable(A - B @ K, discrete):
        raise RiccatiError("seed gain is not stabilizing; (A, B) may not be stabilizable")

    P_prev = None
    for it in range(max_iter):
        Acl = A - B @ K
        Qk = Q + K.T @ R @ K
        if discrete:
            P = solve_discrete_lyapunov(Acl.T, Qk)
        else:
            P = solve_continuous_lyapunov(Acl.T, -Qk)
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            raise RiccatiError("Lyapunov solve produced non-finite values")
        if discrete:
            K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        else:
            K = np.linalg.solve(R, B.T @ P)
        if P_prev is not None:
            change = np.linalg.norm(P - P_prev)
            if change <= tol * max(1.0, np.linalg.norm(P)):
                break
        P_prev = P
    else:
        raise RiccatiError(f"policy iteration stagnated after {max_iter} iterations")

    res = dare_residual(A, B, Q, R, P) if discrete else care_residual(A, B, Q, R, P)
    if np.linalg.norm(res) > 1e-8 * max(1.0, np.linalg.norm(P)):
        raise RiccatiError(f"Riccati residual too large: {np.linalg.norm(res):.3g}")
    if not _is_stable(A - B @ K, discrete, margin=0.0):
        raise RiccatiError("closed loop is not stable; (A, B) may not be stabilizable")
    return LqrGain(K, P, discrete)
