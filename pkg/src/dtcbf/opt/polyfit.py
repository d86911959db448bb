"""Least-squares regression onto the full multivariate monomial basis."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


def monomial_exponents(n: int, degree: int) -> np.ndarray:
    """Exponent tuples ordered by total degree, then lexicographically descending."""
    exps = []
    for total in range(degree + 1):
        level = [e for e in itertools.product(range(total + 1), repeat=n) if sum(e) == total]
        exps.extend(sorted(level, reverse=True))
    return np.array(exps, dtype=int).reshape(-1, n)


@dataclass(frozen=True)
class Polynomial:
    exponents: np.ndarray
    coefficients: np.ndarray
    max_residual: float = 0.0

    def __call__(self, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(self.coefficients @ np.prod(x ** self.exponents, axis=1))

    def gradient(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        grad = np.zeros(x.size)
        for j in range(x.size):
            e = self.exponents.copy()
            factor = e[:, j].astype(float)
            e[:, j] = np.maximum(e[:, j] - 1, 0)
            grad[j] = self.coefficients @ (factor * np.prod(x ** e, axis=1))
        return grad


class RankDeficientFit(ValueError):
    pass


def polyfit(states, values, degree: int = 2, max_degree: int = 4) -> Polynomial:
    """Fit ``values ~ sum_k c_k x^e_k`` over all monomials up to ``degree``."""
    X = np.asarray(states, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(values, dtype=float).ravel()
    if degree > max_degree:
        raise ValueError(f"degree {degree} exceeds the configured maximum {max_degree}")
    exps = monomial_exponents(X.shape[1], degree)
    if X.shape[0] < exps.shape[0]:
        raise ValueError(f"need at least {exps.shape[0]} samples for degree {degree}, got {X.shape[0]}")
    V = np.prod(X[:, None, :] ** exps[None, :, :], axis=2)
    coef, _, rank, _ = np.linalg.lstsq(V, y, rcond=None)
    if rank < exps.shape[0]:
        raise RankDeficientFit(f"design matrix has rank {rank} < {exps.shape[0]} monomials; try a lower degree")
    resid = float(np.max(np.abs(V @ coef - y))) if y.size else 0.0
    return Polynomial(exps, coef, resid)
