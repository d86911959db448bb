from .lp import LpResult, solve_lp
from .polyfit import Polynomial, RankDeficientFit, monomial_exponents, polyfit
from .qp import QpNonConvergence, QpProblem, QpResult, kkt_residual, solve_qp
from .riccati import LqrGain, RiccatiError, care_residual, dare_residual, lqr_gain

__all__ = [
    "LpResult", "solve_lp", "Polynomial", "RankDeficientFit", "monomial_exponents", "polyfit",
    "QpNonConvergence", "QpProblem", "QpResult", "kkt_residual", "solve_qp",
    "LqrGain", "RiccatiError", "care_residual", "dare_residual", "lqr_gain",
]
