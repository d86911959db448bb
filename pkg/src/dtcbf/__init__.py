"""Control barrier functions for sampled-data systems.

Modules: ``core_model`` (systems, barriers, sets, ZOH rollouts), ``bounds``
(inter-sample drift budgets), ``dbc_filter`` (robust sampled-data filter),
``opt`` (QP, LP, Riccati, polynomial fits), ``tube_cbf`` (tube and reduced
safe set), ``nmpc_rti`` (multiple-shooting NMPC and the real-time
iteration), ``segway`` (plant model) and ``simcli`` (scenarios and CLI).
"""

from .core_model import Cbf, ControlAffineSystem, Hyperrectangle, Polytope, linear_alpha, quadratic_cbf
from .dbc_filter import DbcController, safety_filter
from .loop import simulate

__all__ = ["Cbf", "ControlAffineSystem", "Hyperrectangle", "Polytope", "linear_alpha", "quadratic_cbf",
           "DbcController", "safety_filter", "simulate"]
