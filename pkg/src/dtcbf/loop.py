"""Sampled-data closed loop shared by every controller stack.

A controller is any object with ``reset(x0)``, ``step(t, x) -> ControlOutput``
and ``after_interval(x_next)``. The plant integrates with fixed-step RK4 and
zero-order hold between samples; one trace row is kept per substep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core_model import Cbf, ControlAffineSystem, ControllerFailure, EvaluationError, rk4_step


@dataclass
class ControlOutput:
    u_applied: np.ndarray
    u_nominal: np.ndarray
    h_prime: float = float("nan")
    slack_norm: float = 0.0
    qp_iters: int = 0
    solve_time_us: float = 0.0
    infeasible: bool = False
    breach: bool = False


@dataclass
class ClosedLoopResult:
    t: np.ndarray
    states: np.ndarray
    u_applied: np.ndarray  # per row, the input held over the following substep
    u_nominal: np.ndarray
    h: np.ndarray
    h_prime: np.ndarray
    slack_norm: np.ndarray
    qp_iters: np.ndarray
    solve_time_us: np.ndarray
    sample_rows: np.ndarray  # row index of every sampling instant
    infeasible: int
    breaches: int
    failure: Optional[str] = None
    saturated: int = 0  # samples whose commanded input the plant had to clip

    @property
    def min_h(self) -> float:
        return float(np.min(self.h))

    @property
    def violations(self) -> int:
        return int(np.sum(self.h < -1e-9))

    @property
    def verdict(self) -> str:
        if self.min_h < -1e-9 or self.breaches or self.failure:
            return "unsafe"
        if self.infeasible:
            return "infeasible"
        return "safe"


def sample_count(duration: float, period: float) -> int:
    n = int(round(duration / period))
    if n < 1 or not np.isclose(n * period, duration, rtol=1e-9, atol=1e-12):
        n = int(np.ceil(duration / period - 1e-9))
    return max(n, 1)


def simulate(controller, plant: ControlAffineSystem, x0, duration: float, period: float, substeps: int,
             cbf: Cbf, u_limit: Optional[np.ndarray] = None, delay: bool = False,
             stop_on_violation: bool = False) -> ClosedLoopResult:
    """Run ``controller`` on ``plant`` from ``x0`` for ``duration`` seconds.

    Inputs apply at the start of each interval (or one period late with
    ``delay``); the plant saturates them to ``+-u_limit``. Controller
    exceptions end the run early and are recorded as a failure. With
    ``stop_on_violation`` the run also ends after the first interval that
    leaves the safe set, hits an infeasible filter or breaks the tube.
    """
    if period <= 0 or duration <= 0:
        raise ValueError("period and duration must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = np.asarray(x0, dtype=float).copy()
    controller.reset(x)
    steps = sample_count(duration, period)
    dt = period / substeps
    m = plant.m
    rows_t, rows_x, rows_u, rows_un, rows_h, rows_hp = [], [], [], [], [], []
    rows_sl, rows_it, rows_st, samples = [], [], [], []
    infeasible = breaches = saturated = 0
    failure = None
    pending = np.zeros(m)
    for k in range(steps):
        t = k * period
        try:
            out = controller.step(t, x)
        except Exception as exc:  # noqa: BLE001 - recorded, run ends
            failure = str(ControllerFailure(str(exc), k, t))
            break
        infeasible += int(out.infeasible)
        breaches += int(out.breach)
        u = np.atleast_1d(np.asarray(out.u_applied, dtype=float))
        if delay:
            u, pending = pending, u
        if u_limit is not None:
            clipped = np.clip(u, -u_limit, u_limit)
            saturated += int(np.any(clipped != u))
            u = clipped
        samples.append(len(rows_t))
        for j in range(substeps):
            rows_t.append(t + j * dt)
            rows_x.append(x.copy())
            rows_u.append(u.copy())
            rows_un.append(np.atleast_1d(out.u_nominal).copy())
            rows_h.append(cbf.value(x))
            rows_hp.append(out.h_prime)
            rows_sl.append(out.slack_norm)
            rows_it.append(out.qp_iters)
            rows_st.append(out.solve_time_us)
            try:
                x = rk4_step(plant, x, u, dt)
            except EvaluationError as exc:
                failure = f"plant evaluation failed at t={t + (j + 1) * dt:.4f}: {exc}"
                break
            if not np.all(np.isfinite(x)) or (plant.validity is not None and not plant.validity.contains(x)):
                failure = f"plant state left its validity box at t={t + (j + 1) * dt:.4f}"
                break
        if failure:
            break
        if not controller.after_interval(x):
            breaches += 1
        if stop_on_violation and (min(rows_h) < -1e-9 or infeasible or breaches):
            break
    # closing row at the final state
    if failure is None:
        rows_t.append(len(samples) * period)
        rows_x.append(x.copy())
        rows_u.append(rows_u[-1].copy() if rows_u else np.zeros(m))
        rows_un.append(rows_un[-1].copy() if rows_un else np.zeros(m))
        rows_h.append(cbf.value(x))
        rows_hp.append(rows_hp[-1] if rows_hp else float("nan"))
        rows_sl.append(rows_sl[-1] if rows_sl else 0.0)
        rows_it.append(0)
        rows_st.append(0.0)
    if not rows_t:
        rows_t, rows_x, rows_h = [0.0], [x.copy()], [cbf.value(x)]
        rows_u, rows_un, rows_hp, rows_sl, rows_it, rows_st = [np.zeros(m)], [np.zeros(m)], [np.nan], [0.0], [0], [0.0]
    return ClosedLoopResult(np.array(rows_t), np.array(rows_x), np.array(rows_u).reshape(-1, m),
                            np.array(rows_un).reshape(-1, m), np.array(rows_h), np.array(rows_hp),
                            np.array(rows_sl), np.array(rows_it, dtype=int), np.array(rows_st),
                            np.array(samples, dtype=int), infeasible, breaches, failure, saturated)


class LqrController:
    """``u = -K (x - x_ref(t))`` saturated to ``+-u_max``."""

    def __init__(self, K, u_max, reference: Optional[Callable[[float], np.ndarray]] = None):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.u_max = np.atleast_1d(np.asarray(u_max, dtype=float))
        self.reference = reference

    def nominal(self, t: float, x) -> np.ndarray:
        ref = np.zeros(self.K.shape[1]) if self.reference is None else self.reference(t)
        return np.clip(-self.K @ (np.asarray(x, dtype=float) - ref), -self.u_max, self.u_max)

    def reset(self, x0) -> None:
        pass

    def step(self, t: float, x) -> ControlOutput:
        u = self.nominal(t, x)
        return ControlOutput(u, u.copy())

    def after_interval(self, x_next) -> bool:
        return True
