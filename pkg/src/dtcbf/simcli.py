"""Scenario files, closed-loop runs, rate sweeps and the command line.

A scenario is an INI file with the sections ``[plant]``, ``[controller]``,
``[safety]``, ``[reference]`` and ``[run]``; see ``scenarios/README.md`` for
the full schema. Unknown sections or keys are configuration errors.

Exit codes: 0 when every verdict is safe, 2 when any run is unsafe or
infeasible (or an audit fails), 3 on configuration errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import segway as sg
from .bounds import system_budgets
from .dbc_filter import DbcController
from .loop import ClosedLoopResult, LqrController, simulate
from .nmpc_rti import (NlpProblem, RtiController, barrier_constraint, discretize_rk4, prestabilizing_gain,
                       terminal_weight, tube_rti_controller)
from .opt.riccati import lqr_gain
from .tube_cbf import AuditFailure, TighteningError

CONTROLLER_KINDS = ("lqr", "lqr+dbc", "full_nmpc", "rti", "rti+cbf", "rti+tube_cbf")
TRACE_COLUMNS = ("t", "s", "s_dot", "theta", "theta_dot", "u_applied", "u_nominal", "h", "h_prime",
                 "slack_norm", "qp_iters", "solve_time_us")
EXIT_SAFE, EXIT_UNSAFE, EXIT_CONFIG = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario

@dataclass
class PlantConfig:
    preset: str = "fast"
    overrides: dict = field(default_factory=dict)

    def params(self) -> sg.SegwayParams:
        return sg.presets()[self.preset].with_overrides(**self.overrides)


@dataclass
class ControllerConfig:
    kind: str = "rti"
    rate: float = 33.0  # Hz
    horizon: int = 15
    shooting: float = 0.07  # s, prediction interval
    q: tuple = (10.0, 1.0, 1.0, 0.1)
    r1: float = 0.1  # weight on input increments
    r2: float = 0.01  # weight on the input
    rho1: float = 1e5
    rho2: float = 1e6
    max_iters: int = 50
    lqr_q: tuple = (100.0, 1.0, 10.0, 1.0)
    lqr_r: float = 1.0


@dataclass
class SafetyConfig:
    theta_max: float = 0.3
    gamma: float = sg.DEFAULT_GAMMA
    tightening: float = sg.TIGHTENING
    grid_per_dim: int = 7
    inflation: float = 1.1
    box_margin: float = 1.1
    bound_mode: str = "per_dimension"
    audit_samples: int = 400


@dataclass
class RunConfig:
    duration: float = 15.0
    substeps: int = 4
    x0: tuple = (0.0, 0.0, 0.0, 0.0)
    seed: int = 0
    timing: str = "off"  # "wall" records measured solve times in the trace
    delay: bool = False
    stop_early: bool = False
    expect: str = ""  # optional reference verdict, compared in the report


@dataclass
class Scenario:
    name: str = "scenario"
    plant: PlantConfig = field(default_factory=PlantConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    steps: tuple = ()  # ((time, position), ...)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> None:
        c, r, s = self.controller, self.run, self.safety
        if self.plant.preset not in sg.presets():
            raise ConfigError(f"unknown preset {self.plant.preset!r}")
        try:
            self.plant.params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad plant override: {exc}") from exc
        if c.kind not in CONTROLLER_KINDS:
            raise ConfigError(f"unknown controller kind {c.kind!r}; choose from {', '.join(CONTROLLER_KINDS)}")
        if not c.rate > 0:
            raise ConfigError("rate must be positive")
        if not r.duration > 0:
            raise ConfigError("duration must be positive")
        if r.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if c.horizon < 1 or not c.shooting > 0:
            raise ConfigError("horizon and shooting interval must be positive")
        if len(c.q) != 4 or len(c.lqr_q) != 4 or len(r.x0) != 4:
            raise ConfigError("q, lqr_q and x0 need four entries")
        if min(c.q) < 0 or min(c.lqr_q) < 0 or c.r1 < 0 or c.r2 < 0 or c.r1 + c.r2 <= 0 or not c.lqr_r > 0:
            raise ConfigError("weights must be nonnegative with a positive input weight")
        if not 0 < s.theta_max < np.pi / 2:
            raise ConfigError("theta_max must lie in (0, pi/2)")
        if not s.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not 0 <= s.tightening < 1:
            raise ConfigError("tightening must lie in [0, 1)")
        if s.bound_mode not in ("per_dimension", "output", "scalar"):
            raise ConfigError(f"unknown bound_mode {s.bound_mode!r}")
        if r.timing not in ("off", "wall"):
            raise ConfigError("timing must be 'off' or 'wall'")
        if r.expect not in ("", "safe", "unsafe", "infeasible"):
            raise ConfigError("expect must be safe, unsafe or infeasible")
        times = [t for t, _ in self.steps]
        if any(t < 0 for t in times) or times != sorted(times):
            raise ConfigError("reference steps must have nondecreasing nonnegative times")

    def reference(self, t: float) -> np.ndarray:
        pos = 0.0
        for ts, p in self.steps:
            if t >= ts - 1e-12:
                pos = p
        return np.array([pos, 0.0, 0.0, 0.0])

    def with_rate(self, rate: float) -> "Scenario":
        sc = _copy(self)
        sc.controller.rate = float(rate)
        return sc


def _copy(sc: Scenario) -> Scenario:
    return Scenario(sc.name, PlantConfig(sc.plant.preset, dict(sc.plant.overrides)),
                    ControllerConfig(**asdict(sc.controller)), SafetyConfig(**asdict(sc.safety)),
                    tuple(sc.steps), RunConfig(**asdict(sc.run)))


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fill(obj, section: str, items) -> None:
    types = {f.name: f.type for f in fields(obj)}
    for key, raw in items:
        if key not in types or key == "overrides":
            raise ConfigError(f"unknown key [{section}] {key}")
        current = getattr(obj, key)
        try:
            if isinstance(current, bool):
                val = _bool(raw)
            elif isinstance(current, int):
                val = int(raw)
            elif isinstance(current, float):
                val = float(raw)
            elif isinstance(current, tuple):
                val = _floats(raw)
            else:
                val = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
        setattr(obj, key, val)


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    allowed = {"plant", "controller", "safety", "reference", "run"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    sc = Scenario(name=name)
    if cp.has_section("plant"):
        param_names = {f.name for f in fields(sg.SegwayParams)}
        for key, raw in cp.items("plant"):
            if key == "preset":
                sc.plant.preset = raw.strip()
            elif key in param_names:
                try:
                    sc.plant.overrides[key] = float(raw)
                except ValueError as exc:
                    raise ConfigError(f"[plant] {key}: {exc}") from exc
            else:
                raise ConfigError(f"unknown key [plant] {key}")
    for section, obj in (("controller", sc.controller), ("safety", sc.safety), ("run", sc.run)):
        if cp.has_section(section):
            _fill(obj, section, cp.items(section))
    if cp.has_section("reference"):
        for key, raw in cp.items("reference"):
            if key != "steps":
                raise ConfigError(f"unknown key [reference] {key}")
            steps = []
            for item in raw.replace(",", " ").split():
                try:
                    t, p = item.split(":")
                    steps.append((float(t), float(p)))
                except ValueError as exc:
                    raise ConfigError(f"[reference] steps: expected time:position, got {item!r}") from exc
            sc.steps = tuple(steps)
    sc.validate()
    return sc


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_scenario(text, path.stem)


# ---------------------------------------------------------------------------
# stacks

@dataclass
class Stack:
    controller: object
    plant: object
    cbf: object
    params: sg.SegwayParams
    tube: object = None
    reduced: object = None


def _nlp(sc: Scenario, sys_, U, cbf) -> NlpProblem:
    c = sc.controller
    Q = np.diag(c.q)
    R1, R2 = np.eye(1) * c.r1, np.eye(1) * c.r2
    g, gj = barrier_constraint(cbf)
    return NlpProblem(discretize_rk4(sys_, c.shooting), c.horizon, Q, R1, R2,
                      terminal_weight(sys_, c.shooting, Q, R1 + R2), U, g, gj, c.rho1, c.rho2,
                      K_pre=prestabilizing_gain(sys_, c.shooting, Q, R1 + R2))


def tube_for(sc: Scenario):
    """``(TubeSpec, ReducedSafeSet)`` of the scenario; raises on failing audits."""
    s = sc.safety
    return sg.tube_setup(sc.plant.params(), s.theta_max, s.tightening, s.gamma, samples=s.audit_samples,
                         seed=sc.run.seed)


def build_stack(sc: Scenario) -> Stack:
    p = sc.plant.params()
    plant = sg.make_system(p)
    cbf = sg.default_cbf(p, sc.safety.theta_max, gamma=sc.safety.gamma)
    U = sg.input_set(p)
    c = sc.controller
    period = 1.0 / c.rate
    if c.kind in ("lqr", "lqr+dbc"):
        A, B = sg.linearize_origin(p)
        K = lqr_gain(A, B, np.diag(c.lqr_q), np.eye(1) * c.lqr_r).K
        lqr = LqrController(K, p.volt_max, sc.reference)
        if c.kind == "lqr":
            return Stack(lqr, plant, cbf, p)
        s = sc.safety
        X = sg.cbf_box(cbf, margin=s.box_margin)
        budgets = system_budgets(plant, cbf, X, U, s.grid_per_dim, s.inflation, s.bound_mode)
        return Stack(DbcController(plant, cbf, budgets.disturbance_set(period), U, lqr.nominal), plant, cbf, p)
    if c.kind in ("full_nmpc", "rti"):
        ctrl = RtiController(_nlp(sc, plant, U, cbf), period, "full" if c.kind == "full_nmpc" else "rti",
                             sc.reference, max_iters=c.max_iters)
        return Stack(ctrl, plant, cbf, p)
    tube, reduced = tube_for(sc)
    if c.kind == "rti+cbf":
        # same tightened inputs as the tube stack, but the plain barrier and no auxiliary feedback
        ctrl = RtiController(_nlp(sc, plant, tube.U_tight, cbf), period, "rti+cbf", sc.reference, cbf=cbf,
                             U_tight=tube.U_tight)
        return Stack(ctrl, plant, cbf, p, tube, reduced)
    ctrl = tube_rti_controller(_nlp(sc, plant, tube.U_tight, reduced.cbf_prime), tube, reduced, period,
                               sc.run.substeps, sc.reference)
    return Stack(ctrl, plant, cbf, p, tube, reduced)


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    scenario: str
    kind: str
    rate: float
    result: ClosedLoopResult
    theta_max: float
    wall_time_s: float
    notes: list = field(default_factory=list)

    @property
    def min_h(self) -> float:
        return self.result.min_h

    @property
    def violations(self) -> int:
        return self.result.violations

    @property
    def infeasible(self) -> int:
        return self.result.infeasible

    @property
    def verdict(self) -> str:
        return self.result.verdict

    @property
    def max_abs_theta(self) -> float:
        return float(np.max(np.abs(self.result.states[:, 2])))

    @property
    def pitch_violation(self) -> bool:
        return self.max_abs_theta > self.theta_max

    def solve_time_stats(self) -> dict:
        st = self.result.solve_time_us[self.result.sample_rows] if self.result.sample_rows.size else np.zeros(1)
        return {"mean_us": float(np.mean(st)), "max_us": float(np.max(st))}

    def summary(self) -> dict:
        return {"scenario": self.scenario, "kind": self.kind, "rate_hz": self.rate, "verdict": self.verdict,
                "min_h": self.min_h, "violations": self.violations, "hard_row_infeasible": self.infeasible,
                "tube_breaches": self.result.breaches, "failure": self.result.failure,
                "saturated_samples": self.result.saturated,
                "max_abs_theta": self.max_abs_theta, "pitch_violation": self.pitch_violation,
                "samples": int(self.result.sample_rows.size), "solve_time": self.solve_time_stats(),
                "wall_time_s": self.wall_time_s, "notes": list(self.notes)}

    def line(self) -> str:
        return (f"{self.scenario} [{self.kind} @ {self.rate:g} Hz] {self.verdict}: min_h={self.min_h:.4g} "
                f"violations={self.violations} infeasible={self.infeasible} max|theta|={self.max_abs_theta:.3f}")


def write_trace(result: ClosedLoopResult, path, timing: str = "off") -> None:
    """CSV trace, one row per substep; floats round-trip exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i in range(result.t.size):
            st = result.solve_time_us[i] if timing == "wall" else 0.0
            w.writerow([repr(float(result.t[i]))] + [repr(float(v)) for v in result.states[i]]
                       + [repr(float(result.u_applied[i, 0])), repr(float(result.u_nominal[i, 0])),
                          repr(float(result.h[i])), repr(float(result.h_prime[i])),
                          repr(float(result.slack_norm[i])), str(int(result.qp_iters[i])), repr(float(st))])


def read_trace(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body]).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def run_scenario(sc: Scenario, out_dir=None, tag: str = "") -> RunReport:
    """Build the stack, simulate, and optionally write ``<name>.csv`` and ``<name>.json`` to ``out_dir``."""
    sc.validate()
    stack = build_stack(sc)
    r = sc.run
    period = 1.0 / sc.controller.rate
    t0 = time.perf_counter()
    result = simulate(stack.controller, stack.plant, np.array(r.x0, dtype=float), r.duration, period, r.substeps,
                      stack.cbf, u_limit=np.array([stack.params.volt_max]), delay=r.delay,
                      stop_on_violation=r.stop_early)
    report = RunReport(sc.name, sc.controller.kind, sc.controller.rate, result, sc.safety.theta_max,
                       time.perf_counter() - t0)
    if r.stop_early and result.t[-1] < r.duration - 1e-9:
        report.notes.append(f"stopped early at t={result.t[-1]:.4f} s after the first unsafe or infeasible step")
    if r.expect and r.expect != report.verdict:
        report.notes.append(f"reference behaviour for this task is '{r.expect}', observed '{report.verdict}' "
                            f"(min_h={report.min_h:.4g}, max|theta|={report.max_abs_theta:.4f} rad); the plant "
                            f"parameters are chosen for this package, not measured")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = sc.name + tag
        write_trace(result, out / f"{stem}.csv", r.timing)
        (out / f"{stem}.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    return report


@dataclass
class SweepSummary:
    reports: list
    min_safe_rate: Optional[float]
    non_monotone: list  # rates whose verdict breaks the unsafe-below / safe-above pattern

    def lines(self) -> list:
        out = [rep.line() for rep in self.reports]
        out.append("minimum safe rate: " + ("none" if self.min_safe_rate is None else f"{self.min_safe_rate:g} Hz"))
        if self.non_monotone:
            out.append("non-monotone verdicts at: " + ", ".join(f"{r:g} Hz" for r in self.non_monotone))
        return out


def summarize_sweep(reports: list) -> SweepSummary:
    reports = sorted(reports, key=lambda rep: rep.rate)
    safe = [rep.verdict == "safe" for rep in reports]
    min_safe = next((rep.rate for rep, ok in zip(reports, safe) if ok), None)
    bad = []
    if min_safe is not None:
        # rates above the first safe one that are not safe
        bad = [rep.rate for rep, ok in zip(reports, safe) if rep.rate > min_safe and not ok]
    return SweepSummary(reports, min_safe, bad)


def sweep_rates(sc: Scenario, rates, out_dir=None, workers: int = 1) -> SweepSummary:
    """One run per rate; with ``workers > 1`` the runs share a thread pool (each owns its stack)."""
    jobs = [(sc.with_rate(rate), f"_{rate:g}hz") for rate in rates]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda job: run_scenario(job[0], out_dir, tag=job[1]), jobs))
    else:
        reports = [run_scenario(job_sc, out_dir, tag=tag) for job_sc, tag in jobs]
    return summarize_sweep(reports)


def audit(sc: Scenario) -> dict:
    tube, reduced = tube_for(sc)
    return {"K_aux": tube.K_aux.ravel().tolist(), "omega_half_width": tube.Omega.half_width.tolist(),
            "G": tube.G.bounding_box().hi.tolist(), "U_tight": tube.U_tight.bounding_box().hi.tolist(),
            "containment_margin": reduced.containment_margin, "viability_margin": reduced.viability_margin,
            "samples": reduced.samples}


# ---------------------------------------------------------------------------
# command line

def _parse_rates(text: str) -> list:
    if not text.strip():
        return []
    try:
        rates = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad rate list {text!r}") from exc
    if any(not r > 0 for r in rates):
        raise ConfigError("rates must be positive")
    return rates


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dtcbf", description="Sampled-data barrier controllers on the segway model.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="simulate one scenario")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", default=None, help="directory for the trace and report")
    p_run.add_argument("--seed", type=int, default=None)
    p_sw = sub.add_parser("sweep", help="simulate one scenario at several rates")
    p_sw.add_argument("scenario")
    p_sw.add_argument("--rates", default="10,20,33,50,100,200")
    p_sw.add_argument("--out", default=None)
    p_sw.add_argument("--seed", type=int, default=None)
    p_sw.add_argument("--workers", type=int, default=1, help="parallel runs (threads)")
    p_au = sub.add_parser("audit", help="build the tube and audit the reduced safe set")
    p_au.add_argument("scenario")
    args = ap.parse_args(argv)
    try:
        sc = load_scenario(args.scenario)
        if getattr(args, "seed", None) is not None:
            sc.run.seed = args.seed
        if args.cmd == "audit":
            try:
                info = audit(sc)
            except (AuditFailure, TighteningError) as exc:
                print(f"audit failed: {exc}")
                return EXIT_UNSAFE
            print(json.dumps(info, indent=2))
            return EXIT_SAFE
        tail = []
        if args.cmd == "run":
            reports = [run_scenario(sc, args.out)]
        else:
            summary = sweep_rates(sc, _parse_rates(args.rates), args.out, args.workers)
            reports = summary.reports
            tail = summary.lines()[len(reports):]
    except (ConfigError, AuditFailure, TighteningError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for rep in reports:
        print(rep.line())
        for note in rep.notes:
            print(f"  note: {note}")
    for line in tail:
        print(line)
    return EXIT_SAFE if all(rep.verdict == "safe" for rep in reports) else EXIT_UNSAFE


if __name__ == "__main__":
    sys.exit(main())
