import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import integrator, unit_interval_cbf
from instances import random_instance
from dtcbf.bounds import DisturbanceSet
from dtcbf.core_model import Polytope, eval_cbf_condition
from dtcbf.dbc_filter import (AffineCoefficients, CoefficientBounds, DbcController, Disturbance,
                              VertexCapExceeded, affine_safety_conditions, coefficient_bounds, eval_dbc,
                              robust_dbc_holds, safety_filter)
from dtcbf.opt.lp import solve_lp
from dtcbf.opt.qp import QpProblem, solve_qp

U1 = Polytope.from_box([-1.0], [1.0])


def dist(w_f=0.0, w_B=0.0, w_h=0.0, w_g=0.0):
    return Disturbance(np.array([w_f]), np.array([[w_B]]), w_h, np.array([w_g]))


def box(f=0.0, B=0.0, h=0.0, g=0.0):
    return DisturbanceSet.from_half_widths([f], [B], [h], [g])


def test_zero_disturbance_is_plain_condition(toy):
    sys, cbf = toy
    for x, u in [(0.3, 0.7), (-0.9, 2.0)]:
        assert eval_dbc(sys, cbf, [x], [u], dist()) == pytest.approx(eval_cbf_condition(sys, cbf, [x], [u]))


def test_dbc_hand_values(toy):
    sys, cbf = toy
    assert eval_dbc(sys, cbf, [0.0], [0.0], dist(w_h=-0.1)) == pytest.approx(0.9)
    assert eval_dbc(sys, cbf, [0.0], [0.0], dist(w_f=0.5, w_g=0.2)) == pytest.approx(1.1)


def test_coefficients_reassemble_condition():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sys, cbf, x, W = random_instance(rng, 2)
        w = Disturbance(rng.normal(size=sys.n), rng.normal(size=(sys.n, 2)), float(rng.normal()),
                        rng.normal(size=sys.n))
        u = rng.normal(size=2)
        co = AffineCoefficients(sys, cbf)
        assert eval_dbc(sys, cbf, x, u, w) == pytest.approx(-co.a(x, w) @ u - co.b(x, w), abs=1e-10)


def test_bounds_degenerate_for_zero_set(toy):
    sys, cbf = toy
    b = coefficient_bounds(sys, cbf, [0.4], DisturbanceSet.zero(1, 1))
    co = AffineCoefficients(sys, cbf)
    w0 = Disturbance.zero(1, 1)
    assert b.a_lo == pytest.approx(b.a_hi) and b.a_lo[0] == pytest.approx(co.a([0.4], w0)[0])
    assert b.b_lo == pytest.approx(b.b_hi) == pytest.approx(co.b([0.4], w0))


def test_bilinear_bounds_at_center(toy):
    sys, cbf = toy
    b = coefficient_bounds(sys, cbf, [0.0], box(B=0.1, g=0.1))
    assert b.a_lo[0] == pytest.approx(-0.11) and b.a_hi[0] == pytest.approx(0.11)


@given(st.floats(0.0, 0.5), st.floats(-0.5, 0.5))
def test_alpha_monotone_bounds(delta, x):
    sys, cbf = integrator(), unit_interval_cbf()
    b = coefficient_bounds(sys, cbf, [x], box(h=delta))
    h = 1 - x * x
    assert b.b_lo == pytest.approx(-(h + delta)) and b.b_hi == pytest.approx(-(h - delta))


def test_bounds_enclose_random_disturbances():
    rng = np.random.default_rng(1)
    for _ in range(30):
        sys, cbf, x, W = random_instance(rng, 2)
        b = coefficient_bounds(sys, cbf, x, W)
        co = AffineCoefficients(sys, cbf)
        for _ in range(20):
            w = Disturbance(rng.uniform(W.W_f.lo, W.W_f.hi), rng.uniform(W.W_B.lo, W.W_B.hi).reshape(sys.n, 2),
                            float(rng.uniform(W.W_h.lo, W.W_h.hi)[0]), rng.uniform(W.W_grad_h.lo, W.W_grad_h.hi))
            a = co.a(x, w)
            assert np.all(a >= b.a_lo - 1e-12) and np.all(a <= b.a_hi + 1e-12)
            assert b.b_lo - 1e-12 <= co.b(x, w) <= b.b_hi + 1e-12


def test_vertex_cap():
    rng = np.random.default_rng(2)
    sys, cbf, x, W = random_instance(rng, 1)
    with pytest.raises(VertexCapExceeded):
        coefficient_bounds(sys, cbf, x, W, vertex_cap=2)


def test_oracle_zero_set(toy):
    sys, cbf = toy
    W0 = DisturbanceSet.zero(1, 1)
    assert robust_dbc_holds(sys, cbf, W0, [0.5], [-1.0])  # condition 1.75 > 0
    assert not robust_dbc_holds(sys, cbf, W0, [0.9], [5.0])  # condition -8.81 < 0


@given(st.floats(-0.8, 0.8))
def test_oracle_flips_with_upper_b(x):
    # no input coupling: B = 0, f = 0, so only alpha(h + w_h) matters
    from dtcbf.core_model import ControlAffineSystem

    sys = ControlAffineSystem(1, 1, lambda y: np.zeros(1), lambda y: np.zeros((1, 1)))
    cbf = unit_interval_cbf()
    h = 1 - x * x
    for delta in (0.5 * h, 0.999 * h, 1.001 * h, 2 * h):
        W = box(h=delta)
        holds = robust_dbc_holds(sys, cbf, W, [x], [0.0])
        assert holds == (coefficient_bounds(sys, cbf, [x], W).b_hi <= 0)
        assert holds == (delta <= h)


def test_affine_conditions_degenerate_bounds():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a0 = rng.normal(size=2)
        b0 = float(rng.normal())
        cond = affine_safety_conditions(CoefficientBounds(a0, a0.copy(), b0, b0))
        u = rng.normal(size=2)
        feasible = cond.satisfied(u, cond.minimal_multiplier(u), tol=1e-12)
        assert feasible == (a0 @ u + b0 <= 1e-12)


def test_affine_conditions_explicit_multiplier():
    cond = affine_safety_conditions(CoefficientBounds(np.array([-1.0]), np.array([1.0]), -1.0, 0.0))
    lam = np.array([0.0, 0.0, 1.0, 0.0])  # u = 0, pair b with its upper bound 0
    assert cond.satisfied([0.0], lam)
    assert cond.d @ lam == 0.0


def test_affine_conditions_positive_lower_b():
    cond = affine_safety_conditions(CoefficientBounds(np.array([-1.0]), np.array([1.0]), 0.2, 0.5))
    # fix u = 0 and search lam: minimal d^T lam over the equality set
    res = solve_lp(cond.d, -np.eye(4), np.zeros(4), A_eq=cond.D.T, b_eq=np.array([0.0, 1.0]))
    assert res.value >= 0.2 - 1e-12


def test_relaxation_soundness_sample():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(100):
        m = int(rng.integers(1, 4))
        sys, cbf, x, W = random_instance(rng, m)
        cond = affine_safety_conditions(coefficient_bounds(sys, cbf, x, W))
        u = rng.normal(size=m) * 2
        lam = cond.minimal_multiplier(u) + np.repeat(rng.uniform(0, 0.1, m + 1), 2)
        if cond.satisfied(u, lam):
            checked += 1
            assert robust_dbc_holds(sys, cbf, W, x, u, tol=1e-9)
    assert checked > 10


def test_filter_returns_feasible_nominal(toy):
    sys, cbf = toy
    res = safety_filter(sys, cbf, DisturbanceSet.zero(1, 1), [0.2], [-0.5], U1)
    assert res.feasible and abs(res.u[0] + 0.5) <= 1e-6


def test_filter_projection_hand_value(toy):
    sys, cbf = toy
    res = safety_filter(sys, cbf, DisturbanceSet.zero(1, 1), [0.9], [1.0], U1)
    assert res.u[0] == pytest.approx(0.19 / 1.8, abs=1e-4)


def test_filter_infeasible_when_disturbance_too_wide(toy):
    sys, cbf = toy
    W = box(h=0.5, g=0.5, f=0.5, B=0.5)
    res = safety_filter(sys, cbf, W, [0.9], [0.0], U1)
    assert not res.feasible and res.h == pytest.approx(0.19)
    assert not any(robust_dbc_holds(sys, cbf, W, [0.9], [u]) for u in np.linspace(-1, 1, 201))


def test_filter_matches_single_constraint_qp_without_disturbance():
    rng = np.random.default_rng(5)
    for _ in range(30):
        sys, cbf, x, _ = random_instance(rng, 2)
        W0 = DisturbanceSet.zero(sys.n, 2)
        U = Polytope.from_box([-3, -3], [3, 3])
        u_nom = rng.normal(size=2) * 3
        res = safety_filter(sys, cbf, W0, x, u_nom, U)
        co = AffineCoefficients(sys, cbf)
        w0 = Disturbance.zero(sys.n, 2)
        a, b = co.a(x, w0), co.b(x, w0)
        direct = solve_qp(QpProblem(2 * np.eye(2), -2 * u_nom, A_in=np.vstack([a, U.A]),
                                    b_in=np.concatenate([[-b], U.b])))
        assert res.feasible == (direct.status == "optimal")
        if res.feasible:
            assert np.allclose(res.u, direct.x, atol=1e-8)


def test_controller_holds_previous_input_on_infeasibility(toy):
    sys, cbf = toy
    ctrl = DbcController(sys, cbf, box(h=0.5, g=0.5, f=0.5, B=0.5), U1, lambda t, x: np.array([0.3]))
    ctrl.reset([0.0])
    out = ctrl.step(0.0, np.array([0.95]))
    assert out.infeasible and out.u_applied[0] == 0.0 and ctrl.infeasible == 1


def test_filtered_integrator_stays_safe():
    """Closed loop on a 1-D toy: robust filter at every sample keeps h >= 0 between samples."""
    from dtcbf.bounds import system_budgets
    from dtcbf.core_model import Hyperrectangle, linear_alpha, quadratic_cbf
    from dtcbf.loop import simulate
    from dtcbf.core_model import ControlAffineSystem

    sys = ControlAffineSystem(1, 1, lambda x: 0.5 * x, lambda x: np.eye(1))
    cbf = quadratic_cbf(np.eye(1), 1.0, linear_alpha(1.0))
    U = Polytope.from_box([-2.0], [2.0])
    X = Hyperrectangle([-1.1], [1.1])
    W = system_budgets(sys, cbf, X, U).disturbance_set(0.05)
    ctrl = DbcController(sys, cbf, W, U, lambda t, x: np.array([2.0]))  # pushes outward
    r = simulate(ctrl, sys, np.array([0.0]), 5.0, 0.05, 20, cbf)
    assert r.infeasible == 0 and r.min_h >= -1e-9
    assert r.states[:, 0].max() > 0.5  # the filter lets it move, it is not frozen


def _joint_vertex_bounds(sys, cbf, x, W):
    """Coefficient extremes by listing every vertex of W_B x W_grad_h and W_grad_h x W_f."""
    import itertools

    n, m = sys.n, sys.m
    f, Bx, g, h = sys.drift(x), sys.input_matrix(x), cbf.gradient(x), cbf.value(x)
    gv = list(itertools.product(*zip(W.W_grad_h.lo, W.W_grad_h.hi)))
    Bv = list(itertools.product(*zip(W.W_B.lo, W.W_B.hi)))
    fv = list(itertools.product(*zip(W.W_f.lo, W.W_f.hi)))
    a = np.array([[-(Bx + np.reshape(wb, (n, m)))[:, j] @ (g + np.array(wg)) for wb in Bv for wg in gv]
                  for j in range(m)])
    b = np.array([-(g + np.array(wg)) @ (f + np.array(wf)) for wg in gv for wf in fv])
    return (a.min(axis=1), a.max(axis=1), b.min() - cbf.alpha(h + W.W_h.hi[0]),
            b.max() - cbf.alpha(h + W.W_h.lo[0]))


@pytest.mark.parametrize("seed", range(20))
def test_coefficient_bounds_match_joint_vertices(seed):
    rng = np.random.default_rng(100 + seed)
    sys, cbf, x, W = random_instance(rng, int(rng.integers(1, 3)))
    cb = coefficient_bounds(sys, cbf, x, W)
    a_lo, a_hi, b_lo, b_hi = _joint_vertex_bounds(sys, cbf, x, W)
    assert np.allclose(cb.a_lo, a_lo, atol=1e-12) and np.allclose(cb.a_hi, a_hi, atol=1e-12)
    assert cb.b_lo == pytest.approx(b_lo, abs=1e-12) and cb.b_hi == pytest.approx(b_hi, abs=1e-12)


@pytest.mark.parametrize("seed", range(40))
def test_single_input_closed_form_matches_qp(seed):
    rng = np.random.default_rng(500 + seed)
    sys, cbf, x, W = random_instance(rng, 1)
    U = Polytope.from_box([-2.0], [2.0])
    u_nom = rng.uniform(-3.0, 3.0, size=1)
    fast = safety_filter(sys, cbf, W, x, u_nom, U)
    slow = safety_filter(sys, cbf, W, x, u_nom, U, closed_form=False)
    assert fast.feasible == slow.feasible
    if fast.feasible:
        assert np.allclose(fast.u, slow.u, atol=1e-7)
        assert affine_safety_conditions(fast.bounds).satisfied(fast.u, fast.lam)
