import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import decay, integrator
from dtcbf.core_model import ControlAffineSystem, Hyperrectangle, Polytope, linear_alpha, quadratic_cbf, rk4_step
from dtcbf.loop import LqrController, simulate
from dtcbf.opt import lqr_gain
from dtcbf.tube_cbf import (AuditFailure, TighteningError, TubeBreach, TubeController, TubeEstimateError,
                            TubeSpec, build_reduced_cbf, build_tube_spec, estimate_tube, omega_for_fraction,
                            reanchor, tighten, tube_cbf_step)

U54 = Polytope.from_box([-5.4], [5.4])


def interval(c):
    return Hyperrectangle([-c], [c])


def bounds_of(P):
    bb = P.bounding_box()
    return bb.lo, bb.hi


def test_zero_tube_keeps_inputs():
    spec = build_tube_spec(integrator(), U54, omega=interval(0.0), K_aux=[[2.0]])
    assert np.allclose(bounds_of(spec.G), ([0.0], [0.0]))
    assert np.allclose(bounds_of(spec.U_tight), ([-5.4], [5.4]))


def test_third_of_the_voltage_range():
    spec = build_tube_spec(integrator(), U54, omega=interval(0.9), K_aux=[[2.0]])
    assert np.allclose(bounds_of(spec.G), ([-1.8], [1.8]))
    assert np.allclose(bounds_of(spec.U_tight), ([-3.6], [3.6]))
    omega = omega_for_fraction([[2.0]], U54, 1 / 3, [1.0])
    assert omega.hi[0] == pytest.approx(0.9)


@given(st.floats(-10, 10), st.floats(0, 2))
def test_scalar_image(k, c):
    G, _ = tighten(Polytope.from_box([-100.0], [100.0]), np.array([[k]]), interval(c))
    lo, hi = bounds_of(G)
    assert hi[0] == pytest.approx(abs(k) * c, abs=1e-12) and lo[0] == pytest.approx(-abs(k) * c, abs=1e-12)


def test_tightening_on_two_inputs_and_checks():
    rng = np.random.default_rng(0)
    U = Polytope.from_box([-3.0, -2.0], [3.0, 2.0])
    for _ in range(20):
        K = rng.normal(size=(2, 3)) * 0.5
        omega = Hyperrectangle.centered(rng.uniform(0, 0.5, 3))
        try:
            G, Ut = tighten(U, K, omega)
        except TighteningError:
            continue
        TubeSpec(K, omega, G, U, Ut).check()
        for z in omega.vertices():
            assert G.contains(K @ (-z), 1e-12)


def test_tightening_exceeds_authority():
    with pytest.raises(TighteningError):
        build_tube_spec(integrator(), U54, omega=interval(3.0), K_aux=[[2.0]])
    with pytest.raises(TighteningError):
        omega_for_fraction([[1.0, 1.0]], U54, 0.3, [1.0, np.inf])


def test_estimate_tube_stable_decay():
    box, cert = estimate_tube(decay(1), [[0.0]], T=0.05, trials=30, seed_box=[1.0], horizon=2.0)
    assert cert.escape_fraction == 0
    assert box.hi[0] <= 1.2 + 1e-12 and box.lo[0] >= -1.2 - 1e-12


def test_estimate_tube_unstable():
    grow = ControlAffineSystem(1, 1, lambda x: x, lambda x: np.eye(1))
    with pytest.raises(TubeEstimateError):
        estimate_tube(grow, [[0.0]], T=0.05, trials=10, seed_box=[0.1], horizon=5.0)


def test_estimate_tube_shrinks_with_period():
    # the seed box is invariant in continuous time; a long hold makes the
    # sampled loop overshoot it even though it stays stable
    K = [[2.0, 1.5], [-1.5, 2.0]]
    box_T, _ = estimate_tube(integrator(2), K, T=0.6, trials=20, seed_box=[0.1, 0.1], horizon=6.0)
    box_T4, _ = estimate_tube(integrator(2), K, T=0.15, trials=20, seed_box=[0.1, 0.1], horizon=6.0)
    assert np.all(box_T4.hi < box_T.hi)
    assert np.allclose(box_T4.hi, 1.2 * 0.1)


def test_estimate_tube_sees_disturbance():
    calm, _ = estimate_tube(decay(1), [[0.0]], T=0.05, trials=10, seed_box=[0.1], horizon=2.0)
    windy, _ = estimate_tube(decay(1), [[0.0]], T=0.05, trials=10, seed_box=[0.1], horizon=2.0,
                             disturbance_free=False, disturbance=[0.5])
    assert windy.hi[0] > calm.hi[0]


def unit_interval_barrier(level=1.0):
    return quadratic_cbf(np.eye(1), level, linear_alpha(1.0))


def test_reduced_barrier_trivial_tube():
    sys = integrator()
    red = build_reduced_cbf(sys, unit_interval_barrier(), interval(0.0), U54, P=np.eye(1), c=1.0,
                            region=interval(2.0), samples=20)
    assert red.containment_margin == pytest.approx(0.0, abs=1e-12)


def test_reduced_barrier_interval_arithmetic():
    sys = integrator()
    red = build_reduced_cbf(sys, unit_interval_barrier(), interval(0.1), U54, P=np.eye(1), c=0.81,
                            region=interval(2.0), samples=20)
    # boundary 0.9 shifted by 0.1 lands on the boundary of C
    assert red.containment_margin == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(AuditFailure):
        build_reduced_cbf(sys, unit_interval_barrier(), interval(0.1), U54, P=np.eye(1), c=0.85,
                          region=interval(2.0), samples=20)


def test_reduced_barrier_from_value_samples():
    sys = integrator()
    xs = np.linspace(-1, 1, 21)
    red = build_reduced_cbf(sys, unit_interval_barrier(), interval(0.1), U54,
                            fit=(xs[:, None], xs ** 2, 0.81), region=interval(2.0), samples=20)
    assert red.cbf_prime.value([0.0]) == pytest.approx(0.81)


def test_viability_failure():
    outward = ControlAffineSystem(1, 1, lambda x: x, lambda x: np.eye(1))
    with pytest.raises(AuditFailure) as err:
        build_reduced_cbf(outward, unit_interval_barrier(), interval(0.1), Polytope.from_box([0.0], [0.0]),
                          P=np.eye(1), c=0.81, region=interval(2.0), samples=20)
    assert "viability" in str(err.value)


def test_degenerate_step_without_tube():
    sys = integrator()
    spec = TubeSpec(np.zeros((1, 1)), interval(0.0), Polytope.from_box([0.0], [0.0]), U54, U54)
    red = build_reduced_cbf(sys, unit_interval_barrier(), interval(0.0), U54, P=np.eye(1), c=1.0,
                            region=interval(2.0), samples=10)
    x = np.array([0.2])
    u, u_bar, x_bar_next, x_next = tube_cbf_step(spec, red, sys, lambda xb: np.array([0.5]), x, x,
                                                 lambda u: rk4_step(sys, x, u, 0.1), 0.1)
    assert u[0] == u_bar[0] == 0.5
    assert x_bar_next[0] == pytest.approx(x_next[0], abs=1e-12)


def test_controller_seeds_anchor_at_state():
    sys = integrator()
    spec = build_tube_spec(sys, U54, omega=interval(0.1), K_aux=[[2.0]])
    red = build_reduced_cbf(sys, unit_interval_barrier(), interval(0.1), spec.U_tight, P=np.eye(1), c=0.81,
                            region=interval(2.0), samples=10)
    ctrl = TubeController(spec, red, sys, lambda xb, t: (np.zeros(1), {}), 0.1)
    ctrl.reset([0.3])
    assert np.array_equal(ctrl.x_bar, [0.3])
    with pytest.raises(ValueError):
        ctrl.reset([0.95])


def test_error_contracts_by_closed_loop_factor():
    # z_dot = A z + B u with u = -K z held for T: z+ = (Ad - Bd K) z
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    Bm = np.array([[0.0], [1.0]])
    sys = ControlAffineSystem(2, 1, lambda x: A @ x, lambda x: Bm)
    K = np.array([[1.0, 1.8]])
    T = 0.1
    Ad = np.eye(2) + A * T
    Bd = np.array([[T ** 2 / 2], [T]])
    z0 = np.array([0.05, 0.0])
    factor = np.linalg.norm((Ad - Bd @ K) @ z0) / np.linalg.norm(z0)
    big = Polytope.from_box([-50.0], [50.0])
    omega = Hyperrectangle.centered([0.2, 0.2])
    spec = build_tube_spec(sys, big, omega=omega, K_aux=K)
    red = build_reduced_cbf(sys, quadratic_cbf(np.eye(2), 1.0, linear_alpha(1.0)), omega, spec.U_tight,
                            P=np.eye(2), c=0.5, region=Hyperrectangle.centered([2.0, 2.0]), samples=30)
    x_bar = np.zeros(2)
    x = x_bar + z0
    _, _, x_bar_next, x_next = tube_cbf_step(spec, red, sys, lambda xb: np.zeros(1), x, x_bar,
                                             lambda u: rk4_step(sys, x, u, T), T)
    ratio = np.linalg.norm(x_next - x_bar_next) / np.linalg.norm(z0)
    assert ratio == pytest.approx(factor, rel=0.05)


def test_reanchor_projects_and_breaches():
    red = build_reduced_cbf(integrator(), unit_interval_barrier(), interval(0.1), U54, P=np.eye(1), c=0.81,
                            region=interval(2.0), samples=10)
    # propagated anchor too far from the measurement: projection lands within 0.1 of it
    y = reanchor(red, interval(0.1), [0.5], [0.0])
    assert y[0] == pytest.approx(0.4, abs=1e-9)
    # measurement far outside: no anchor in C' within 0.1
    assert reanchor(red, interval(0.1), [1.5], [0.8]) is None
    # anchor outside C' but measurement close: pulled back inside
    y = reanchor(red, interval(0.1), [0.95], [0.92])
    assert red.cbf_prime.value(y) >= 0 and abs(0.95 - y[0]) <= 0.1 + 1e-12


def test_tube_breach_raises():
    sys = integrator()
    spec = build_tube_spec(sys, U54, omega=interval(0.1), K_aux=[[0.0]])
    red = build_reduced_cbf(sys, unit_interval_barrier(), interval(0.1), spec.U_tight, P=np.eye(1), c=0.81,
                            region=interval(2.0), samples=10)
    with pytest.raises(TubeBreach):
        tube_cbf_step(spec, red, sys, lambda xb: np.zeros(1), np.array([0.8]), np.array([0.8]),
                      lambda u: np.array([1.5]), 0.1)


def test_slow_segway_tube_loop_stays_safe():
    """Forward invariance with exact input decomposition and valid anchors on the slow preset."""
    from dtcbf import segway

    p = segway.SLOW
    spec, red = segway.tube_setup(p, samples=150)
    sys = segway.make_system(p)
    cbf = red.cbf
    A, B = segway.linearize_origin(p)
    K = lqr_gain(A, B, np.diag([100.0, 1.0, 10.0, 1.0]), np.eye(1)).K
    period = 0.05
    pushy = LqrController(K, [10.0], reference=lambda t: np.array([3.0, 0.0, 0.0, 0.0]))
    anchors = []

    def nominal(x_bar, t):
        return pushy.nominal(t, x_bar), {}

    ctrl = TubeController(spec, red, sys, nominal, period, substeps=10)
    original = ctrl.step

    def audited_step(t, x):
        anchors.append((red.cbf_prime.value(ctrl.x_bar), spec.Omega.contains(x - ctrl.x_bar)))
        return original(t, x)

    ctrl.step = audited_step
    r = simulate(ctrl, sys, np.zeros(4), 100 * period, period, 10, cbf, u_limit=np.array([p.volt_max]))
    assert r.failure is None and r.breaches == 0 and r.infeasible == 0
    assert r.min_h >= -1e-9
    assert all(hp >= 0 and inside for hp, inside in anchors)
    kappa_free = r.u_nominal[r.sample_rows]
    assert np.all(np.abs(kappa_free) <= 3.6 + 1e-12)
    assert np.all(np.abs(r.u_applied[r.sample_rows]) <= 5.4 + 1e-12)
    assert np.max(np.abs(r.states[:, 0])) > 0.05  # the loop tracks, it is not frozen
