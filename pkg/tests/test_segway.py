import numpy as np
import pytest

from dtcbf import segway as sg
from dtcbf.bounds import system_budgets
from dtcbf.core_model import ControlAffineSystem, fd_jacobian, integrate_interval
from dtcbf.dbc_filter import safety_filter
from dtcbf.opt import lqr_gain


@pytest.mark.parametrize("name", ["fast", "slow"])
def test_upright_equilibrium(name):
    p = sg.presets()[name]
    assert np.array_equal(sg.segway_dynamics(p, np.zeros(4), [0.0]), np.zeros(4))


def test_falls_the_way_it_leans():
    for p in sg.presets().values():
        assert sg.segway_dynamics(p, [0.0, 0.0, 0.05, 0.0], [0.0])[3] > 0
        assert sg.segway_dynamics(p, [0.0, 0.0, -0.05, 0.0], [0.0])[3] < 0


def test_energy_conserved_without_motor():
    p = sg.FAST.with_overrides(damping=1e-300)
    # no validity box: the body is allowed to swing through horizontal
    sys = ControlAffineSystem(4, 1, lambda x: sg.drift(p, x), lambda x: sg.input_matrix(p, x))
    x0 = np.array([0.0, 0.1, 0.3, -0.5])
    traj = integrate_interval(sys, x0, np.zeros(1), 1.0, 2000)
    e = np.array([sg.mechanical_energy(p, x) for x in traj])
    assert np.max(np.abs(e - e[0])) <= 1e-6 * abs(e[0])


def test_control_affine_split():
    rng = np.random.default_rng(0)
    for p in sg.presets().values():
        for _ in range(10):
            x = rng.normal(size=4) * [1, 1, 0.4, 2]
            u1, u2 = rng.uniform(-5.4, 5.4, 2)
            d1 = sg.segway_dynamics(p, x, [u1]) - sg.segway_dynamics(p, x, [0.0])
            d2 = sg.segway_dynamics(p, x, [u2]) - sg.segway_dynamics(p, x, [0.0])
            assert np.allclose(d1 * u2, d2 * u1, atol=1e-10)
            assert np.allclose(sg.state_derivative(p, x, [u1]), sg.segway_dynamics(p, x, [u1]), atol=1e-12)


def test_saturation_warns():
    with pytest.warns(UserWarning):
        d = sg.segway_dynamics(sg.FAST, np.zeros(4), [9.0])
    assert np.allclose(d, sg.segway_dynamics(sg.FAST, np.zeros(4), [5.4]))


@pytest.mark.parametrize("name", ["fast", "slow"])
def test_linearization(name):
    p = sg.presets()[name]
    A, B = sg.linearize_origin(p)
    A_fd, _ = sg.linearize_origin(p, analytic=False)
    assert np.allclose(A, A_fd, rtol=1e-6, atol=1e-6 * np.max(np.abs(A)))
    assert B[1, 0] != 0 and B[3, 0] != 0
    eig = np.linalg.eigvals(A)
    assert np.any((np.abs(eig.imag) < 1e-12) & (eig.real > 0))
    K = lqr_gain(A, B, np.eye(4), np.eye(1)).K
    assert np.all(np.linalg.eigvals(A - B @ K).real < 0)


def test_params_validation():
    with pytest.raises(ValueError):
        sg.FAST.with_overrides(body_mass=-1.0)
    assert sg.FAST.volt_max == 5.4


def test_auxiliary_gain_sign_pattern():
    # same sign pattern as a stabilizing state feedback u = -K x on [s_dot, theta, theta_dot]
    # whose published magnitude is around [-3.7, -3.5, -0.7]
    K = sg.aux_gain(sg.FAST)[0]
    assert K[0] == 0.0
    assert np.all(K[1:] < 0)


def test_default_barrier_geometry():
    for theta_max in (0.2, 0.3):
        cbf = sg.default_cbf(sg.FAST, theta_max)
        assert cbf.value(np.zeros(4)) == 1.0
        P3 = cbf.P[np.ix_(sg.SUBSTATE, sg.SUBSTATE)]
        assert sg.theta_extent(P3) == pytest.approx(theta_max, abs=1e-9)
        rng = np.random.default_rng(1)
        for _ in range(5):
            z = rng.normal(size=3)
            z /= np.sqrt(z @ P3 @ z)
            assert cbf.value(np.concatenate([[7.0], z])) == pytest.approx(0.0, abs=1e-12)


def test_tightened_barrier_is_audited_and_smaller():
    spec, red = sg.tube_setup(sg.FAST, samples=150)
    assert red.containment_margin >= 0 and red.viability_margin >= 0
    assert np.allclose(spec.U_tight.bounding_box().hi, 3.6) and np.allclose(spec.G.bounding_box().hi, 1.8)
    prime = sg.default_cbf(sg.FAST, tightened=True)
    x = np.array([0.0, 0.0, 0.25, 0.0])
    assert prime.value(x) < sg.default_cbf(sg.FAST).value(x)


def test_fast_preset_filter_infeasible_at_33hz():
    p = sg.FAST
    sys = sg.make_system(p)
    cbf = sg.default_cbf(p)
    W = system_budgets(sys, cbf, sg.cbf_box(cbf, margin=1.1), sg.input_set(p), 7).disturbance_set(1 / 33)
    # a state on the barrier boundary, leaning forward
    P3 = cbf.P[np.ix_(sg.SUBSTATE, sg.SUBSTATE)]
    z = np.array([0.0, 1.0, 0.0])
    x = np.concatenate([[0.0], z / np.sqrt(z @ P3 @ z) * 0.98])
    res = safety_filter(sys, cbf, W, x, np.zeros(1), sg.input_set(p))
    assert not res.feasible


def test_slow_preset_filter_feasible_at_high_rate():
    p = sg.SLOW
    sys = sg.make_system(p)
    cbf = sg.default_cbf(p)
    W = system_budgets(sys, cbf, sg.cbf_box(cbf, margin=1.1), sg.input_set(p), 7).disturbance_set(1 / 2000)
    P3 = cbf.P[np.ix_(sg.SUBSTATE, sg.SUBSTATE)]
    z = np.array([0.0, 1.0, 0.0])
    x = np.concatenate([[0.0], z / np.sqrt(z @ P3 @ z) * 0.98])
    assert safety_filter(sys, cbf, W, x, np.zeros(1), sg.input_set(p)).feasible


def test_input_jacobian_matches_fd():
    sys = sg.make_system(sg.FAST)
    x = np.array([0.0, 0.3, 0.2, -0.4])
    J = sys.jac_B(x)[:, 0, :]
    J_fd = fd_jacobian(lambda y: sg.input_matrix(sg.FAST, y)[:, 0], x)
    assert np.allclose(J, J_fd, rtol=1e-4, atol=1e-6)
