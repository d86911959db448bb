"""Planar wheeled inverted pendulum (mini-Segway) driven by a motor voltage.

State ``x = [s, s_dot, theta, theta_dot]``: wheel position (m), its rate,
body pitch (rad, positive leaning forward) and pitch rate. The motor applies
torque ``tau = k_u * u - damping * (s_dot / r - theta_dot)`` between body and
wheels, which enters the Lagrangian equations as ``Q_s = tau / r`` and
``Q_theta = -tau``. Barrier functions act on the sub-state
``z = [s_dot, theta, theta_dot]``; position does not affect the dynamics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .core_model import Cbf, ControlAffineSystem, Hyperrectangle, Polytope, fd_jacobian, linear_alpha, quadratic_cbf
from .opt.riccati import lqr_gain

SUBSTATE = (1, 2, 3)


@dataclass(frozen=True)
class SegwayParams:
    body_mass: float  # kg
    wheel_mass: float  # kg, both wheels lumped
    body_inertia: float  # kg m^2 about the center of mass
    wheel_radius: float  # m
    com_height: float  # m, wheel axle to body center of mass
    torque_constant: float  # N m / V
    damping: float  # N m s, back-EMF lumped into the torque law
    gravity: float = 9.81
    volt_max: float = 5.4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")

    @property
    def wheel_inertia(self) -> float:
        return 0.5 * self.wheel_mass * self.wheel_radius ** 2

    def with_overrides(self, **kw) -> "SegwayParams":
        return replace(self, **kw)


# Neither preset is a measured robot. The fast one behaves like a small hobby
# robot at the 5.4 V motor limit; the slow one is heavier and taller, with
# markedly smaller Lipschitz constants.
FAST = SegwayParams(body_mass=0.45, wheel_mass=0.06, body_inertia=1.2e-3, wheel_radius=0.034,
                    com_height=0.045, torque_constant=0.022, damping=1.5e-3)
SLOW = SegwayParams(body_mass=2.0, wheel_mass=0.2, body_inertia=5.0e-2, wheel_radius=0.05,
                    com_height=0.3, torque_constant=0.1, damping=1.0e-3)


def presets() -> dict[str, SegwayParams]:
    return {"fast": FAST, "slow": SLOW}


VALIDITY = Hyperrectangle([-1e3, -50.0, -np.pi / 2 + 1e-3, -200.0], [1e3, 50.0, np.pi / 2 - 1e-3, 200.0])


def _mass_terms(p: SegwayParams, theta: float):
    a = p.body_mass + p.wheel_mass + p.wheel_inertia / p.wheel_radius ** 2
    b = p.body_mass * p.com_height
    c = p.body_mass * p.com_height ** 2 + p.body_inertia
    cos = np.cos(theta)
    M = np.array([[a, b * cos], [b * cos, c]])
    return M, b


def _accelerations(p: SegwayParams, s_dot: float, theta: float, theta_dot: float, u: float):
    """``(s_ddot, theta_ddot)`` from the 2x2 mass matrix solved in closed form."""
    a = p.body_mass + p.wheel_mass + p.wheel_inertia / p.wheel_radius ** 2
    b = p.body_mass * p.com_height
    c = p.body_mass * p.com_height ** 2 + p.body_inertia
    cos, sin = math.cos(theta), math.sin(theta)
    tau = p.torque_constant * u - p.damping * (s_dot / p.wheel_radius - theta_dot)
    r1 = b * sin * theta_dot ** 2 + tau / p.wheel_radius
    r2 = b * p.gravity * sin - tau
    det = a * c - (b * cos) ** 2
    return (c * r1 - b * cos * r2) / det, (a * r2 - b * cos * r1) / det


def drift(p: SegwayParams, x) -> np.ndarray:
    _, s_dot, theta, theta_dot = (float(v) for v in x)
    s_dd, th_dd = _accelerations(p, s_dot, theta, theta_dot, 0.0)
    return np.array([s_dot, s_dd, theta_dot, th_dd])


def input_matrix(p: SegwayParams, x) -> np.ndarray:
    a = p.body_mass + p.wheel_mass + p.wheel_inertia / p.wheel_radius ** 2
    b = p.body_mass * p.com_height
    c = p.body_mass * p.com_height ** 2 + p.body_inertia
    cos = math.cos(float(x[2]))
    det = a * c - (b * cos) ** 2
    k, r = p.torque_constant, p.wheel_radius
    return np.array([[0.0], [(c * k / r + b * cos * k) / det], [0.0], [(-a * k - b * cos * k / r) / det]])


def state_derivative(p: SegwayParams, x, u) -> np.ndarray:
    """``f(x) + B(x) u`` in one pass, without saturation."""
    _, s_dot, theta, theta_dot = (float(v) for v in x)
    s_dd, th_dd = _accelerations(p, s_dot, theta, theta_dot, float(u[0]))
    return np.array([s_dot, s_dd, theta_dot, th_dd])


def mechanical_energy(p: SegwayParams, x) -> float:
    _, s_dot, theta, theta_dot = x
    M, _ = _mass_terms(p, theta)
    v = np.array([s_dot, theta_dot])
    return 0.5 * v @ M @ v + p.body_mass * p.gravity * p.com_height * np.cos(theta)


def segway_dynamics(p: SegwayParams, x, u) -> np.ndarray:
    """State derivative; inputs beyond ``volt_max`` are saturated with a warning."""
    u = float(np.atleast_1d(u)[0])
    if abs(u) > p.volt_max + 1e-12:
        warnings.warn(f"input {u:.4g} V saturated to +-{p.volt_max} V", stacklevel=2)
        u = float(np.clip(u, -p.volt_max, p.volt_max))
    x = np.asarray(x, dtype=float)
    return drift(p, x) + input_matrix(p, x)[:, 0] * u


def make_system(p: SegwayParams) -> ControlAffineSystem:
    return ControlAffineSystem(
        n=4, m=1,
        f=lambda x: drift(p, x),
        B=lambda x: input_matrix(p, x),
        validity=VALIDITY,
        F=lambda x, u: state_derivative(p, x, u),
    )


def linearize_origin(p: SegwayParams, analytic: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``(A, B)`` of the 4-state model at the upright equilibrium."""
    if not analytic:
        x0 = np.zeros(4)
        return fd_jacobian(lambda x: drift(p, x), x0), input_matrix(p, x0)
    M, b = _mass_terms(p, 0.0)
    Minv = np.linalg.inv(M)
    r = p.wheel_radius
    # d(rhs)/d[s_dot, theta, theta_dot] at the origin
    drhs = np.array([[-p.damping / r ** 2, 0.0, p.damping / r],
                     [p.damping / r, b * p.gravity, -p.damping]])
    dacc = Minv @ drhs
    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[2, 3] = 1.0
    A[1, 1:] = dacc[0]
    A[3, 1:] = dacc[1]
    return A, input_matrix(p, np.zeros(4))


def linearize_substate(p: SegwayParams) -> tuple[np.ndarray, np.ndarray]:
    A, B = linearize_origin(p)
    idx = list(SUBSTATE)
    return A[np.ix_(idx, idx)], B[idx]


# Weights for the auxiliary (tube) gain on [s_dot, theta, theta_dot].
AUX_Q = np.diag([1.0, 10.0, 0.1])
AUX_R = np.array([[1.0]])
# Weights whose LQR value matrix shapes the barrier ellipsoid. The heavy
# pitch-rate weight keeps the ellipsoid round enough that the box-based
# Lipschitz bounds stay moderate.
CBF_Q = np.diag([0.1, 10.0, 30.0])
CBF_R = np.array([[1.0]])
DEFAULT_GAMMA = 0.3


def aux_gain(p: SegwayParams, Q=AUX_Q, R=AUX_R) -> np.ndarray:
    """LQR gain on the 3-state linearization embedded as a 1x4 gain (zero on position)."""
    A3, B3 = linearize_substate(p)
    K3 = lqr_gain(A3, B3, Q, R).K
    return np.concatenate([[0.0], K3[0]])[None, :]


def embed_substate(P3) -> np.ndarray:
    P = np.zeros((4, 4))
    idx = list(SUBSTATE)
    P[np.ix_(idx, idx)] = P3
    return P


def cbf_shape(p: SegwayParams, Q=CBF_Q, R=CBF_R) -> np.ndarray:
    """Ellipsoid shape on the sub-state: the LQR value matrix of the 3-state linearization."""
    A3, B3 = linearize_substate(p)
    return lqr_gain(A3, B3, Q, R).P


def theta_extent(P3) -> float:
    return float(np.sqrt(np.linalg.inv(P3)[1, 1]))


def scaled_shape(P3, theta_max: float) -> np.ndarray:
    """Scale ``P3`` so the ellipsoid ``z^T P z <= 1`` reaches ``|theta| = theta_max``."""
    P3 = np.asarray(P3, dtype=float)
    return P3 * (np.linalg.inv(P3)[1, 1] / theta_max ** 2)


def tightened_level(P3, omega_half_width) -> float:
    """Level ``c`` with ``{z^T P z <= c} + Omega`` inside ``{z^T P z <= 1}`` (triangle inequality in the P-norm)."""
    hw = np.asarray(omega_half_width, dtype=float)
    corners = np.array(np.meshgrid(*[[-w, w] for w in hw], indexing="ij")).reshape(len(hw), -1).T
    reach = max(np.sqrt(v @ P3 @ v) for v in corners)
    if reach >= 1.0:
        raise ValueError("tube does not fit inside the safe set")
    return (1.0 - reach) ** 2


TIGHTENING = 1.0 / 3.0  # share of the input range reserved for the auxiliary feedback


def input_set(p: SegwayParams) -> Polytope:
    return Polytope.from_box([-p.volt_max], [p.volt_max])


def _nominal_barrier(p: SegwayParams, theta_max: float, gamma: float, shape) -> Cbf:
    P3 = scaled_shape(cbf_shape(p) if shape is None else shape, theta_max)
    return quadratic_cbf(embed_substate(P3), 1.0, linear_alpha(gamma))


def tube_setup(p: SegwayParams, theta_max: float = 0.3, fraction: float = TIGHTENING,
               gamma: float = DEFAULT_GAMMA, K_aux=None, shape=None, samples: int = 400, seed: int = 0):
    """Tube, tightened inputs and audited reduced barrier for the segway.

    The error box has the proportions of the safe ellipsoid's bounding box
    (position unbounded, since neither the gain nor the barrier uses it) and
    is sized so the auxiliary feedback spends ``fraction`` of the voltage
    range. Returns ``(TubeSpec, ReducedSafeSet)``; failing audits raise.
    """
    from .tube_cbf import build_reduced_cbf, build_tube_spec, omega_for_fraction

    sys = make_system(p)
    U = input_set(p)
    cbf = _nominal_barrier(p, theta_max, gamma, shape)
    K = aux_gain(p) if K_aux is None else np.atleast_2d(np.asarray(K_aux, dtype=float))
    ext = cbf_box(cbf).hi.copy()
    ext[0] = np.inf
    omega = omega_for_fraction(K, U, fraction, ext)
    spec = build_tube_spec(sys, U, omega=omega, K_aux=K)
    P3 = cbf.P[np.ix_(SUBSTATE, SUBSTATE)]
    P3 = P3 / tightened_level(P3, omega.hi[list(SUBSTATE)])
    reduced = build_reduced_cbf(sys, cbf, omega, spec.U_tight, P=embed_substate(P3), c=1.0,
                                region=cbf_box(cbf, margin=1.2), dims=list(SUBSTATE), samples=samples, seed=seed)
    return spec, reduced


def default_cbf(p: SegwayParams, theta_max: float = 0.3, tightened: bool = False,
                gamma: float = DEFAULT_GAMMA, shape=None, fraction: float = TIGHTENING) -> Cbf:
    """Quadratic barrier ``h = 1 - z^T P z`` with the theta-extent pinned to ``theta_max``.

    With ``tightened`` the result is the reduced barrier from :func:`tube_setup`,
    returned only after its containment and viability audits under the
    tightened inputs pass.
    """
    if tightened:
        return tube_setup(p, theta_max, fraction, gamma, shape=shape)[1].cbf_prime
    return _nominal_barrier(p, theta_max, gamma, shape)


def cbf_box(cbf: Cbf, position_range=(0.0, 0.0), margin: float = 1.0) -> Hyperrectangle:
    """Bounding box of ``{h >= 0}`` for a quadratic barrier, optionally inflated."""
    P3 = cbf.P[np.ix_(SUBSTATE, SUBSTATE)] / cbf.level
    ext = margin * np.sqrt(np.diag(np.linalg.inv(P3)))
    lo = np.concatenate([[position_range[0]], -ext])
    hi = np.concatenate([[position_range[1]], ext])
    return Hyperrectangle(lo, hi)
