"""Ground-truth quadrotor plant: rigid-body dynamics, RK4 stepping, wind.

State x = [P (m), v (m/s), Theta = (phi, theta, psi) (rad), omega (rad/s)],
inputs u = [total thrust (N), body torques (N m)]. Inertial frame is z-up,
gravity acts along -z, attitude uses ZYX Euler angles so the Euler-rate
kinematics are singular at |theta| = pi/2.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .kernels import NU, NX


class EulerSingularityError(RuntimeError):
    """Pitch magnitude reached the Euler kinematic singularity."""


SINGULARITY_MARGIN = 1e-6


@dataclass
class QuadParams:
    """Crazyflie-class parameters; drag/bias model effects the nominal model omits."""

    mass: float = 0.027
    gravity: float = 9.81
    inertia: tuple = (1.4e-5, 1.4e-5, 2.17e-5)
    arm_length: float = 0.046
    torque_coeff: float = 3.15e-3
    drag_v: float = 0.0
    drag_w: float = 0.0
    accel_bias: tuple = (0.0, 0.0, 0.0)

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.mass, self.gravity, *self.inertia,
             self.drag_v, self.drag_w, *self.accel_bias], dtype=float)

    def nominal(self) -> "QuadParams":
        """First-principles copy: no drag, no bias."""
        return replace(self, drag_v=0.0, drag_w=0.0, accel_bias=(0.0, 0.0, 0.0))

    def hover_input(self) -> np.ndarray:
        return np.array([self.mass * self.gravity, 0.0, 0.0, 0.0])


_NO_TERMS = np.zeros((0, 3), dtype=np.int32)
_NO_XI = np.zeros((0, NX), dtype=float)


def rotation_matrix(theta_vec) -> np.ndarray:
    """Body-to-inertial rotation R = Rz(psi) Ry(theta) Rx(phi)."""
    phi, th, psi = theta_vec
    sph, cph = np.sin(phi), np.cos(phi)
    sth, cth = np.sin(th), np.cos(th)
    sps, cps = np.sin(psi), np.cos(psi)
    return np.array([
        [cth * cps, sph * sth * cps - cph * sps, cph * sth * cps + sph * sps],
        [cth * sps, sph * sth * sps + cph * cps, cph * sth * sps - sph * cps],
        [-sth, sph * cth, cph * cth],
    ])


def euler_rate_matrix(theta_vec) -> np.ndarray:
    """Maps body rates to Euler-angle rates; raises at the pitch singularity."""
    phi, th, _ = theta_vec
    if abs(th) >= np.pi / 2 - SINGULARITY_MARGIN:
        raise EulerSingularityError(f"pitch {th:.6f} rad at Euler singularity")
    sph, cph = np.sin(phi), np.cos(phi)
    tth = np.tan(th)
    cth = np.cos(th)
    return np.array([
        [1.0, sph * tth, cph * tth],
        [0.0, cph, -sph],
        [0.0, sph / cth, cph / cth],
    ])


def continuous_dynamics(x, u, params: QuadParams) -> np.ndarray:
    """Time derivative of the 12-state; raises at the pitch singularity."""
    if abs(x[7]) >= np.pi / 2 - SINGULARITY_MARGIN:
        raise EulerSingularityError(f"pitch {x[7]:.6f} rad at Euler singularity")
    out = np.empty(NX)
    kernels.quad_rhs(np.asarray(x, dtype=float), np.asarray(u, dtype=float),
                     params.to_vector(), out)
    return out


def rk4_step(f, x, u, dt: float) -> np.ndarray:
    """Classic fourth-order Runge-Kutta step with the input held constant."""
    x = np.asarray(x, dtype=float)
    if dt == 0.0:
        return x.copy()
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class DrydenParams:
    """First-order shaping-filter gust model, output in acceleration units.

    sigma: stationary std per translational axis (m/s^2); tau: filter time
    constants (s); ceiling: hard clip on each output (m/s^2), chosen so the
    integrated per-step disturbance cannot exceed the adaptive-bound cap.
    Rate-channel terms default off.
    """

    sigma: tuple = (1.0, 1.0, 0.5)
    tau: tuple = (1.2, 1.2, 0.8)
    rate_sigma: tuple = (0.0, 0.0, 0.0)
    rate_tau: tuple = (0.5, 0.5, 0.5)
    ceiling: float = 10.0


@dataclass
class DrydenWind:
    """Seeded discrete gust filter; update() advances one sample of dt."""

    params: DrydenParams = field(default_factory=DrydenParams)
    dt: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.state = np.zeros(6)

    def update(self) -> np.ndarray:
        """Returns the 12-vector disturbance derivative for one step."""
        p = self.params
        sig = np.concatenate([p.sigma, p.rate_sigma])
        tau = np.concatenate([p.tau, p.rate_tau])
        noise = self.rng.standard_normal(6)
        out = np.zeros(NX)
        for i in range(6):
            a = np.exp(-self.dt / tau[i])
            self.state[i] = a * self.state[i] + sig[i] * np.sqrt(1.0 - a * a) * noise[i]
        w = np.clip(self.state, -p.ceiling, p.ceiling)
        out[3:6] = w[:3]
        out[9:12] = w[3:]
        return out


def plant_step(x, u, params: QuadParams, dt: float, wind: DrydenWind | None = None):
    """One true-plant step: RK4 of the full dynamics plus integrated gusts.

    Returns (x_next, w_applied) where w_applied is the disturbance
    derivative held over the step (zeros without wind).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if abs(x[7]) >= np.pi / 2 - SINGULARITY_MARGIN:
        raise EulerSingularityError(f"pitch {x[7]:.6f} rad at Euler singularity")
    xn = kernels.sindy_step(x, u, dt, params.to_vector(), _NO_TERMS, _NO_XI)
    if wind is None:
        w = np.zeros(NX)
    else:
        w = wind.update()
        xn = xn + dt * w
    if abs(xn[7]) >= np.pi / 2 - SINGULARITY_MARGIN:
        raise EulerSingularityError(f"pitch {xn[7]:.6f} rad at Euler singularity")
    return xn, w
