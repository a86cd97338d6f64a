import math

import numpy as np
import pytest

from tubempc import kernels
from tubempc.quadsim import (
    DrydenParams,
    DrydenWind,
    EulerSingularityError,
    QuadParams,
    continuous_dynamics,
    euler_rate_matrix,
    plant_step,
    rk4_step,
    rotation_matrix,
)


@pytest.fixture
def params():
    return QuadParams()


def hover_state(z=1.0):
    x = np.zeros(12)
    x[2] = z
    return x


# ---------------------------------------------------------------- dynamics

def test_hover_equilibrium(params):
    u = params.hover_input()
    assert u[0] == pytest.approx(0.027 * 9.81, abs=1e-15)
    xdot = continuous_dynamics(hover_state(), u, params)
    assert np.max(np.abs(xdot)) < 1e-12


def test_free_fall(params):
    xdot = continuous_dynamics(hover_state(), np.zeros(4), params)
    assert np.allclose(xdot[3:6], [0.0, 0.0, -9.81], atol=1e-14)
    assert np.max(np.abs(np.delete(xdot, 5))) < 1e-14


def test_torque_response(params):
    u = params.hover_input()
    u[1] = 1e-3
    xdot = continuous_dynamics(hover_state(), u, params)
    # 1e-3 / 1.4e-5, straight from the diagonal inertia
    assert xdot[9] == pytest.approx(71.42857142857143, rel=1e-12)
    assert xdot[10] == pytest.approx(0.0, abs=1e-15)
    assert xdot[11] == pytest.approx(0.0, abs=1e-15)


def test_drag_and_bias_enter_velocity_rows():
    p = QuadParams(drag_v=0.3, drag_w=0.2, accel_bias=(0.05, -0.02, 0.01))
    x = hover_state()
    x[3:6] = [0.5, -0.4, 0.2]
    x[9] = 1.5  # single-axis rate so the gyroscopic cross terms vanish
    xdot = continuous_dynamics(x, p.hover_input(), p)
    assert np.allclose(xdot[3:6], -0.3 * x[3:6] + [0.05, -0.02, 0.01], atol=1e-12)
    assert np.allclose(xdot[9:12], -0.2 * x[9:12], atol=1e-9)


def test_thrust_direction_matches_rotation(params):
    rng = np.random.default_rng(7)
    for _ in range(20):
        th = rng.uniform(-1.2, 1.2, size=3)
        x = hover_state()
        x[6:9] = th
        u = np.array([0.2, 0.0, 0.0, 0.0])
        xdot = continuous_dynamics(x, u, params)
        expect = rotation_matrix(th) @ np.array([0.0, 0.0, u[0]]) / params.mass
        expect[2] -= params.gravity
        assert np.allclose(xdot[3:6], expect, atol=1e-12)


def test_euler_rates_match_matrix(params):
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = hover_state()
        x[6:9] = rng.uniform(-1.0, 1.0, size=3)
        x[9:12] = rng.uniform(-2.0, 2.0, size=3)
        xdot = continuous_dynamics(x, params.hover_input(), params)
        assert np.allclose(xdot[6:9], euler_rate_matrix(x[6:9]) @ x[9:12], atol=1e-12)


def test_rotation_orthonormal():
    rng = np.random.default_rng(11)
    for _ in range(50):
        R = rotation_matrix(rng.uniform(-1.4, 1.4, size=3))
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_singularity_guard(params):
    x = hover_state()
    x[7] = np.pi / 2
    with pytest.raises(EulerSingularityError):
        continuous_dynamics(x, params.hover_input(), params)
    with pytest.raises(EulerSingularityError):
        euler_rate_matrix(x[6:9])


# ---------------------------------------------------------------- rk4

def test_rk4_scalar_exponential():
    f = lambda x, u: -x
    x1 = rk4_step(f, np.array([1.0]), None, 0.1)
    assert x1[0] == pytest.approx(math.exp(-0.1), abs=1e-7)


def test_rk4_zero_dt(params):
    x = hover_state()
    x[3] = 0.3
    out = rk4_step(lambda a, b: continuous_dynamics(a, b, params), x, params.hover_input(), 0.0)
    assert np.array_equal(out, x)


def test_rk4_convergence_order():
    # global error on x' = -x over [0, 1] should shrink like dt^4
    f = lambda x, u: -x
    errs = []
    dts = [0.2, 0.1, 0.05, 0.025]
    for dt in dts:
        n = round(1.0 / dt)
        x = np.array([1.0])
        for _ in range(n):
            x = rk4_step(f, x, None, dt)
        errs.append(abs(x[0] - math.exp(-1.0)))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 3.8 < slope < 4.2


def test_analytic_jacobian_matches_fd(params):
    # chain-rule Jacobians vs central differences through the same map
    rng = np.random.default_rng(5)
    p = QuadParams(drag_v=0.25, drag_w=0.1, accel_bias=(0.1, 0.0, -0.05)).to_vector()
    terms = np.array([[kernels.T_STATE, 3, 0], [kernels.T_SINU, 6, 0]], dtype=np.int32)
    xi = np.zeros((2, 12))
    xi[0, 3] = -0.4
    xi[1, 5] = 0.2
    for _ in range(10):
        x = rng.uniform(-0.5, 0.5, size=12)
        x[2] += 2.0
        u = np.array([0.25, 1e-4, -1e-4, 5e-5]) + rng.uniform(-0.01, 0.01, size=4) * [1, 1e-2, 1e-2, 1e-2]
        X = x[None, :].repeat(2, axis=0)
        A, B = kernels.sindy_horizon_jac(X, u[None, :], 0.01, p, terms, xi)
        Af, Bf = kernels.sindy_fd_jac(x, u, 0.01, p, terms, xi, 1e-6)
        assert np.max(np.abs(A[0] - Af)) < 1e-7
        assert np.max(np.abs(B[0] - Bf)) < 1e-5


# ---------------------------------------------------------------- plant + wind

def test_plant_step_without_wind_is_pure_rk4(params):
    x = hover_state(2.0)
    x[3] = 0.2
    u = params.hover_input()
    xn, w = plant_step(x, u, params, 0.01, wind=None)
    ref = rk4_step(lambda a, b: continuous_dynamics(a, b, params), x, u, 0.01)
    assert np.array_equal(xn, ref)
    assert not w.any()


def test_dryden_zero_intensity():
    w = DrydenWind(DrydenParams(sigma=(0, 0, 0), rate_sigma=(0, 0, 0)), dt=0.01, seed=4)
    for _ in range(100):
        assert not w.update().any()


def test_dryden_deterministic_and_bounded():
    p = DrydenParams(sigma=(1.0, 1.0, 0.5), ceiling=2.0)
    w1 = DrydenWind(p, dt=0.01, seed=42)
    w2 = DrydenWind(p, dt=0.01, seed=42)
    seq1 = np.array([w1.update() for _ in range(200)])
    seq2 = np.array([w2.update() for _ in range(200)])
    assert np.array_equal(seq1, seq2)
    assert np.max(np.abs(seq1)) <= 2.0
    assert not seq1[:, [0, 1, 2, 6, 7, 8]].any()


def test_dryden_intensity_statistics():
    p = DrydenParams(sigma=(1.0, 1.0, 0.5), tau=(1.2, 1.2, 0.8))
    w = DrydenWind(p, dt=0.01, seed=123)
    seq = np.array([w.update() for _ in range(10000)])
    for i, sig in enumerate(p.sigma):
        sd = np.std(seq[:, 3 + i])
        assert 0.8 * sig < sd < 1.2 * sig


def test_wind_discrepancy_equals_disturbance_integral(params):
    # identical controls with/without wind: state gap after one step is dt * w
    x = hover_state(2.0)
    u = params.hover_input()
    wind = DrydenWind(DrydenParams(), dt=0.01, seed=9)
    xw, w = plant_step(x, u, params, 0.01, wind=wind)
    x0, _ = plant_step(x, u, params, 0.01, wind=None)
    assert np.allclose(xw - x0, 0.01 * w, atol=1e-15)
