import numpy as np
import pytest

from tubempc import ident
from tubempc.mpc import (
    HARD_SLACK,
    STATUS_INFEASIBLE,
    STATUS_MAX_ITER,
    STATUS_OPTIMAL,
    LinearDiscreteModel,
    MpcConfig,
    MpcSolution,
    SindyDiscreteModel,
    TerminalIngredients,
    hover_linearization,
    realized_disturbance,
    shift_warm_start,
    solve_ocp,
    terminal_ingredients,
    tube_control,
)
from tubempc.quadsim import DrydenParams, DrydenWind, QuadParams, plant_step
from tubempc.sets import Box, TubeGain, lqr_gain

DT = 0.01
HUGE_X = Box.from_halfwidth(np.zeros(12), 1e6)
HUGE_U = Box.from_halfwidth(np.zeros(4), 1e6)


def hover_state(z=2.0):
    x = np.zeros(12)
    x[2] = z
    return x


@pytest.fixture(scope="module")
def params():
    return QuadParams()


@pytest.fixture(scope="module")
def hover_ab(params):
    return hover_linearization(params, DT)


@pytest.fixture(scope="module")
def cfg():
    return MpcConfig()


@pytest.fixture(scope="module")
def term_free(hover_ab, cfg, params):
    A, B = hover_ab
    return terminal_ingredients(A, B, cfg, HUGE_X, HUGE_U, params.hover_input())


def hover_ref(cfg, z=2.0):
    return np.tile(hover_state(z), (cfg.horizon + 1, 1))


# ---------------------------------------------------------------- config

def test_config_defaults_and_validation():
    c = MpcConfig()
    assert c.horizon == 15 and c.dt == 0.01
    assert c.tol == 1e-4 and c.max_iter == 100
    assert np.allclose(c.q_diag, [10, 10, 10, 5, 5, 5, 2, 2, 2, 1, 1, 1])
    assert np.allclose(c.r_diag, 0.1)
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(r_diag=np.zeros(4))
    with pytest.raises(ValueError):
        MpcConfig(q_diag=-np.ones(12))


# ---------------------------------------------------------------- terminal set

def test_terminal_alpha_hits_cap_on_huge_boxes(term_free):
    assert term_free.alpha == pytest.approx(1e6)


def test_terminal_point_box_is_an_error(hover_ab, cfg, params):
    A, B = hover_ab
    point = Box(np.zeros(12), np.zeros(12))
    with pytest.raises(ValueError, match="terminal set"):
        terminal_ingredients(A, B, cfg, point, HUGE_U, params.hover_input())


def test_terminal_ellipsoid_fits_boxes(hover_ab, cfg, params):
    A, B = hover_ab
    X_S = Box.from_halfwidth(np.zeros(12), np.linspace(0.5, 4.0, 12))
    U_S = Box(np.array([0.1, -0.01, -0.01, -0.01]), np.array([0.38, 0.01, 0.01, 0.01]))
    term = terminal_ingredients(A, B, cfg, X_S, U_S, params.hover_input())
    assert 0.0 < term.alpha < 1e6
    rng = np.random.default_rng(7)
    L = np.linalg.cholesky(term.P)
    z = rng.normal(size=(1000, 12))
    # points on the ellipsoid boundary
    pts = np.sqrt(term.alpha) * np.linalg.solve(L.T, (z / np.linalg.norm(z, axis=1)[:, None]).T).T
    for dx in pts:
        assert X_S.contains(dx, tol=1e-9)
        assert U_S.contains(params.hover_input() - term.K @ dx, tol=1e-9)


def test_terminal_decrease_condition(hover_ab, cfg, term_free):
    # V_f(A_K dx) - V_f(dx) <= -l(dx, -K dx) on sampled ellipsoid points
    A, B = hover_ab
    term = term_free
    A_K = A - B @ term.K
    Q = np.diag(cfg.q_diag)
    R = np.diag(cfg.r_diag)
    rng = np.random.default_rng(11)
    L = np.linalg.cholesky(term.P)
    z = rng.normal(size=(1000, 12))
    pts = np.linalg.solve(L.T, (z / np.linalg.norm(z, axis=1)[:, None]).T).T
    for dx in pts:
        vf_next = (A_K @ dx) @ term.P @ (A_K @ dx)
        vf = dx @ term.P @ dx
        stage = dx @ Q @ dx + (term.K @ dx) @ R @ (term.K @ dx)
        assert vf_next - vf <= -stage + 1e-6


def test_terminal_law_at_reference(term_free, params):
    u = term_free.law(hover_state(), hover_state())
    assert np.allclose(u, params.hover_input())


# ---------------------------------------------------------------- solve_ocp

def test_equilibrium_hover_is_optimal(params, cfg, term_free):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    sol = solve_ocp(hover_state(), hover_ref(cfg), model, HUGE_X, HUGE_U,
                    term_free, cfg)
    assert sol.status == STATUS_OPTIMAL
    assert sol.cost <= 1e-6
    assert np.max(np.abs(sol.u - params.hover_input())) < 1e-6
    assert np.array_equal(sol.x, model.rollout(hover_state(), sol.u))


def test_unconstrained_matches_lqr(hover_ab, params):
    A, B = hover_ab
    cfg = MpcConfig(horizon=40, tol=1e-10)
    gain, P = lqr_gain(A, B, np.diag(cfg.q_diag), np.diag(cfg.r_diag))
    term = TerminalIngredients(P=P, alpha=1e12, K=gain.K, u_ref=np.zeros(4))
    model = LinearDiscreteModel(A, B)
    rng = np.random.default_rng(3)
    for _ in range(3):
        dx0 = rng.uniform(-0.2, 0.2, 12)
        ref = np.zeros((cfg.horizon + 1, 12))
        sol = solve_ocp(dx0, ref, model, HUGE_X, HUGE_U, term, cfg)
        assert sol.status == STATUS_OPTIMAL
        assert np.max(np.abs(sol.u[0] - (-gain.K @ dx0))) < 1e-3


def test_reference_outside_box_saturates():
    A = 0.9 * np.eye(12)
    B = np.zeros((12, 4))
    B[:4, :4] = np.eye(4)
    model = LinearDiscreteModel(A, B)
    cfg = MpcConfig()
    X_S = Box.from_halfwidth(np.zeros(12), np.full(12, 10.0))
    X_S = Box(X_S.lo, np.concatenate([[0.3], X_S.hi[1:]]))
    ref = np.zeros((cfg.horizon + 1, 12))
    ref[:, 0] = 3.0
    P = np.eye(12)
    term = TerminalIngredients(P=P, alpha=1e9, K=np.zeros((4, 12)), u_ref=np.zeros(4))
    sol = solve_ocp(np.zeros(12), ref, model, X_S, HUGE_U, term, cfg)
    assert sol.status == STATUS_OPTIMAL
    assert sol.viol_state <= 1e-4
    assert np.max(sol.x[:, 0]) == pytest.approx(0.3, abs=2e-3)


def test_status_feasible_with_slack():
    A = 0.9 * np.eye(12)
    B = np.zeros((12, 4))
    B[:4, :4] = np.eye(4)
    model = LinearDiscreteModel(A, B)
    cfg = MpcConfig()
    X_S = Box.from_halfwidth(np.zeros(12), np.concatenate([[0.15], np.full(11, 1e3)]))
    ref = np.zeros((cfg.horizon + 1, 12))
    ref[:, 0] = 50.0
    term = TerminalIngredients(P=np.eye(12), alpha=1e12, K=np.zeros((4, 12)),
                               u_ref=np.zeros(4))
    sol = solve_ocp(np.zeros(12), ref, model, X_S, HUGE_U, term, cfg)
    assert sol.status == "feasible-with-slack"
    assert 1e-4 < sol.viol_state <= HARD_SLACK


def test_status_infeasible_hard(hover_ab):
    A, B = hover_ab
    model = LinearDiscreteModel(A, B)
    cfg = MpcConfig()
    X_S = Box.from_halfwidth(np.zeros(12), 1e-3)
    x0 = np.zeros(12)
    x0[0] = 1.0
    ref = np.zeros((cfg.horizon + 1, 12))
    term = TerminalIngredients(P=np.eye(12), alpha=1e12, K=np.zeros((4, 12)),
                               u_ref=np.zeros(4))
    sol = solve_ocp(x0, ref, model, X_S, HUGE_U, term, cfg)
    assert sol.status == STATUS_INFEASIBLE
    assert sol.viol_state > HARD_SLACK


def test_status_max_iter(params, term_free):
    cfg = MpcConfig(max_iter=2, tol=1e-14)
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    x0 = hover_state()
    x0[0] += 1.0
    x0[3] += 1.0
    sol = solve_ocp(x0, hover_ref(cfg), model, HUGE_X, HUGE_U, term_free, cfg)
    assert sol.status == STATUS_MAX_ITER
    assert sol.iterations == 2


def test_cost_sandwich(params, cfg, term_free):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    rng = np.random.default_rng(17)
    lam_min = np.min(cfg.q_diag)
    for _ in range(5):
        x0 = hover_state() + rng.uniform(-0.3, 0.3, 12)
        sol = solve_ocp(x0, hover_ref(cfg), model, HUGE_X, HUGE_U, term_free, cfg)
        dx = x0 - hover_state()
        assert sol.cost >= 0.5 * lam_min * float(dx @ dx) - 1e-12


def test_solution_mirror_symmetry(params, cfg, term_free):
    # flipping (x, vx, pitch, q) and the pitch torque is a dynamics symmetry
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    sx = np.ones(12)
    sx[[0, 3, 7, 10]] = -1.0
    su = np.ones(4)
    su[2] = -1.0
    x0 = hover_state()
    x0[[0, 3, 7, 10]] = [0.3, 0.4, 0.1, 0.5]
    sol_a = solve_ocp(x0, hover_ref(cfg), model, HUGE_X, HUGE_U, term_free, cfg)
    x0_m = hover_state() + sx * (x0 - hover_state())
    sol_b = solve_ocp(x0_m, hover_ref(cfg), model, HUGE_X, HUGE_U, term_free, cfg)
    assert np.max(np.abs(sol_b.u - su * sol_a.u)) < 1e-6
    assert sol_b.cost == pytest.approx(sol_a.cost, rel=1e-9)


def test_warm_start_shapes_and_clip(params, cfg, term_free):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    warm = np.tile(params.hover_input(), (cfg.horizon, 1))
    sol = solve_ocp(hover_state(), hover_ref(cfg), model, HUGE_X, HUGE_U,
                    term_free, cfg, warm=warm)
    assert sol.status == STATUS_OPTIMAL
    with pytest.raises(ValueError):
        solve_ocp(hover_state(), hover_ref(cfg), model, HUGE_X, HUGE_U,
                  term_free, cfg, warm=np.zeros((3, 4)))


# ---------------------------------------------------------------- tube law

def test_tube_control_zero_error(params, cfg, term_free):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    sol = solve_ocp(hover_state(), hover_ref(cfg), model, HUGE_X, HUGE_U,
                    term_free, cfg)
    gain = TubeGain(K=np.ones((4, 12)), bound=1.0)
    U = Box(np.array([0.0, -0.02, -0.02, -0.02]), np.array([0.4, 0.02, 0.02, 0.02]))
    u, sat = tube_control(sol, sol.x[0], gain, U)
    assert np.allclose(u, sol.u[0]) and not sat


def test_tube_control_feedback_and_saturation(params, cfg, term_free):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    sol = solve_ocp(hover_state(), hover_ref(cfg), model, HUGE_X, HUGE_U,
                    term_free, cfg)
    K = np.zeros((4, 12))
    K[0, 2] = 2.0
    gain = TubeGain(K=K, bound=2.0)
    U = Box(np.array([0.0, -0.02, -0.02, -0.02]), np.array([0.4, 0.02, 0.02, 0.02]))
    x = sol.x[0].copy()
    x[2] -= 0.01
    u, sat = tube_control(sol, x, gain, U)
    assert u[0] == pytest.approx(sol.u[0][0] + 2.0 * 0.01)
    assert not sat
    x[2] -= 10.0
    u, sat = tube_control(sol, x, gain, U)
    assert sat and u[0] == pytest.approx(0.4)


def test_tube_control_zero_gain_is_feedforward(params, cfg, term_free):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    sol = solve_ocp(hover_state(), hover_ref(cfg), model, HUGE_X, HUGE_U,
                    term_free, cfg)
    gain = TubeGain(K=np.zeros((4, 12)), bound=0.0)
    U = Box(np.array([0.0, -0.02, -0.02, -0.02]), np.array([0.4, 0.02, 0.02, 0.02]))
    u, sat = tube_control(sol, sol.x[0] + 0.5, gain, U)
    assert np.allclose(u, sol.u[0]) and not sat


# ---------------------------------------------------------------- warm shift

def test_shift_equilibrium_fixed_point(params, cfg, term_free):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    sol = solve_ocp(hover_state(), hover_ref(cfg), model, HUGE_X, HUGE_U,
                    term_free, cfg)
    shifted = shift_warm_start(sol, term_free, model, hover_state())
    assert shifted.shape == (cfg.horizon, 4)
    assert np.max(np.abs(shifted - params.hover_input())) < 1e-5


def test_shift_appends_terminal_law(params, cfg, term_free):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    x0 = hover_state()
    x0[0] += 0.2
    sol = solve_ocp(x0, hover_ref(cfg), model, HUGE_X, HUGE_U, term_free, cfg)
    shifted = shift_warm_start(sol, term_free, model, hover_state())
    assert np.allclose(shifted[:-1], sol.u[1:])
    assert np.allclose(shifted[-1], term_free.law(sol.x[-1], hover_state()))


# ---------------------------------------------------------------- disturbance sample

def test_realized_disturbance_nominal_plant(params):
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    x = hover_state()
    x[3:6] = [0.1, -0.2, 0.05]
    u = params.hover_input() + np.array([0.01, 1e-4, -1e-4, 1e-4])
    x_next, _ = plant_step(x, u, params, DT)
    w = realized_disturbance(x_next, x, u, model)
    assert np.max(np.abs(w)) < 1e-9


def test_realized_disturbance_constant_bias(params):
    bias = (0.3, -0.25, 0.35)
    plant = QuadParams(accel_bias=bias)
    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    x = hover_state()
    u = params.hover_input()
    x_next, _ = plant_step(x, u, plant, DT)
    w = realized_disturbance(x_next, x, u, model)
    assert np.allclose(w[3:6], DT * np.asarray(bias), atol=1e-6)
    assert np.max(np.abs(w[6:])) < 1e-9


def test_realized_disturbance_feeds_updates(params):
    from tubempc.sets import DisturbanceSet, update_bounds, update_center

    model = SindyDiscreteModel(params, ident.empty_model(), DT)
    x = hover_state()
    u = params.hover_input()
    wind = DrydenWind(DrydenParams(), seed=5)
    x_next, _ = plant_step(x, u, QuadParams(accel_bias=(0.3, -0.25, 0.35)), DT, wind)
    w = realized_disturbance(x_next, x, u, model)
    d = DisturbanceSet.initial()
    d = update_center(d, w)
    d = update_bounds(d, w)
    assert np.allclose(d.center, 0.1 * w)
