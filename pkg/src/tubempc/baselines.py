"""Benchmark controllers: cascaded PID, nominal MPC on the physics prior,
fixed-tube robust MPC, and MPC over a trained network surrogate."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import ident, kernels
from .quadsim import QuadParams
from .sets import NX, NU, Box, DisturbanceSet
from .mpc import SindyDiscreteModel
from .controllers import (ControlSpaces, NominalMpcController, ObserveInfo,
                          StepInfo, TubeMpcController)


# ----------------------------------------------------------------- PID

def _v(x):
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class PidGains:
    """Cascade gains; outer = (position, attitude), inner = (velocity, rate)."""

    outer_kp: np.ndarray = field(default_factory=lambda: _v([4.0, 4.0, 6.0, 150.0, 150.0, 80.0]))
    outer_ki: np.ndarray = field(default_factory=lambda: _v([0.5, 0.5, 1.0, 20.0, 20.0, 10.0]))
    outer_kd: np.ndarray = field(default_factory=lambda: _v([0.8, 0.8, 1.2, 2.0, 2.0, 1.5]))
    inner_kp: np.ndarray = field(default_factory=lambda: _v([20.0, 20.0, 15.0, 30.0, 30.0, 25.0]))
    inner_ki: np.ndarray = field(default_factory=lambda: _v([5.0, 5.0, 3.0, 5.0, 5.0, 4.0]))
    inner_kd: np.ndarray = field(default_factory=lambda: _v([2.0, 2.0, 1.5, 0.5, 0.5, 0.3]))
    tilt_max: float = 0.5


@dataclass
class PidState:
    """Integral accumulators and previous errors for both cascade levels."""

    int_outer: np.ndarray
    int_inner: np.ndarray
    prev_outer: np.ndarray
    prev_inner: np.ndarray

    @classmethod
    def zeros(cls) -> "PidState":
        return cls(np.zeros(6), np.zeros(6), np.zeros(6), np.zeros(6))


def pid_raw(kp, ki, kd, e, integral, e_prev, dt):
    """One textbook PID evaluation; the integral includes the current error."""
    integral = integral + np.asarray(e, float) * dt
    out = kp * e + ki * integral + kd * (e - e_prev) / dt
    return out, integral


def pid_step(g: PidGains, st: PidState, x, ref, dt: float,
             params: QuadParams, U: Box):
    """Position/attitude cascade to (thrust, torques), clipped to U.

    Outer position PID sets velocity targets (plus reference feedforward),
    the velocity PID sets accelerations that map to thrust and small-angle
    tilt targets, and the attitude/rate PIDs produce body torques.
    Integrators on a saturated path are frozen for the step.
    """
    x = _v(x)
    ref = _v(ref)
    m = params.mass
    grav = params.gravity
    J = _v(params.inertia)

    e_pos = ref[0:3] - x[0:3]
    v_cmd, int_pos = pid_raw(g.outer_kp[:3], g.outer_ki[:3], g.outer_kd[:3],
                             e_pos, st.int_outer[:3], st.prev_outer[:3], dt)
    e_vel = v_cmd + ref[3:6] - x[3:6]
    a_cmd, int_vel = pid_raw(g.inner_kp[:3], g.inner_ki[:3], g.inner_kd[:3],
                             e_vel, st.int_inner[:3], st.prev_inner[:3], dt)

    thrust = m * (grav + a_cmd[2])
    theta_des = a_cmd[0] / grav
    phi_des = -a_cmd[1] / grav
    tilt_sat_x = abs(theta_des) > g.tilt_max
    tilt_sat_y = abs(phi_des) > g.tilt_max
    theta_des = float(np.clip(theta_des, -g.tilt_max, g.tilt_max))
    phi_des = float(np.clip(phi_des, -g.tilt_max, g.tilt_max))

    e_att = np.array([phi_des, theta_des, ref[8]]) - x[6:9]
    r_cmd, int_att = pid_raw(g.outer_kp[3:], g.outer_ki[3:], g.outer_kd[3:],
                             e_att, st.int_outer[3:], st.prev_outer[3:], dt)
    e_rate = r_cmd + ref[9:12] - x[9:12]
    alpha_cmd, int_rate = pid_raw(g.inner_kp[3:], g.inner_ki[3:], g.inner_kd[3:],
                                  e_rate, st.int_inner[3:], st.prev_inner[3:], dt)

    u_raw = np.concatenate(([thrust], J * alpha_cmd))
    u = np.clip(u_raw, U.lo, U.hi)
    clipped = u != u_raw

    # anti-windup: freeze the integrators feeding a saturated channel
    if clipped[0]:
        int_pos[2] = st.int_outer[2]
        int_vel[2] = st.int_inner[2]
    if tilt_sat_x:
        int_pos[0] = st.int_outer[0]
        int_vel[0] = st.int_inner[0]
    if tilt_sat_y:
        int_pos[1] = st.int_outer[1]
        int_vel[1] = st.int_inner[1]
    for axis in range(3):
        if clipped[1 + axis]:
            int_att[axis] = st.int_outer[3 + axis]
            int_rate[axis] = st.int_inner[3 + axis]

    new_st = PidState(int_outer=np.concatenate((int_pos, int_att)),
                      int_inner=np.concatenate((int_vel, int_rate)),
                      prev_outer=np.concatenate((e_pos, e_att)),
                      prev_inner=np.concatenate((e_vel, e_rate)))
    return u, new_st


class PidController:
    """Run-protocol wrapper around the PID cascade."""

    has_tube = False

    def __init__(self, spaces: ControlSpaces, gains: PidGains | None = None):
        self.name = "pid"
        self.spaces = spaces
        self.gains = gains if gains is not None else PidGains()
        self.state = PidState.zeros()
        self._model = SindyDiscreteModel(spaces.params, ident.empty_model(),
                                         spaces.cfg.dt)

    def reset(self, x0):
        self.state = PidState.zeros()

    def step(self, k: int, x, ref_win):
        t0 = time.perf_counter()
        u, self.state = pid_step(self.gains, self.state, x, ref_win[0],
                                 self.spaces.cfg.dt, self.spaces.params,
                                 self.spaces.U)
        elapsed = time.perf_counter() - t0
        sat = bool(np.any(u <= self.spaces.U.lo) or np.any(u >= self.spaces.U.hi))
        x = _v(x)
        info = StepInfo(nominal=x.copy(), plan_next=x.copy(), u_plan=u.copy(),
                        cost=np.nan, status="none", iterations=0,
                        solve_time=elapsed,
                        s=np.zeros(NX), delta=np.full(NX, np.nan),
                        model_version=0, saturated=sat, warm_feasible=True)
        return u, info

    def observe(self, k: int, x, u, x_next) -> ObserveInfo:
        w = _v(x_next) - self._model.step(_v(x), _v(u))
        return ObserveInfo(w=w, contained=np.nan, learn_event=False, dxi=0.0,
                           cons_event=False, tube_reset=False)


# ----------------------------------------------------------------- MLP

H1 = 64
H2 = 32
NIN = NX + NU


@dataclass
class MlpModel:
    """Two-hidden-layer ReLU one-step predictor with fixed normalization."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    mu_in: np.ndarray
    sd_in: np.ndarray
    mu_out: np.ndarray
    sd_out: np.ndarray

    def arrays(self):
        return (self.W1, self.b1, self.W2, self.b2, self.W3, self.b3,
                self.mu_in, self.sd_in, self.mu_out, self.sd_out)


def default_normalization(params: QuadParams, hover_z: float = 2.0):
    """Center on hover, 0.1 spread on every channel."""
    x = np.zeros(NX)
    x[2] = hover_z
    mu_in = np.concatenate((x, params.hover_input()))
    return mu_in, np.full(NIN, 0.1), x.copy(), np.full(NX, 0.1)


def mlp_init(rng: np.random.Generator, params: QuadParams | None = None,
             h1: int = H1, h2: int = H2, hover_z: float = 2.0) -> MlpModel:
    if params is None:
        params = QuadParams()
    mu_in, sd_in, mu_out, sd_out = default_normalization(params, hover_z)
    W1 = rng.normal(0.0, np.sqrt(2.0 / NIN), (h1, NIN))
    W2 = rng.normal(0.0, np.sqrt(2.0 / h1), (h2, h1))
    W3 = rng.normal(0.0, np.sqrt(2.0 / h2), (NX, h2))
    return MlpModel(W1, np.zeros(h1), W2, np.zeros(h2), W3, np.zeros(NX),
                    mu_in, sd_in, mu_out, sd_out)


def mlp_forward(net: MlpModel, x, u) -> np.ndarray:
    return kernels.mlp_step(_v(x), _v(u), *net.arrays())


def _normalize_data(net: MlpModel, X, U, Y):
    Z = (np.hstack((X, U)) - net.mu_in) / net.sd_in
    Yn = (np.asarray(Y, float) - net.mu_out) / net.sd_out
    return Z, Yn


def _forward_batch(net: MlpModel, Z):
    A1 = Z @ net.W1.T + net.b1
    H1a = np.maximum(A1, 0.0)
    A2 = H1a @ net.W2.T + net.b2
    H2a = np.maximum(A2, 0.0)
    out = H2a @ net.W3.T + net.b3
    return out, H1a, H2a


def mlp_loss_grad(net: MlpModel, Z, Yn):
    """Mean-squared loss in normalized units with exact backprop gradients."""
    out, H1a, H2a = _forward_batch(net, Z)
    R = out - Yn
    n = R.size
    loss = float(np.sum(R * R) / n)
    G = (2.0 / n) * R
    dW3 = G.T @ H2a
    db3 = G.sum(axis=0)
    G2 = (G @ net.W3) * (H2a > 0.0)
    dW2 = G2.T @ H1a
    db2 = G2.sum(axis=0)
    G1 = (G2 @ net.W2) * (H1a > 0.0)
    dW1 = G1.T @ Z
    db1 = G1.sum(axis=0)
    return loss, (dW1, db1, dW2, db2, dW3, db3)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 256
    max_epochs: int = 2000
    val_tol: float = 1e-7
    val_frac: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def mlp_train(data, cfg: TrainConfig = TrainConfig(), net: MlpModel | None = None,
              return_history: bool = False):
    """Adam on one-step transitions (X, U, X_next); stops early when the
    held-out normalized MSE clears cfg.val_tol. Non-finite loss is an error."""
    X, U, Y = (np.asarray(a, dtype=np.float64) for a in data)
    if not (len(X) == len(U) == len(Y)) or len(X) < 2:
        raise ValueError("need matching (X, U, X_next) rows, at least 2")
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = mlp_init(rng)
        # standardize on the training data itself; the fixed hover spread
        # leaves slow channels orders of magnitude off scale
        Zraw = np.hstack((X, U))
        net.mu_in = Zraw.mean(axis=0)
        net.sd_in = np.maximum(Zraw.std(axis=0), 1e-6)
        net.mu_out = Y.mean(axis=0)
        net.sd_out = np.maximum(Y.std(axis=0), 1e-6)
    Z, Yn = _normalize_data(net, X, U, Y)
    n = len(Z)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_frac * n)))
    val, tr = perm[:n_val], perm[n_val:]
    if len(tr) == 0:
        tr = perm
    Zt, Yt = Z[tr], Yn[tr]
    Zv, Yv = Z[val], Yn[val]

    names = ("W1", "b1", "W2", "b2", "W3", "b3")
    mom = [np.zeros_like(getattr(net, p)) for p in names]
    vel = [np.zeros_like(getattr(net, p)) for p in names]
    t = 0
    history = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(Zt))
        ep_loss = 0.0
        nb = 0
        for lo in range(0, len(Zt), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            loss, grads = mlp_loss_grad(net, Zt[idx], Yt[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"training loss became non-finite at epoch {epoch}")
            ep_loss += loss
            nb += 1
            t += 1
            for i, p in enumerate(names):
                gi = grads[i]
                mom[i] = cfg.beta1 * mom[i] + (1.0 - cfg.beta1) * gi
                vel[i] = cfg.beta2 * vel[i] + (1.0 - cfg.beta2) * gi * gi
                mhat = mom[i] / (1.0 - cfg.beta1 ** t)
                vhat = vel[i] / (1.0 - cfg.beta2 ** t)
                setattr(net, p, getattr(net, p) - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps))
        out_v, _, _ = _forward_batch(net, Zv)
        val_loss = float(np.mean((out_v - Yv) ** 2))
        if not np.isfinite(val_loss):
            raise FloatingPointError(f"validation loss became non-finite at epoch {epoch}")
        history.append((ep_loss / max(nb, 1), val_loss))
        if val_loss < cfg.val_tol:
            break
    if return_history:
        return net, np.asarray(history)
    return net


def mlp_gradient_check(seed: int = 0, n: int = 8, h1: int = 6, h2: int = 5,
                       fd_step: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences.

    Small net, seeded data redrawn until every ReLU preactivation is clear
    of its kink, so the finite-difference stencil stays on one linear piece.
    """
    rng = np.random.default_rng(seed)
    net = mlp_init(rng, h1=h1, h2=h2)
    net.mu_in = np.zeros(NIN)
    net.sd_in = np.ones(NIN)
    net.mu_out = np.zeros(NX)
    net.sd_out = np.ones(NX)
    for _ in range(200):
        Z = rng.normal(0.0, 1.0, (n, NIN))
        Yn = rng.normal(0.0, 1.0, (n, NX))
        A1 = Z @ net.W1.T + net.b1
        A2 = np.maximum(A1, 0.0) @ net.W2.T + net.b2
        if min(np.min(np.abs(A1)), np.min(np.abs(A2))) > 1e-3:
            break
    _, grads = mlp_loss_grad(net, Z, Yn)
    names = ("W1", "b1", "W2", "b2", "W3", "b3")
    worst = 0.0
    for i, p in enumerate(names):
        arr = getattr(net, p)
        flat = arr.ravel()
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + fd_step
            lp, _ = mlp_loss_grad(net, Z, Yn)
            flat[j] = keep - fd_step
            lm, _ = mlp_loss_grad(net, Z, Yn)
            flat[j] = keep
            fd = (lp - lm) / (2.0 * fd_step)
            ga = grads[i].ravel()[j]
            rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst


def save_mlp(net: MlpModel, path):
    lines = [ident.MODEL_MAGIC, "kind mlp",
             f"shape {NIN} {net.W1.shape[0]} {net.W2.shape[0]} {NX}"]

    def fmt(a):
        return " ".join("%.17g" % v for v in np.asarray(a).ravel())

    for tag in ("mu_in", "sd_in", "mu_out", "sd_out", "b1", "b2", "b3"):
        lines.append(f"vec {tag} {fmt(getattr(net, tag))}")
    for tag in ("W1", "W2", "W3"):
        M = getattr(net, tag)
        lines.append(f"mat {tag} {M.shape[0]} {M.shape[1]}")
        for r in range(M.shape[0]):
            lines.append("row " + fmt(M[r]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mlp(path) -> MlpModel:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != ident.MODEL_MAGIC:
        raise ValueError(f"{path}: not a tubempc model file")
    if lines[1] != "kind mlp":
        raise ValueError(f"{path}: not a network model file")
    vecs = {}
    mats = {}
    i = 2
    while i < len(lines):
        parts = lines[i].split()
        if parts[0] == "shape":
            i += 1
        elif parts[0] == "vec":
            vecs[parts[1]] = np.array([float(v) for v in parts[2:]])
            i += 1
        elif parts[0] == "mat":
            tag, r, c = parts[1], int(parts[2]), int(parts[3])
            rows = [np.array([float(v) for v in lines[i + 1 + k].split()[1:]])
                    for k in range(r)]
            M = np.vstack(rows)
            if M.shape != (r, c):
                raise ValueError(f"{path}: bad matrix block {tag}")
            mats[tag] = M
            i += 1 + r
        else:
            raise ValueError(f"{path}: unknown record {parts[0]!r}")
    try:
        return MlpModel(W1=mats["W1"], b1=vecs["b1"], W2=mats["W2"], b2=vecs["b2"],
                        W3=mats["W3"], b3=vecs["b3"], mu_in=vecs["mu_in"],
                        sd_in=vecs["sd_in"], mu_out=vecs["mu_out"],
                        sd_out=vecs["sd_out"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing record {exc}") from exc


class MlpDiscreteModel:
    """Network one-step map exposed through the solver's model protocol."""

    version = 0

    def __init__(self, net: MlpModel):
        self.net = net
        self._a = tuple(np.ascontiguousarray(a, dtype=np.float64)
                        for a in net.arrays())

    def step(self, x, u) -> np.ndarray:
        return kernels.mlp_step(_v(x), _v(u), *self._a)

    def rollout(self, x0, U) -> np.ndarray:
        return kernels.mlp_rollout(_v(x0), np.asarray(U, float), *self._a)

    def horizon_jac(self, X, U):
        return kernels.mlp_horizon_jac(np.asarray(X, float),
                                       np.asarray(U, float), *self._a)


# ------------------------------------------------------- controller factories

# pre-learning residual envelope sized to hold ~95 percent of realized
# disturbances under the benchmark wind and model mismatch
FT_DELTA_DEFAULT = np.array([1.5e-4, 1.5e-4, 1.5e-4,
                             6.5e-3, 6.5e-3, 3.3e-3,
                             1.5e-4, 1.5e-4, 1.5e-4,
                             3e-4, 3e-4, 3e-4])


def smpc_controller(spaces: ControlSpaces) -> NominalMpcController:
    """Tracking MPC on the physics prior alone, measured state, no tube."""
    model = SindyDiscreteModel(spaces.params, ident.empty_model(), spaces.cfg.dt)
    return NominalMpcController("smpc", spaces, model)


def ft_mpc_controller(spaces: ControlSpaces, delta=None,
                      delta_max: float = 0.1) -> TubeMpcController:
    """Tube MPC with a fixed disturbance box: the tube is computed once at
    startup and never adapted; learning stays off."""
    if delta is None:
        delta = FT_DELTA_DEFAULT
    D = DisturbanceSet(center=np.zeros(NX), delta=np.asarray(delta, float),
                       delta_max=delta_max)
    model = SindyDiscreteModel(spaces.params, ident.empty_model(), spaces.cfg.dt)
    return TubeMpcController("ft-mpc", spaces, model, D,
                             learning=None, adapt_sets=False)


def nn_mpc_controller(net: MlpModel, spaces: ControlSpaces) -> NominalMpcController:
    """Tracking MPC over the trained network surrogate, measured state."""
    return NominalMpcController("nn-mpc", spaces, MlpDiscreteModel(net))


def pid_controller(spaces: ControlSpaces,
                   gains: PidGains | None = None) -> PidController:
    return PidController(spaces, gains)
