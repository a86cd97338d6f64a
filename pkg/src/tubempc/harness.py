"""Experiment harness: reference trajectories, the closed-loop runner with
full per-step logging, tracking metrics, CSV persistence, exploration-data
pretraining, and the benchmark orchestration."""

import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import ident, kernels
from .quadsim import QuadParams, DrydenParams, DrydenWind, plant_step
from .sets import (NX, NU, Box, DisturbanceSet, TUBE_Q, TUBE_R,
                   DELTA_MAX_DEFAULT, lipschitz_cost, lqr_gain)
from .mpc import MpcConfig, STATUS_INFEASIBLE, STATUS_MAX_ITER, STATUS_SLACK, hover_linearization
from .controllers import ControlSpaces, LearnConfig, adaptive_controller
from .baselines import (FT_DELTA_DEFAULT, MlpModel, TrainConfig, ft_mpc_controller,
                        mlp_train, nn_mpc_controller, pid_controller,
                        smpc_controller)


# ------------------------------------------------------------ trajectories

TRAJECTORY_KINDS = ("hover", "helical", "spline", "lemniscate")
GRAVITY = QuadParams().gravity


@dataclass(frozen=True)
class TrajectoryRef:
    """Analytic reference path, scaled and lifted to the flight volume.

    Positions are scale * raw(t) + offset with t clamped to the window;
    velocity, acceleration and jerk are exact derivatives (zero outside the
    window).  Attitude and body-rate rows come from the acceleration and
    jerk through the small-tilt force map, so the full reference state is
    one the vehicle can actually fly; a zero-attitude reference would park
    the terminal set at an unreachable state whenever the path needs
    lateral acceleration.
    """

    kind: str
    scale: float = 0.25
    offset: tuple = (0.0, 0.0, 2.0)
    t0: float = 0.0
    t1: float = 10.0

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; "
                             f"choose from {TRAJECTORY_KINDS}")

    def _raw(self, t: float):
        if self.kind == "hover":
            z = np.zeros(3)
            return z, z, z, z
        if self.kind == "helical":
            p = np.array([t, np.sin(t) + 0.1 * np.sin(3 * t), np.cos(2 * t)])
            v = np.array([1.0, np.cos(t) + 0.3 * np.cos(3 * t), -2.0 * np.sin(2 * t)])
            a = np.array([0.0, -np.sin(t) - 0.9 * np.sin(3 * t), -4.0 * np.cos(2 * t)])
            j = np.array([0.0, -np.cos(t) - 2.7 * np.cos(3 * t), 8.0 * np.sin(2 * t)])
            return p, v, a, j
        if self.kind == "spline":
            p = np.array([2.0 * np.sin(t), 2.0 * np.cos(2 * t), 0.5 * t])
            v = np.array([2.0 * np.cos(t), -4.0 * np.sin(2 * t), 0.5])
            a = np.array([-2.0 * np.sin(t), -8.0 * np.cos(2 * t), 0.0])
            j = np.array([-2.0 * np.cos(t), 16.0 * np.sin(2 * t), 0.0])
            return p, v, a, j
        p = np.array([np.sin(t) * np.cos(t), np.sin(t) ** 2, np.sin(t) * np.cos(t)])
        v = np.array([np.cos(2 * t), np.sin(2 * t), np.cos(2 * t)])
        a = np.array([-2.0 * np.sin(2 * t), 2.0 * np.cos(2 * t), -2.0 * np.sin(2 * t)])
        j = np.array([-4.0 * np.cos(2 * t), -4.0 * np.sin(2 * t), -4.0 * np.cos(2 * t)])
        return p, v, a, j

    def position(self, t: float) -> np.ndarray:
        tc = min(max(t, self.t0), self.t1)
        p, _, _, _ = self._raw(tc)
        return self.scale * p + np.asarray(self.offset, dtype=np.float64)

    def velocity(self, t: float) -> np.ndarray:
        if t < self.t0 or t > self.t1:
            return np.zeros(3)
        _, v, _, _ = self._raw(t)
        return self.scale * v

    def acceleration(self, t: float) -> np.ndarray:
        if t < self.t0 or t > self.t1:
            return np.zeros(3)
        _, _, a, _ = self._raw(t)
        return self.scale * a

    def jerk(self, t: float) -> np.ndarray:
        if t < self.t0 or t > self.t1:
            return np.zeros(3)
        _, _, _, j = self._raw(t)
        return self.scale * j

    def state(self, t: float) -> np.ndarray:
        x = np.zeros(NX)
        x[0:3] = self.position(t)
        x[3:6] = self.velocity(t)
        a = self.acceleration(t)
        j = self.jerk(t)
        # small-tilt inversion at yaw 0: ax = (u1/m) sin(theta), ay = -(u1/m)
        # sin(phi) cos(theta), u1/m = g + az to first order
        f = GRAVITY + a[2]
        x[6] = -a[1] / f
        x[7] = a[0] / f
        x[9] = -j[1] / f + a[1] * j[2] / f ** 2
        x[10] = j[0] / f - a[0] * j[2] / f ** 2
        return x

    def window(self, t: float, n: int, dt: float) -> np.ndarray:
        """Reference states at t, t+dt, ..., t+n*dt (an OCP horizon)."""
        return np.stack([self.state(t + j * dt) for j in range(n + 1)])


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of a benchmark run or sweep."""

    controller: str = "proposed"
    trajectory: str = "helical"
    seeds: tuple = (0,)
    duration: float = 10.0
    dt: float = 0.01
    horizon: int = 15
    burn_in: float = 2.0
    # learning schedule
    t_learn: int = 50
    n_min: int = 500
    dxi_max: float = 0.1
    h_lasso: float = 0.05
    fit_window: int = 800
    # disturbance-set adaptation
    lam: float = 0.9
    gamma: float = 0.95
    kappa: float = 4.0
    per_component: bool = True
    delta_max: float = DELTA_MAX_DEFAULT
    # plant mismatch and wind
    accel_bias: tuple = (0.30, -0.25, 0.35)
    drag_v: float = 0.40
    drag_w: float = 0.015
    wind: float = 1.0
    wind_sigma: tuple = (0.09, 0.09, 0.045)
    wind_tau: tuple = (1.2, 1.2, 0.8)
    # geometry of the task
    scale: float = 0.25
    paper_raw: bool = False
    # pretraining
    pretrain: bool = True
    pretrain_samples: int = 10000
    pretrain_seed: int = 12345
    mlp_epochs: int = 10000

    def __post_init__(self):
        if self.controller not in CONTROLLER_NAMES + ("all",):
            raise ValueError(f"config field 'controller': unknown value "
                             f"{self.controller!r}; choose from "
                             f"{CONTROLLER_NAMES + ('all',)}")
        if self.trajectory not in TRAJECTORY_KINDS + ("all",):
            raise ValueError(f"config field 'trajectory': unknown value "
                             f"{self.trajectory!r}")
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("config fields 'duration' and 'dt' must be positive")
        object.__setattr__(self, "seeds", tuple(int(s) for s in (
            self.seeds if hasattr(self.seeds, "__iter__") else (self.seeds,))))


CONTROLLER_NAMES = ("proposed", "smpc", "ft-mpc", "nn-mpc", "pid")
BENCH_TRAJECTORIES = ("helical", "spline", "lemniscate")

_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "1": True, "0": False}


def _parse_value(name: str, text: str, kind):
    text = text.strip()
    try:
        if kind is bool:
            return _BOOL_WORDS[text.lower()]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if kind is tuple:
            if not text:
                return ()
            return tuple(float(v) for v in text.replace(",", " ").split())
    except (ValueError, KeyError):
        pass
    raise ValueError(f"config field {name!r}: cannot parse {text!r}")


def config_from_mapping(values: dict) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    kw = {}
    for key, val in values.items():
        if key not in known:
            raise ValueError(f"unknown config field {key!r}")
        f = next(f for f in fields(ExperimentConfig) if f.name == key)
        kind = type(f.default)
        kw[key] = _parse_value(key, str(val), kind)
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    """Flat `key: value` file, # comments allowed."""
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise ValueError(f"{path}:{ln}: expected 'field: value'")
            key, val = line.split(":", 1)
            values[key.strip()] = val.strip()
    return config_from_mapping(values)


def flight_boxes(paper_raw: bool = False):
    """State/input boxes sized to the scaled (or raw) reference envelope."""
    if paper_raw:
        x_lo = np.array([-1.35, -2.35, 0.9, -3.0, -3.0, -3.0,
                         -0.6, -0.6, -0.6, -12.0, -12.0, -12.0])
        x_hi = np.array([11.35, 2.35, 8.1, 3.0, 3.0, 3.0,
                         0.6, 0.6, 0.6, 12.0, 12.0, 12.0])
    else:
        x_lo = np.array([-1.35, -1.35, 0.9, -2.0, -2.0, -2.5,
                         -0.6, -0.6, -0.6, -12.0, -12.0, -12.0])
        x_hi = np.array([3.35, 1.35, 4.1, 2.0, 2.0, 2.5,
                         0.6, 0.6, 0.6, 12.0, 12.0, 12.0])
    u_lo = np.array([0.0, -0.02, -0.02, -0.02])
    u_hi = np.array([0.4, 0.02, 0.02, 0.02])
    return Box(x_lo, x_hi), Box(u_lo, u_hi)


def make_spaces(cfg: ExperimentConfig) -> ControlSpaces:
    X, U = flight_boxes(cfg.paper_raw)
    return ControlSpaces(params=QuadParams(), X=X, U=U,
                         cfg=MpcConfig(horizon=cfg.horizon, dt=cfg.dt))


def true_plant(cfg: ExperimentConfig) -> QuadParams:
    return QuadParams(accel_bias=tuple(cfg.accel_bias), drag_v=cfg.drag_v,
                      drag_w=cfg.drag_w)


def make_trajectory(kind: str, cfg: ExperimentConfig) -> TrajectoryRef:
    scale = 1.0 if cfg.paper_raw else cfg.scale
    # keep the reference smooth through the last planning window; clamping
    # inside a horizon is a velocity step no controller can track
    t_end = cfg.duration + cfg.horizon * cfg.dt
    return TrajectoryRef(kind=kind, scale=scale, t1=t_end)


def make_wind(cfg: ExperimentConfig, traj_kind: str, seed: int) -> DrydenWind | None:
    if cfg.wind <= 0.0:
        return None
    sigma = tuple(cfg.wind * s for s in cfg.wind_sigma)
    params = DrydenParams(sigma=sigma, tau=tuple(cfg.wind_tau),
                          ceiling=cfg.delta_max / cfg.dt)
    return DrydenWind(params=params, dt=cfg.dt,
                      seed=7919 * seed + TRAJECTORY_KINDS.index(traj_kind))


# ------------------------------------------------------------ run logging

class SimulationError(RuntimeError):
    pass


_FLOAT_BLOCKS = (("x", NX), ("x_nom", NX), ("ref", NX), ("u", NU),
                 ("u_plan", NU), ("w", NX), ("s", NX), ("delta", NX))
_FLAGS = ("viol_x", "viol_u", "saturated", "warm_feasible", "learn_event",
          "cons_event", "tube_reset")


@dataclass
class RunLog:
    """Complete per-step record of one closed-loop run."""

    controller: str
    trajectory: str
    seed: int
    dt: float
    burn_in: float
    delta_cap: float
    t: np.ndarray
    x: np.ndarray
    x_nom: np.ndarray
    ref: np.ndarray
    u: np.ndarray
    u_plan: np.ndarray
    w: np.ndarray
    cost: np.ndarray
    status: list
    iterations: np.ndarray
    solve_time: np.ndarray
    s: np.ndarray
    delta: np.ndarray
    model_version: np.ndarray
    contained: np.ndarray
    viol_x: np.ndarray
    viol_u: np.ndarray
    saturated: np.ndarray
    warm_feasible: np.ndarray
    learn_event: np.ndarray
    cons_event: np.ndarray
    tube_reset: np.ndarray

    def __len__(self):
        return self.t.size


def run_closed_loop(controller, traj: TrajectoryRef, plant: QuadParams,
                    wind: DrydenWind | None, duration: float, dt: float,
                    X: Box, U: Box, burn_in: float = 2.0, seed: int = 0,
                    delta_cap: float = DELTA_MAX_DEFAULT) -> RunLog:
    """Simulate one run; solver exceptions are re-raised with the step index."""
    n_steps = int(round(duration / dt))
    horizon = controller.spaces.cfg.horizon if hasattr(controller, "spaces") else 15
    x = traj.state(0.0)
    controller.reset(x)

    cols = {name: np.empty((n_steps, width)) for name, width in _FLOAT_BLOCKS}
    t_arr = np.empty(n_steps)
    cost = np.empty(n_steps)
    iters = np.empty(n_steps, dtype=np.int64)
    solve_t = np.empty(n_steps)
    version = np.empty(n_steps, dtype=np.int64)
    contained = np.empty(n_steps)
    flags = {name: np.zeros(n_steps, dtype=bool) for name in _FLAGS}
    status = []

    for k in range(n_steps):
        t = k * dt
        ref_win = traj.window(t, horizon, dt)
        try:
            u, info = controller.step(k, x, ref_win)
            x_next, _ = plant_step(x, u, plant, dt, wind=wind)
            obs = controller.observe(k, x, u, x_next)
        except Exception as exc:
            raise SimulationError(f"step {k} (t={t:.2f}s): {type(exc).__name__}: {exc}") from exc
        t_arr[k] = t
        cols["x"][k] = x
        cols["x_nom"][k] = info.nominal
        cols["ref"][k] = ref_win[0]
        cols["u"][k] = u
        cols["u_plan"][k] = info.u_plan
        cols["w"][k] = obs.w
        cols["s"][k] = info.s
        cols["delta"][k] = info.delta
        cost[k] = info.cost
        status.append(info.status)
        iters[k] = info.iterations
        solve_t[k] = info.solve_time
        version[k] = info.model_version
        contained[k] = obs.contained
        flags["viol_x"][k] = not X.contains(x, tol=1e-9)
        flags["viol_u"][k] = not U.contains(u, tol=1e-9)
        flags["saturated"][k] = info.saturated
        flags["warm_feasible"][k] = info.warm_feasible
        flags["learn_event"][k] = obs.learn_event
        flags["cons_event"][k] = obs.cons_event
        flags["tube_reset"][k] = obs.tube_reset
        x = x_next

    return RunLog(controller=controller.name, trajectory=traj.kind, seed=seed,
                  dt=dt, burn_in=burn_in, delta_cap=delta_cap, t=t_arr,
                  x=cols["x"], x_nom=cols["x_nom"], ref=cols["ref"],
                  u=cols["u"], u_plan=cols["u_plan"], w=cols["w"], cost=cost,
                  status=status, iterations=iters, solve_time=solve_t,
                  s=cols["s"], delta=cols["delta"], model_version=version,
                  contained=contained, **flags)


def save_runlog(log: RunLog, path):
    """Full-precision CSV; reading it back reproduces every value exactly."""
    head = [f"# tubempc-runlog v1",
            f"# controller {log.controller}",
            f"# trajectory {log.trajectory}",
            f"# seed {log.seed}",
            f"# dt {log.dt!r}",
            f"# burn_in {log.burn_in!r}",
            f"# delta_cap {log.delta_cap!r}"]
    names = ["t"]
    for base, width in _FLOAT_BLOCKS:
        names += [f"{base}{i}" for i in range(width)]
    names += ["cost", "status", "iterations", "solve_time", "model_version",
              "contained"] + list(_FLAGS)
    lines = head + [",".join(names)]
    f = lambda v: "%.17g" % v
    for k in range(len(log)):
        row = [f(log.t[k])]
        for base, width in _FLOAT_BLOCKS:
            row += [f(v) for v in getattr(log, base)[k]]
        row += [f(log.cost[k]), log.status[k], str(int(log.iterations[k])),
                f(log.solve_time[k]), str(int(log.model_version[k])),
                f(log.contained[k])]
        row += [str(int(getattr(log, name)[k])) for name in _FLAGS]
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_runlog(path) -> RunLog:
    meta = {}
    rows = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                parts = line[2:].split(" ", 1)
                if len(parts) == 2:
                    meta[parts[0]] = parts[1]
                continue
            if not line:
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append(line.split(","))
    if header is None:
        raise ValueError(f"{path}: no header row")
    n = len(rows)
    idx = {name: i for i, name in enumerate(header)}

    def fcol(name):
        return np.array([float(r[idx[name]]) for r in rows])

    def fblock(base, width):
        return np.array([[float(r[idx[f"{base}{i}"]]) for i in range(width)]
                         for r in rows])

    blocks = {base: fblock(base, width) for base, width in _FLOAT_BLOCKS}
    flags = {name: np.array([r[idx[name]] == "1" for r in rows]) for name in _FLAGS}
    return RunLog(controller=meta.get("controller", "?"),
                  trajectory=meta.get("trajectory", "?"),
                  seed=int(meta.get("seed", 0)), dt=float(meta.get("dt", 0.01)),
                  burn_in=float(meta.get("burn_in", 2.0)),
                  delta_cap=float(meta.get("delta_cap", DELTA_MAX_DEFAULT)),
                  t=fcol("t"), x=blocks["x"], x_nom=blocks["x_nom"],
                  ref=blocks["ref"], u=blocks["u"], u_plan=blocks["u_plan"],
                  w=blocks["w"], cost=fcol("cost"),
                  status=[r[idx["status"]] for r in rows],
                  iterations=fcol("iterations").astype(np.int64),
                  solve_time=fcol("solve_time"), s=blocks["s"],
                  delta=blocks["delta"],
                  model_version=fcol("model_version").astype(np.int64),
                  contained=fcol("contained"), **flags)


# ------------------------------------------------------------ metrics

@dataclass
class MetricsReport:
    controller: str
    trajectory: str
    seed: int
    rmse_pos: float
    rmse_att: float
    max_alt_err: float
    solve_avg_ms: float
    solve_max_ms: float
    solve_per_iter_ms: float
    n_infeasible_hard: int
    n_slack: int
    n_max_iter: int
    containment: float
    delta_cap_ok: bool
    iss_frac: float
    cons_events: int
    tube_resets: int
    warm_feasible_frac: float
    n_steps: int

    HEADER = ("controller,trajectory,seed,rmse_pos,rmse_att,max_alt_err,"
              "solve_avg_ms,solve_max_ms,solve_per_iter_ms,n_infeasible_hard,"
              "n_slack,n_max_iter,containment,delta_cap_ok,iss_frac,"
              "cons_events,tube_resets,warm_feasible_frac,n_steps")

    def row(self) -> str:
        vals = [self.controller, self.trajectory, str(self.seed)]
        for v in (self.rmse_pos, self.rmse_att, self.max_alt_err,
                  self.solve_avg_ms, self.solve_max_ms, self.solve_per_iter_ms):
            vals.append("%.17g" % v)
        vals += [str(self.n_infeasible_hard), str(self.n_slack),
                 str(self.n_max_iter), "%.17g" % self.containment,
                 str(int(self.delta_cap_ok)), "%.17g" % self.iss_frac,
                 str(self.cons_events), str(self.tube_resets),
                 "%.17g" % self.warm_feasible_frac, str(self.n_steps)]
        return ",".join(vals)


def _tube_gain_bound(spaces: ControlSpaces) -> float:
    A0, B0 = hover_linearization(spaces.params, spaces.cfg.dt, spaces.hover_z)
    gain, _ = lqr_gain(A0, B0, TUBE_Q, TUBE_R)
    return gain.bound


def compute_metrics(log: RunLog, spaces: ControlSpaces | None = None) -> MetricsReport:
    """Tracking/solver/set statistics; the burn-in window is excluded from
    tracking, containment, and descent accounting."""
    mask = log.t >= log.burn_in
    if not np.any(mask):
        raise ValueError("burn-in leaves no samples to score")
    perr = np.linalg.norm(log.x[:, 0:3] - log.ref[:, 0:3], axis=1)
    aerr = np.linalg.norm(log.x[:, 6:9] - log.ref[:, 6:9], axis=1)
    rmse_pos = float(np.sqrt(np.mean(perr[mask] ** 2)))
    rmse_att = float(np.sqrt(np.mean(aerr[mask] ** 2)))
    max_alt = float(np.max(np.abs(log.x[:, 2] - log.ref[:, 2])[mask]))

    st = np.asarray(log.status)
    solver = st != "none"
    sm = mask & solver
    if np.any(sm):
        ms = log.solve_time[sm] * 1e3
        it = np.maximum(log.iterations[sm], 1)
        solve_avg, solve_max = float(ms.mean()), float(ms.max())
        per_iter = float(np.mean(ms / it))
    else:
        solve_avg = solve_max = per_iter = float("nan")

    contained = log.contained[mask]
    containment = float(np.nanmean(contained)) if np.any(np.isfinite(contained)) else float("nan")
    del_ok = bool(np.all(np.isnan(log.delta)) or
                  np.nanmax(log.delta) <= log.delta_cap + 1e-12)

    iss_frac = float("nan")
    if spaces is not None and np.any(log.s > 0.0) and np.all(np.isfinite(log.cost)):
        q = spaces.cfg.q_diag
        r = spaces.cfg.r_diag
        u_ref = spaces.u_hover
        L_x, L_u = lipschitz_cost(np.diag(q), np.diag(r), spaces.X, spaces.U,
                                  spaces.X.center, u_ref)
        k_bound = _tube_gain_bound(spaces)
        dx = log.x_nom - log.ref
        du = log.u_plan - u_ref
        stage = np.einsum("ki,i,ki->k", dx, q, dx) + np.einsum("ki,i,ki->k", du, r, du)
        s_norm = np.linalg.norm(log.s, axis=1)
        dV = log.cost[1:] - log.cost[:-1]
        margin = (L_x + L_u * k_bound) * s_norm[:-1]
        ok_rows = mask[:-1] & mask[1:]
        viol = dV[ok_rows] > -stage[:-1][ok_rows] + margin[ok_rows] + 1e-9
        iss_frac = float(np.mean(viol)) if viol.size else float("nan")

    return MetricsReport(
        controller=log.controller, trajectory=log.trajectory, seed=log.seed,
        rmse_pos=rmse_pos, rmse_att=rmse_att, max_alt_err=max_alt,
        solve_avg_ms=solve_avg, solve_max_ms=solve_max,
        solve_per_iter_ms=per_iter,
        n_infeasible_hard=int(np.sum(st == STATUS_INFEASIBLE)),
        n_slack=int(np.sum(st == STATUS_SLACK)),
        n_max_iter=int(np.sum(st == STATUS_MAX_ITER)),
        containment=containment, delta_cap_ok=del_ok, iss_frac=iss_frac,
        cons_events=int(np.sum(log.cons_event)),
        tube_resets=int(np.sum(log.tube_reset)),
        warm_feasible_frac=float(np.mean(log.warm_feasible[mask])),
        n_steps=len(log))


def save_metrics(reports, path):
    lines = [MetricsReport.HEADER] + [r.row() for r in reports]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------ pretraining

def exploration_segments(plant: QuadParams, n_samples: int = 10000,
                         seed: int = 12345, dt: float = 0.01,
                         seg_len: int = 640):
    """Gentle seeded exploration flights: hover-gain tracking of random
    Lissajous references with smooth low-amplitude input dither."""
    nominal = plant.nominal()
    A0, B0 = hover_linearization(nominal, dt)
    gain, _ = lqr_gain(A0, B0, TUBE_Q, TUBE_R)
    K = gain.K
    uh = nominal.hover_input()
    _, U = flight_boxes()
    rng = np.random.default_rng(seed)
    segments = []
    made = 0
    while made < n_samples:
        steps = min(seg_len, n_samples - made)
        if steps < 3:
            break
        ph = rng.uniform(0.0, 2 * np.pi, 3)
        om = rng.uniform(0.5, 1.2, 3)
        amp = rng.uniform(0.3, 0.6, 3)
        amp[2] *= 0.5
        dph = rng.uniform(0.0, 2 * np.pi, 4)
        dom = rng.uniform(2.0, 6.0, 4)

        def ref(t):
            r = np.zeros(NX)
            arg = om * t + ph
            r[0:3] = amp * np.sin(arg)
            r[2] += 2.0
            r[3:6] = amp * om * np.cos(arg)
            return r

        x = ref(0.0).copy()
        Xs = np.empty((steps, NX))
        Us = np.empty((steps, NU))
        for k in range(steps):
            t = k * dt
            dith = np.array([3e-3, 2e-4, 2e-4, 1e-4]) * np.sin(dom * t + dph)
            u = np.clip(uh - K @ (x - ref(t)) + dith, U.lo, U.hi)
            Xs[k] = x
            Us[k] = u
            x, _ = plant_step(x, u, plant, dt)
        segments.append(ident.Dataset(Xs, Us, dt=dt))
        made += steps
    return segments


def residual_pieces(segments, nominal: QuadParams):
    """Differentiate each contiguous segment and subtract the physics prior."""
    p = nominal.to_vector()
    out = np.empty(NX)
    Xa, Ua, Ra = [], [], []
    for seg in segments:
        if len(seg) < 3:
            continue
        d = ident.zoh_align(seg)
        resid = np.empty_like(d.derivs)
        for i in range(len(d)):
            kernels.quad_rhs(d.states[i], d.inputs[i], p, out)
            resid[i] = d.derivs[i] - out
        Xa.append(d.states)
        Ua.append(d.inputs)
        Ra.append(resid)
    if not Xa:
        raise ValueError("no segment long enough to differentiate")
    return ident.Dataset(states=np.concatenate(Xa), inputs=np.concatenate(Ua),
                         derivs=np.concatenate(Ra), dt=segments[0].dt)


def pretrain_residual(segments, nominal: QuadParams, h: float = 0.05,
                      selection_rows: int = 5000, tol: float = 1e-6) -> ident.LearnedModel:
    """Offline sparse fit: lasso support on a subsample, least-squares refit
    of the selected coefficients on all rows."""
    from .controllers import debias_fit
    data = ident.preprocess(residual_pieces(segments, nominal))
    stride = max(1, len(data) // selection_rows)
    sub = ident.Dataset(data.states[::stride], data.inputs[::stride],
                        derivs=data.derivs[::stride], dt=data.dt)
    model = ident.fit(sub, ident.affine_library(), h=h, tol=tol)
    return debias_fit(model, data)


def one_step_pairs(segments):
    X = np.concatenate([s.states[:-1] for s in segments])
    U = np.concatenate([s.inputs[:-1] for s in segments])
    Y = np.concatenate([s.states[1:] for s in segments])
    return X, U, Y


def pretrain_network(segments, seed: int = 12345, max_epochs: int = 2000,
                     holdout: int = 2000):
    """Train the surrogate on one-step pairs; returns (net, holdout RMSE)."""
    X, U, Y = one_step_pairs(segments)
    if len(X) <= holdout + 2:
        holdout = max(1, len(X) // 5)
    Xt, Ut, Yt = X[:-holdout], U[:-holdout], Y[:-holdout]
    net = mlp_train((Xt, Ut, Yt), TrainConfig(seed=seed, max_epochs=max_epochs))
    Xh, Uh, Yh = X[-holdout:], U[-holdout:], Y[-holdout:]
    pred = np.empty_like(Yh)
    for i in range(len(Xh)):
        pred[i] = kernels.mlp_step(Xh[i], Uh[i], net.W1, net.b1, net.W2,
                                   net.b2, net.W3, net.b3, net.mu_in,
                                   net.sd_in, net.mu_out, net.sd_out)
    rmse = float(np.sqrt(np.mean((pred - Yh) ** 2)))
    return net, rmse


@dataclass
class Pretrained:
    sindy: ident.LearnedModel | None = None
    net: MlpModel | None = None
    net_rmse: float = float("nan")


def pretrain(cfg: ExperimentConfig, need_sindy: bool = True,
             need_net: bool = True) -> Pretrained:
    segments = exploration_segments(true_plant(cfg), cfg.pretrain_samples,
                                    cfg.pretrain_seed, cfg.dt)
    pre = Pretrained()
    if need_sindy and cfg.pretrain:
        pre.sindy = pretrain_residual(segments, QuadParams(), h=cfg.h_lasso)
    if need_net:
        pre.net, pre.net_rmse = pretrain_network(segments, cfg.pretrain_seed,
                                                 cfg.mlp_epochs)
    return pre


# ------------------------------------------------------------ benchmark

def initial_disturbance_set(cfg: ExperimentConfig) -> DisturbanceSet:
    # start at half the fixed-tube envelope: generous enough to hold the
    # pre-learning residual, small enough that the startup tightening does
    # not choke the input budget before the first adaptation shrinks it
    return DisturbanceSet(center=np.zeros(NX), delta=0.5 * FT_DELTA_DEFAULT,
                          delta_max=cfg.delta_max, lam=cfg.lam, gamma=cfg.gamma,
                          kappa=cfg.kappa, per_component=cfg.per_component)


def make_controller(name: str, spaces: ControlSpaces, cfg: ExperimentConfig,
                    pre: Pretrained | None = None):
    if name == "proposed":
        learn = LearnConfig(period=cfg.t_learn, min_samples=cfg.n_min,
                            dxi_max=cfg.dxi_max, h=cfg.h_lasso,
                            fit_window=cfg.fit_window)
        model0 = pre.sindy if (pre is not None and cfg.pretrain) else None
        return adaptive_controller(spaces, initial_disturbance_set(cfg),
                                   learning=learn, model0=model0)
    if name == "smpc":
        return smpc_controller(spaces)
    if name == "ft-mpc":
        return ft_mpc_controller(spaces, delta_max=cfg.delta_max)
    if name == "nn-mpc":
        if pre is None or pre.net is None:
            raise ValueError("nn-mpc needs a pretrained network")
        return nn_mpc_controller(pre.net, spaces)
    if name == "pid":
        return pid_controller(spaces)
    raise ValueError(f"unknown controller {name!r}")


def run_one(name: str, traj_kind: str, seed: int, cfg: ExperimentConfig,
            spaces: ControlSpaces | None = None,
            pre: Pretrained | None = None) -> RunLog:
    if spaces is None:
        spaces = make_spaces(cfg)
    traj = make_trajectory(traj_kind, cfg)
    wind = make_wind(cfg, traj_kind, seed)
    ctrl = make_controller(name, spaces, cfg, pre)
    return run_closed_loop(ctrl, traj, true_plant(cfg), wind, cfg.duration,
                           cfg.dt, spaces.X, spaces.U, burn_in=cfg.burn_in,
                           seed=seed, delta_cap=cfg.delta_max)


def bench(cfg: ExperimentConfig, out_dir=None, save_logs: bool = False,
          plots: bool = False, progress=None):
    """Run the controller x trajectory x seed grid; returns (logs, reports)."""
    controllers = CONTROLLER_NAMES if cfg.controller == "all" else (cfg.controller,)
    trajectories = BENCH_TRAJECTORIES if cfg.trajectory == "all" else (cfg.trajectory,)
    spaces = make_spaces(cfg)
    need_net = "nn-mpc" in controllers
    need_sindy = cfg.pretrain and "proposed" in controllers
    pre = pretrain(cfg, need_sindy, need_net) if (need_net or need_sindy) else None
    logs, reports = [], []
    for name in controllers:
        for traj_kind in trajectories:
            for seed in cfg.seeds:
                t0 = time.perf_counter()
                log = run_one(name, traj_kind, seed, cfg, spaces, pre)
                wall = time.perf_counter() - t0
                logs.append(log)
                reports.append(compute_metrics(log, spaces))
                if progress is not None:
                    progress(f"{name} {traj_kind} seed={seed}: "
                             f"rmse={reports[-1].rmse_pos:.4f} wall={wall:.1f}s")
                if out_dir is not None and save_logs:
                    save_runlog(log, os.path.join(
                        out_dir, f"run_{name}_{traj_kind}_{seed}.csv"))
                if out_dir is not None and plots:
                    plot_run(log, os.path.join(
                        out_dir, f"run_{name}_{traj_kind}_{seed}"))
    if out_dir is not None:
        save_metrics(reports, os.path.join(out_dir, "metrics.csv"))
        if pre is not None and pre.net is not None:
            from .baselines import save_mlp
            save_mlp(pre.net, os.path.join(out_dir, "pretrained_net.model"))
        if pre is not None and pre.sindy is not None:
            ident.save_model(pre.sindy, os.path.join(out_dir, "pretrained_residual.model"))
    return logs, reports


def metrics_table(reports) -> str:
    """Seed-averaged text table, one row per (controller, trajectory)."""
    keys = []
    for r in reports:
        k = (r.controller, r.trajectory)
        if k not in keys:
            keys.append(k)
    rows = [("controller", "trajectory", "rmse_pos", "rmse_att",
             "solve_ms", "containment", "hard")]
    for (name, traj) in keys:
        grp = [r for r in reports if (r.controller, r.trajectory) == (name, traj)]
        rmse = np.mean([r.rmse_pos for r in grp])
        att = np.mean([r.rmse_att for r in grp])
        ms = np.nanmean([r.solve_avg_ms for r in grp])
        cont = np.nanmean([r.containment for r in grp])
        hard = sum(r.n_infeasible_hard for r in grp)
        rows.append((name, traj, f"{rmse:.4f}", f"{att:.4f}",
                     f"{ms:.3f}" if np.isfinite(ms) else "-",
                     f"{cont:.3f}" if np.isfinite(cont) else "-", str(hard)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths))
                     for row in rows)


def plot_run(log: RunLog, prefix):
    """Vector-graphic diagnostics; imported lazily so headless runs stay light."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig = plt.figure(figsize=(7, 6))
    ax = fig.add_subplot(projection="3d")
    ax.plot(*log.ref[:, 0:3].T, "k--", lw=1, label="reference")
    ax.plot(*log.x[:, 0:3].T, lw=1, label=log.controller)
    ax.set_xlabel("x [m]"); ax.set_ylabel("y [m]"); ax.set_zlabel("z [m]")
    ax.legend()
    fig.savefig(f"{prefix}_traj3d.svg")
    plt.close(fig)

    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 6))
    for i, lab in enumerate("xyz"):
        axes[i].plot(log.t, log.ref[:, i], "k--", lw=1)
        axes[i].plot(log.t, log.x[:, i], lw=1)
        axes[i].set_ylabel(lab + " [m]")
    axes[-1].set_xlabel("t [s]")
    fig.savefig(f"{prefix}_tracking.svg")
    plt.close(fig)

    fig, axes = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    axes[0].plot(log.t, log.u[:, 0], lw=1)
    axes[0].set_ylabel("thrust [N]")
    for i in range(1, 4):
        axes[1].plot(log.t, log.u[:, i], lw=1)
    axes[1].set_ylabel("torques [N m]")
    axes[1].set_xlabel("t [s]")
    fig.savefig(f"{prefix}_inputs.svg")
    plt.close(fig)

    if np.any(log.s > 0):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        for i, lab in ((0, "x"), (3, "vx"), (2, "z"), (5, "vz")):
            ax.plot(log.t, log.s[:, i], lw=1, label=f"s[{lab}]")
        ax.set_xlabel("t [s]"); ax.set_ylabel("tube half-width")
        ax.legend()
        fig.savefig(f"{prefix}_tube.svg")
        plt.close(fig)
