"""Closed-loop controller layer.

Two families share the OCP solver: measured-state MPC (the nominal and
network baselines) and tube MPC, which plans from an independently
propagated nominal state, applies error feedback around the plan, and can
learn a sparse residual model and resize its disturbance/tube sets online.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ident, kernels
from .quadsim import QuadParams
from .sets import (NX, NU, Box, DisturbanceSet, EmptySetError,
                   NonContractiveError, RpiSet, TubeGeometry, TUBE_Q, TUBE_R,
                   estimate_L_xi, learning_uncertainty, lqr_gain, tighten,
                   tighten_input, update_bounds, update_center)
from .mpc import (MpcConfig, SindyDiscreteModel, STATUS_INFEASIBLE,
                  ZERO_SLACK, hover_linearization, realized_disturbance,
                  shift_warm_start, solve_ocp, terminal_ingredients,
                  tube_control)


@dataclass(frozen=True)
class ControlSpaces:
    """Shared controller design data: physics model, boxes, solver config.

    The params are replaced by their nominal() counterpart so controllers
    never see plant-side bias or drag.
    """

    params: QuadParams
    X: Box
    U: Box
    cfg: MpcConfig
    hover_z: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "params", self.params.nominal())
        if self.X.is_empty or self.U.is_empty:
            raise EmptySetError("constraint boxes must be nonempty")

    @property
    def u_hover(self) -> np.ndarray:
        return self.params.hover_input()

    @property
    def x_hover(self) -> np.ndarray:
        x = np.zeros(NX)
        x[2] = self.hover_z
        return x


@dataclass(frozen=True)
class LearnConfig:
    """Online identification schedule and trust region.

    The lasso penalty selects the support; with debias on, coefficients are
    refit by least squares on that support so the shrinkage does not bias
    the physics terms. fit_window caps how many of the newest closed-loop
    rows each refit sees.
    """

    period: int = 50
    min_samples: int = 500
    dxi_max: float = 0.1
    h: float = 0.05
    debias: bool = True
    fit_window: int | None = None
    tol: float = 1e-6
    l_safety: float = 1.5
    l_sample_cap: int = 512

    def __post_init__(self):
        if self.period < 1 or self.min_samples < 3:
            raise ValueError("period must be >= 1 and min_samples >= 3")
        if self.dxi_max <= 0.0 or self.h <= 0.0:
            raise ValueError("dxi_max and h must be positive")


@dataclass
class StepInfo:
    """Per-step controller diagnostics emitted alongside the input."""

    nominal: np.ndarray
    plan_next: np.ndarray
    u_plan: np.ndarray
    cost: float
    status: str
    iterations: int
    solve_time: float
    s: np.ndarray
    delta: np.ndarray
    model_version: int
    saturated: bool
    warm_feasible: bool


@dataclass
class ObserveInfo:
    """Post-transition diagnostics: realized disturbance and set/model events."""

    w: np.ndarray
    contained: float
    learn_event: bool
    dxi: float
    cons_event: bool
    tube_reset: bool


def _hover_pair(spaces: ControlSpaces):
    X = np.repeat(spaces.x_hover[None, :], 2, axis=0)
    U = spaces.u_hover[None, :]
    return X, U


class NominalMpcController:
    """Tracking MPC solved from the measured state, no tube machinery."""

    has_tube = False

    def __init__(self, name: str, spaces: ControlSpaces, model):
        self.name = name
        self.spaces = spaces
        self.model = model
        self.X_S = spaces.X
        self.U_S = spaces.U
        A0, B0 = hover_linearization(spaces.params, spaces.cfg.dt, spaces.hover_z)
        self._riccati = lqr_gain(A0, B0, np.diag(spaces.cfg.q_diag),
                                 np.diag(spaces.cfg.r_diag))
        self.term = terminal_ingredients(A0, B0, spaces.cfg, self.X_S, self.U_S,
                                         spaces.u_hover, riccati=self._riccati)
        self.sol = None

    # -- run protocol -----------------------------------------------------

    def reset(self, x0):
        self.sol = None

    def model_version(self) -> int:
        inner = getattr(self.model, "model", None)
        return int(getattr(inner, "version", getattr(self.model, "version", 0)))

    def _shifted_warm(self, x0, ref_win):
        """Shift last plan one stage and audit it against the current problem."""
        if self.sol is None:
            return None, True
        if not np.all(np.isfinite(self.sol.u)):
            return None, False
        warm = shift_warm_start(self.sol, self.term, self.model, ref_win[-1])
        warm = np.clip(warm, self.U_S.lo, self.U_S.hi)
        X = self.model.rollout(np.asarray(x0, float), warm)
        # audit box feasibility only: a terminal-ellipsoid miss is repaired
        # by the solve through the soft hinge, not a feasibility failure
        _, _, viol, _ = kernels.ocp_cost(
            X, warm, np.asarray(ref_win, float), self.term.u_ref,
            self.spaces.cfg.q_diag, self.spaces.cfg.r_diag, self.term.P,
            self.term.alpha, self.X_S.lo, self.X_S.hi, 1.0, 1.0)
        ok = viol <= ZERO_SLACK
        return warm, bool(ok)

    def _plan_start(self, x):
        return np.asarray(x, dtype=np.float64)

    def step(self, k: int, x, ref_win):
        x0 = self._plan_start(x)
        warm, warm_ok = self._shifted_warm(x0, ref_win)
        sol = solve_ocp(x0, ref_win, self.model, self.X_S, self.U_S, self.term,
                        self.spaces.cfg, warm=warm)
        self.sol = sol
        u, sat = self._apply(sol, np.asarray(x, float))
        info = StepInfo(nominal=sol.x[0].copy(), plan_next=sol.x[1].copy(),
                        u_plan=sol.u[0].copy(),
                        cost=sol.cost, status=sol.status,
                        iterations=sol.iterations, solve_time=sol.solve_time,
                        s=self._tube_halfwidths(), delta=self._set_halfwidths(),
                        model_version=self.model_version(), saturated=sat,
                        warm_feasible=warm_ok)
        return u, info

    def _apply(self, sol, x):
        u = np.clip(sol.u[0], self.spaces.U.lo, self.spaces.U.hi)
        return u, bool(np.any(u != sol.u[0]))

    def _tube_halfwidths(self):
        return np.zeros(NX)

    def _set_halfwidths(self):
        return np.full(NX, np.nan)

    def observe(self, k: int, x, u, x_next) -> ObserveInfo:
        w = realized_disturbance(x_next, x, u, self.model)
        return ObserveInfo(w=w, contained=np.nan, learn_event=False, dxi=0.0,
                           cons_event=False, tube_reset=False)


class TubeMpcController(NominalMpcController):
    """Tube MPC: nominal-state planning plus ancillary error feedback.

    With learning=None and adapt_sets=False this is the fixed-tube robust
    controller; enabling both gives the adaptive scheme (periodic sparse
    refits with a trust-region coefficient step, then disturbance-set,
    learning-uncertainty, and tube updates every step).
    """

    has_tube = True

    def __init__(self, name: str, spaces: ControlSpaces, model: SindyDiscreteModel,
                 D: DisturbanceSet, *, learning: LearnConfig | None = None,
                 adapt_sets: bool = False, pretrain: ident.Dataset | None = None,
                 rho_target: float = 0.5):
        self.name = name
        self.spaces = spaces
        self.model = model
        self.learned = model.model
        self.D = D
        self.learning = learning
        self.adapt_sets = adapt_sets
        self._rho_target = rho_target

        A0, B0 = hover_linearization(spaces.params, spaces.cfg.dt, spaces.hover_z)
        self.gain, _ = lqr_gain(A0, B0, TUBE_Q, TUBE_R)
        self._riccati = lqr_gain(A0, B0, np.diag(spaces.cfg.q_diag),
                                 np.diag(spaces.cfg.r_diag))
        self.geometry = self._build_geometry()
        self.Uxi = Box.from_halfwidth(np.zeros(NX), 0.0)
        # startup tightening must leave room; EmptySetError propagates
        self.S = self.geometry.cross_section(self.D, self.Uxi)
        self.X_S = tighten(spaces.X, self.S)
        self.U_S = tighten_input(spaces.U, self.gain, self.S)
        self.term = terminal_ingredients(None, None, spaces.cfg, self.X_S,
                                         self.U_S, spaces.u_hover,
                                         riccati=self._riccati)

        self._pretrain = pretrain
        self._pre_piece = None
        self._xs: list = []
        self._us: list = []
        self.L_xi = 0.0
        self.xhat = None
        self._plan_next = None
        self.sol = None

    def _build_geometry(self) -> TubeGeometry:
        X, U = _hover_pair(self.spaces)
        A, B = self.model.horizon_jac(X, U)
        return TubeGeometry(A[0] - B[0] @ self.gain.K, rho_target=self._rho_target)

    # -- run protocol -----------------------------------------------------

    def reset(self, x0):
        self.sol = None
        self.xhat = np.asarray(x0, dtype=np.float64).copy()
        self._plan_next = None

    def _plan_start(self, x):
        if self.xhat is None:
            self.xhat = np.asarray(x, dtype=np.float64).copy()
        return self.xhat

    def _apply(self, sol, x):
        return tube_control(sol, x, self.gain, self.spaces.U)

    def _tube_halfwidths(self):
        return self.S.s.copy()

    def _set_halfwidths(self):
        return self.D.delta.copy()

    def step(self, k: int, x, ref_win):
        u, info = super().step(k, x, ref_win)
        self._plan_next = info.plan_next
        return u, info

    def observe(self, k: int, x, u, x_next) -> ObserveInfo:
        x_next = np.asarray(x_next, dtype=np.float64)
        w = realized_disturbance(x_next, x, u, self.model)
        contained = 1.0 if self.D.as_box().contains(w) else 0.0

        learn_event = False
        dxi = 0.0
        cons_event = False
        if self.learning is not None:
            self._xs.append(np.asarray(x, float).copy())
            self._us.append(np.asarray(u, float).copy())
            n_raw = len(self._xs) + (0 if self._pretrain is None else len(self._pretrain))
            if (k + 1) % self.learning.period == 0 and n_raw >= self.learning.min_samples:
                learn_event, dxi, cons_event = self._try_refit()

        if self.adapt_sets:
            self.D = update_center(self.D, w)
            self.D = update_bounds(self.D, w)
            if not self._retighten():
                cons_event = True

        # propagate the tube center; fall back to the plant when the error
        # leaves the cross-section so the ancillary loop stays certified
        tube_reset = False
        xh = x_next.copy() if self._plan_next is None else self._plan_next.copy()
        if np.any(np.abs(x_next - xh) > self.S.s + 1e-12):
            xh = x_next.copy()
            tube_reset = True
        self.xhat = xh
        return ObserveInfo(w=w, contained=contained, learn_event=learn_event,
                           dxi=dxi, cons_event=cons_event, tube_reset=tube_reset)

    # -- learning ---------------------------------------------------------

    def _residual_piece(self, seg: ident.Dataset):
        d = ident.zoh_align(seg)
        p = self.spaces.params.to_vector()
        resid = np.empty_like(d.derivs)
        out = np.empty(NX)
        for i in range(len(d)):
            kernels.quad_rhs(d.states[i], d.inputs[i], p, out)
            resid[i] = d.derivs[i] - out
        return d.states, d.inputs, resid

    def _fit_dataset(self) -> ident.Dataset | None:
        pieces = []
        if self._pretrain is not None and len(self._pretrain) >= 3:
            if self._pre_piece is None:
                self._pre_piece = self._residual_piece(self._pretrain)
            pieces.append(self._pre_piece)
        if len(self._xs) >= 3:
            lo = 0
            if self.learning is not None and self.learning.fit_window is not None:
                lo = max(0, len(self._xs) - self.learning.fit_window)
            seg = ident.Dataset(np.array(self._xs[lo:]), np.array(self._us[lo:]),
                                dt=self.spaces.cfg.dt)
            pieces.append(self._residual_piece(seg))
        if not pieces:
            return None
        pooled = ident.Dataset(
            states=np.concatenate([p[0] for p in pieces]),
            inputs=np.concatenate([p[1] for p in pieces]),
            derivs=np.concatenate([p[2] for p in pieces]),
            dt=self.spaces.cfg.dt)
        return ident.preprocess(pooled)

    def _try_refit(self):
        data = self._fit_dataset()
        if data is None or len(data) < 3:
            return False, 0.0, False
        spec = ident.maybe_expand(ident.base_library(), len(data))
        # cover every term the current model uses so nothing is dropped when
        # old and new coefficients are laid out side by side
        missing = tuple(t for t in self.learned.spec.terms
                        if spec.index_of(t) < 0)
        if missing:
            spec = ident.LibrarySpec(terms=spec.terms + missing,
                                     expanded=spec.expanded)
        fitted = ident.fit(data, spec, h=self.learning.h, warm=self.learned,
                           tol=self.learning.tol)
        if self.learning.debias:
            fitted = debias_fit(fitted, data)
        xi_old = _embed(self.learned, spec)
        xi_new = _embed(fitted, spec)
        clipped, dxi = ident.clip_update(xi_old, xi_new, self.learning.dxi_max)
        keep = np.any(clipped != 0.0, axis=1)
        keep[0] = True
        pruned = ident.LibrarySpec(
            terms=tuple(t for t, kp in zip(spec.terms, keep) if kp),
            expanded=spec.expanded)
        self.learned = ident.LearnedModel(spec=pruned, xi=clipped[keep],
                                          version=self.learned.version + 1,
                                          h=self.learning.h)
        self.model = SindyDiscreteModel(self.spaces.params, self.learned,
                                        self.spaces.cfg.dt)
        cons_event = False
        try:
            self.geometry = self._build_geometry()
        except NonContractiveError:
            # keep the previous certified geometry rather than lose the tube
            cons_event = True
        stride = max(1, len(self._xs) // self.learning.l_sample_cap)
        sample = list(zip(self._xs[::stride], self._us[::stride]))
        if not sample:
            sample = [(self.spaces.x_hover, self.spaces.u_hover)]
        self.L_xi = estimate_L_xi(self.learned, sample,
                                  safety=self.learning.l_safety)
        # coefficient error enters the discrete step through dt
        self.Uxi = learning_uncertainty(self.L_xi * self.spaces.cfg.dt, dxi)
        return True, dxi, cons_event

    def _retighten(self) -> bool:
        """Recompute tube and tightenings; keep the old ones when they collapse."""
        try:
            S = self.geometry.cross_section(self.D, self.Uxi)
            X_S = tighten(self.spaces.X, S)
            U_S = tighten_input(self.spaces.U, self.gain, S)
            term = terminal_ingredients(None, None, self.spaces.cfg, X_S, U_S,
                                        self.spaces.u_hover,
                                        riccati=self._riccati)
        except ValueError:
            return False
        self.S, self.X_S, self.U_S, self.term = S, X_S, U_S, term
        return True


def debias_fit(model: ident.LearnedModel, data: ident.Dataset,
               rcond: float = 1e-6, effect_frac: float = 0.02,
               effect_floor: float = 1e-4) -> ident.LearnedModel:
    """Thresholded least-squares refit on the lasso support, per dimension.

    Removes the l1 shrinkage from the selected coefficients.  A plain
    normal-equations solve is unsafe here: near-collinear library columns
    (a sine next to its polynomial shadow) admit huge cancelling coefficient
    pairs.  Columns are scaled to unit rms and the solve truncates small
    singular values, then terms whose effect size (coefficient times column
    rms) stays below a fraction of the target's rms are dropped and the
    solve repeats until the support is stable.
    """
    if data.derivs is None:
        raise ValueError("dataset has no derivative targets")
    Phi = ident.build_library(model.spec, data)
    scale = np.sqrt(np.mean(Phi * Phi, axis=0))
    scale[scale < 1e-12] = 1.0
    xi = np.zeros_like(model.xi)
    for dim in range(NX):
        idx = np.flatnonzero(model.xi[:, dim])
        if idx.size == 0:
            continue
        y = data.derivs[:, dim]
        tol = max(effect_floor, effect_frac * float(np.sqrt(np.mean(y * y))))
        for _ in range(20):
            A = Phi[:, idx] / scale[idx]
            sol, *_ = np.linalg.lstsq(A, y, rcond=rcond)
            small = np.abs(sol) < tol
            if not small.any():
                break
            idx = idx[~small]
            sol = sol[~small]
            if idx.size == 0:
                break
        if idx.size:
            xi[idx, dim] = sol / scale[idx]
    return ident.LearnedModel(spec=model.spec, xi=xi, version=model.version,
                              h=model.h)


def _embed(model: ident.LearnedModel, spec: ident.LibrarySpec) -> np.ndarray:
    """Coefficients of the model laid out on the rows of a covering spec."""
    xi = np.zeros((len(spec), NX))
    for i, t in enumerate(spec.terms):
        j = model.spec.index_of(t)
        if j >= 0:
            xi[i] = model.xi[j]
    return xi


def adaptive_controller(spaces: ControlSpaces, D0: DisturbanceSet,
                        learning: LearnConfig | None = None,
                        model0: ident.LearnedModel | None = None,
                        pretrain: ident.Dataset | None = None,
                        name: str = "proposed") -> TubeMpcController:
    """Tube MPC with online sparse-residual learning and set adaptation."""
    if learning is None:
        learning = LearnConfig()
    model = SindyDiscreteModel(spaces.params,
                               model0 if model0 is not None else ident.empty_model(),
                               spaces.cfg.dt)
    return TubeMpcController(name, spaces, model, D0, learning=learning,
                             adapt_sets=True, pretrain=pretrain)
