"""Finite-horizon tracking MPC over the learned discrete model.

Single-shooting transcription solved by Gauss-Newton SQP with analytic
chain-rule Jacobians through the integrator, box projection on inputs and
quadratic slack penalties on state and terminal constraints.  The applied
control adds tube feedback on top of the nominal plan and saturates to the
untightened input box only as a guard.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ident, kernels
from .quadsim import QuadParams
from .sets import Box, TubeGain, lqr_gain

NX = 12
NU = 4

STATUS_OPTIMAL = "optimal"
STATUS_MAX_ITER = "max-iter"
STATUS_SLACK = "feasible-with-slack"
STATUS_INFEASIBLE = "infeasible-hard"

# Slack classification: state-box excursions below ZERO_SLACK count as
# satisfied, above HARD_SLACK the step is flagged infeasible-hard (the plan
# leaves the operating envelope).  The terminal-set excess is a stability
# ingredient, not a safety limit: it is enforced softly and only separates
# optimal from feasible-with-slack, judged relative to the set size.
ZERO_SLACK = 1e-4
HARD_SLACK = 5e-2
TERM_TOL = 1e-3

DEFAULT_Q = np.array([10.0, 10.0, 10.0, 5.0, 5.0, 5.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
DEFAULT_R = np.array([0.1, 0.1, 0.1, 0.1])


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 15
    q_diag: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    r_diag: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())
    dt: float = 0.01
    tol: float = 1e-4
    max_iter: int = 100
    # Box violations are penalized hard; the terminal-set excess gets a
    # moderate dimensionless weight (hinge on the relative excess) because
    # the terminal cost x'Px already pulls the same direction and a huge
    # hinge weight wrecks the Hessian conditioning.
    slack_weight: float = 1e5
    term_weight: float = 5.0

    def __post_init__(self):
        q = np.asarray(self.q_diag, dtype=np.float64)
        r = np.asarray(self.r_diag, dtype=np.float64)
        object.__setattr__(self, "q_diag", q)
        object.__setattr__(self, "r_diag", r)
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if np.any(q < 0.0) or np.any(r <= 0.0):
            raise ValueError("need Q >= 0 and R > 0")


@dataclass(frozen=True)
class TerminalIngredients:
    P: np.ndarray
    alpha: float
    K: np.ndarray
    u_ref: np.ndarray

    def law(self, x, x_ref) -> np.ndarray:
        """Terminal controller u = u_ref - K (x - x_ref)."""
        return self.u_ref - self.K @ (np.asarray(x) - np.asarray(x_ref))

    def membership(self, x, x_ref) -> float:
        dx = np.asarray(x) - np.asarray(x_ref)
        return float(dx @ self.P @ dx)


@dataclass
class MpcSolution:
    u: np.ndarray
    x: np.ndarray
    cost: float
    status: str
    iterations: int
    solve_time: float
    viol_state: float
    viol_terminal: float
    grad_norm: float
    step_norm: float


class SindyDiscreteModel:
    """Physics prior plus sparse residual, integrated with RK4."""

    def __init__(self, params: QuadParams, model: ident.LearnedModel, dt: float):
        self.params = params.nominal()
        self.model = model
        self.dt = float(dt)
        self._p = self.params.to_vector()
        self._terms = model.term_array()
        self._xi = model.xi

    def step(self, x, u) -> np.ndarray:
        return kernels.sindy_step(np.asarray(x, float), np.asarray(u, float),
                                  self.dt, self._p, self._terms, self._xi)

    def rollout(self, x0, U) -> np.ndarray:
        return kernels.sindy_rollout(np.asarray(x0, float), U, self.dt,
                                     self._p, self._terms, self._xi)

    def horizon_jac(self, X, U):
        return kernels.sindy_horizon_jac(X, U, self.dt, self._p, self._terms, self._xi)


class LinearDiscreteModel:
    """Fixed (A, B) map, mainly for solver verification."""

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)

    def step(self, x, u) -> np.ndarray:
        return self.A @ x + self.B @ u

    def rollout(self, x0, U) -> np.ndarray:
        X = np.empty((U.shape[0] + 1, self.A.shape[0]))
        X[0] = x0
        for j in range(U.shape[0]):
            X[j + 1] = self.A @ X[j] + self.B @ U[j]
        return X

    def horizon_jac(self, X, U):
        n = U.shape[0]
        return (np.broadcast_to(self.A, (n,) + self.A.shape).copy(),
                np.broadcast_to(self.B, (n,) + self.B.shape).copy())


def hover_linearization(params: QuadParams, dt: float, z: float = 2.0):
    """Discrete (A, B) of the nominal model at level hover."""
    model = SindyDiscreteModel(params, ident.empty_model(), dt)
    xh = np.zeros(NX)
    xh[2] = z
    uh = params.hover_input()
    A, B = model.horizon_jac(np.repeat(xh[None, :], 2, axis=0), uh[None, :])
    return A[0], B[0]


def terminal_ingredients(A, B, cfg: MpcConfig, X_S: Box, U_S: Box, u_ref,
                         alpha_cap: float = 1e6, riccati=None) -> TerminalIngredients:
    """Terminal weight from the Riccati solution and the largest ellipsoid
    level that fits the tightened boxes (axis checks, bisection on alpha).

    Pass riccati=(gain, P) from an earlier call to skip the Riccati solve
    when only the boxes changed; (A, B) are ignored in that case.
    """
    if X_S.is_empty or U_S.is_empty:
        raise ValueError("tightened boxes must be nonempty")
    u_ref = np.asarray(u_ref, dtype=np.float64)
    if riccati is None:
        gain, P = lqr_gain(A, B, np.diag(cfg.q_diag), np.diag(cfg.r_diag))
    else:
        gain, P = riccati
    K = gain.K
    Pinv = np.linalg.inv(P)
    # per-axis ellipsoid extents scale with sqrt(alpha)
    ext_x = np.sqrt(np.maximum(np.diag(Pinv), 0.0))
    ext_u = np.sqrt(np.maximum(np.diag(K @ Pinv @ K.T), 0.0))
    margin_x = X_S.half_widths
    margin_u = np.minimum(U_S.hi - u_ref, u_ref - U_S.lo)
    if np.any(margin_u <= 0.0):
        raise ValueError("terminal set empty: u_ref outside the tightened input box")

    def fits(alpha: float) -> bool:
        r = np.sqrt(alpha)
        return bool(np.all(r * ext_x <= margin_x) and np.all(r * ext_u <= margin_u))

    lo = 0.0
    hi = alpha_cap
    if not fits(1e-12):
        raise ValueError("terminal set empty: tightened boxes leave no room")
    if fits(hi):
        lo = hi
    else:
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if fits(mid):
                lo = mid
            else:
                hi = mid
    if lo <= 0.0:
        raise ValueError("terminal set empty: no positive level fits")
    return TerminalIngredients(P=P, alpha=float(lo), K=K, u_ref=u_ref)


def _extract_warm(warm, N: int, u_fallback: np.ndarray) -> np.ndarray:
    if warm is None:
        return np.tile(u_fallback, (N, 1))
    if isinstance(warm, MpcSolution):
        return warm.u.copy()
    warm = np.asarray(warm, dtype=np.float64)
    if warm.shape != (N, NU):
        raise ValueError("warm start has the wrong shape")
    return warm.copy()


def _box_qp(H, g, dlo, dhi, inner: int = 8):
    """Box-QP direction; see kernels.box_qp."""
    return kernels.box_qp(H, g, np.ascontiguousarray(dlo),
                          np.ascontiguousarray(dhi), inner)


def solve_ocp(x0, ref, model, X_S: Box, U_S: Box, term: TerminalIngredients,
              cfg: MpcConfig, warm=None) -> MpcSolution:
    """Gauss-Newton solve of the tightened tracking problem.

    The returned state sequence is the exact rollout of the returned inputs
    through the model (single-shooting consistency).
    """
    t0 = time.perf_counter()
    x0 = np.asarray(x0, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    N = cfg.horizon
    if ref.shape != (N + 1, NX):
        raise ValueError("reference window must have N+1 rows")
    if X_S.is_empty or U_S.is_empty:
        raise ValueError("tightened boxes must be nonempty")
    U = np.clip(_extract_warm(warm, N, term.u_ref), U_S.lo, U_S.hi)
    mu = cfg.slack_weight
    mut = cfg.term_weight
    lo_flat = np.broadcast_to(U_S.lo, (N, NU)).ravel().copy()
    hi_flat = np.broadcast_to(U_S.hi, (N, NU)).ravel().copy()
    H = np.empty((NU * N, NU * N))
    g = np.empty(NU * N)

    X = model.rollout(x0, U)
    V, pen, viol, tex = kernels.ocp_cost(X, U, ref, term.u_ref, cfg.q_diag,
                                         cfg.r_diag, term.P, term.alpha,
                                         X_S.lo, X_S.hi, mu, mut)
    total = V + pen
    step_norm = np.inf
    grad_norm = np.inf
    iters = 0
    converged = False
    while iters < cfg.max_iter:
        iters += 1
        A, B = model.horizon_jac(X, U)
        V, pen, viol, tex = kernels.gn_assemble(X, U, A, B, ref, term.u_ref,
                                                cfg.q_diag, cfg.r_diag, term.P,
                                                term.alpha, X_S.lo, X_S.hi,
                                                mu, mut, H, g)
        total = V + pen
        grad_norm = float(np.max(np.abs(g)))
        # Direction from the box-constrained quadratic model.  Solving the
        # QP (rather than taking one reduced-Newton step) discovers the
        # active set of saturated inputs within a single linearization; a
        # naively clipped Newton step can lose descent entirely once the
        # saturated components are removed.
        dlo = (lo_flat - U.ravel())
        dhi = (hi_flat - U.ravel())
        p = _box_qp(H, g, dlo, dhi).reshape(N, NU)
        accepted = False
        t = 1.0
        for _ in range(14):
            U_c = np.clip(U + t * p, U_S.lo, U_S.hi)
            X_c = model.rollout(x0, U_c)
            V_c, pen_c, viol_c, tex_c = kernels.ocp_cost(
                X_c, U_c, ref, term.u_ref, cfg.q_diag, cfg.r_diag,
                term.P, term.alpha, X_S.lo, X_S.hi, mu, mut)
            if V_c + pen_c < total - 1e-14:
                step_norm = float(np.max(np.abs(U_c - U)))
                decrease = total - (V_c + pen_c)
                U, X = U_c, X_c
                V, pen, viol, tex = V_c, pen_c, viol_c, tex_c
                total = V_c + pen_c
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = True
            break
        if step_norm < cfg.tol:
            converged = True
            break
        # near a bang-bang optimum the step norm zigzags in a cost-flat
        # valley; a vanishing decrease is the reliable signal
        if decrease < 1e-5 * (1.0 + abs(total)):
            converged = True
            break

    if not np.isfinite(total) or viol > HARD_SLACK:
        status = STATUS_INFEASIBLE
    elif not converged:
        status = STATUS_MAX_ITER
    elif viol > ZERO_SLACK or tex > TERM_TOL * term.alpha:
        status = STATUS_SLACK
    else:
        status = STATUS_OPTIMAL
    return MpcSolution(u=U, x=X, cost=float(V), status=status, iterations=iters,
                       solve_time=time.perf_counter() - t0,
                       viol_state=float(viol), viol_terminal=float(tex),
                       grad_norm=grad_norm, step_norm=float(step_norm))


def tube_control(sol: MpcSolution, x, gain: TubeGain, U: Box):
    """Nominal input plus tube feedback, saturated to the untightened box.

    Feedback convention u = u_hat - K e, matching A_cl = A - B K.  Returns
    (input, saturated flag); saturation should not fire while the error
    stays inside the tube, so activations are worth logging.
    """
    e = np.asarray(x, dtype=np.float64) - sol.x[0]
    u = sol.u[0] - gain.K @ e
    u_sat = np.clip(u, U.lo, U.hi)
    return u_sat, bool(np.any(u_sat != u))


def shift_warm_start(sol: MpcSolution, term: TerminalIngredients, model,
                     ref_terminal) -> np.ndarray:
    """Shifted input sequence: drop the first move, append the terminal law."""
    u_new = term.law(sol.x[-1], ref_terminal)
    return np.vstack([sol.u[1:], u_new])


def realized_disturbance(x_next, x, u, model) -> np.ndarray:
    """One-step model error sample fed to the disturbance-set update."""
    return np.asarray(x_next, dtype=np.float64) - model.step(x, u)
