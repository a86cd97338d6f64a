"""Sparse residual-model identification.

A library of candidate terms Psi(x, u) is fit per state dimension with an
l1-penalized least-squares solved by cyclic coordinate descent, giving a
sparse control-affine correction xdot ~ Psi(x, u) xi on top of whatever
targets the caller supplies (raw derivatives or physics residuals).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .kernels import NU, NX

KIND_NAMES = {
    kernels.T_CONST: "const",
    kernels.T_STATE: "state",
    kernels.T_INPUT: "input",
    kernels.T_PROD_SS: "prod_ss",
    kernels.T_PROD_SU: "prod_su",
    kernels.T_SIN: "sin",
    kernels.T_COS: "cos",
    kernels.T_SINU: "sinu",
}
KIND_IDS = {v: k for k, v in KIND_NAMES.items()}

EXPAND_MIN_SAMPLES = 500
EULER_IDX = (6, 7, 8)


@dataclass
class Dataset:
    """Time-ordered rows of states/inputs with optional derivative targets."""

    states: np.ndarray
    inputs: np.ndarray
    derivs: np.ndarray | None = None
    dt: float = 0.01

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if self.derivs is not None:
            self.derivs = np.atleast_2d(np.asarray(self.derivs, dtype=float))
        if self.states.shape[0] != self.inputs.shape[0]:
            raise ValueError("states and inputs row counts differ")

    def __len__(self):
        return self.states.shape[0]


@dataclass(frozen=True)
class LibrarySpec:
    """Ordered, duplicate-free candidate terms; constant always at index 0."""

    terms: tuple
    expanded: bool = False

    def __len__(self):
        return len(self.terms)

    def to_array(self) -> np.ndarray:
        return np.array(self.terms, dtype=np.int32).reshape(len(self.terms), 3)

    def index_of(self, term) -> int:
        try:
            return self.terms.index(tuple(term))
        except ValueError:
            return -1


def base_library() -> LibrarySpec:
    """Constant, states, inputs, state pairs, state-input products."""
    terms = [(kernels.T_CONST, 0, 0)]
    for i in range(NX):
        terms.append((kernels.T_STATE, i, 0))
    for i in range(NU):
        terms.append((kernels.T_INPUT, i, 0))
    for i in range(NX):
        for j in range(i, NX):
            terms.append((kernels.T_PROD_SS, i, j))
    for i in range(NX):
        for j in range(NU):
            terms.append((kernels.T_PROD_SU, i, j))
    return LibrarySpec(terms=tuple(terms), expanded=False)


def affine_library() -> LibrarySpec:
    """Constant, states, inputs: the control-affine linear candidates.

    Product and trig columns turn collinear on a tight flight envelope
    (a near-constant coordinate makes its cosine a copy of the constant
    column), so offline fits on tracking data use this restricted set.
    """
    terms = [(kernels.T_CONST, 0, 0)]
    for i in range(NX):
        terms.append((kernels.T_STATE, i, 0))
    for i in range(NU):
        terms.append((kernels.T_INPUT, i, 0))
    return LibrarySpec(terms=tuple(terms), expanded=False)


def expanded_terms() -> tuple:
    """Attitude trig terms appended once the dataset is rich enough."""
    extra = []
    for i in EULER_IDX:
        extra.append((kernels.T_SIN, i, 0))
        extra.append((kernels.T_COS, i, 0))
    for i in EULER_IDX:
        for j in range(NU):
            extra.append((kernels.T_SINU, i, j))
    return tuple(extra)


def maybe_expand(spec: LibrarySpec, n_samples: int) -> LibrarySpec:
    """Append the trig block once n_samples clears the threshold; idempotent."""
    if spec.expanded or n_samples <= EXPAND_MIN_SAMPLES:
        return spec
    existing = set(spec.terms)
    new = tuple(t for t in expanded_terms() if t not in existing)
    return LibrarySpec(terms=spec.terms + new, expanded=True)


def differentiate(d: Dataset) -> Dataset:
    """Central differences inside, second-order one-sided at the ends."""
    n = len(d)
    if n < 3:
        raise ValueError("need at least 3 rows to differentiate")
    x = d.states
    dt = d.dt
    der = np.empty_like(x)
    der[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    der[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt)
    der[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * dt)
    return replace(d, derivs=der)


def zoh_align(d: Dataset) -> Dataset:
    """Central derivatives paired with held-input midpoints, interior rows.

    With zero-order-hold inputs the central difference at sample k averages
    the flow under u[k-1] and u[k]; regressing it on u[k] alone leaves an
    error of half the input step times the input gain, which over a small
    inertia dwarfs slow physical effects.  For control-affine dynamics the
    midpoint input reproduces the averaged flow exactly.
    """
    der = differentiate(d)
    u_mid = 0.5 * (d.inputs[:-2] + d.inputs[1:-1])
    return Dataset(d.states[1:-1], u_mid, derivs=der.derivs[1:-1], dt=d.dt)


def preprocess(d: Dataset, n_sigma: float = 3.0) -> Dataset:
    """Drop rows where any channel sits more than n_sigma stds off its mean."""
    blocks = [d.states, d.inputs] + ([d.derivs] if d.derivs is not None else [])
    keep = np.ones(len(d), dtype=bool)
    for blk in blocks:
        mu = blk.mean(axis=0)
        sd = blk.std(axis=0)
        sd[sd == 0.0] = np.inf  # constant channels never reject
        keep &= (np.abs(blk - mu) <= n_sigma * sd).all(axis=1)
    return Dataset(states=d.states[keep], inputs=d.inputs[keep],
                   derivs=None if d.derivs is None else d.derivs[keep], dt=d.dt)


def build_library(spec: LibrarySpec, d: Dataset) -> np.ndarray:
    out = np.empty((len(d), len(spec)))
    kernels.library_matrix(spec.to_array(), d.states, d.inputs, out)
    return out


def library_row(spec_or_terms, x, u) -> np.ndarray:
    terms = spec_or_terms.to_array() if isinstance(spec_or_terms, LibrarySpec) else spec_or_terms
    out = np.empty(terms.shape[0])
    kernels.library_row(terms, np.asarray(x, dtype=float), np.asarray(u, dtype=float), out)
    return out


def _standardize(Phi, y):
    col = np.sqrt(np.mean(Phi * Phi, axis=0))
    col[col == 0.0] = 1.0
    ys = np.sqrt(np.mean(y * y))
    if ys == 0.0:
        ys = 1.0
    return Phi / col, y / ys, col, ys


def lasso_h_max(Phi, y) -> float:
    """Smallest penalty that zeroes the whole coefficient vector."""
    Ps, ys, _, _ = _standardize(Phi, y)
    return float(np.max(np.abs(Ps.T @ ys)) / Phi.shape[0])


def sparse_regress(Phi, y, h, beta0=None, tol=1e-8, max_sweeps=10000):
    """LASSO solve of one target dimension; returns unstandardized coefficients.

    Objective (internal, standardized columns/target):
    (1/2n)||y - Phi b||^2 + h ||b||_1.
    """
    Phi = np.ascontiguousarray(Phi, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    Ps, ysc, col, ys = _standardize(Phi, y)
    beta = np.zeros(Phi.shape[1])
    if beta0 is not None:
        beta = np.asarray(beta0, dtype=float) * col / ys
    kernels.cd_lasso(np.ascontiguousarray(Ps), ysc, float(h), beta, tol, max_sweeps)
    return beta * ys / col


def kkt_residual(Phi, y, beta, h) -> float:
    """Worst subgradient violation of the standardized LASSO optimum."""
    Ps, ysc, col, ys = _standardize(Phi, y)
    bs = beta * col / ys
    n = Phi.shape[0]
    grad = Ps.T @ (ysc - Ps @ bs) / n
    viol = np.where(bs != 0.0, np.abs(grad - h * np.sign(bs)), np.maximum(np.abs(grad) - h, 0.0))
    return float(np.max(viol))


@dataclass
class LearnedModel:
    """Sparse continuous-time correction model xdot_res = Psi(x, u) xi."""

    spec: LibrarySpec
    xi: np.ndarray
    version: int = 1
    h: float = 0.05

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float).reshape(len(self.spec), NX)

    def term_array(self) -> np.ndarray:
        return self.spec.to_array()

    def coefficient_norm(self) -> float:
        return float(np.linalg.norm(self.xi))


def empty_model() -> LearnedModel:
    spec = LibrarySpec(terms=((kernels.T_CONST, 0, 0),))
    return LearnedModel(spec=spec, xi=np.zeros((1, NX)), version=0)


def evaluate(model: LearnedModel, x, u) -> np.ndarray:
    row = library_row(model.spec, x, u)
    return row @ model.xi


def fit(d: Dataset, spec: LibrarySpec, h: float = 0.05,
        warm: LearnedModel | None = None, tol: float = 1e-8,
        max_sweeps: int = 10000) -> LearnedModel:
    """Per-dimension sparse regression of d.derivs onto the library.

    All-zero columns are pruned from the returned model's spec; the constant
    term always survives. Warm starting maps the previous model's
    coefficients onto matching terms.
    """
    if d.derivs is None:
        raise ValueError("dataset has no derivative targets; differentiate first")
    Phi = build_library(spec, d)
    xi = np.zeros((len(spec), NX))
    warm_map = None
    if warm is not None:
        warm_map = np.zeros((len(spec), NX))
        for i, t in enumerate(spec.terms):
            j = warm.spec.index_of(t)
            if j >= 0:
                warm_map[i] = warm.xi[j]
    for dim in range(NX):
        b0 = warm_map[:, dim] if warm_map is not None else None
        xi[:, dim] = sparse_regress(Phi, d.derivs[:, dim], h, beta0=b0,
                                    tol=tol, max_sweeps=max_sweeps)
    keep = np.any(xi != 0.0, axis=1)
    keep[0] = True
    pruned = LibrarySpec(terms=tuple(t for t, k in zip(spec.terms, keep) if k),
                         expanded=spec.expanded)
    version = 1 if warm is None else warm.version + 1
    return LearnedModel(spec=pruned, xi=xi[keep], version=version, h=h)


def clip_update(xi_old: np.ndarray, xi_new: np.ndarray, max_norm: float):
    """Scale the coefficient step to the trust bound in Frobenius norm."""
    delta = xi_new - xi_old
    nrm = float(np.linalg.norm(delta))
    if nrm <= max_norm or nrm == 0.0:
        return xi_new.copy(), nrm
    clipped = xi_old + delta * (max_norm / nrm)
    return clipped, max_norm


# ---------------------------------------------------------------- persistence

MODEL_MAGIC = "tubempc-model v1"


def save_model(model: LearnedModel, path):
    lines = [MODEL_MAGIC, "kind sindy", f"version {model.version}",
             f"h {model.h!r}", f"n_terms {len(model.spec)}",
             f"expanded {int(model.spec.expanded)}"]
    for kind, a, b in model.spec.terms:
        lines.append(f"term {KIND_NAMES[kind]} {a} {b}")
    for i in range(len(model.spec)):
        vals = " ".join("%.17g" % v for v in model.xi[i])
        lines.append(f"coef {i} {vals}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> LearnedModel:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a tubempc model file")
    header = {}
    terms = []
    coefs = {}
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "term":
            terms.append((KIND_IDS[parts[1]], int(parts[2]), int(parts[3])))
        elif parts[0] == "coef":
            coefs[int(parts[1])] = np.array([float(v) for v in parts[2:]])
        else:
            header[parts[0]] = parts[1]
    if header.get("kind") != "sindy":
        raise ValueError(f"{path}: unsupported model kind {header.get('kind')}")
    n = int(header["n_terms"])
    if len(terms) != n or len(coefs) != n:
        raise ValueError(f"{path}: term/coefficient count mismatch")
    xi = np.zeros((n, NX))
    for i in range(n):
        xi[i] = coefs[i]
    spec = LibrarySpec(terms=tuple(terms), expanded=bool(int(header.get("expanded", "0"))))
    return LearnedModel(spec=spec, xi=xi, version=int(header.get("version", "1")),
                        h=float(header.get("h", "0.05")))
