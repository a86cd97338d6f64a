import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubempc import kernels
from tubempc.ident import (
    Dataset,
    LearnedModel,
    LibrarySpec,
    base_library,
    build_library,
    clip_update,
    differentiate,
    empty_model,
    evaluate,
    fit,
    kkt_residual,
    lasso_h_max,
    library_row,
    load_model,
    maybe_expand,
    preprocess,
    save_model,
    sparse_regress,
)


# ---------------------------------------------------------------- library

def test_base_library_layout():
    spec = base_library()
    assert len(spec) == 1 + 12 + 4 + 78 + 48
    assert spec.terms[0] == (kernels.T_CONST, 0, 0)
    assert len(set(spec.terms)) == len(spec.terms)
    assert not spec.expanded


def test_library_row_values():
    spec = LibrarySpec(terms=(
        (kernels.T_CONST, 0, 0),
        (kernels.T_STATE, 1, 0),
        (kernels.T_INPUT, 0, 0),
        (kernels.T_PROD_SU, 1, 0),
        (kernels.T_SIN, 6, 0),
        (kernels.T_COS, 6, 0),
        (kernels.T_PROD_SS, 1, 2),
    ))
    x = np.zeros(12)
    x[1] = 2.0
    x[2] = 5.0
    x[6] = np.pi / 2
    u = np.zeros(4)
    u[0] = 3.0
    row = library_row(spec, x, u)
    assert np.allclose(row, [1.0, 2.0, 3.0, 6.0, 1.0, np.cos(np.pi / 2), 10.0], atol=1e-15)


def test_maybe_expand_threshold_and_idempotence():
    spec = base_library()
    assert maybe_expand(spec, 400) is spec
    grown = maybe_expand(spec, 600)
    assert grown.expanded
    assert len(grown) == len(spec) + 6 + 12
    assert grown.terms[: len(spec)] == spec.terms  # append only, no reorder
    again = maybe_expand(grown, 5000)
    assert again is grown


# ---------------------------------------------------------------- dataset ops

def test_differentiate_linear_ramp_exact():
    t = np.arange(50) * 0.01
    states = np.outer(t, np.arange(1, 13, dtype=float))
    d = differentiate(Dataset(states=states, inputs=np.zeros((50, 4)), dt=0.01))
    assert np.max(np.abs(d.derivs - np.arange(1, 13, dtype=float))) < 1e-10


def test_differentiate_sine_accuracy():
    t = np.arange(200) * 0.01
    states = np.zeros((200, 12))
    states[:, 0] = np.sin(t)
    d = differentiate(Dataset(states=states, inputs=np.zeros((200, 4)), dt=0.01))
    assert np.max(np.abs(d.derivs[:, 0] - np.cos(t))) < 1e-4


def test_differentiate_constant_is_zero():
    states = np.ones((10, 12)) * 3.3
    d = differentiate(Dataset(states=states, inputs=np.zeros((10, 4)), dt=0.01))
    assert np.max(np.abs(d.derivs)) < 1e-12


def test_differentiate_needs_three_rows():
    with pytest.raises(ValueError):
        differentiate(Dataset(states=np.zeros((2, 12)), inputs=np.zeros((2, 4))))


def test_preprocess_keeps_clean_data():
    # uniform draws never reach 3 sigma (max deviation is sqrt(3) sigma)
    rng = np.random.default_rng(0)
    d = Dataset(states=rng.uniform(-1, 1, size=(100, 12)) * 0.1,
                inputs=rng.uniform(-1, 1, size=(100, 4)) * 0.01)
    out = preprocess(d)
    assert len(out) == 100


def test_preprocess_rejects_gross_outlier():
    rng = np.random.default_rng(1)
    states = rng.uniform(-1, 1, size=(101, 12))
    mu, sd = states[:, 3].mean(), states[:, 3].std()
    states[50, 3] = mu + 10.0 * sd
    d = preprocess(Dataset(states=states, inputs=np.zeros((101, 4))))
    assert len(d) == 100
    assert np.abs(d.states[:, 3] - mu).max() < 6.0 * sd


def test_preprocess_constant_channels_survive():
    d = Dataset(states=np.ones((20, 12)), inputs=np.zeros((20, 4)))
    assert len(preprocess(d)) == 20


# ---------------------------------------------------------------- regression

def _scalar_library():
    return LibrarySpec(terms=(
        (kernels.T_CONST, 0, 0),
        (kernels.T_STATE, 0, 0),
        (kernels.T_INPUT, 0, 0),
        (kernels.T_PROD_SS, 0, 0),
        (kernels.T_PROD_SU, 0, 0),
    ))


def _scalar_dataset(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    states = np.zeros((n, 12))
    inputs = np.zeros((n, 4))
    states[:, 0] = rng.uniform(-2.0, 2.0, size=n)
    inputs[:, 0] = rng.uniform(-1.0, 1.0, size=n)
    y = -2.0 * states[:, 0] + inputs[:, 0]
    return states, inputs, y


def test_sparse_regress_recovers_synthetic_system():
    states, inputs, y = _scalar_dataset()
    Phi = build_library(_scalar_library(), Dataset(states=states, inputs=inputs))
    beta = sparse_regress(Phi, y, h=1e-6)
    assert np.allclose(beta, [0.0, -2.0, 1.0, 0.0, 0.0], atol=1e-3)


def test_sparse_regress_zero_penalty_matches_lstsq():
    rng = np.random.default_rng(3)
    Phi = rng.normal(size=(300, 8))
    beta_true = rng.normal(size=8)
    y = Phi @ beta_true
    beta = sparse_regress(Phi, y, h=0.0)
    ref = np.linalg.lstsq(Phi, y, rcond=None)[0]
    assert np.max(np.abs(beta - ref)) < 1e-6


def test_sparse_regress_above_hmax_is_exactly_zero():
    states, inputs, y = _scalar_dataset(seed=5)
    Phi = build_library(_scalar_library(), Dataset(states=states, inputs=inputs))
    h_max = lasso_h_max(Phi, y)
    beta = sparse_regress(Phi, y, h=h_max * 1.001)
    assert np.array_equal(beta, np.zeros(5))


def test_sparsity_monotone_in_penalty():
    rng = np.random.default_rng(7)
    Phi = rng.normal(size=(400, 20))
    y = Phi[:, 2] * 1.5 - Phi[:, 11] * 0.7 + 0.05 * rng.normal(size=400)
    counts = []
    for h in [1e-4, 1e-2, 0.1, 0.5]:
        counts.append(int(np.count_nonzero(sparse_regress(Phi, y, h=h))))
    assert all(a >= b for a, b in zip(counts, counts[1:]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 0.5))
def test_kkt_subgradient_condition(seed, h):
    rng = np.random.default_rng(seed)
    Phi = rng.normal(size=(60, 10))
    y = rng.normal(size=60)
    beta = sparse_regress(Phi, y, h=h)
    assert kkt_residual(Phi, y, beta, h) <= 1e-5


def test_clip_update_cases():
    xi_old = np.zeros((3, 12))
    xi_new = np.zeros((3, 12))
    xi_new[0, 0] = 0.3
    out, nrm = clip_update(xi_old, xi_new, 0.5)
    assert np.array_equal(out, xi_new) and nrm == pytest.approx(0.3)
    out, nrm = clip_update(xi_old, xi_new, 0.1)
    assert nrm == pytest.approx(0.1)
    assert np.linalg.norm(out - xi_old) == pytest.approx(0.1, rel=1e-12)
    assert out[0, 0] == pytest.approx(0.1)
    out, nrm = clip_update(xi_new, xi_new, 0.1)  # no step
    assert np.array_equal(out, xi_new) and nrm == 0.0


# ---------------------------------------------------------------- fit + model

def _residual_dataset(n=3000, kd=0.35, seed=2):
    rng = np.random.default_rng(seed)
    states = np.zeros((n, 12))
    states[:, 3:6] = rng.uniform(-1.0, 1.0, size=(n, 3))
    states[:, 6:9] = rng.uniform(-0.3, 0.3, size=(n, 3))
    states[:, 9:12] = rng.uniform(-1.0, 1.0, size=(n, 3))
    inputs = np.zeros((n, 4))
    inputs[:, 0] = rng.uniform(0.2, 0.33, size=n)
    derivs = np.zeros((n, 12))
    derivs[:, 3:6] = -kd * states[:, 3:6]
    return Dataset(states=states, inputs=inputs, derivs=derivs)


def test_fit_recovers_drag_residual_and_prunes():
    d = _residual_dataset()
    model = fit(d, base_library(), h=0.01)
    for dim in (3, 4, 5):
        idx = model.spec.index_of((kernels.T_STATE, dim, 0))
        assert idx >= 0
        assert model.xi[idx, dim] == pytest.approx(-0.35, abs=0.02)
    assert len(model.spec) < 20  # pruned far below the 143 candidates
    assert model.spec.terms[0] == (kernels.T_CONST, 0, 0)
    # learned correction vanishes at rest
    assert np.linalg.norm(evaluate(model, np.zeros(12), np.zeros(4))) <= 1e-2


def test_fit_is_deterministic():
    d = _residual_dataset(seed=9)
    m1 = fit(d, base_library(), h=0.01)
    m2 = fit(d, base_library(), h=0.01)
    assert m1.spec.terms == m2.spec.terms
    assert np.array_equal(m1.xi, m2.xi)


def test_fit_zero_targets_gives_zero_model():
    d = _residual_dataset()
    d = Dataset(states=d.states, inputs=d.inputs, derivs=np.zeros_like(d.derivs))
    model = fit(d, base_library(), h=0.01)
    assert not model.xi.any()
    assert len(model.spec) == 1  # only the constant survives pruning


def test_fit_warm_start_bumps_version():
    d = _residual_dataset()
    m1 = fit(d, base_library(), h=0.01)
    m2 = fit(d, base_library(), h=0.01, warm=m1)
    assert m2.version == m1.version + 1
    idx = m2.spec.index_of((kernels.T_STATE, 3, 0))
    assert m2.xi[idx, 3] == pytest.approx(-0.35, abs=0.02)


def test_evaluate_empty_model_is_zero():
    m = empty_model()
    assert not evaluate(m, np.ones(12), np.ones(4)).any()
    assert m.version == 0


def test_model_file_roundtrip(tmp_path):
    d = _residual_dataset()
    model = fit(d, base_library(), h=0.01)
    path = tmp_path / "model.txt"
    save_model(model, path)
    back = load_model(path)
    assert back.spec.terms == model.spec.terms
    assert back.version == model.version
    assert np.array_equal(back.xi, model.xi)
    x = np.linspace(-0.4, 0.4, 12)
    u = np.array([0.26, 0.0, 0.0, 0.0])
    assert np.array_equal(evaluate(back, x, u), evaluate(model, x, u))


def test_model_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not a model\n")
    with pytest.raises(ValueError):
        load_model(path)
