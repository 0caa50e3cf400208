import importlib.resources as resources

import numpy as np
import pytest

from vscopf.netmodel import parse_case_text
from vscopf.scenarios import build_vsi_dataset, control_bounds, lhs_sample
from vscopf.surrogate import (
    MlpConfig,
    MlpSurrogate,
    PlsMap,
    ReducedSurrogate,
    SurrogateError,
    choose_components,
    eval_with_derivatives,
    fit_pls,
    load_surrogate,
    max_abs_error,
    predict,
    save_surrogate,
    surrogate_from_json,
    surrogate_to_json,
    train_mlp,
    train_reduced,
)


def _identity_mlp(w1, w2):
    return MlpSurrogate(
        weights=(np.atleast_2d(np.asarray(w1, float)), np.atleast_2d(np.asarray(w2, float))),
        biases=(np.zeros(np.atleast_2d(w1).shape[0]), np.zeros(1)),
        activations=("identity", "identity"),
        x_center=np.zeros(np.atleast_2d(w1).shape[1]),
        x_scale=np.ones(np.atleast_2d(w1).shape[1]),
        y_center=0.0,
        y_scale=1.0,
    )


def _zero_mean_orthonormal(n, p, seed):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((n, p))
    b -= b.mean(axis=0)
    q, _ = np.linalg.qr(b)
    return q


# ---------------------------------------------------------------------------
# forward pass


def test_predict_hand_example():
    mlp = _identity_mlp([[1.0]], [[2.0]])
    assert predict(mlp, np.array([3.0])) == 6.0


def test_predict_zero_net_returns_output_center():
    mlp = MlpSurrogate(
        weights=(np.zeros((4, 2)), np.zeros((1, 4))),
        biases=(np.zeros(4), np.zeros(1)),
        activations=("tanh", "identity"),
        x_center=np.array([1.0, -2.0]),
        x_scale=np.array([2.0, 0.5]),
        y_center=0.7,
        y_scale=3.0,
    )
    assert predict(mlp, np.array([5.0, 5.0])) == 0.7
    assert np.all(predict(mlp, np.random.default_rng(0).normal(size=(9, 2))) == 0.7)


def test_predict_matches_independent_forward_pass():
    rng = np.random.default_rng(4)
    d, width = 5, 7
    mlp = MlpSurrogate(
        weights=(rng.normal(size=(width, d)), rng.normal(size=(1, width))),
        biases=(rng.normal(size=width), rng.normal(size=1)),
        activations=("tanh", "identity"),
        x_center=rng.normal(size=d),
        x_scale=np.abs(rng.normal(size=d)) + 0.5,
        y_center=1.3,
        y_scale=0.8,
    )
    X = rng.normal(size=(50, d))
    got = predict(mlp, X)
    for row in range(50):
        z = (X[row] - mlp.x_center) / mlp.x_scale
        h = np.array([np.tanh(sum(mlp.weights[0][j, k] * z[k] for k in range(d)) + mlp.biases[0][j])
                      for j in range(width)])
        out = sum(mlp.weights[1][0, j] * h[j] for j in range(width)) + mlp.biases[1][0]
        assert abs(got[row] - (out * mlp.y_scale + mlp.y_center)) < 1e-12


def test_predict_dimension_mismatch():
    mlp = _identity_mlp([[1.0]], [[2.0]])
    with pytest.raises(SurrogateError, match="dimension"):
        predict(mlp, np.array([1.0, 2.0]))


# ---------------------------------------------------------------------------
# training


def test_train_constant_response():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(120, 4))
    mlp, stats = train_mlp((X, np.full(120, 3.0)), MlpConfig(seed=1))
    probe = rng.normal(size=(60, 4))
    assert np.max(np.abs(predict(mlp, probe) - 3.0)) < 1e-6
    assert stats.rho >= stats.test_mae >= 0.0


def test_train_linear_target_is_tight():
    rng = np.random.default_rng(3)
    scale = np.array([1, 2, 0.5, 1, 1, 3, 1, 1.5])
    X = rng.normal(size=(800, 8)) * scale
    w = rng.normal(size=8)
    y = X @ w + 2.0
    mlp, stats = train_mlp((X, y), MlpConfig(seed=0))
    test = rng.normal(size=(300, 8)) * scale
    mae = np.abs(predict(mlp, test) - (test @ w + 2.0)).mean()
    assert mae < 1e-4 * (y.max() - y.min())
    assert stats.rho >= stats.train_mae


def test_train_deterministic_per_seed():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(150, 3))
    y = np.sin(X[:, 0]) + X[:, 1] * X[:, 2]
    cfg = MlpConfig(epochs=40, polish_iters=50, seed=5)
    a, _ = train_mlp((X, y), cfg)
    b, _ = train_mlp((X, y), cfg)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(a.biases, b.biases):
        assert np.array_equal(ba, bb)
    c, _ = train_mlp((X, y), MlpConfig(epochs=40, polish_iters=50, seed=6))
    assert not all(np.array_equal(wa, wc) for wa, wc in zip(a.weights, c.weights))


def test_train_rejects_short_and_nonfinite_data():
    X = np.random.default_rng(0).normal(size=(30, 3))
    with pytest.raises(SurrogateError, match="50"):
        train_mlp((X, X[:, 0]))
    X2 = np.random.default_rng(0).normal(size=(80, 3))
    y2 = X2[:, 0].copy()
    y2[10] = np.inf
    with pytest.raises(SurrogateError, match="finite"):
        train_mlp((X2, y2))


# ---------------------------------------------------------------------------
# partial least squares


def test_pls_single_relevant_direction():
    X = _zero_mean_orthonormal(400, 5, seed=6)
    y = 5.0 * X[:, 0]
    pls = fit_pls(X, y, 1)
    assert pls.explained[0] > 0.999
    direction = pls.projection[:, 0] / np.linalg.norm(pls.projection[:, 0])
    assert np.allclose(np.abs(direction), np.eye(5)[0], atol=1e-8)
    scores = (X - pls.center) @ pls.projection
    gram = scores.T @ scores
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) <= 1e-8 * np.max(np.abs(gram))


def test_pls_full_rank_matches_ols():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(200, 6)) @ np.diag([1, 2, 0.5, 1, 3, 1])
    y = np.sin(X[:, 0]) + X @ rng.normal(size=6)
    pls = fit_pls(X, y, 6)
    scores = (X - pls.center) @ pls.projection
    a = np.linalg.lstsq(np.column_stack([np.ones(200), scores]), y, rcond=None)[0]
    latent_fit = np.column_stack([np.ones(200), scores]) @ a
    b = np.linalg.lstsq(np.column_stack([np.ones(200), X]), y, rcond=None)[0]
    ols_fit = np.column_stack([np.ones(200), X]) @ b
    assert np.allclose(latent_fit, ols_fit, atol=1e-8)


def test_pls_explained_variance_structure():
    rng = np.random.default_rng(15)
    X = rng.normal(size=(300, 8))
    y = X @ rng.normal(size=8) + 0.1 * rng.standard_normal(300)
    pls = fit_pls(X, y, 5)
    assert np.all(pls.explained >= -1e-15)
    assert np.all(pls.explained <= 1.0 + 1e-12)
    cum = np.cumsum(pls.explained)
    assert np.all(np.diff(cum) >= -1e-15)
    assert cum[-1] <= 1.0 + 1e-12
    scores = (X - pls.center) @ pls.projection
    gram = scores.T @ scores
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) <= 1e-8 * np.max(np.abs(gram))


def test_pls_component_count_validation():
    rng = np.random.default_rng(16)
    X = rng.normal(size=(50, 4))
    y = X @ np.ones(4)
    with pytest.raises(SurrogateError, match="component"):
        fit_pls(X, y, 5)
    with pytest.raises(SurrogateError, match="component"):
        fit_pls(X, y, 0)
    # rank-deficient predictors: third column is a combination of the others
    X2 = np.column_stack([X[:, 0], X[:, 1], X[:, 0] + X[:, 1]])
    y2 = X2 @ np.array([1.0, 2.0, 0.5])
    with pytest.raises(SurrogateError, match="rank"):
        fit_pls(X2, y2, 3)


def test_choose_components():
    X = _zero_mean_orthonormal(300, 4, seed=7)
    y = 5.0 * X[:, 0]
    pls = fit_pls(X, y, 1)
    assert choose_components(pls, 1e-9) == 1
    assert choose_components(pls, 0.999) == 1
    rng = np.random.default_rng(17)
    X2 = rng.normal(size=(200, 3))
    y2 = X2 @ np.array([1.0, -2.0, 0.5])      # inside the predictor span
    pls2 = fit_pls(X2, y2, 3)
    assert choose_components(pls2, 1.0) == 3
    y3 = y2 + rng.standard_normal(200)        # noise not explainable by X
    pls3 = fit_pls(X2, y3, 3)
    with pytest.warns(UserWarning, match="unreachable"):
        assert choose_components(pls3, 1.0) == 3


# ---------------------------------------------------------------------------
# derivative retrieval


def _identity_pls(p):
    return PlsMap(projection=np.eye(p), explained=np.ones(p), center=np.zeros(p))


def test_derivatives_quadratic_exact():
    pls = PlsMap(projection=np.eye(3)[:, :1], explained=np.ones(1), center=np.zeros(3))
    red = ReducedSurrogate(pls=pls, mlp=lambda v: v[:, 0] ** 2, fd_step=1e-4)
    val, grad, hess = eval_with_derivatives(red, np.zeros(3))
    assert val == 0.0
    assert np.array_equal(grad, np.zeros(3))
    want = np.zeros((3, 3))
    want[0, 0] = 2.0
    assert np.array_equal(hess, want)


def test_derivatives_identity_projection():
    red = ReducedSurrogate(
        pls=_identity_pls(2),
        mlp=lambda v: np.sin(v[:, 0]) + v[:, 1] ** 3,
        fd_step=1e-4,
    )
    z = np.array([0.3, -0.5])
    val, grad, hess = eval_with_derivatives(red, z)
    assert np.isclose(val, np.sin(0.3) + (-0.5) ** 3, rtol=1e-12)
    assert np.allclose(grad, [np.cos(0.3), 3 * 0.25], rtol=1e-6)
    assert np.allclose(np.diag(hess), [-np.sin(0.3), 6 * -0.5], rtol=1e-4, atol=1e-6)
    assert abs(hess[0, 1]) < 1e-6
    assert np.array_equal(hess, hess.T)


def test_derivatives_nonfinite_evaluation_raises():
    red = ReducedSurrogate(
        pls=_identity_pls(1), mlp=lambda v: np.full(len(v), np.inf), fd_step=1e-4
    )
    with pytest.raises(SurrogateError, match="finite"):
        eval_with_derivatives(red, np.zeros(1))


@pytest.fixture(scope="module")
def case30_reduced():
    case = parse_case_text((resources.files("vscopf") / "cases" / "case30.m").read_text())
    ys = lhs_sample(control_bounds(case), 400, seed=23)
    ds = build_vsi_dataset(case, ys)
    cfg = MlpConfig(epochs=80, polish_iters=400, seed=2)
    red, stats = train_reduced(ds, cfg, n_components=10)
    return ds, red, stats


def test_reduced_pipeline_shapes(case30_reduced):
    ds, red, stats = case30_reduced
    assert red.pls.projection.shape == (ds.z.shape[1], 10)
    assert stats.rho >= stats.test_mae >= 0.0
    assert stats.rho >= stats.train_mae


def test_derivatives_match_fd_of_composed_map(case30_reduced):
    ds, red, _ = case30_reduced

    def composed(zz):
        return predict(red.mlp, (zz - red.pls.center) @ red.pls.projection)

    p = ds.z.shape[1]
    for row in (0, 57):
        z = ds.z[row]
        val, grad, hess = eval_with_derivatives(red, z)
        assert np.isclose(val, composed(z[None, :])[0], rtol=1e-10)
        h = 1e-3
        fd = np.empty(p)
        for k in range(p):
            zp, zm = z.copy(), z.copy()
            zp[k] += h
            zm[k] -= h
            fd[k] = (composed(zp[None, :])[0] - composed(zm[None, :])[0]) / (2 * h)
        scale = max(np.abs(fd).max(), 1e-12)
        assert np.max(np.abs(fd - grad)) < 1e-4 * scale
        assert np.array_equal(hess, hess.T)
        # spot-check a few second derivatives against a direct stencil
        f0 = composed(z[None, :])[0]
        for j, k in [(0, 0), (3, 7), (11, 2)]:
            if j == k:
                zp, zm = z.copy(), z.copy()
                zp[j] += h
                zm[j] -= h
                want = (composed(zp[None, :])[0] - 2 * f0 + composed(zm[None, :])[0]) / h**2
            else:
                pts = []
                for sj, sk in [(1, 1), (1, -1), (-1, 1), (-1, -1)]:
                    zz = z.copy()
                    zz[j] += sj * h
                    zz[k] += sk * h
                    pts.append(composed(zz[None, :])[0])
                want = (pts[0] - pts[1] - pts[2] + pts[3]) / (4 * h**2)
            hscale = max(np.abs(hess).max(), 1e-12)
            assert abs(want - hess[j, k]) < 1e-4 * hscale + 1e-4 * abs(want)


def test_trained_surrogate_accuracy_on_dataset(case30_reduced):
    ds, red, stats = case30_reduced
    span = ds.sigma.max() - ds.sigma.min()
    assert stats.test_mae < 0.05 * span  # quick-config net still tracks sigma


# ---------------------------------------------------------------------------
# error stats and serialization


def test_max_abs_error_hand_cases():
    mlp = MlpSurrogate(
        weights=(np.zeros((2, 1)), np.zeros((1, 2))),
        biases=(np.zeros(2), np.zeros(1)),
        activations=("tanh", "identity"),
        x_center=np.zeros(1),
        x_scale=np.ones(1),
        y_center=1.0,
        y_scale=1.0,
    )
    X = np.array([[0.0], [1.0]])
    assert max_abs_error(mlp, (X, np.array([0.0, 3.0]))) == 2.0
    assert max_abs_error(mlp, (X, np.array([1.0, 1.0]))) == 0.0
    with pytest.raises(SurrogateError, match="empty"):
        max_abs_error(mlp, (X[:0], np.array([])))


def test_surrogate_json_round_trip(tmp_path, case30_reduced):
    ds, red, _ = case30_reduced
    text = surrogate_to_json(red)
    back = surrogate_from_json(text)
    assert isinstance(back, ReducedSurrogate)
    for wa, wb in zip(red.mlp.weights, back.mlp.weights):
        assert np.array_equal(wa, wb)
    assert np.array_equal(red.pls.projection, back.pls.projection)
    assert back.fd_step == red.fd_step
    probe = ds.z[:40]
    a = predict(red.mlp, (probe - red.pls.center) @ red.pls.projection)
    b = predict(back.mlp, (probe - back.pls.center) @ back.pls.projection)
    assert np.array_equal(a, b)

    path = tmp_path / "model.json"
    save_surrogate(path, red)
    again = load_surrogate(path)
    assert np.array_equal(again.pls.projection, red.pls.projection)

    # bare MLP document round-trips as well
    mlp = _identity_mlp([[1.0]], [[2.0]])
    back2 = surrogate_from_json(surrogate_to_json(mlp))
    assert isinstance(back2, MlpSurrogate)
    assert predict(back2, np.array([3.0])) == 6.0
