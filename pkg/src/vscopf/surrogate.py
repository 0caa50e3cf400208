"""Feed-forward surrogate of the voltage stability margin.

A single-hidden-layer network maps the power-flow state vector (or a
partial-least-squares latent compression of it for large systems) to the
minimum singular value of the reduced Jacobian.  Training runs mini-batch
backpropagation with an adaptive moment update and finishes with a
deterministic full-batch quasi-Newton polish; both phases are seeded, so
a configuration reproduces its weights bit for bit.

Gradients and Hessians with respect to the original state are retrieved
by central differences in the latent space and lifted through the linear
projection, which is what the stability constraint linearization in the
dispatch solver consumes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

__all__ = [
    "SurrogateError",
    "MlpConfig",
    "MlpSurrogate",
    "SurrogateErrorStats",
    "PlsMap",
    "ReducedSurrogate",
    "train_mlp",
    "predict",
    "fit_pls",
    "choose_components",
    "train_reduced",
    "eval_with_derivatives",
    "max_abs_error",
    "surrogate_to_json",
    "surrogate_from_json",
    "save_surrogate",
    "load_surrogate",
]


class SurrogateError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    hidden_width: int = 32
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 0.02
    lr_min: float = 1e-4
    val_fraction: float = 0.3
    patience: int = 60
    polish_iters: int = 3000
    seed: int = 0


@dataclass(frozen=True)
class MlpSurrogate:
    """Layer weights plus the affine standardization of inputs and output."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]
    x_center: np.ndarray
    x_scale: np.ndarray
    y_center: float
    y_scale: float

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]


@dataclass(frozen=True)
class SurrogateErrorStats:
    train_mae: float
    test_mae: float
    rho: float  # largest absolute prediction error seen on any split


def _apply_activation(h: np.ndarray, tag: str) -> np.ndarray:
    if tag == "tanh":
        return np.tanh(h)
    if tag == "identity":
        return h
    raise SurrogateError(f"unknown activation {tag!r}")


def predict(mlp: MlpSurrogate, z: np.ndarray):
    """Forward pass in raw units; 1-D input gives a scalar, 2-D a vector."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zz = np.atleast_2d(z)
    if zz.shape[1] != mlp.n_inputs:
        raise SurrogateError(
            f"input dimension {zz.shape[1]} does not match model dimension {mlp.n_inputs}"
        )
    h = (zz - mlp.x_center) / mlp.x_scale
    for w, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        h = _apply_activation(h @ w.T + b, act)
    out = h[:, 0] * mlp.y_scale + mlp.y_center
    return float(out[0]) if single else out


def _coerce_dataset(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "z") and hasattr(dataset, "sigma"):
        return np.asarray(dataset.z, dtype=float), np.asarray(dataset.sigma, dtype=float)
    x, y = dataset
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def _pack(w1, b1, w2, b2):
    return np.concatenate([w1.ravel(), b1, w2.ravel(), b2])


def _unpack(p, d, width):
    i = width * d
    return (
        p[:i].reshape(width, d),
        p[i : i + width],
        p[i + width : i + 2 * width].reshape(1, width),
        p[i + 2 * width :],
    )


def _loss_grad(p, z, u, d, width):
    w1, b1, w2, b2 = _unpack(p, d, width)
    h = np.tanh(z @ w1.T + b1)
    r = (h @ w2.T + b2)[:, 0] - u
    n = len(u)
    rb = r / n
    da = np.outer(rb, w2[0]) * (1 - h**2)
    grad = _pack(da.T @ z, da.sum(axis=0), (rb @ h)[None, :], np.array([rb.sum()]))
    return 0.5 * (r @ r) / n, grad


def train_mlp(dataset, config: MlpConfig = MlpConfig()) -> tuple[MlpSurrogate, SurrogateErrorStats]:
    """Train the sigma surrogate; deterministic for a fixed config seed."""
    x, y = _coerce_dataset(dataset)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise SurrogateError("training data must be (rows, dims) inputs with matching responses")
    if x.shape[0] < 50:
        raise SurrogateError(f"need at least 50 samples to train, got {x.shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise SurrogateError("training data must be finite")
    n, d = x.shape
    width = config.hidden_width

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    val_ix, train_ix = perm[:n_val], perm[n_val:]
    xt, yt = x[train_ix], y[train_ix]
    xv, yv = x[val_ix], y[val_ix]

    x_center = xt.mean(axis=0)
    x_scale = xt.std(axis=0)
    x_scale = np.where(x_scale > 0.0, x_scale, 1.0)
    y_center = float(yt.mean())
    y_scale = float(yt.std())

    if y_scale == 0.0:
        # degenerate response: the constant model is exact
        mlp = MlpSurrogate(
            weights=(np.zeros((width, d)), np.zeros((1, width))),
            biases=(np.zeros(width), np.zeros(1)),
            activations=("tanh", "identity"),
            x_center=x_center,
            x_scale=x_scale,
            y_center=y_center,
            y_scale=1.0,
        )
        rho = float(np.max(np.abs(y - y_center)))
        return mlp, SurrogateErrorStats(train_mae=0.0, test_mae=0.0, rho=rho)

    zt = (xt - x_center) / x_scale
    zv = (xv - x_center) / x_scale
    ut = (yt - y_center) / y_scale
    uv = (yv - y_center) / y_scale

    w1 = rng.normal(0.0, 1.0 / np.sqrt(d), (width, d))
    b1 = np.zeros(width)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(width), (1, width))
    b2 = np.zeros(1)
    params = [w1, b1, w2, b2]
    mom = [np.zeros_like(q) for q in params]
    sec = [np.zeros_like(q) for q in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    best_val = np.inf
    best = [q.copy() for q in params]
    bad = 0
    step = 0
    nt = zt.shape[0]
    for epoch in range(config.epochs):
        lr = config.lr_min + 0.5 * (config.learning_rate - config.lr_min) * (
            1.0 + np.cos(np.pi * epoch / config.epochs)
        )
        order = rng.permutation(nt)
        for s in range(0, nt, config.batch_size):
            idx = order[s : s + config.batch_size]
            zb, ub = zt[idx], ut[idx]
            h = np.tanh(zb @ w1.T + b1)
            r = ((h @ w2.T + b2)[:, 0] - ub) / len(idx)
            da = np.outer(r, w2[0]) * (1 - h**2)
            grads = [da.T @ zb, da.sum(axis=0), (r @ h)[None, :], np.array([r.sum()])]
            step += 1
            for q, g, m, v in zip(params, grads, mom, sec):
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g * g
                q -= lr * (m / (1 - beta1**step)) / (np.sqrt(v / (1 - beta2**step)) + eps)
        pv = (np.tanh(zv @ w1.T + b1) @ w2.T + b2)[:, 0]
        val_mae = float(np.abs(pv - uv).mean())
        if not np.isfinite(val_mae):
            raise SurrogateError("training diverged to a non-finite loss")
        if val_mae < best_val - 1e-7:
            best_val = val_mae
            best = [q.copy() for q in params]
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    w1, b1, w2, b2 = best

    if config.polish_iters > 0:
        # deterministic full-batch refinement from the best stochastic iterate
        res = scipy.optimize.minimize(
            _loss_grad,
            _pack(w1, b1, w2, b2),
            args=(zt, ut, d, width),
            jac=True,
            method="L-BFGS-B",
            options={
                "maxiter": config.polish_iters,
                "maxfun": int(1.5 * config.polish_iters),
                "ftol": 1e-18,
                "gtol": 1e-14,
            },
        )
        if not np.isfinite(res.fun):
            raise SurrogateError("training diverged to a non-finite loss")
        w1p, b1p, w2p, b2p = _unpack(res.x, d, width)
        pv = (np.tanh(zv @ w1p.T + b1p) @ w2p.T + b2p)[:, 0]
        if float(np.abs(pv - uv).mean()) <= best_val * 1.05 + 1e-12:
            w1, b1, w2, b2 = w1p, b1p, w2p, b2p

    mlp = MlpSurrogate(
        weights=(w1, w2),
        biases=(b1, b2),
        activations=("tanh", "identity"),
        x_center=x_center,
        x_scale=x_scale,
        y_center=y_center,
        y_scale=y_scale,
    )
    pred_t = predict(mlp, xt)
    pred_v = predict(mlp, xv)
    train_mae = float(np.abs(pred_t - yt).mean())
    test_mae = float(np.abs(pred_v - yv).mean())
    rho = float(max(np.max(np.abs(pred_t - yt)), np.max(np.abs(pred_v - yv))))
    return mlp, SurrogateErrorStats(train_mae=train_mae, test_mae=test_mae, rho=rho)


# ---------------------------------------------------------------------------
# partial least squares (SIMPLS deflation)


@dataclass(frozen=True)
class PlsMap:
    """Linear latent compression: scores = (z - center) @ projection."""

    projection: np.ndarray  # (n_predictors, n_components)
    explained: np.ndarray   # per-component explained response variance
    center: np.ndarray

    @property
    def n_components(self) -> int:
        return self.projection.shape[1]


def _simpls(xc: np.ndarray, yc: np.ndarray, max_components: int):
    """Weight matrix R, per-component explained variance; stops at rank."""
    n, p = xc.shape
    ssy = float(yc @ yc)
    s = xc.T @ yc
    r_mat = np.zeros((p, max_components))
    v_mat = np.zeros((p, max_components))
    explained = np.zeros(max_components)
    t_ref = None
    extracted = 0
    for a in range(max_components):
        r = s.copy()
        t = xc @ r
        norm_t = float(np.linalg.norm(t))
        if t_ref is None:
            t_ref = norm_t
        if norm_t <= 1e-12 * max(t_ref, 1.0):
            break
        t /= norm_t
        r /= norm_t
        q = float(yc @ t)
        explained[a] = q * q / ssy
        loading = xc.T @ t
        v = loading.copy()
        if a > 0:
            v -= v_mat[:, :a] @ (v_mat[:, :a].T @ loading)
        v /= np.linalg.norm(v)
        s = s - v * (v @ s)
        r_mat[:, a] = r
        v_mat[:, a] = v
        extracted = a + 1
    return r_mat[:, :extracted], explained[:extracted]


def fit_pls(z: np.ndarray, sigma: np.ndarray, n_components: int) -> PlsMap:
    """SIMPLS fit of the response on the predictors."""
    x = np.asarray(z, dtype=float)
    y = np.asarray(sigma, dtype=float)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise SurrogateError("predictors must be 2-D with one response per row")
    n, p = x.shape
    limit = min(n - 1, p)
    if not 1 <= n_components <= limit:
        raise SurrogateError(
            f"component count {n_components} outside the valid range [1, {limit}]"
        )
    center = x.mean(axis=0)
    yc = y - y.mean()
    if float(yc @ yc) == 0.0:
        raise SurrogateError("degenerate response: zero variance")
    r_mat, explained = _simpls(x - center, yc, n_components)
    if r_mat.shape[1] < n_components:
        raise SurrogateError(
            f"latent directions exhausted after {r_mat.shape[1]} components; "
            f"requested {n_components} exceeds the predictor-response rank"
        )
    return PlsMap(projection=r_mat, explained=explained, center=center)


def choose_components(plsmap: PlsMap, threshold: float) -> int:
    """Smallest component count whose cumulative explained variance reaches
    the threshold; falls back to the full count with a warning."""
    if not 0.0 < threshold <= 1.0:
        raise SurrogateError("threshold must lie in (0, 1]")
    cum = np.cumsum(plsmap.explained)
    hit = np.nonzero(cum >= threshold - 1e-12)[0]
    if hit.size == 0:
        warnings.warn(
            f"explained-variance threshold {threshold} unreachable "
            f"(reached {cum[-1]:.6f}); keeping all {plsmap.n_components} components",
            stacklevel=2,
        )
        return plsmap.n_components
    return int(hit[0]) + 1


@dataclass(frozen=True)
class ReducedSurrogate:
    """Latent-space sigma model; `mlp` may be any batch-callable for tests."""

    pls: PlsMap
    mlp: MlpSurrogate
    fd_step: float = 1e-4


def train_reduced(
    dataset,
    config: MlpConfig = MlpConfig(),
    n_components: int | None = None,
    variance_threshold: float = 0.999,
    dim_threshold: int = 40,
    fd_step: float = 1e-4,
) -> tuple[ReducedSurrogate, SurrogateErrorStats]:
    """PLS-then-train pipeline.

    Compression to `variance_threshold` kicks in automatically once the
    state dimension passes `dim_threshold`; smaller systems keep the full
    latent rotation.  An explicit `n_components` overrides both.
    """
    x, y = _coerce_dataset(dataset)
    n, p = x.shape
    limit = min(n - 1, p)
    if n_components is not None:
        pls = fit_pls(x, y, n_components)
    else:
        center = x.mean(axis=0)
        yc = y - y.mean()
        if float(yc @ yc) == 0.0:
            raise SurrogateError("degenerate response: zero variance")
        r_mat, explained = _simpls(x - center, yc, limit)
        full = PlsMap(projection=r_mat, explained=explained, center=center)
        if p > dim_threshold:
            keep = choose_components(full, variance_threshold)
        else:
            keep = full.n_components
        pls = PlsMap(
            projection=full.projection[:, :keep],
            explained=full.explained[:keep],
            center=center,
        )
    scores = (x - pls.center) @ pls.projection
    mlp, stats = train_mlp((scores, y), config)
    return ReducedSurrogate(pls=pls, mlp=mlp, fd_step=fd_step), stats


# ---------------------------------------------------------------------------
# derivative retrieval


def _latent_batch(mlp, v: np.ndarray) -> np.ndarray:
    if isinstance(mlp, MlpSurrogate):
        return predict(mlp, v)
    return np.asarray(mlp(v), dtype=float).reshape(v.shape[0])


def eval_with_derivatives(red: ReducedSurrogate, z: np.ndarray):
    """Value, gradient, and Hessian of the surrogate w.r.t. the state.

    Latent derivatives come from a central-difference stencil with steps of
    fd_step on the standardized latent scale; the affine projection lifts
    them back, so the returned Hessian is symmetric by construction.
    """
    z = np.asarray(z, dtype=float)
    proj = red.pls.projection
    if z.shape != (proj.shape[0],):
        raise SurrogateError(
            f"state dimension {z.shape} does not match projection rows {proj.shape[0]}"
        )
    v0 = (z - red.pls.center) @ proj
    m = v0.size
    if isinstance(red.mlp, MlpSurrogate):
        steps = red.fd_step * red.mlp.x_scale
    else:
        steps = np.full(m, red.fd_step)

    # stencil rows: center; +-e_k; the four corners of every coordinate pair
    points = [v0]
    for k in range(m):
        for sign in (1.0, -1.0):
            vp = v0.copy()
            vp[k] += sign * steps[k]
            points.append(vp)
    pair_offset = len(points)
    pairs = [(j, k) for j in range(m) for k in range(j + 1, m)]
    for j, k in pairs:
        for sj, sk in ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)):
            vp = v0.copy()
            vp[j] += sj * steps[j]
            vp[k] += sk * steps[k]
            points.append(vp)
    vals = _latent_batch(red.mlp, np.array(points))
    if not np.isfinite(vals).all():
        raise SurrogateError("surrogate evaluation is not finite near the requested state")

    f0 = vals[0]
    grad_lat = np.empty(m)
    hess_lat = np.empty((m, m))
    for k in range(m):
        fp, fm = vals[1 + 2 * k], vals[2 + 2 * k]
        grad_lat[k] = (fp - fm) / (2.0 * steps[k])
        hess_lat[k, k] = ((fp + fm) - 2.0 * f0) / (steps[k] * steps[k])
    for idx, (j, k) in enumerate(pairs):
        fpp, fpm, fmp, fmm = vals[pair_offset + 4 * idx : pair_offset + 4 * idx + 4]
        val = (fpp - fpm - fmp + fmm) / (4.0 * steps[j] * steps[k])
        hess_lat[j, k] = val
        hess_lat[k, j] = val

    grad = proj @ grad_lat
    hess = proj @ hess_lat @ proj.T
    hess = (hess + hess.T) / 2.0
    return float(f0), grad, hess


def max_abs_error(model, testset) -> float:
    """Largest absolute prediction error over the given set."""
    x, y = _coerce_dataset(testset)
    if x.shape[0] == 0:
        raise SurrogateError("empty test set")
    if isinstance(model, ReducedSurrogate):
        pred = _latent_batch(model.mlp, (x - model.pls.center) @ model.pls.projection)
    else:
        pred = predict(model, x)
    return float(np.max(np.abs(pred - y)))


# ---------------------------------------------------------------------------
# serialization

_SCHEMA = "vsi-surrogate/1"


def _mlp_doc(mlp: MlpSurrogate) -> dict:
    return {
        "weights": [w.tolist() for w in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
        "activations": list(mlp.activations),
        "x_center": mlp.x_center.tolist(),
        "x_scale": mlp.x_scale.tolist(),
        "y_center": mlp.y_center,
        "y_scale": mlp.y_scale,
    }


def _mlp_from_doc(doc: dict) -> MlpSurrogate:
    return MlpSurrogate(
        weights=tuple(np.array(w, dtype=float) for w in doc["weights"]),
        biases=tuple(np.array(b, dtype=float) for b in doc["biases"]),
        activations=tuple(doc["activations"]),
        x_center=np.array(doc["x_center"], dtype=float),
        x_scale=np.array(doc["x_scale"], dtype=float),
        y_center=float(doc["y_center"]),
        y_scale=float(doc["y_scale"]),
    )


def surrogate_to_json(model) -> str:
    if isinstance(model, ReducedSurrogate):
        doc = {
            "schema": _SCHEMA,
            "mlp": _mlp_doc(model.mlp),
            "pls": {
                "projection": model.pls.projection.tolist(),
                "explained": model.pls.explained.tolist(),
                "center": model.pls.center.tolist(),
            },
            "fd_step": model.fd_step,
        }
    elif isinstance(model, MlpSurrogate):
        doc = {"schema": _SCHEMA, "mlp": _mlp_doc(model), "pls": None, "fd_step": None}
    else:
        raise SurrogateError(f"cannot serialize {type(model).__name__}")
    return json.dumps(doc, indent=1)


def surrogate_from_json(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SurrogateError(f"malformed surrogate document: {exc}") from exc
    if doc.get("schema") != _SCHEMA:
        raise SurrogateError(f"unrecognized surrogate schema {doc.get('schema')!r}")
    mlp = _mlp_from_doc(doc["mlp"])
    if doc.get("pls") is None:
        return mlp
    pls = PlsMap(
        projection=np.array(doc["pls"]["projection"], dtype=float),
        explained=np.array(doc["pls"]["explained"], dtype=float),
        center=np.array(doc["pls"]["center"], dtype=float),
    )
    return ReducedSurrogate(pls=pls, mlp=mlp, fd_step=float(doc["fd_step"]))


def save_surrogate(path, model) -> None:
    with open(path, "w") as fh:
        fh.write(surrogate_to_json(model))


def load_surrogate(path):
    with open(path) as fh:
        return surrogate_from_json(fh.read())
