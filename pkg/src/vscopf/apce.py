"""Data-driven polynomial chaos on arbitrary dependent samples.

An orthonormal basis for the empirical measure of a scenario sample is
obtained by whitening the monomial Gram matrix with its Cholesky factor.
No marginal distributions or copulas are assumed; correlation and
non-Gaussianity enter through the sample itself.  Expansions are fitted
by ordinary least squares and queried for moments and tail quantiles.

Two truncations are provided: the classical total-degree set and a
dimensionally reduced set that bounds the number of interacting inputs,
which keeps the basis small when the scenario dimension is large.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.linalg

__all__ = [
    "ApceError",
    "MultiIndexSet",
    "ApceBasis",
    "ApceModel",
    "total_degree_indices",
    "reduced_indices",
    "monomial_matrix",
    "gram_estimate",
    "whiten",
    "build_basis",
    "psi_matrix",
    "fit_coefficients",
    "evaluate",
    "quantile",
    "orthonormality_check",
    "model_to_json",
    "model_from_json",
    "save_model",
    "load_model",
]

DEFAULT_INDEX_CAP = 200_000

# jitter ladder for barely-indefinite Gram matrices, relative to trace/L
_JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class ApceError(ValueError):
    pass


@dataclass(frozen=True)
class MultiIndexSet:
    """Ordered exponent vectors of a truncated polynomial basis."""

    n_dims: int
    indices: tuple[tuple[int, ...], ...]
    truncation: str

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def as_array(self) -> np.ndarray:
        return np.array(self.indices, dtype=np.int64).reshape(len(self.indices), self.n_dims)


def _grevlex_key(j: tuple[int, ...]):
    # graded order; ties broken by the reversed exponent tuple, which puts
    # (2,0) before (1,1) before (0,2)
    return (sum(j), tuple(reversed(j)))


def _positive_compositions(total: int, parts: int):
    """All tuples of `parts` positive integers summing to `total`."""
    if parts == 1:
        yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _positive_compositions(total - first, parts - 1):
            yield (first,) + rest


def _reduced_count(n_dims: int, max_interaction: int, max_degree: int) -> int:
    return 1 + sum(
        math.comb(n_dims, k) * math.comb(max_degree, k)
        for k in range(1, max_interaction + 1)
    )


def reduced_indices(
    n_dims: int,
    max_interaction: int,
    max_degree: int,
    cap: int = DEFAULT_INDEX_CAP,
) -> MultiIndexSet:
    """Multi-indices with total degree <= max_degree and at most
    max_interaction nonzero entries, in graded reverse lexicographic order."""
    if n_dims < 1:
        raise ApceError("n_dims must be at least 1")
    if not 0 <= max_interaction <= n_dims:
        raise ApceError("max_interaction must lie in [0, n_dims]")
    if max_degree < 0:
        raise ApceError("max_degree must be nonnegative")
    count = _reduced_count(n_dims, max_interaction, max_degree)
    if count > cap:
        raise ApceError(
            f"basis size {count} exceeds cap {cap}; lower the degree or interaction order"
        )
    out = [(0,) * n_dims]
    for k in range(1, max_interaction + 1):
        if k > max_degree:
            break
        for support in combinations(range(n_dims), k):
            for total in range(k, max_degree + 1):
                for parts in _positive_compositions(total, k):
                    j = [0] * n_dims
                    for dim, p in zip(support, parts):
                        j[dim] = p
                    out.append(tuple(j))
    out.sort(key=_grevlex_key)
    return MultiIndexSet(
        n_dims=n_dims,
        indices=tuple(out),
        truncation=f"reduced(s={max_interaction}, m={max_degree})",
    )


def total_degree_indices(
    n_dims: int, max_degree: int, cap: int = DEFAULT_INDEX_CAP
) -> MultiIndexSet:
    """All multi-indices of total degree <= max_degree, grevlex ordered."""
    if n_dims < 1:
        raise ApceError("n_dims must be at least 1")
    if max_degree < 0:
        raise ApceError("max_degree must be nonnegative")
    count = math.comb(n_dims + max_degree, max_degree)
    if count > cap:
        raise ApceError(
            f"basis size {count} exceeds cap {cap}; lower the degree or interaction order"
        )
    ix = reduced_indices(n_dims, min(n_dims, max_degree), max_degree, cap=cap)
    return MultiIndexSet(
        n_dims=n_dims, indices=ix.indices, truncation=f"total_degree(m={max_degree})"
    )


def monomial_matrix(index_set: MultiIndexSet, xi: np.ndarray) -> np.ndarray:
    """Evaluate every monomial at every sample row; (N_s, L)."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 2 or xi.shape[1] != index_set.n_dims:
        raise ApceError(
            f"sample dimension {xi.shape} does not match basis dimension {index_set.n_dims}"
        )
    n_s = xi.shape[0]
    out = np.ones((n_s, len(index_set)))
    pows: dict[tuple[int, int], np.ndarray] = {}
    for i, j in enumerate(index_set.indices):
        col = None
        for k, d in enumerate(j):
            if d == 0:
                continue
            key = (k, d)
            if key not in pows:
                pows[key] = xi[:, k] ** d
            col = pows[key] if col is None else col * pows[key]
        if col is not None:
            out[:, i] = col
    return out


def gram_estimate(index_set: MultiIndexSet, xi: np.ndarray) -> np.ndarray:
    """Empirical second-moment matrix of the monomial vector, (L, L)."""
    m = monomial_matrix(index_set, xi)
    n_s, n_basis = m.shape
    if n_s < n_basis:
        warnings.warn(
            f"fewer samples ({n_s}) than basis functions ({n_basis}); "
            "Gram estimate will be singular",
            stacklevel=2,
        )
    if not np.isfinite(m).all():
        raise ApceError("monomial values are not finite; check sample scaling")
    g = m.T @ m / n_s
    return (g + g.T) / 2.0


def whiten(gram: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower-triangular W with W G W^T = I, via Cholesky of G.

    Barely-indefinite matrices are retried with escalating diagonal jitter;
    a genuinely singular Gram is rejected.
    """
    g = np.asarray(gram, dtype=float)
    n = g.shape[0]
    if g.shape != (n, n) or not np.allclose(g, g.T, atol=1e-10):
        raise ApceError("Gram matrix must be square and symmetric")
    unit = np.trace(g) / n
    for lam in _JITTER_LADDER:
        jitter = lam * unit
        try:
            u = np.linalg.cholesky(g + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        w = scipy.linalg.solve_triangular(u, np.eye(n), lower=True)
        if not np.isfinite(w).all():
            continue
        # accept only if the factorized matrix is whitened to roundoff
        dev = np.max(np.abs(w @ (g + jitter * np.eye(n)) @ w.T - np.eye(n)))
        if dev < 1e-8 and np.max(np.abs(w @ g @ w.T - np.eye(n))) < 1e-6:
            return w, jitter
    raise ApceError("Gram numerically singular; reduce m or s, or standardize inputs")


@dataclass(frozen=True)
class ApceBasis:
    """Orthonormal basis for the empirical measure of the fitting sample.

    `whitening` maps monomials in standardized inputs to the orthonormal
    family; `center`/`scale` hold the affine input standardization.
    """

    index_set: MultiIndexSet
    whitening: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    jitter: float
    gram_cond: float

    def __len__(self) -> int:
        return len(self.index_set)


def build_basis(index_set: MultiIndexSet, xi: np.ndarray) -> ApceBasis:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 2:
        raise ApceError("samples must be a 2-D array")
    center = xi.mean(axis=0)
    scale = xi.std(axis=0)
    scale = np.where(scale > 0.0, scale, 1.0)
    z = (xi - center) / scale
    gram = gram_estimate(index_set, z)
    w, jitter = whiten(gram)
    cond = float(np.linalg.cond(gram + jitter * np.eye(len(index_set))))
    return ApceBasis(
        index_set=index_set,
        whitening=w,
        center=center,
        scale=scale,
        jitter=jitter,
        gram_cond=cond,
    )


def psi_matrix(basis: ApceBasis, xi: np.ndarray) -> np.ndarray:
    """Orthonormal basis functions evaluated at sample rows; (N_s, L)."""
    z = (np.asarray(xi, dtype=float) - basis.center) / basis.scale
    return monomial_matrix(basis.index_set, z) @ basis.whitening.T


def orthonormality_check(basis: ApceBasis, xi: np.ndarray) -> float:
    psi = psi_matrix(basis, xi)
    n_s = psi.shape[0]
    return float(np.max(np.abs(psi.T @ psi / n_s - np.eye(psi.shape[1]))))


@dataclass(frozen=True)
class ApceModel:
    """Least-squares chaos expansion for one or more response channels."""

    basis: ApceBasis
    coefficients: np.ndarray  # (n_outputs, L)
    labels: tuple[str, ...]


def fit_coefficients(
    basis: ApceBasis,
    xi: np.ndarray,
    responses: np.ndarray,
    labels: tuple[str, ...] | None = None,
) -> ApceModel:
    """Ordinary least-squares fit of each response column in the basis."""
    y = np.asarray(responses, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    psi = psi_matrix(basis, xi)
    if y.shape[0] != psi.shape[0]:
        raise ApceError(
            f"response rows ({y.shape[0]}) do not match sample rows ({psi.shape[0]})"
        )
    coef, _, rank, _ = scipy.linalg.lstsq(psi, y, lapack_driver="gelsd")
    if rank < psi.shape[1]:
        warnings.warn(
            f"rank-deficient design: effective rank {rank} of {psi.shape[1]}; "
            "keeping the minimum-norm solution",
            stacklevel=2,
        )
    if labels is None:
        labels = tuple(f"y{i}" for i in range(y.shape[1]))
    if len(labels) != y.shape[1]:
        raise ApceError("one label per response column required")
    return ApceModel(basis=basis, coefficients=coef.T, labels=tuple(labels))


def evaluate(model: ApceModel, xi: np.ndarray) -> np.ndarray:
    """Model responses at sample rows; (N_s, n_outputs)."""
    return psi_matrix(model.basis, xi) @ model.coefficients.T


def quantile(model: ApceModel, xi: np.ndarray, alpha: float) -> np.ndarray:
    """Per-output alpha quantile over the scenario set.

    Uses the ceiling order statistic: the k-th smallest evaluated response
    with k = ceil(alpha * N_s), which is conservative for tail bounds.
    """
    if not 0.0 < alpha < 1.0:
        raise ApceError("alpha must lie strictly between 0 and 1")
    vals = evaluate(model, xi)
    n_s = vals.shape[0]
    k = math.ceil(alpha * n_s)
    k = min(max(k, 1), n_s)
    return np.sort(vals, axis=0)[k - 1]


# ---------------------------------------------------------------------------
# serialization

_SCHEMA = "apce-model/1"


def model_to_json(model: ApceModel) -> str:
    doc = {
        "schema": _SCHEMA,
        "n_dims": model.basis.index_set.n_dims,
        "truncation": model.basis.index_set.truncation,
        "indices": [list(j) for j in model.basis.index_set.indices],
        "center": model.basis.center.tolist(),
        "scale": model.basis.scale.tolist(),
        "whitening": model.basis.whitening.tolist(),
        "jitter": model.basis.jitter,
        "gram_cond": model.basis.gram_cond,
        "labels": list(model.labels),
        "coefficients": model.coefficients.tolist(),
    }
    return json.dumps(doc, indent=1)


def model_from_json(text: str) -> ApceModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ApceError(f"malformed model document: {exc}") from exc
    if doc.get("schema") != _SCHEMA:
        raise ApceError(f"unrecognized model schema {doc.get('schema')!r}")
    index_set = MultiIndexSet(
        n_dims=int(doc["n_dims"]),
        indices=tuple(tuple(int(v) for v in j) for j in doc["indices"]),
        truncation=str(doc["truncation"]),
    )
    basis = ApceBasis(
        index_set=index_set,
        whitening=np.array(doc["whitening"], dtype=float),
        center=np.array(doc["center"], dtype=float),
        scale=np.array(doc["scale"], dtype=float),
        jitter=float(doc["jitter"]),
        gram_cond=float(doc["gram_cond"]),
    )
    return ApceModel(
        basis=basis,
        coefficients=np.array(doc["coefficients"], dtype=float).reshape(
            len(doc["labels"]), len(index_set)
        ),
        labels=tuple(doc["labels"]),
    )


def save_model(path, model: ApceModel) -> None:
    with open(path, "w") as fh:
        fh.write(model_to_json(model))


def load_model(path) -> ApceModel:
    with open(path) as fh:
        return model_from_json(fh.read())
