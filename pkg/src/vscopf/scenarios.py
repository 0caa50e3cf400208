"""Renewable scenarios, control-space sampling, and dataset generation.

Scenario sets hold per-plant active power (per-unit) with the plant-to-bus
mapping. They come either from CSV files (header row of bus ids, data rows
in MW, ``#`` comment lines) or from a synthetic specification: independent
marginals per plant (beta, lognormal or uniform, truncated to capacity)
reordered to match a target rank-correlation matrix. The reordering follows
the classic scheme of rank-matching against correlated normal scores, which
preserves each marginal exactly while hitting the target dependence within
sampling error.

Also here: stratified (Latin hypercube) sampling of the control space and
the builder that turns control samples into the stability-index training
set by running exact power flows and rejecting infeasible points.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import powerflow as pflib


class ScenarioError(ValueError):
    """Malformed scenario input or an impossible synthesis request."""


@dataclass
class ScenarioSet:
    """Plant injections per scenario, per-unit. values has shape (N_s, N_xi)."""

    buses: list
    values: np.ndarray
    source: dict = field(default_factory=dict)

    @property
    def n_scenarios(self):
        return self.values.shape[0]

    def mean_injection(self):
        means = self.values.mean(axis=0)
        return {bus: float(m) for bus, m in zip(self.buses, means)}

    def xi_mapping(self, i):
        return {bus: float(v) for bus, v in zip(self.buses, self.values[i])}

    def head(self, n):
        return ScenarioSet(buses=list(self.buses), values=self.values[:n].copy(),
                           source=dict(self.source, slice=f"head:{n}"))

    def tail(self, n):
        return ScenarioSet(buses=list(self.buses), values=self.values[-n:].copy(),
                           source=dict(self.source, slice=f"tail:{n}"))


def load_scenarios(path, base_mva):
    """Read a scenario CSV (MW) and convert to per-unit on base_mva."""
    with open(path, "r") as fh:
        lines = fh.readlines()
    header = None
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split(",")]
        if header is None:
            try:
                header = [int(c) for c in cells]
            except ValueError:
                raise ScenarioError(
                    f"line {lineno}: header must list plant bus ids, got {cells!r}"
                ) from None
            if len(set(header)) != len(header):
                raise ScenarioError(f"line {lineno}: duplicate plant bus id in header")
            continue
        if len(cells) != len(header):
            raise ScenarioError(
                f"line {lineno}: expected {len(header)} values, got {len(cells)}"
            )
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            bad = next(c for c in cells if not _is_float(c))
            raise ScenarioError(f"line {lineno}: non-numeric value {bad!r}") from None
    if header is None:
        raise ScenarioError("scenario file has no header row")
    if not rows:
        raise ScenarioError("scenario file has no data rows")
    values = np.asarray(rows, dtype=float) / float(base_mva)
    return ScenarioSet(buses=header, values=values, source={"path": str(path)})


def _is_float(token):
    try:
        float(token)
        return True
    except ValueError:
        return False


def write_scenarios(path, scen, base_mva):
    """Write a scenario set back to CSV in MW."""
    with open(path, "w") as fh:
        fh.write("# scenario injections, MW per plant\n")
        fh.write(",".join(str(b) for b in scen.buses) + "\n")
        for row in scen.values * float(base_mva):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


# ---------------------------------------------------------------------------
# Synthetic scenario generation


@dataclass
class PlantSpec:
    """Marginal description of one plant. capacity_mw bounds the output."""

    bus: int
    capacity_mw: float
    family: str  # "beta" | "lognormal" | "uniform"
    params: dict = field(default_factory=dict)


@dataclass
class ScenarioSynthSpec:
    plants: list
    rank_corr: np.ndarray
    base_mva: float = 100.0


def _draw_marginal(rng, plant, n):
    cap = float(plant.capacity_mw)
    p = plant.params
    if plant.family == "beta":
        x = cap * rng.beta(p.get("a", 2.0), p.get("b", 2.0), size=n)
    elif plant.family == "lognormal":
        x = rng.lognormal(p.get("mu", 0.0), p.get("sigma", 0.5), size=n)
    elif plant.family == "uniform":
        x = cap * rng.uniform(p.get("lo", 0.0), p.get("hi", 1.0), size=n)
    else:
        raise ScenarioError(f"plant at bus {plant.bus}: unknown family {plant.family!r}")
    return np.clip(x, 0.0, cap)


def synth_scenarios(spec, n_scenarios, seed):
    """Draw dependent scenarios: exact marginals, target rank correlation.

    Deterministic for a given seed. The target matrix must be symmetric
    positive definite with a unit diagonal.
    """
    k = len(spec.plants)
    R = np.asarray(spec.rank_corr, dtype=float)
    if R.shape != (k, k):
        raise ScenarioError(f"rank_corr must be {k}x{k}, got {R.shape}")
    if not np.allclose(R, R.T, atol=1e-12):
        raise ScenarioError("rank_corr must be symmetric")
    if not np.allclose(np.diag(R), 1.0, atol=1e-12):
        raise ScenarioError("rank_corr must have a unit diagonal")
    try:
        C = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ScenarioError("rank correlation matrix is not positive definite") from None
    if n_scenarios < 2:
        raise ScenarioError("need at least 2 scenarios")

    rng = np.random.default_rng(seed)
    X = np.column_stack([_draw_marginal(rng, pl, n_scenarios) for pl in spec.plants])

    # normal scores with the target dependence, then rank-match each column
    scores = ndtri(np.arange(1, n_scenarios + 1) / (n_scenarios + 1.0))
    M = np.column_stack([rng.permutation(scores) for _ in range(k)])
    E = np.corrcoef(M, rowvar=False)
    if k == 1:
        T = M
    else:
        F = np.linalg.cholesky(E)
        T = M @ np.linalg.inv(F).T @ C.T
    out = np.empty_like(X)
    for j in range(k):
        order = np.argsort(np.argsort(T[:, j]))
        out[:, j] = np.sort(X[:, j])[order]
    values = out / float(spec.base_mva)
    return ScenarioSet(
        buses=[pl.bus for pl in spec.plants],
        values=values,
        source={"synthetic": True, "seed": int(seed), "n": int(n_scenarios)},
    )


def rank_correlation(values):
    """Empirical rank correlation matrix of a (N_s, k) sample."""
    ranks = np.argsort(np.argsort(values, axis=0), axis=0).astype(float)
    return np.corrcoef(ranks, rowvar=False)


# ---------------------------------------------------------------------------
# Control-space sampling


@dataclass
class ControlBounds:
    """Box bounds on the control vector y = (generator p, setpoint v)."""

    names: list
    lo: np.ndarray
    hi: np.ndarray

    @property
    def dim(self):
        return self.lo.size


def control_bounds(case):
    names = []
    lo = []
    hi = []
    for k, g in enumerate(case.generators):
        names.append(f"pg{k}@bus{g.bus}")
        lo.append(g.p_min)
        hi.append(g.p_max)
    for i in case.vset_bus_index:
        bus = case.buses[i]
        names.append(f"v@bus{bus.id}")
        lo.append(bus.v_min)
        hi.append(bus.v_max)
    return ControlBounds(names=names, lo=np.array(lo, float), hi=np.array(hi, float))


def lhs_sample(bounds, n_samples, seed):
    """Latin hypercube over the control box: one point per stratum per axis."""
    if n_samples < 1:
        raise ScenarioError("need at least one sample")
    rng = np.random.default_rng(seed)
    d = bounds.dim
    u = np.empty((n_samples, d))
    for j in range(d):
        perm = rng.permutation(n_samples)
        jitter = rng.uniform(size=n_samples)
        u[:, j] = (perm + jitter) / n_samples
    return bounds.lo + u * (bounds.hi - bounds.lo)


# ---------------------------------------------------------------------------
# Stability-index dataset


@dataclass
class VsiDataset:
    """Training table: state predictors z (all v, then non-ref theta) and
    the stability index per accepted sample."""

    z: np.ndarray
    sigma: np.ndarray
    col_labels: list
    accepted: int
    rejected: int

    @property
    def n_samples(self):
        return self.z.shape[0]


def state_labels(case):
    ext = [b.id for b in case.buses]
    return [f"v@bus{ext[i]}" for i in range(case.n_bus)] + [
        f"theta@bus{ext[i]}" for i in case.non_ref_indices
    ]


def build_vsi_dataset(case, y_samples, xi=None, tol=1e-8, max_iter=30):
    """Run exact power flows over control samples and collect (z, sigma).

    xi holds the expected renewable injection per external bus id; it is
    fixed across all samples. Samples whose power flow fails to converge
    are rejected and counted.
    """
    from .netmodel import build_admittance

    Y = build_admittance(case).complex
    y_samples = np.atleast_2d(np.asarray(y_samples, float))
    n_gen = case.n_gen
    dim = n_gen + case.vset_bus_index.size
    if y_samples.shape[1] != dim:
        raise ScenarioError(
            f"control samples have {y_samples.shape[1]} columns, expected {dim}"
        )
    p_load, q_load = case.loads()
    n = case.n_bus
    base_p = -p_load.copy()
    if xi:
        for bus_id, val in xi.items():
            base_p[case.index_of(bus_id)] += val
    agg = np.zeros((n, n_gen))
    agg[case.gen_bus_index, np.arange(n_gen)] = 1.0
    m = y_samples.shape[0]
    P = base_p[None, :] + y_samples[:, :n_gen] @ agg.T
    Q = np.repeat(-q_load[None, :], m, axis=0)
    v_set = np.ones((m, n))
    v_set[:, case.vset_bus_index] = y_samples[:, n_gen:]
    res = pflib.solve_pf_batch(case, P, Q, v_set, Y=Y, tol=tol, max_iter=max_iter)
    ok = res.converged
    accepted = int(ok.sum())
    rejected = int((~ok).sum())
    if accepted == 0:
        raise ScenarioError("empty dataset: no control sample had a feasible power flow")
    z = np.concatenate([res.v[ok], res.theta[ok][:, case.non_ref_indices]], axis=1)
    sigma = pflib.batch_jacobian_msv(case, res.v[ok], res.theta[ok], Y=Y)
    return VsiDataset(
        z=z,
        sigma=np.asarray(sigma, float),
        col_labels=state_labels(case),
        accepted=accepted,
        rejected=rejected,
    )


def write_vsi_dataset(path, ds):
    with open(path, "w") as fh:
        fh.write(f"# accepted={ds.accepted} rejected={ds.rejected}\n")
        fh.write(",".join(ds.col_labels + ["sigma"]) + "\n")
        for row, s in zip(ds.z, ds.sigma):
            fh.write(",".join(repr(float(x)) for x in row) + f",{float(s)!r}\n")


def load_vsi_dataset(path):
    accepted = rejected = 0
    header = None
    rows = []
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("accepted="):
                        accepted = int(tok.split("=")[1])
                    elif tok.startswith("rejected="):
                        rejected = int(tok.split("=")[1])
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(c) for c in line.split(",")])
    if header is None or not rows:
        raise ScenarioError("dataset file is empty")
    data = np.asarray(rows, float)
    return VsiDataset(
        z=data[:, :-1],
        sigma=data[:, -1],
        col_labels=header[:-1],
        accepted=accepted or data.shape[0],
        rejected=rejected,
    )
