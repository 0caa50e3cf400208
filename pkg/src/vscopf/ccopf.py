"""Chance-constrained optimal power flow with a stability-index floor.

The driver alternates a deterministic interior-point dispatch solve with
an uncertainty-propagation step: scenario power flows give empirical
response samples (slack active power, machine reactive power, load-bus
voltages, branch currents, the stability index), a reduced chaos
expansion turns them into cheap quantile estimates, and any quantile
found outside its original limit shrinks the corresponding bound for
the next solve. The loop stops when every margin vanishes.

Constraint bookkeeping lives in a flat registry: one row per monitored
scalar response, with its class, its original interval, and the current
tightened interval. Only registry rows are ever tightened; voltage
setpoint limits at generator buses and active-power limits of
non-reference machines stay deterministic.
"""

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .apce import build_basis, fit_coefficients, quantile, reduced_indices
from .ipm import IpmConfig, NlpProblem, solve_nlp
from .netmodel import build_admittance
from .powerflow import (
    OperatingPoint,
    base_dispatch,
    batch_branch_currents,
    batch_jacobian_msv,
    calc_injections,
    injections_from_dispatch,
    solve_pf,
    solve_pf_batch,
)
from .surrogate import MlpSurrogate, PlsMap, ReducedSurrogate, eval_with_derivatives

__all__ = [
    "ApceSettings",
    "BoundsState",
    "CalibrationParams",
    "CcopfError",
    "ChanceSpec",
    "InfeasibleError",
    "OperatingPoint",
    "SolveReport",
    "ViolationReport",
    "build_deterministic",
    "empirical_violation",
    "initial_bounds",
    "iterate",
    "margins",
    "report_to_json",
    "solve_deterministic",
    "tighten",
]

_PF_CHUNK = 2048  # scenario block size; thread slices align with it


class CcopfError(RuntimeError):
    """Configuration or feasibility failure of the tightening scheme."""


class InfeasibleError(CcopfError):
    """The requested violation levels admit no operating interval."""


@dataclass(frozen=True)
class ChanceSpec:
    """Per-class violation budgets and the stability floor.

    Each epsilon bounds the probability mass allowed beyond one side of
    the corresponding limit; both sides of a two-sided limit get the
    full budget.
    """

    eps_p: float = 0.05
    eps_q: float = 0.05
    eps_v: float = 0.05
    eps_i: float = 0.05
    eps_sigma: float = 0.05
    sigma_min: float = 0.1

    def __post_init__(self):
        for name in ("eps_p", "eps_q", "eps_v", "eps_i", "eps_sigma"):
            val = getattr(self, name)
            if not 0.0 < val < 0.5:
                raise CcopfError(f"{name} must lie strictly inside (0, 0.5), got {val}")
        if not self.sigma_min > 0.0:
            raise CcopfError(f"sigma_min must be positive, got {self.sigma_min}")

    def eps_for(self, cls):
        return {
            "P": self.eps_p,
            "Q": self.eps_q,
            "V": self.eps_v,
            "I": self.eps_i,
            "S": self.eps_sigma,
        }[cls]


@dataclass(frozen=True)
class CalibrationParams:
    """Surrogate-error compensation for the stability constraint.

    rho is subtracted from the surrogate inside the dispatch solve;
    delta widens the stability margin after quantile evaluation. A
    delta of None asks the driver to estimate it from held-out
    scenario residuals each iteration.
    """

    rho: float = 0.0
    delta: float = None
    enabled: bool = False

    def __post_init__(self):
        if self.rho < 0.0:
            raise CcopfError(f"rho must be nonnegative, got {self.rho}")
        if self.delta is not None and self.delta < 0.0:
            raise CcopfError(f"delta must be nonnegative, got {self.delta}")


@dataclass(frozen=True)
class ApceSettings:
    """Chaos-expansion configuration for response propagation."""

    max_interaction: int = 2
    max_degree: int = 2
    holdout_fraction: float = 0.2
    split_seed: int = 0

    def __post_init__(self):
        if self.max_interaction < 1 or self.max_degree < 1:
            raise CcopfError("max_interaction and max_degree must be at least 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise CcopfError("holdout_fraction must lie strictly inside (0, 1)")


# ---------------------------------------------------------------------------
# constraint registry


@dataclass(frozen=True)
class _Row:
    label: str
    cls: str  # "P" | "Q" | "V" | "I" | "S"
    kind: str  # "pg" | "qg" | "v" | "i" | "sigma"
    index: int  # generator position, bus index, or branch position


def _dedup(labels):
    seen = {}
    out = []
    for lab in labels:
        seen[lab] = seen.get(lab, 0) + 1
        out.append(lab if seen[lab] == 1 else f"{lab}#{seen[lab]}")
    return out


def _registry_rows(case, include_stability=True):
    rows = []
    ref = case.ref_index
    pg_labels = []
    pg_idx = []
    for k, g in enumerate(case.generators):
        if case.index_of(g.bus) == ref:
            pg_labels.append(f"pg[{g.bus}]")
            pg_idx.append(k)
    for lab, k in zip(_dedup(pg_labels), pg_idx):
        rows.append(_Row(lab, "P", "pg", k))
    q_labels = _dedup([f"qg[{g.bus}]" for g in case.generators])
    for k, lab in enumerate(q_labels):
        rows.append(_Row(lab, "Q", "qg", k))
    for i in case.pq_indices:
        rows.append(_Row(f"v[{case.buses[i].id}]", "V", "v", int(i)))
    i_labels = []
    i_idx = []
    for k, br in enumerate(case.branches):
        if math.isfinite(br.i_max):
            i_labels.append(f"i[{br.from_bus}-{br.to_bus}]")
            i_idx.append(k)
    for lab, k in zip(_dedup(i_labels), i_idx):
        rows.append(_Row(lab, "I", "i", k))
    if include_stability:
        rows.append(_Row("sigma", "S", "sigma", -1))
    return rows


@dataclass
class BoundsState:
    """Original and currently tightened intervals per registry row."""

    labels: list
    classes: np.ndarray
    lo0: np.ndarray
    hi0: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    k: int = 0
    d_lo: np.ndarray = None
    d_hi: np.ndarray = None

    def __post_init__(self):
        m = len(self.labels)
        for name in ("classes", "lo0", "hi0", "lo", "hi"):
            arr = getattr(self, name)
            if np.asarray(arr).shape != (m,):
                raise CcopfError(f"bounds field {name} must have {m} entries")
        if np.any(self.lo < self.lo0 - 1e-12) or np.any(self.hi > self.hi0 + 1e-12):
            raise CcopfError("tightened interval escapes the original one")
        if np.any(self.lo > self.hi + 1e-12):
            bad = int(np.argmax(self.lo - self.hi))
            raise CcopfError(f"empty interval on '{self.labels[bad]}'")

    def copy(self):
        return BoundsState(
            labels=list(self.labels),
            classes=self.classes.copy(),
            lo0=self.lo0.copy(),
            hi0=self.hi0.copy(),
            lo=self.lo.copy(),
            hi=self.hi.copy(),
            k=self.k,
            d_lo=None if self.d_lo is None else self.d_lo.copy(),
            d_hi=None if self.d_hi is None else self.d_hi.copy(),
        )


def initial_bounds(case, chance, include_stability=True):
    """Registry intervals straight from the case limits."""
    rows = _registry_rows(case, include_stability)
    m = len(rows)
    lo0 = np.empty(m)
    hi0 = np.empty(m)
    for r, row in enumerate(rows):
        if row.kind == "pg":
            g = case.generators[row.index]
            lo0[r], hi0[r] = g.p_min, g.p_max
        elif row.kind == "qg":
            g = case.generators[row.index]
            lo0[r], hi0[r] = g.q_min, g.q_max
        elif row.kind == "v":
            bus = case.buses[row.index]
            lo0[r], hi0[r] = bus.v_min, bus.v_max
        elif row.kind == "i":
            lo0[r], hi0[r] = -np.inf, case.branches[row.index].i_max
        else:
            lo0[r], hi0[r] = chance.sigma_min, np.inf
    return BoundsState(
        labels=[row.label for row in rows],
        classes=np.array([row.cls for row in rows]),
        lo0=lo0,
        hi0=hi0,
        lo=lo0.copy(),
        hi=hi0.copy(),
    )


def margins(quantiles, bounds, chance, calib):
    """Bound adjustments from quantile overshoot past the original limits.

    The stability row additionally absorbs the expansion-error widening
    delta inside the positive part when calibration is enabled.
    """
    q_lo, q_hi = (np.asarray(q, float) for q in quantiles)
    if q_lo.shape != bounds.lo0.shape or q_hi.shape != bounds.hi0.shape:
        raise CcopfError("quantile arrays must match the registry length")
    delta = 0.0
    if calib.enabled and calib.delta is not None:
        delta = calib.delta
    add = np.where((bounds.classes == "S") & calib.enabled, delta, 0.0)
    d_lo = np.maximum(bounds.lo0 - q_lo + add, 0.0)
    d_hi = np.maximum(q_hi - bounds.hi0, 0.0)
    return d_lo, d_hi


def tighten(bounds, margin_pair):
    """Apply margins cumulatively to the current intervals."""
    d_lo, d_hi = (np.asarray(d, float) for d in margin_pair)
    if np.any(d_lo < 0.0) or np.any(d_hi < 0.0):
        raise CcopfError("margins must be nonnegative")
    lo_new = bounds.lo + d_lo
    hi_new = bounds.hi - d_hi
    crossed = lo_new > hi_new + 1e-12
    if np.any(crossed):
        bad = int(np.argmax(lo_new - hi_new))
        raise InfeasibleError(
            "chance constraints jointly infeasible at the requested violation "
            f"levels: interval of '{bounds.labels[bad]}' collapsed to "
            f"[{lo_new[bad]:.6g}, {hi_new[bad]:.6g}]"
        )
    return BoundsState(
        labels=list(bounds.labels),
        classes=bounds.classes.copy(),
        lo0=bounds.lo0.copy(),
        hi0=bounds.hi0.copy(),
        lo=lo_new,
        hi=hi_new,
        k=bounds.k + 1,
        d_lo=d_lo.copy(),
        d_hi=d_hi.copy(),
    )


# ---------------------------------------------------------------------------
# deterministic dispatch problem


def _as_reduced(surrogate):
    if surrogate is None or isinstance(surrogate, ReducedSurrogate):
        return surrogate
    if isinstance(surrogate, MlpSurrogate):
        m = surrogate.n_inputs
        pls = PlsMap(projection=np.eye(m), explained=np.ones(m) / m, center=np.zeros(m))
        return ReducedSurrogate(pls=pls, mlp=surrogate)
    raise CcopfError("unsupported surrogate type for the stability constraint")


def build_deterministic(case, bounds, surrogate, sigma_min, calib=None,
                        xi_mean=None):
    """Assemble the dispatch NLP at the given tightened bounds.

    State layout: x = [theta(non-ref), v(all), p_g, q_g]. Equalities are
    the active and reactive nodal balances; inequalities are box rows on
    monitored quantities, squared branch-current caps, and optionally a
    floor on the surrogate stability index. All derivatives are analytic
    except the surrogate block, which carries its own stencil.
    """
    if calib is None:
        calib = CalibrationParams()
    n = case.n_bus
    ng = case.n_gen
    n_th = n - 1
    nx = n_th + n + 2 * ng
    sl_th = slice(0, n_th)
    sl_v = slice(n_th, n_th + n)
    sl_pg = slice(n_th + n, n_th + n + ng)
    sl_qg = slice(n_th + n + ng, nx)
    nonref = case.non_ref_indices
    ref = case.ref_index
    thpos = np.full(n, -1, dtype=int)
    thpos[nonref] = np.arange(n_th)
    # surrogate input order: all magnitudes, then non-reference angles
    z_idx = np.concatenate([np.arange(n_th, n_th + n), np.arange(n_th)])

    Y = build_admittance(case).complex
    p_load, q_load = case.loads()
    xivec = np.zeros(n)
    for bus_id, val in (xi_mean or {}).items():
        xivec[case.index_of(bus_id)] += float(val)
    cg = np.zeros((n, ng))
    cg[case.gen_bus_index, np.arange(ng)] = 1.0

    base = case.base_mva
    cost_a = np.array([g.cost[0] for g in case.generators]) * base * base
    cost_b = np.array([g.cost[1] for g in case.generators]) * base
    cost_c = float(sum(g.cost[2] for g in case.generators))

    red = _as_reduced(surrogate)
    include_sigma = red is not None and sigma_min is not None
    rho_eff = calib.rho if calib.enabled else 0.0

    # registry intervals for monitored rows, case limits elsewhere
    row_bounds = {lab: (bounds.lo[r], bounds.hi[r]) for r, lab in enumerate(bounds.labels)}
    rows = _registry_rows(case, include_stability=False)
    reg = {(row.kind, row.index): row.label for row in rows}

    box_cols = []
    box_signs = []
    box_offsets = []
    box_labels = []

    def _add_box(col, lo, hi, label):
        if np.isfinite(lo):
            box_cols.append(col)
            box_signs.append(1.0)
            box_offsets.append(-lo)
            box_labels.append(f"{label}.lo")
        if np.isfinite(hi):
            box_cols.append(col)
            box_signs.append(-1.0)
            box_offsets.append(hi)
            box_labels.append(f"{label}.hi")

    for k, g in enumerate(case.generators):
        lab = reg.get(("pg", k))
        lo, hi = row_bounds[lab] if lab else (g.p_min, g.p_max)
        _add_box(sl_pg.start + k, lo, hi, lab or f"pg[{g.bus}]")
    for k, g in enumerate(case.generators):
        lab = reg[("qg", k)]
        lo, hi = row_bounds[lab]
        _add_box(sl_qg.start + k, lo, hi, lab)
    for i, bus in enumerate(case.buses):
        lab = reg.get(("v", i))
        lo, hi = row_bounds[lab] if lab else (bus.v_min, bus.v_max)
        _add_box(sl_v.start + i, lo, hi, lab or f"v[{bus.id}]")

    box_cols = np.array(box_cols, dtype=int)
    box_signs = np.array(box_signs)
    box_offsets = np.array(box_offsets)
    n_box = box_cols.size

    cur_rows = [row for row in rows if row.kind == "i"]
    cur_lims = np.array([row_bounds[row.label][1] for row in cur_rows])
    cur_labels = [f"{row.label}.hi" for row in cur_rows]
    if cur_rows:
        from .powerflow import _branch_coefficients

        a_br, b_br, fi, ti = _branch_coefficients(case)
        sel = np.array([row.index for row in cur_rows], dtype=int)
        cur_a, cur_b = a_br[sel], b_br[sel]
        cur_f, cur_t = fi[sel], ti[sel]
    n_cur = len(cur_rows)
    n_sig = 1 if include_sigma else 0
    m_ineq = n_box + n_cur + n_sig

    ineq_labels = tuple(box_labels + cur_labels + (["sigma"] if include_sigma else []))
    eq_labels = tuple(
        [f"P@bus{b.id}" for b in case.buses] + [f"Q@bus{b.id}" for b in case.buses]
    )

    sigma_cache = {}

    def _sigma_eval(x):
        z = x[z_idx]
        key = z.tobytes()
        hit = sigma_cache.get(key)
        if hit is None:
            hit = eval_with_derivatives(red, z)
            if len(sigma_cache) > 16:
                sigma_cache.clear()
            sigma_cache[key] = hit
        return hit

    def _state(x):
        th = np.zeros(n)
        th[nonref] = x[sl_th]
        v = x[sl_v]
        return v, th, v * np.exp(1j * th)

    def objective(x):
        pg = x[sl_pg]
        f = float(cost_a @ pg**2 + cost_b @ pg + cost_c)
        g = np.zeros(nx)
        g[sl_pg] = 2.0 * cost_a * pg + cost_b
        return f, g

    def eq(x):
        v, th, Vc = _state(x)
        Ib = Y @ Vc
        S = Vc * np.conj(Ib)
        pg = x[sl_pg]
        qg = x[sl_qg]
        ce = np.concatenate([
            S.real - (cg @ pg - p_load + xivec),
            S.imag - (cg @ qg - q_load),
        ])
        dS_dVa = 1j * Vc[:, None] * np.conj(np.diag(Ib) - Y * Vc[None, :])
        dS_dVm = Vc[:, None] * np.conj(Y * (Vc / v)[None, :]) + np.diag(np.conj(Ib) * Vc / v)
        ae = np.zeros((2 * n, nx))
        ae[:n, sl_th] = dS_dVa.real[:, nonref]
        ae[:n, sl_v] = dS_dVm.real
        ae[:n, sl_pg] = -cg
        ae[n:, sl_th] = dS_dVa.imag[:, nonref]
        ae[n:, sl_v] = dS_dVm.imag
        ae[n:, sl_qg] = -cg
        return ce, ae

    def ineq(x):
        c = np.empty(m_ineq)
        A = np.zeros((m_ineq, nx))
        c[:n_box] = box_signs * x[box_cols] + box_offsets
        A[np.arange(n_box), box_cols] = box_signs
        if n_cur:
            v, th, Vc = _state(x)
            I = cur_a * Vc[cur_f] + cur_b * Vc[cur_t]
            F = np.abs(I) ** 2
            r = np.arange(n_box, n_box + n_cur)
            c[r] = cur_lims**2 - F
            cI = np.conj(I)
            dth_f = 2.0 * np.real(cI * 1j * cur_a * Vc[cur_f])
            dth_t = 2.0 * np.real(cI * 1j * cur_b * Vc[cur_t])
            dv_f = 2.0 * np.real(cI * cur_a * Vc[cur_f] / v[cur_f])
            dv_t = 2.0 * np.real(cI * cur_b * Vc[cur_t] / v[cur_t])
            mask_f = thpos[cur_f] >= 0
            mask_t = thpos[cur_t] >= 0
            A[r[mask_f], thpos[cur_f[mask_f]]] -= dth_f[mask_f]
            A[r[mask_t], thpos[cur_t[mask_t]]] -= dth_t[mask_t]
            np.add.at(A, (r, sl_v.start + cur_f), -dv_f)
            np.add.at(A, (r, sl_v.start + cur_t), -dv_t)
        if include_sigma:
            val, grad, _ = _sigma_eval(x)
            c[-1] = val - rho_eff - sigma_min
            A[-1, z_idx] = grad
        return c, A

    def lag_hess(x, lam_eq, lam_ineq):
        H = np.zeros((nx, nx))
        idx_pg = np.arange(sl_pg.start, sl_pg.stop)
        H[idx_pg, idx_pg] += 2.0 * cost_a

        v, th, Vc = _state(x)
        mu = lam_eq[:n] - 1j * lam_eq[n:]
        if np.any(mu):
            Ib = Y @ Vc
            Avec = mu * Vc
            B = Y * Vc[None, :]
            C = Avec[:, None] * np.conj(B)
            D = Y.conj().T * Vc[None, :]
            Dmu = D @ mu
            E = np.conj(Vc)[:, None] * D * mu[None, :] - np.diag(np.conj(Vc) * Dmu)
            Fm = C - np.diag(Avec * np.conj(Ib))
            ginv = 1.0 / v
            Gaa = E + Fm
            Gva = 1j * ginv[:, None] * (E - Fm)
            Gav = Gva.T
            Gvv = ginv[:, None] * (C + C.T) * ginv[None, :]
            H[sl_th, sl_th] -= Gaa.real[np.ix_(nonref, nonref)]
            H[sl_th, sl_v] -= Gav.real[nonref, :]
            H[sl_v, sl_th] -= Gva.real[:, nonref]
            H[sl_v, sl_v] -= Gvv.real

        if n_cur:
            I = cur_a * Vc[cur_f] + cur_b * Vc[cur_t]
            cI = np.conj(I)
            for j in range(n_cur):
                w = lam_ineq[n_box + j]
                if w == 0.0:
                    continue
                f, t = cur_f[j], cur_t[j]
                ya, yb = cur_a[j], cur_b[j]
                dthf = 1j * ya * Vc[f]
                dtht = 1j * yb * Vc[t]
                dvf = ya * Vc[f] / v[f]
                dvt = yb * Vc[t] / v[t]
                loc = np.zeros((4, 4))
                loc[0, 0] = 2 * np.real(np.conj(dthf) * dthf) - 2 * np.real(cI[j] * ya * Vc[f])
                loc[1, 1] = 2 * np.real(np.conj(dtht) * dtht) - 2 * np.real(cI[j] * yb * Vc[t])
                loc[0, 1] = 2 * np.real(np.conj(dthf) * dtht)
                loc[0, 2] = 2 * np.real(np.conj(dthf) * dvf) + 2 * np.real(cI[j] * 1j * ya * Vc[f] / v[f])
                loc[0, 3] = 2 * np.real(np.conj(dthf) * dvt)
                loc[1, 2] = 2 * np.real(np.conj(dtht) * dvf)
                loc[1, 3] = 2 * np.real(np.conj(dtht) * dvt) + 2 * np.real(cI[j] * 1j * yb * Vc[t] / v[t])
                loc[2, 2] = 2 * np.real(np.conj(dvf) * dvf)
                loc[2, 3] = 2 * np.real(np.conj(dvf) * dvt)
                loc[3, 3] = 2 * np.real(np.conj(dvt) * dvt)
                loc = np.triu(loc) + np.triu(loc, 1).T
                cols = np.array([thpos[f], thpos[t], sl_v.start + f, sl_v.start + t])
                keep = cols >= 0  # drop the fixed reference angle
                sub = loc[np.ix_(keep, keep)]
                gcols = cols[keep]
                # cap row contributes -F, Lagrangian subtracts it back
                H[np.ix_(gcols, gcols)] += w * sub

        if include_sigma and lam_ineq[-1] != 0.0:
            _, _, hz = _sigma_eval(x)
            H[np.ix_(z_idx, z_idx)] -= lam_ineq[-1] * hz
        return 0.5 * (H + H.T)

    x0 = np.zeros(nx)
    v0 = np.ones(n)
    disp0 = base_dispatch(case)
    v0[case.vset_bus_index] = disp0.v_g
    x0[sl_v] = v0
    x0[sl_pg] = disp0.p_g

    meta = {
        "case": case,
        "Y": Y,
        "xi_mean": dict(xi_mean) if xi_mean else None,
        "sl_th": sl_th,
        "sl_v": sl_v,
        "sl_pg": sl_pg,
        "sl_qg": sl_qg,
        "z_idx": z_idx,
        "bounds": bounds,
        "sigma_min": sigma_min,
        "rho": rho_eff,
        "surrogate": red,
        "include_sigma": include_sigma,
    }
    return NlpProblem(
        n=nx,
        x0=x0,
        objective=objective,
        eq=eq,
        ineq=ineq,
        lag_hess=lag_hess,
        eq_labels=eq_labels,
        ineq_labels=ineq_labels,
        meta=meta,
    )


def solve_deterministic(problem, init, ipm_config=None):
    """Solve the dispatch NLP starting from a solved power-flow state.

    Returns the operating point (machine active powers plus voltage
    setpoints) and the expected generation cost. Numerical failures of
    the inner solver or of the warm-start power flow propagate.
    """
    meta = problem.meta
    case = meta["case"]
    inj = injections_from_dispatch(case, init, xi=meta["xi_mean"])
    sol = solve_pf(case, inj, Y=meta["Y"])
    problem.x0 = np.concatenate([
        sol.theta[case.non_ref_indices], sol.v, sol.p_gen, sol.q_gen,
    ])
    res = solve_nlp(problem, ipm_config or IpmConfig(max_iter=300))
    meta["last_result"] = res
    x = res.x
    op = OperatingPoint(
        p_g=x[meta["sl_pg"]].copy(),
        v_g=x[meta["sl_v"]][case.vset_bus_index].copy(),
    )
    return op, float(res.f)


# ---------------------------------------------------------------------------
# scenario responses


def _batch_pf(case, P, Q, v_set, Y, threads):
    B = P.shape[0]
    if threads <= 1 or B <= _PF_CHUNK:
        return solve_pf_batch(case, P, Q, v_set, Y=Y)
    # slices align with the internal chunk size, so the reduction order
    # and therefore every bit of the result match the serial path
    spans = [(lo, min(lo + _PF_CHUNK, B)) for lo in range(0, B, _PF_CHUNK)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(
            ex.map(lambda s: solve_pf_batch(case, P[s[0]:s[1]], Q[s[0]:s[1]], v_set, Y=Y), spans)
        )
    from .powerflow import BatchPfResult

    return BatchPfResult(
        v=np.concatenate([p.v for p in parts]),
        theta=np.concatenate([p.theta for p in parts]),
        converged=np.concatenate([p.converged for p in parts]),
        iterations=np.concatenate([p.iterations for p in parts]),
        residual=np.concatenate([p.residual for p in parts]),
    )


def _response_matrix(case, y, scenarios, rows, Y, threads=1):
    """Exact per-scenario responses of every registry row at dispatch y."""
    inj = injections_from_dispatch(case, y)
    n_s = scenarios.n_scenarios
    P = np.repeat(inj.p[None, :], n_s, axis=0)
    for j, bus in enumerate(scenarios.buses):
        P[:, case.index_of(bus)] += scenarios.values[:, j]
    Q = np.repeat(inj.q[None, :], n_s, axis=0)
    res = _batch_pf(case, P, Q, inj.v_set, Y, threads)
    ok = res.converged

    P_inj, Q_inj = calc_injections(Y, res.v, res.theta)
    p_load, q_load = case.loads()
    gbi = case.gen_bus_index
    counts = np.bincount(gbi, minlength=case.n_bus)
    ref = case.ref_index
    n_ref = max(int((gbi == ref).sum()), 1)
    slack_share = (P_inj[:, ref] - P[:, ref]) / n_ref

    need_cur = any(row.kind == "i" for row in rows)
    cur = batch_branch_currents(case, res.v, res.theta) if need_cur else None
    need_sig = any(row.kind == "sigma" for row in rows)
    sig = batch_jacobian_msv(case, res.v, res.theta, Y=Y) if need_sig else None

    X = np.empty((n_s, len(rows)))
    for r, row in enumerate(rows):
        if row.kind == "pg":
            X[:, r] = y.p_g[row.index] + slack_share
        elif row.kind == "qg":
            b = gbi[row.index]
            X[:, r] = (Q_inj[:, b] + q_load[b]) / counts[b]
        elif row.kind == "v":
            X[:, r] = res.v[:, row.index]
        elif row.kind == "i":
            X[:, r] = cur[:, row.index]
        else:
            X[:, r] = sig
    return X, ok


@dataclass
class ViolationReport:
    """Empirical violation frequency of each original limit.

    ``eps_lo``/``eps_hi`` count each side separately, matching the
    one-constraint-per-side formulation the quantile guarantee holds
    for; ``eps_j`` is the frequency of either side failing.
    """

    labels: list
    classes: np.ndarray
    eps_j: np.ndarray
    eps_lo: np.ndarray
    eps_hi: np.ndarray
    max_eps_j: float
    n_unconverged: int
    n_scenarios: int


def _count_violations(X, ok, lo0, hi0):
    below = X < lo0[None, :] - 1e-9
    above = X > hi0[None, :] + 1e-9
    below[~ok, :] = True  # a diverged scenario violates everything
    above[~ok, :] = True
    return below.mean(axis=0), above.mean(axis=0), (below | above).mean(axis=0)


def empirical_violation(case, y, scenarios, chance, include_stability=True,
                        threads=1):
    """Monte Carlo violation check of a dispatch against original limits."""
    bounds = initial_bounds(case, chance, include_stability)
    rows = _registry_rows(case, include_stability)
    Y = build_admittance(case).complex
    X, ok = _response_matrix(case, y, scenarios, rows, Y, threads)
    eps_lo, eps_hi, eps_j = _count_violations(X, ok, bounds.lo0, bounds.hi0)
    return ViolationReport(
        labels=list(bounds.labels),
        classes=bounds.classes.copy(),
        eps_j=eps_j,
        eps_lo=eps_lo,
        eps_hi=eps_hi,
        max_eps_j=float(eps_j.max()) if eps_j.size else 0.0,
        n_unconverged=int((~ok).sum()),
        n_scenarios=scenarios.n_scenarios,
    )


# ---------------------------------------------------------------------------
# tightening driver


@dataclass
class SolveReport:
    """Outcome of the tightening loop at convergence."""

    operating_point: OperatingPoint
    cost: float
    iterations: int
    converged: bool
    labels: list
    classes: np.ndarray
    eps_j: np.ndarray
    eps_lo: np.ndarray
    eps_hi: np.ndarray
    max_eps_j: float
    n_unconverged: int
    n_scenarios: int
    max_margin: float
    history: list
    timings: dict
    bounds: BoundsState
    responses: np.ndarray
    response_ok: np.ndarray
    delta_used: float = None
    rho_used: float = 0.0
    stability_included: bool = True


def _estimate_delta(basis, xi, X_sigma, ok, settings):
    """Widening from surrogate-free residuals on a held-out scenario split."""
    idx = np.flatnonzero(ok)
    if idx.size < 10:
        return 0.0
    rng = np.random.default_rng(settings.split_seed)
    perm = rng.permutation(idx.size)
    n_hold = max(int(round(settings.holdout_fraction * idx.size)), 1)
    hold = idx[perm[:n_hold]]
    fit = idx[perm[n_hold:]]
    if fit.size < 10:
        return 0.0
    model = fit_coefficients(basis, xi[fit], X_sigma[fit])
    from .apce import evaluate

    pred = evaluate(model, xi[hold])[:, 0]
    resid = np.abs(X_sigma[hold] - pred)
    return float(np.quantile(resid, 0.999))


def iterate(case, scenarios, chance, surrogate, apce_cfg=None, calib=None,
            k_max=50, bounds0=None, include_stability=True, margin_tol=1e-6,
            threads=1, ipm_config=None):
    """Run the quantile-tightening loop to a fixed point.

    Each pass solves the deterministic dispatch at the current bounds,
    propagates the scenario set through exact power flows, fits the
    chaos expansion to every monitored response, and converts quantile
    overshoot into margins. Zero margins terminate; exhausting k_max
    raises. The returned report carries the empirical violation rates
    of the final dispatch on the fitting scenarios.
    """
    if apce_cfg is None:
        apce_cfg = ApceSettings()
    if calib is None:
        calib = CalibrationParams()
    if include_stability and surrogate is None:
        raise CcopfError("stability constraint requested but no surrogate given")

    fresh = initial_bounds(case, chance, include_stability)
    if bounds0 is None:
        bounds = fresh
    else:
        if list(bounds0.labels) != fresh.labels:
            raise CcopfError("resume bounds do not match the case registry")
        bounds = bounds0.copy()
        bounds.k = 0

    rows = _registry_rows(case, include_stability)
    sigma_row = next((r for r, row in enumerate(rows) if row.kind == "sigma"), None)
    Y = build_admittance(case).complex
    xi = scenarios.values
    basis = build_basis(
        reduced_indices(xi.shape[1], apce_cfg.max_interaction, apce_cfg.max_degree),
        xi,
    )
    xi_mean = scenarios.mean_injection()
    classes = bounds.classes
    timings = {"nlp_s": 0.0, "pf_s": 0.0, "apce_s": 0.0}
    history = []
    delta_used = calib.delta if calib.enabled else None
    red = _as_reduced(surrogate) if include_stability else None

    op = cost = X = ok = None
    converged = False
    max_margin = np.inf
    init = base_dispatch(case)
    for k in range(k_max + 1):
        sigma_min_k = float(bounds.lo[sigma_row]) if sigma_row is not None else None
        prob = build_deterministic(case, bounds, red, sigma_min_k, calib,
                                   xi_mean=xi_mean)
        t0 = time.perf_counter()
        # each pass moves the bounds a little, so the previous optimum is
        # the natural continuation start
        op, cost = solve_deterministic(prob, init, ipm_config)
        init = op
        timings["nlp_s"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        X, ok = _response_matrix(case, op, scenarios, rows, Y, threads)
        timings["pf_s"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        model = fit_coefficients(basis, xi[ok], X[ok])
        q_lo = np.empty(len(rows))
        q_hi = np.empty(len(rows))
        for cls in dict.fromkeys(classes):
            eps = chance.eps_for(cls)
            pick = classes == cls
            q_lo[pick] = quantile(model, xi, eps)[pick]
            q_hi[pick] = quantile(model, xi, 1.0 - eps)[pick]
        calib_k = calib
        if calib.enabled and sigma_row is not None and calib.delta is None:
            delta_used = _estimate_delta(basis, xi, X[:, sigma_row], ok, apce_cfg)
            calib_k = CalibrationParams(rho=calib.rho, delta=delta_used,
                                        enabled=True)
        d_lo, d_hi = margins((q_lo, q_hi), bounds, chance, calib_k)
        timings["apce_s"] += time.perf_counter() - t0

        max_margin = float(max(d_lo.max(initial=0.0), d_hi.max(initial=0.0)))
        history.append({
            "k": k,
            "cost": float(cost),
            "max_margin": max_margin,
            "lo": bounds.lo.copy(),
            "hi": bounds.hi.copy(),
        })
        if max_margin < margin_tol:
            converged = True
            break
        if k == k_max:
            worst = int(np.argmax(np.maximum(d_lo, d_hi)))
            raise CcopfError(
                f"no fixed point within {k_max} tightening iterations; largest "
                f"remaining margin {max_margin:.3e} on '{bounds.labels[worst]}'"
            )
        bounds = tighten(bounds, (d_lo, d_hi))

    eps_lo, eps_hi, eps_j = _count_violations(X, ok, bounds.lo0, bounds.hi0)
    return SolveReport(
        operating_point=op,
        cost=float(cost),
        iterations=bounds.k,
        converged=converged,
        labels=list(bounds.labels),
        classes=classes.copy(),
        eps_j=eps_j,
        eps_lo=eps_lo,
        eps_hi=eps_hi,
        max_eps_j=float(eps_j.max()) if eps_j.size else 0.0,
        n_unconverged=int((~ok).sum()),
        n_scenarios=scenarios.n_scenarios,
        max_margin=max_margin,
        history=history,
        timings=timings,
        bounds=bounds,
        responses=X,
        response_ok=ok,
        delta_used=delta_used,
        rho_used=calib.rho if calib.enabled else 0.0,
        stability_included=include_stability,
    )


# ---------------------------------------------------------------------------
# serialization


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def report_to_json(report):
    """Stable JSON document for a solve report (scenario table excluded)."""
    doc = {
        "operating_point": {
            "p_g": _jsonable(report.operating_point.p_g),
            "v_g": _jsonable(report.operating_point.v_g),
        },
        "cost": float(report.cost),
        "iterations": int(report.iterations),
        "converged": bool(report.converged),
        "labels": list(report.labels),
        "classes": _jsonable(report.classes),
        "eps_j": _jsonable(report.eps_j),
        "eps_lo": _jsonable(report.eps_lo),
        "eps_hi": _jsonable(report.eps_hi),
        "max_eps_j": float(report.max_eps_j),
        "n_unconverged": int(report.n_unconverged),
        "n_scenarios": int(report.n_scenarios),
        "max_margin": float(report.max_margin),
        "history": _jsonable(report.history),
        "timings": _jsonable(report.timings),
        "bounds": {
            "k": int(report.bounds.k),
            "lo0": _jsonable(report.bounds.lo0),
            "hi0": _jsonable(report.bounds.hi0),
            "lo": _jsonable(report.bounds.lo),
            "hi": _jsonable(report.bounds.hi),
        },
        "delta_used": _jsonable(report.delta_used),
        "rho_used": float(report.rho_used),
        "stability_included": bool(report.stability_included),
    }
    return json.dumps(doc, indent=2)
