"""AC power flow in polar form.

Newton-Raphson solve with the reduced Jacobian (active-power rows at PV and
PQ buses, reactive rows at PQ buses; angle columns at PV and PQ buses,
magnitude columns at PQ buses). The smallest singular value of that matrix
is the voltage stability index used throughout the package: it approaches
zero as the operating point approaches collapse.

Sign conventions: net injection p_i = generation + renewable - load, all
per-unit. The reference bus absorbs any active-power imbalance; PV buses
hold their magnitude setpoints and supply whatever reactive power balances
the bus. Generator reactive limits are not enforced here (no PV-to-PQ
switching); the chance-constrained layer owns limit handling.

Batched variants stack scenarios along the leading axis and run the same
Newton iteration with per-scenario convergence masking; results are
independent of batch composition, so chunked and whole-set evaluation give
identical answers.
"""

from dataclasses import dataclass

import numpy as np

from .netmodel import build_admittance


class PowerFlowError(RuntimeError):
    """Newton iteration failed to converge."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass
class OperatingPoint:
    """Dispatch decision: generator active power plus magnitude setpoints.

    ``p_g`` is ordered like ``case.generators``; ``v_g`` like
    ``case.vset_bus_index`` (one entry per generator bus).
    """

    p_g: np.ndarray
    v_g: np.ndarray

    def as_y(self):
        return np.concatenate([np.asarray(self.p_g, float), np.asarray(self.v_g, float)])


def operating_point_from_y(case, y):
    y = np.asarray(y, float)
    ng = case.n_gen
    return OperatingPoint(p_g=y[:ng].copy(), v_g=y[ng:].copy())


def base_dispatch(case):
    """Dispatch recorded in the case file: start MW and generator setpoints."""
    p_g = np.array([g.p_start for g in case.generators])
    vmap = {}
    for g in case.generators:
        vmap.setdefault(case.index_of(g.bus), g.v_setpoint)
    v_g = np.array([vmap[i] for i in case.vset_bus_index])
    return OperatingPoint(p_g=p_g, v_g=v_g)


@dataclass
class InjectionVector:
    """Solver boundary conditions.

    ``p``/``q`` are target net injections per bus (per-unit). Entries are
    authoritative where the corresponding quantity is specified: p at
    non-reference buses, q at PQ buses. ``v_set`` carries magnitude targets
    read at PV and reference buses only. ``p_g``/``xi_bus`` are optional
    bookkeeping (per-generator dispatch and renewable share per internal
    bus index) used to recover per-machine outputs from a solved state.
    """

    p: np.ndarray
    q: np.ndarray
    v_set: np.ndarray = None
    p_g: np.ndarray = None
    xi_bus: dict = None


def injections_from_dispatch(case, dispatch, xi=None):
    """Net injections for a dispatch and a renewable scenario.

    xi maps external bus id -> per-unit active injection. Renewable plants
    run at unity power factor, so q does not depend on xi.
    """
    p_load, q_load = case.loads()
    p = -p_load
    q = -q_load
    for k, g in enumerate(case.generators):
        p[case.index_of(g.bus)] += dispatch.p_g[k]
    xi_bus = {}
    if xi is not None:
        for bus_id, val in xi.items():
            idx = case.index_of(bus_id)  # raises on a bus with no registered plant
            p[idx] += val
            xi_bus[idx] = xi_bus.get(idx, 0.0) + val
    v_set = np.ones(case.n_bus)
    v_set[case.vset_bus_index] = dispatch.v_g
    return InjectionVector(p=p, q=q, v_set=v_set,
                           p_g=np.asarray(dispatch.p_g, float).copy(), xi_bus=xi_bus)


# ---------------------------------------------------------------------------
# Injection calculations and Jacobian blocks (complex form, batch friendly)


def calc_injections(Y, v, theta):
    """P and Q injections from the bus admittance matrix. Batched on axis 0."""
    Vc = v * np.exp(1j * theta)
    S = Vc * np.conj(Vc @ Y.T)
    return S.real, S.imag


def _jacobian_big(Y, v, theta):
    """Stacked [[dP/dth, dP/dv], [dQ/dth, dQ/dv]] of shape (..., 2N, 2N)."""
    Vc = v * np.exp(1j * theta)
    Ibus = Vc @ Y.T
    YV = Y[None, :, :] * Vc[..., None, :] if Vc.ndim == 2 else Y * Vc[None, :]
    diag_SI = Vc * np.conj(Ibus)
    dS_dVa = -1j * Vc[..., :, None] * np.conj(YV)
    dS_dVm = Vc[..., :, None] * np.conj(YV) / v[..., None, :]
    n = Y.shape[0]
    idx = np.arange(n)
    if Vc.ndim == 2:
        dS_dVa[:, idx, idx] += 1j * diag_SI
        dS_dVm[:, idx, idx] += np.conj(Ibus) * np.exp(1j * theta)
        big = np.empty(Vc.shape[:-1] + (2 * n, 2 * n))
    else:
        dS_dVa[idx, idx] += 1j * diag_SI
        dS_dVm[idx, idx] += np.conj(Ibus) * np.exp(1j * theta)
        big = np.empty((2 * n, 2 * n))
    big[..., :n, :n] = dS_dVa.real
    big[..., :n, n:] = dS_dVm.real
    big[..., n:, :n] = dS_dVa.imag
    big[..., n:, n:] = dS_dVm.imag
    return big


@dataclass
class PfJacobian:
    """Reduced Newton-Raphson Jacobian with row/column labels."""

    matrix: np.ndarray
    row_labels: list
    col_labels: list


def _reduced_indices(case):
    n = case.n_bus
    pvpq = case.non_ref_indices
    pq = case.pq_indices
    rows = np.concatenate([pvpq, n + pq])
    cols = np.concatenate([pvpq, n + pq])
    return pvpq, pq, rows, cols


def assemble_jacobian(case, v, theta, Y=None):
    """Reduced Jacobian at a state: rows P(PV+PQ) then Q(PQ), columns
    theta(PV+PQ) then v(PQ)."""
    if Y is None:
        Y = build_admittance(case).complex
    pvpq, pq, rows, cols = _reduced_indices(case)
    big = _jacobian_big(Y, np.asarray(v, float), np.asarray(theta, float))
    J = big[np.ix_(rows, cols)]
    ext = [b.id for b in case.buses]
    row_labels = [f"P@bus{ext[i]}" for i in pvpq] + [f"Q@bus{ext[i]}" for i in pq]
    col_labels = [f"theta@bus{ext[i]}" for i in pvpq] + [f"v@bus{ext[i]}" for i in pq]
    return PfJacobian(matrix=J, row_labels=row_labels, col_labels=col_labels)


def vsi_msv(jac):
    """Voltage stability index: smallest singular value of the reduced
    Jacobian."""
    M = jac.matrix if isinstance(jac, PfJacobian) else np.asarray(jac, float)
    return float(np.linalg.svd(M, compute_uv=False)[-1])


def batch_jacobian_msv(case, v, theta, Y=None):
    """Stability index per scenario for stacked states (B, N)."""
    if Y is None:
        Y = build_admittance(case).complex
    _, _, rows, cols = _reduced_indices(case)
    big = _jacobian_big(Y, np.asarray(v, float), np.asarray(theta, float))
    J = big[:, rows[:, None], cols[None, :]]
    return np.linalg.svd(J, compute_uv=False)[..., -1]


# ---------------------------------------------------------------------------
# Branch currents


def _branch_coefficients(case):
    """Complex pairs (a, b) per branch so that I_from = a V_i + b V_j."""
    nb = case.n_branch
    a = np.empty(nb, dtype=complex)
    bb = np.empty(nb, dtype=complex)
    fi = np.empty(nb, dtype=int)
    ti = np.empty(nb, dtype=int)
    for k, br in enumerate(case.branches):
        ys = 1.0 / complex(br.r, br.x)
        t = br.tap if br.tap else 1.0
        a[k] = (ys + 1j * br.b / 2.0) / (t * t)
        bb[k] = -ys / t
        fi[k] = case.index_of(br.from_bus)
        ti[k] = case.index_of(br.to_bus)
    return a, bb, fi, ti


def branch_current(case, v, theta, branch):
    """Sending-end current magnitude (per-unit) of one branch."""
    a, bb, fi, ti = _branch_coefficients(case)
    Vc = np.asarray(v, float) * np.exp(1j * np.asarray(theta, float))
    return float(np.abs(a[branch] * Vc[fi[branch]] + bb[branch] * Vc[ti[branch]]))


def batch_branch_currents(case, v, theta):
    """Sending-end current magnitudes for stacked states; shape (B, n_branch)."""
    a, bb, fi, ti = _branch_coefficients(case)
    Vc = np.asarray(v, float) * np.exp(1j * np.asarray(theta, float))
    return np.abs(Vc[..., fi] * a + Vc[..., ti] * bb)


# ---------------------------------------------------------------------------
# Newton-Raphson solves


@dataclass
class PowerFlowSolution:
    v: np.ndarray
    theta: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    iterations: int
    converged: bool
    residual: float


def _start_state(case, inj, start):
    if start is not None:
        v0, th0 = start
        v = np.array(v0, float).copy()
        th = np.array(th0, float).copy()
    else:
        v = np.ones(case.n_bus)
        th = np.zeros(case.n_bus)
    if inj.v_set is not None:
        hold = np.concatenate([case.pv_indices, [case.ref_index]]).astype(int)
        v[hold] = np.asarray(inj.v_set, float)[hold]
    th[case.ref_index] = 0.0
    return v, th


def _gen_outputs(case, inj, v, theta, Y):
    """Recover per-generator outputs from a solved state.

    Reactive power at a generator bus is split equally among the machines
    on that bus; the reference machines absorb the active surplus.
    """
    P, Q = calc_injections(Y, v, theta)
    p_load, q_load = case.loads()
    gbi = case.gen_bus_index
    counts = np.bincount(gbi, minlength=case.n_bus)
    q_gen = (Q + q_load)[gbi] / counts[gbi]
    if inj.p_g is not None:
        p_gen = np.asarray(inj.p_g, float).copy()
        ref = case.ref_index
        on_ref = gbi == ref
        if on_ref.any():
            p_gen[on_ref] += (P[ref] - inj.p[ref]) / on_ref.sum()
    else:
        xi = inj.xi_bus or {}
        target = np.where(np.arange(case.n_bus) == case.ref_index, P, inj.p)
        bus_total = target + p_load - np.array([xi.get(i, 0.0) for i in range(case.n_bus)])
        p_gen = bus_total[gbi] / counts[gbi]
    return p_gen, q_gen


def solve_pf(case, inj, Y=None, start=None, tol=1e-8, max_iter=30, slack_weights=None):
    """Newton-Raphson power flow.

    Raises :class:`PowerFlowError` on divergence, carrying the iteration
    count and the final mismatch norm. ``slack_weights`` (per generator,
    nonnegative, summing to anything positive) switches to distributed
    slack: the active imbalance is shared across machines in proportion
    instead of landing on the reference bus alone.
    """
    if Y is None:
        Y = build_admittance(case).complex
    v, th = _start_state(case, inj, start)
    n = case.n_bus
    pvpq, pq, rows, cols = _reduced_indices(case)

    if slack_weights is not None:
        w = np.asarray(slack_weights, float)
        if w.shape != (case.n_gen,) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("slack_weights must be nonnegative per generator")
        w = w / w.sum()
        wbus = np.zeros(n)
        np.add.at(wbus, case.gen_bus_index, w)
        return _solve_distributed(case, inj, Y, v, th, wbus, w, tol, max_iter)

    it = 0
    residual = np.inf
    for it in range(max_iter + 1):
        P, Q = calc_injections(Y, v, th)
        F = np.concatenate([(P - inj.p)[pvpq], (Q - inj.q)[pq]])
        residual = float(np.max(np.abs(F))) if F.size else 0.0
        if residual < tol:
            p_gen, q_gen = _gen_outputs(case, inj, v, th, Y)
            return PowerFlowSolution(
                v=v, theta=th, p_inj=P, q_inj=Q, p_gen=p_gen, q_gen=q_gen,
                iterations=it, converged=True, residual=residual,
            )
        if it == max_iter:
            break
        big = _jacobian_big(Y, v, th)
        J = big[np.ix_(rows, cols)]
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise PowerFlowError(
                f"singular Jacobian after {it} iterations (residual {residual:.3e})",
                iterations=it, residual=residual,
            ) from None
        th[pvpq] += dx[: pvpq.size]
        v[pq] += dx[pvpq.size :]
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise PowerFlowError(
                f"voltage collapse in iteration {it + 1} (residual {residual:.3e})",
                iterations=it + 1, residual=residual,
            )
    raise PowerFlowError(
        f"no convergence after {max_iter} iterations (residual {residual:.3e})",
        iterations=max_iter, residual=residual,
    )


def _solve_distributed(case, inj, Y, v, th, wbus, w, tol, max_iter):
    """Distributed-slack Newton: extra unknown scales all machine outputs."""
    n = case.n_bus
    pq = case.pq_indices
    nonref = case.non_ref_indices
    delta = 0.0
    residual = np.inf
    for it in range(max_iter + 1):
        P, Q = calc_injections(Y, v, th)
        # P balance at every bus, Q balance at PQ buses
        F = np.concatenate([P - inj.p - wbus * delta, (Q - inj.q)[pq]])
        residual = float(np.max(np.abs(F)))
        if residual < tol:
            inj_adj = InjectionVector(p=inj.p + wbus * delta, q=inj.q, v_set=inj.v_set,
                                      p_g=None, xi_bus=inj.xi_bus)
            _, q_gen = _gen_outputs(case, inj_adj, v, th, Y)
            p_gen = (np.zeros(case.n_gen) if inj.p_g is None else
                     np.asarray(inj.p_g, float)) + w * delta
            return PowerFlowSolution(
                v=v, theta=th, p_inj=P, q_inj=Q, p_gen=p_gen, q_gen=q_gen,
                iterations=it, converged=True, residual=residual,
            )
        if it == max_iter:
            break
        big = _jacobian_big(Y, v, th)
        ncols = nonref.size + pq.size + 1
        J = np.zeros((n + pq.size, ncols))
        J[:n, : nonref.size] = big[:n, nonref]
        J[:n, nonref.size : -1] = big[:n, n + pq]
        J[:n, -1] = -wbus
        J[n:, : nonref.size] = big[n + pq][:, nonref]
        J[n:, nonref.size : -1] = big[np.ix_(n + pq, n + pq)]
        dx = np.linalg.solve(J, -F)
        th[nonref] += dx[: nonref.size]
        v[pq] += dx[nonref.size : -1]
        delta += dx[-1]
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise PowerFlowError(
                f"voltage collapse in iteration {it + 1}", iterations=it + 1, residual=residual
            )
    raise PowerFlowError(
        f"no convergence after {max_iter} iterations (residual {residual:.3e})",
        iterations=max_iter, residual=residual,
    )


@dataclass
class BatchPfResult:
    v: np.ndarray
    theta: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray


def solve_pf_batch(case, p_spec, q_spec, v_set, Y=None, start=None, tol=1e-8,
                   max_iter=30, chunk=2048):
    """Vectorized Newton over stacked scenarios.

    p_spec/q_spec: (B, N) net injection targets. v_set: (N,) or (B, N)
    magnitude targets read at PV and reference buses. Scenarios that
    diverge are flagged, not raised.
    """
    if Y is None:
        Y = build_admittance(case).complex
    p_spec = np.atleast_2d(np.asarray(p_spec, float))
    q_spec = np.atleast_2d(np.asarray(q_spec, float))
    B, n = p_spec.shape
    v_set = np.broadcast_to(np.asarray(v_set, float), (B, n))
    out_v = np.empty((B, n))
    out_t = np.empty((B, n))
    out_c = np.zeros(B, dtype=bool)
    out_i = np.zeros(B, dtype=int)
    out_r = np.full(B, np.inf)
    for lo in range(0, B, chunk):
        hi = min(lo + chunk, B)
        res = _newton_chunk(case, Y, p_spec[lo:hi], q_spec[lo:hi], v_set[lo:hi],
                            start, tol, max_iter)
        out_v[lo:hi], out_t[lo:hi] = res[0], res[1]
        out_c[lo:hi], out_i[lo:hi], out_r[lo:hi] = res[2], res[3], res[4]
    return BatchPfResult(v=out_v, theta=out_t, converged=out_c, iterations=out_i,
                         residual=out_r)


def _newton_chunk(case, Y, p_spec, q_spec, v_set, start, tol, max_iter):
    B, n = p_spec.shape
    pvpq, pq, rows, cols = _reduced_indices(case)
    hold = np.concatenate([case.pv_indices, [case.ref_index]]).astype(int)
    if start is not None:
        v = np.broadcast_to(np.asarray(start[0], float), (B, n)).copy()
        th = np.broadcast_to(np.asarray(start[1], float), (B, n)).copy()
    else:
        v = np.ones((B, n))
        th = np.zeros((B, n))
    v[:, hold] = v_set[:, hold]
    th[:, case.ref_index] = 0.0
    converged = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=int)
    residual = np.full(B, np.inf)
    for it in range(max_iter + 1):
        active = ~(converged | failed)
        P, Q = calc_injections(Y, v, th)
        F = np.concatenate([(P - p_spec)[:, pvpq], (Q - q_spec)[:, pq]], axis=1)
        res = np.max(np.abs(F), axis=1)
        newly = active & (res < tol)
        residual[active] = res[active]
        converged |= newly
        active &= ~newly
        if it == max_iter or not active.any():
            break
        big = _jacobian_big(Y, v[active], th[active])
        J = big[:, rows[:, None], cols[None, :]]
        try:
            dx = np.linalg.solve(J, -F[active][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            # isolate the singular ones by falling back to per-row solves
            dx = np.zeros((active.sum(), rows.size))
            sing = np.zeros(active.sum(), dtype=bool)
            for b in range(active.sum()):
                try:
                    dx[b] = np.linalg.solve(J[b], -F[active][b])
                except np.linalg.LinAlgError:
                    sing[b] = True
            idx = np.flatnonzero(active)
            failed[idx[sing]] = True
            active = ~(converged | failed)
            dx = dx[~sing]
            if not active.any():
                break
        th_a = th[active]
        v_a = v[active]
        th_a[:, pvpq] += dx[:, : pvpq.size]
        v_a[:, pq] += dx[:, pvpq.size :]
        th[active] = th_a
        v[active] = v_a
        iterations[active] = it + 1
        bad = np.any((v <= 0) | ~np.isfinite(v), axis=1) | np.any(~np.isfinite(th), axis=1)
        newly_bad = bad & ~failed
        if newly_bad.any():
            failed |= newly_bad
            v[newly_bad] = 1.0  # park a sane state so later algebra stays finite
            th[newly_bad] = 0.0
    return v, th, converged, iterations, residual
