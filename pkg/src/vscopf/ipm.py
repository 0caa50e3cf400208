"""Dense primal-dual interior-point solver for smooth NLPs.

Solves   min f(x)   s.t.   c_E(x) = 0,   c_I(x) >= 0

in the slack formulation c_I(x) - s = 0, s >= 0.  Each iteration factors
the condensed symmetric KKT system with an inertia test (the reduced
Hessian must be positive definite on the equality null space, which shows
up as n positive and m_E negative eigenvalues); wrong inertia triggers a
primal regularization ladder, a rank-deficient equality block a small
dual regularization.  Steps are globalized by a backtracking line search
on the l1 exact-penalty barrier merit with a fraction-to-boundary rule
keeping slacks and bound multipliers strictly positive.

Sign conventions: the Lagrangian is f - lam_eq'c_E - lam_ineq'(c_I - s),
so `lag_hess` must return  hess(f) - sum_i lam_eq[i] hess(c_E_i)
- sum_j lam_ineq[j] hess(c_I_j), and inequality multipliers are
nonnegative at the solution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

__all__ = ["IpmError", "IpmConfig", "NlpProblem", "IpmResult", "solve_nlp"]


class IpmError(RuntimeError):
    def __init__(self, message: str, iterations: int = 0, x=None, kkt_residual: float = np.inf):
        super().__init__(message)
        self.iterations = iterations
        self.x = x
        self.kkt_residual = kkt_residual


@dataclass(frozen=True)
class IpmConfig:
    tol: float = 1e-6
    max_iter: int = 200
    mu_init: float = 0.1
    tau: float = 0.995          # fraction-to-boundary
    kappa_eps: float = 10.0     # barrier subproblem tolerance factor
    armijo: float = 1e-4
    max_backtracks: int = 30
    grad_cap: float = 100.0     # objective gradient scaling target


@dataclass
class NlpProblem:
    """Callbacks evaluate at a point x and return values with Jacobians.

    objective: x -> (f, grad f)
    eq:        x -> (c_E, A_E) with A_E of shape (m_E, n)
    ineq:      x -> (c_I, A_I) with the convention c_I(x) >= 0
    lag_hess:  (x, lam_eq, lam_ineq) -> Hessian of the Lagrangian
    """

    n: int
    x0: np.ndarray
    objective: Callable
    eq: Callable
    ineq: Callable
    lag_hess: Callable
    eq_labels: tuple | None = None
    ineq_labels: tuple | None = None
    meta: dict = None  # free-form bag for problem builders, ignored by the solver


@dataclass(frozen=True)
class IpmResult:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    slacks: np.ndarray
    f: float
    iterations: int
    kkt_residual: float
    mu: float
    n_corrections: int
    converged: bool = True
    status: str = "converged"


def _inf(v) -> float:
    return 0.0 if v.size == 0 else float(np.abs(v).max())


class _Eval:
    __slots__ = ("f_raw", "f", "g", "ce", "ae", "ci", "ai")

    def __init__(self, prob: NlpProblem, x: np.ndarray, fscale: float):
        f_raw, g_raw = prob.objective(x)
        self.f_raw = float(f_raw)
        self.f = fscale * self.f_raw
        self.g = fscale * np.asarray(g_raw, dtype=float)
        ce, ae = prob.eq(x)
        ci, ai = prob.ineq(x)
        self.ce = np.atleast_1d(np.asarray(ce, dtype=float))
        self.ae = np.asarray(ae, dtype=float).reshape(self.ce.size, prob.n)
        self.ci = np.atleast_1d(np.asarray(ci, dtype=float))
        self.ai = np.asarray(ai, dtype=float).reshape(self.ci.size, prob.n)

    def finite(self) -> bool:
        return bool(
            np.isfinite(self.f)
            and np.isfinite(self.g).all()
            and np.isfinite(self.ce).all()
            and np.isfinite(self.ci).all()
        )


def _most_violated(prob: NlpProblem, ev: _Eval):
    label, worst = "", 0.0
    for i, v in enumerate(np.abs(ev.ce)):
        if v > worst:
            worst = float(v)
            label = prob.eq_labels[i] if prob.eq_labels else f"eq[{i}]"
    for j, v in enumerate(-ev.ci):
        if v > worst:
            worst = float(v)
            label = prob.ineq_labels[j] if prob.ineq_labels else f"ineq[{j}]"
    return label, worst


def _inertia(d: np.ndarray):
    """Signs of the eigenvalues of the block-diagonal LDL factor.

    Pivots are classified by sign alone: a relative magnitude threshold
    mislabels legitimate small pivots whenever active-set slacks push the
    barrier Hessian many decades above the regularization terms.
    """
    n = d.shape[0]
    pos = neg = zero = 0
    i = 0
    while i < n:
        if i + 1 < n and d[i, i + 1] != 0.0:
            a, b, c = d[i, i], d[i, i + 1], d[i + 1, i + 1]
            tr, det = a + c, a * c - b * b
            disc = np.sqrt(max(tr * tr / 4.0 - det, 0.0))
            eigs = (tr / 2.0 + disc, tr / 2.0 - disc)
            i += 2
        else:
            eigs = (d[i, i],)
            i += 1
        for ev in eigs:
            if ev > 0.0:
                pos += 1
            elif ev < 0.0:
                neg += 1
            else:
                zero += 1
    return pos, neg, zero


_DELTAS = (
    0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0,
    1e2, 1e3, 1e4, 1e6, 1e8, 1e10, 1e12, 1e14,
)


def _restore(prob, x, fscale, budget=40):
    """Damped Gauss-Newton descent on the squared constraint violation.

    Ignores the objective entirely: the caller invokes this only after the
    merit line search has stalled, where regaining feasibility is the one
    move that can unblock the iteration. Returns the improved point and
    its evaluation; stops at a violation stationary point.
    """
    ev = _Eval(prob, x, fscale)
    lm = 1e-6
    for _ in range(budget):
        act = ev.ci < 0.0
        r = np.concatenate([ev.ce, np.where(act, ev.ci, 0.0)])
        v0 = float(r @ r)
        if v0 <= 1e-20:
            break
        jac = np.vstack([ev.ae, ev.ai * act[:, None]])
        grad = jac.T @ r
        gauss = jac.T @ jac
        scale = max(float(np.trace(gauss)) / max(prob.n, 1), 1e-12)
        accepted = False
        for _ in range(12):
            try:
                dx = -np.linalg.solve(
                    gauss + (lm * scale) * np.eye(prob.n), grad
                )
            except np.linalg.LinAlgError:
                lm *= 10.0
                continue
            ev_t = _Eval(prob, x + dx, fscale)
            if ev_t.finite():
                act_t = ev_t.ci < 0.0
                r_t = np.concatenate([ev_t.ce, np.where(act_t, ev_t.ci, 0.0)])
                if float(r_t @ r_t) < v0 * (1.0 - 1e-8):
                    x = x + dx
                    ev = ev_t
                    lm = max(lm / 3.0, 1e-10)
                    accepted = True
                    break
            lm *= 10.0
        if not accepted:
            break
    return x, ev


def solve_nlp(prob: NlpProblem, config: IpmConfig = IpmConfig()) -> IpmResult:
    x = np.asarray(prob.x0, dtype=float).copy()
    if x.shape != (prob.n,):
        raise IpmError(f"start point shape {x.shape} does not match n={prob.n}")

    g0 = np.asarray(prob.objective(x)[1], dtype=float)
    gnorm = _inf(g0)
    fscale = 1.0 if gnorm <= config.grad_cap else config.grad_cap / gnorm

    ev = _Eval(prob, x, fscale)
    if not ev.finite():
        raise IpmError("problem functions not finite at the start point")
    m_e, m_i = ev.ce.size, ev.ci.size

    mu = config.mu_init
    mu_min = config.tol / 10.0
    s = np.maximum(ev.ci, 1e-2) if m_i else np.zeros(0)
    w = mu / s if m_i else np.zeros(0)
    if m_e:
        lam = np.linalg.lstsq(ev.ae.T, ev.g - ev.ai.T @ w, rcond=None)[0]
        if _inf(lam) > 1e3:
            lam = np.zeros(m_e)
    else:
        lam = np.zeros(0)

    nu = 1.0           # l1 penalty weight
    delta_floor = 0.0  # raised after a failed line search
    n_corr = 0
    fails = 0
    restorations = 0
    steps = 0
    e0 = np.inf
    eye_n = np.eye(prob.n)

    for _ in range(config.max_iter):
        r_d = ev.g - ev.ae.T @ lam - ev.ai.T @ w
        r_pe = ev.ce
        r_pi = ev.ci - s
        comp = s * w
        e0 = max(_inf(r_d), _inf(r_pe), _inf(r_pi), _inf(comp))
        if e0 <= config.tol:
            return IpmResult(
                x=x,
                lam_eq=lam / fscale,
                lam_ineq=w / fscale,
                slacks=s,
                f=ev.f_raw,
                iterations=steps,
                kkt_residual=e0,
                mu=mu,
                n_corrections=n_corr,
            )

        if m_i and mu > mu_min:
            e_mu = max(_inf(r_d), _inf(r_pe), _inf(r_pi), _inf(comp - mu))
            if e_mu <= config.kappa_eps * mu:
                mu = max(mu_min, min(0.2 * mu, mu**1.5))

        h = fscale * np.asarray(prob.lag_hess(x, lam / fscale, w / fscale), dtype=float)
        h = (h + h.T) / 2.0
        if m_i:
            sigma = w / s
            h_cond = h + ev.ai.T @ (sigma[:, None] * ev.ai)
        else:
            sigma = np.zeros(0)
            h_cond = h

        dim = prob.n + m_e
        rhs_x = -r_d
        if m_i:
            rhs_x = rhs_x + ev.ai.T @ (mu / s - w - sigma * r_pi)
        rhs = np.concatenate([rhs_x, -r_pe])
        dx = None
        for gamma in (0.0, 1e-8, 1e-6):
            for attempt, delta in enumerate(_DELTAS):
                if delta < delta_floor:
                    continue
                k_mat = np.zeros((dim, dim))
                k_mat[: prob.n, : prob.n] = h_cond + delta * eye_n
                if m_e:
                    k_mat[: prob.n, prob.n :] = ev.ae.T
                    k_mat[prob.n :, : prob.n] = ev.ae
                    if gamma:
                        k_mat[prob.n :, prob.n :] = -gamma * np.eye(m_e)
                try:
                    _, d_fac, _ = scipy.linalg.ldl(k_mat)
                except (np.linalg.LinAlgError, ValueError):
                    continue
                pos, neg, zero = _inertia(d_fac)
                if pos != prob.n or neg != m_e or zero != 0:
                    continue
                try:
                    sol = np.linalg.solve(k_mat, rhs)
                except np.linalg.LinAlgError:
                    continue
                if not np.all(np.isfinite(sol)):
                    continue
                # cancellation at extreme barrier scales can pass the sign
                # count yet yield a useless factorization; trust only steps
                # that actually satisfy the linear system
                resid = np.abs(k_mat @ sol - rhs).max()
                if resid > 1e-6 * max(1.0, np.abs(rhs).max()):
                    continue
                if attempt > 0 or gamma > 0.0:
                    n_corr += 1
                dx, dlam = sol[: prob.n], -sol[prob.n :]
                break
            if dx is not None:
                break
        if dx is None:
            label, worst = _most_violated(prob, ev)
            msg = f"KKT system could not be regularized (residual {e0:.3e})"
            if worst > config.tol:
                msg += f"; most violated constraint '{label}' (violation={worst:.3e})"
            raise IpmError(msg, iterations=steps, x=x, kkt_residual=e0)

        if m_i:
            ds = ev.ai @ dx + r_pi
            dw = mu / s - w - sigma * ds
        else:
            ds = np.zeros(0)
            dw = np.zeros(0)

        def ftb(v, dv):
            shrink = dv < 0.0
            if not np.any(shrink):
                return 1.0
            return min(1.0, config.tau * float(np.min(-v[shrink] / dv[shrink])))

        a_pr = ftb(s, ds)
        a_du = ftb(w, dw)

        # exact-penalty weight must dominate the multiplier estimates; track
        # them from both sides, or an early spike caps later step lengths
        nu = 1.2 * max(_inf(lam + dlam), _inf(w + dw)) + 0.1

        def merit(ev_t, s_t):
            barrier = ev_t.f - (mu * float(np.log(s_t).sum()) if m_i else 0.0)
            viol = float(np.abs(ev_t.ce).sum()) + float(np.abs(ev_t.ci - s_t).sum())
            return barrier + nu * viol

        m0 = merit(ev, s)
        d_model = float(ev.g @ dx)
        if m_i:
            d_model -= mu * float((ds / s).sum())
        d_model -= nu * (float(np.abs(r_pe).sum()) + float(np.abs(r_pi).sum()))

        def merit_ok(ev_t, s_t, t):
            slack = 1e-14 * (1.0 + abs(m0))
            return merit(ev_t, s_t) <= m0 + config.armijo * t * min(d_model, 0.0) + slack

        accepted = None
        t = 1.0
        soc_tried = False
        for _ in range(config.max_backtracks):
            x_t = x + (t * a_pr) * dx
            s_t = s + (t * a_pr) * ds
            ev_t = _Eval(prob, x_t, fscale)
            if ev_t.finite() and merit_ok(ev_t, s_t, t):
                accepted = (x_t, s_t, ev_t, t)
                break
            viol_now = float(np.abs(ev.ce).sum()) + float(np.abs(ev.ci - s).sum())
            viol_t = float(np.abs(ev_t.ce).sum()) + float(np.abs(ev_t.ci - s_t).sum())
            if t == 1.0 and not soc_tried and ev_t.finite() and viol_t >= viol_now:
                # second-order correction: constraint curvature can reject the
                # full step even arbitrarily close to the solution, so re-solve
                # the same KKT system against the trial constraint values
                soc_tried = True
                ce_soc = a_pr * ev.ce + ev_t.ce
                rhs_soc_x = -r_d
                if m_i:
                    r_pi_soc = a_pr * r_pi + (ev_t.ci - s_t)
                    rhs_soc_x = rhs_soc_x + ev.ai.T @ (mu / s - w - sigma * r_pi_soc)
                try:
                    sol_soc = np.linalg.solve(
                        k_mat, np.concatenate([rhs_soc_x, -ce_soc])
                    )
                except np.linalg.LinAlgError:
                    sol_soc = None
                if sol_soc is not None and np.all(np.isfinite(sol_soc)):
                    dx_c = sol_soc[: prob.n]
                    ds_c = (ev.ai @ dx_c + r_pi_soc) if m_i else np.zeros(0)
                    a_c = ftb(s, ds_c)
                    x_c = x + a_c * dx_c
                    s_c = s + a_c * ds_c
                    ev_c = _Eval(prob, x_c, fscale)
                    if ev_c.finite() and merit_ok(ev_c, s_c, 1.0):
                        viol_c = float(np.abs(ev_c.ce).sum())
                        viol_c += float(np.abs(ev_c.ci - s_c).sum())
                        if viol_c < viol_now:
                            # pair the corrected primal step with its own dual
                            # solution; the uncorrected dual step no longer
                            # matches the point actually reached
                            dlam = -sol_soc[prob.n :]
                            if m_i:
                                dw = mu / s - w - sigma * ds_c
                                a_du = ftb(w, dw)
                            accepted = (x_c, s_c, ev_c, 1.0)
                            break
            t *= 0.5

        if accepted is None:
            fails += 1
            if fails >= 3:
                if restorations < 2:
                    # drop the objective and walk back to the feasible set,
                    # then restart the multipliers from the restored point
                    restorations += 1
                    x, ev = _restore(prob, x, fscale)
                    if m_i:
                        s = np.maximum(ev.ci, 1e-2)
                        w = mu / s
                    if m_e:
                        lam = np.linalg.lstsq(
                            ev.ae.T, ev.g - ev.ai.T @ w, rcond=None
                        )[0]
                        if _inf(lam) > 1e3:
                            lam = np.zeros(m_e)
                    fails = 0
                    delta_floor = 0.0
                    continue
                label, worst = _most_violated(prob, ev)
                if worst > config.tol:
                    raise IpmError(
                        f"restoration failed; most violated constraint '{label}' "
                        f"(violation={worst:.3e})",
                        iterations=steps, x=x, kkt_residual=e0,
                    )
                raise IpmError(
                    f"line search stalled (KKT residual {e0:.3e})",
                    iterations=steps, x=x, kkt_residual=e0,
                )
            # retry the step from a stiffer, more gradient-like model
            delta_floor = 10.0 * (delta + 1e-6)
            continue

        x, s, ev, t_used = accepted
        lam = lam + (t_used * a_du) * dlam
        w = w + (t_used * a_du) * dw
        if m_i:
            # keep bound multipliers within a factor kappa of mu/s so the
            # barrier Hessian w/s cannot run away from the central path
            kappa = 1e10
            w = np.clip(w, mu / (kappa * s), kappa * mu / s)
        steps += 1
        fails = 0
        delta_floor = 0.0

    label, worst = _most_violated(prob, ev)
    msg = f"failed to converge within {config.max_iter} iterations (KKT residual {e0:.3e})"
    if worst > config.tol:
        msg += f"; most violated constraint '{label}' (violation={worst:.3e})"
    raise IpmError(msg, iterations=steps, x=x, kkt_residual=e0)
