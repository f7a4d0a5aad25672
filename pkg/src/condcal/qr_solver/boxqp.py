"""Box-constrained convex QP with linear equalities.

    minimize    0.5 x^T Q x + q^T x
    subject to  E^T x = 0,   lo <= x <= hi

An ADMM (operator splitting) pass locates the active bounds; a primal-dual
active-set iteration then solves the KKT system on that set exactly. Warm
starts reuse a previous active set and usually skip ADMM entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .simplex import SolverError

LOWER, FREE, UPPER = -1, 0, 1


@dataclass
class BoxQpResult:
    x: np.ndarray
    nu: np.ndarray
    state: np.ndarray
    admm_iterations: int
    pdas_iterations: int


def admm(q_mat, q, e, lo, hi, x0=None, rho=0.1, sigma=1e-6, relax=1.6, max_iter=4000, tol=1e-7):
    """OSQP-style ADMM; returns (x, y_eq, y_box, iterations)."""
    m, d = e.shape
    rho_eq = 1e3 * rho
    kkt = q_mat + sigma * np.eye(m) + rho * np.eye(m) + rho_eq * (e @ e.T)
    chol = sla.cho_factor(kkt, check_finite=False)
    x = np.zeros(m) if x0 is None else np.clip(x0, lo, hi)
    z_eq = np.zeros(d)
    z_box = x.copy()
    y_eq = np.zeros(d)
    y_box = np.zeros(m)
    scale = max(1.0, float(np.abs(q).max()))
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + e @ (rho_eq * z_eq - y_eq) + (rho * z_box - y_box)
        xt = sla.cho_solve(chol, rhs, check_finite=False)
        zt_eq = e.T @ xt
        x = relax * xt + (1 - relax) * x
        v_eq = relax * zt_eq + (1 - relax) * z_eq
        v_box = relax * xt + (1 - relax) * z_box
        z_eq_new = np.zeros(d)
        z_box_new = np.clip(v_box + y_box / rho, lo, hi)
        y_eq = y_eq + rho_eq * (v_eq - z_eq_new)
        y_box = y_box + rho * (v_box - z_box_new)
        z_eq, z_box = z_eq_new, z_box_new
        if it % 25 == 0:
            r_prim = max(np.abs(e.T @ x).max(initial=0.0), np.abs(x - z_box).max())
            r_dual = np.abs(q_mat @ x + q + e @ y_eq + y_box).max()
            if r_prim < tol and r_dual < tol * scale:
                break
    return z_box, y_eq, y_box, it


def _kkt_solve(q_mat, q, e, lo, hi, state):
    m, d = e.shape
    free = state == FREE
    x = np.where(state == LOWER, lo, np.where(state == UPPER, hi, 0.0))
    fixed = ~free
    idx = np.flatnonzero(free)
    k = idx.size
    rhs_top = -q[idx] - q_mat[np.ix_(idx, fixed)] @ x[fixed]
    rhs_bot = -(e[fixed].T @ x[fixed])
    mat = np.zeros((k + d, k + d))
    mat[:k, :k] = q_mat[np.ix_(idx, idx)]
    mat[:k, k:] = e[idx]
    mat[k:, :k] = e[idx].T
    rhs = np.concatenate([rhs_top, rhs_bot])
    degenerate = k < d or np.linalg.matrix_rank(e[idx]) < d
    if degenerate:
        sol = np.linalg.lstsq(mat, rhs, rcond=None)[0]
        x[idx] = sol[:k]
        return x, _multiplier(q_mat @ x + q, e, state, sol[k:])
    try:
        sol = np.linalg.solve(mat, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(mat, rhs, rcond=None)[0]
    x[idx] = sol[:k]
    return x, sol[k:]


def _multiplier(r, e, state, nu0):
    """Equality multiplier when the free rows do not determine it.

    Picks nu with r + E nu = 0 on free rows and the least sign violation on
    bound rows (>= 0 at LOWER, <= 0 at UPPER), by a small LP.
    """
    d = e.shape[1]
    free = state == FREE
    sgn = np.where(state == LOWER, -1.0, 1.0)[~free]
    # minimize t subject to sgn_i (r_i + e_i nu) <= t on bound rows
    a_ub = np.hstack([sgn[:, None] * e[~free], -np.ones((sgn.size, 1))])
    b_ub = -sgn * r[~free]
    a_eq = np.hstack([e[free], np.zeros((int(free.sum()), 1))]) if free.any() else None
    b_eq = -r[free] if free.any() else None
    c = np.zeros(d + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                  bounds=[(None, None)] * (d + 1), method="highs")
    return res.x[:d] if res.status == 0 else nu0


def pdas(q_mat, q, e, lo, hi, state, max_iter=200, tol=1e-10):
    """Primal-dual active-set iteration; returns (x, nu, state, iters) or None.

    All violated indices switch at once until a state repeats; from then on
    only the most violated index switches, which breaks most cycles.
    """
    state = state.astype(np.int8).copy()
    seen = set()
    single = False
    scale = max(1.0, float(np.abs(q).max()))
    ftol = tol * (1.0 + np.abs(hi - lo))
    for it in range(1, max_iter + 1):
        x, nu = _kkt_solve(q_mat, q, e, lo, hi, state)
        g = q_mat @ x + q + e @ nu
        free = state == FREE
        viol = np.zeros(state.size)
        viol[free] = np.maximum(lo[free] - x[free] - ftol[free], x[free] - hi[free] - ftol[free])
        low = state == LOWER
        up = state == UPPER
        viol[low] = -g[low] - tol * scale
        viol[up] = g[up] - tol * scale
        bad = viol > 0
        if not bad.any():
            eq_res = np.abs(e.T @ x).max(initial=0.0)
            if eq_res <= 1e-9 * max(1.0, np.abs(e).max()):
                return np.clip(x, lo, hi), nu, state, it
            return None
        if single:
            bad = np.zeros(state.size, dtype=bool)
            bad[int(np.argmax(viol))] = True
        new = state.copy()
        new[bad & free & (x < lo)] = LOWER
        new[bad & free & (x > hi)] = UPPER
        new[bad & ~free] = FREE
        key = new.tobytes()
        if key in seen:
            if single:
                return None
            single = True
            seen.clear()
        seen.add(key)
        state = new
    return None


def state_from_point(x, y_box, lo, hi, tol=1e-6):
    width = hi - lo
    state = np.full(x.size, FREE, dtype=np.int8)
    state[(x <= lo + tol * width) & (y_box <= 0)] = LOWER
    state[(x >= hi - tol * width) & (y_box >= 0)] = UPPER
    return state


def solve_box_qp(q_mat, q, e, lo, hi, warm_state=None) -> BoxQpResult:
    q_mat = np.asarray(q_mat, dtype=float)
    q = np.asarray(q, dtype=float)
    e = np.asarray(e, dtype=float)
    if warm_state is not None:
        out = pdas(q_mat, q, e, lo, hi, np.asarray(warm_state))
        if out is not None:
            return BoxQpResult(out[0], out[1], out[2], 0, out[3])
    total = 0
    x0 = None
    for tol, iters in ((1e-6, 2000), (1e-9, 20000)):
        x, _, y_box, it = admm(q_mat, q, e, lo, hi, x0=x0, max_iter=iters, tol=tol)
        total += it
        x0 = x
        out = pdas(q_mat, q, e, lo, hi, state_from_point(x, y_box, lo, hi))
        if out is not None:
            return BoxQpResult(out[0], out[1], out[2], total, out[3])
    raise SolverError("box QP: active-set polishing failed to converge")


def _kkt_factor(q_mat, e, state):
    idx = np.flatnonzero(state == FREE)
    k, d = idx.size, e.shape[1]
    mat = np.zeros((k + d, k + d))
    mat[:k, :k] = q_mat[np.ix_(idx, idx)]
    mat[:k, k:] = e[idx]
    mat[k:, :k] = e[idx].T
    try:
        lu = sla.lu_factor(mat, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    piv = np.abs(np.diag(lu[0]))
    if piv.size and piv.min() <= 1e-12 * max(1.0, piv.max()):
        return None
    return idx, lu


def homotopy(q_mat, q, dq, e, lo, hi, state, t_end, max_steps=None, tol=1e-12):
    """Track the solution for linear term ``q + t dq`` from t = 0 to ``t_end``.

    ``state`` must be optimal at t = 0. The solution is piecewise linear in
    t; each breakpoint changes one index of the active set. Returns
    (x, nu, state) at ``t_end`` or None if a degenerate or singular step is
    met, in which case the caller should solve from scratch.
    """
    if t_end < 0:
        return homotopy(q_mat, q, -dq, e, lo, hi, state, -t_end, max_steps, tol)
    m, d = e.shape
    state = np.asarray(state, dtype=np.int8).copy()
    max_steps = 4 * m + 10 if max_steps is None else max_steps
    t = 0.0
    width = hi - lo
    for _ in range(max_steps):
        fac = _kkt_factor(q_mat, e, state)
        if fac is None:
            return None
        idx, lu = fac
        k = idx.size
        fixed = state != FREE
        xb = np.where(state == LOWER, lo, np.where(state == UPPER, hi, 0.0))
        qt = q + t * dq
        rhs = np.concatenate([-qt[idx] - q_mat[idx][:, fixed] @ xb[fixed], -(e[fixed].T @ xb[fixed])])
        drhs = np.concatenate([-dq[idx], np.zeros(d)])
        sol = sla.lu_solve(lu, np.column_stack([rhs, drhs]), check_finite=False)
        x = xb.copy()
        x[idx] = sol[:k, 0]
        nu = sol[k:, 0]
        dx = np.zeros(m)
        dx[idx] = sol[:k, 1]
        dnu = sol[k:, 1]
        g = q_mat @ x + qt + e @ nu
        dg = q_mat @ dx + dq + e @ dnu
        step = np.full(m, np.inf)
        free = state == FREE
        up_f = free & (dx > tol)
        dn_f = free & (dx < -tol)
        step[up_f] = (hi[up_f] - x[up_f]) / dx[up_f]
        step[dn_f] = (lo[dn_f] - x[dn_f]) / dx[dn_f]
        low = (state == LOWER) & (dg < -tol)
        upp = (state == UPPER) & (dg > tol)
        step[low] = g[low] / -dg[low]
        step[upp] = -g[upp] / dg[upp]
        step = np.maximum(step, 0.0)
        j = int(np.argmin(step))
        h = step[j]
        if t + h >= t_end:
            x = x + (t_end - t) * dx
            nu = nu + (t_end - t) * dnu
            return np.clip(x, lo - 1e-12 * width, hi + 1e-12 * width).clip(lo, hi), nu, state
        t += h
        if state[j] == FREE:
            state[j] = UPPER if dx[j] > 0 else LOWER
        else:
            state[j] = FREE
    return None
