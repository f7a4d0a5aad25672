"""Independent reference computations used by the tests.

Each oracle solves its problem by a route that shares no code with the
package: vertex enumeration, HiGHS through scipy, or SLSQP on a smooth
reformulation.
"""

from itertools import combinations

import numpy as np
from scipy.optimize import linprog, minimize


def pinball(theta, s, alpha):
    d = np.asarray(s, float) - np.asarray(theta, float)
    return np.where(d >= 0, (1 - alpha) * d, -alpha * d)


def order_stat_quantile(s, alpha):
    """Smallest q with #{s_i <= q} >= (n+1)(1-alpha); +inf if none."""
    s = np.sort(np.asarray(s, float))
    need = (s.size + 1) * (1 - alpha)
    for q in s:
        if np.sum(s <= q) >= need - 1e-12:
            return float(q)
    return np.inf


def vertex_enumeration_qr(phi, s, alpha):
    """Minimum pinball loss over fits interpolating d rows, with all optimal betas."""
    m, d = phi.shape
    best, betas = np.inf, []
    for rows in combinations(range(m), d):
        a = phi[list(rows)]
        if abs(np.linalg.det(a)) < 1e-10:
            continue
        beta = np.linalg.solve(a, s[list(rows)])
        loss = pinball(phi @ beta, s, alpha).mean()
        if loss < best - 1e-10:
            best, betas = loss, [beta]
        elif abs(loss - best) <= 1e-10:
            betas.append(beta)
    return best, betas


def highs_qr(phi, s, alpha, weights=None):
    """Primal pinball regression as an LP: minimize w.((1-a)u + a v), u - v = s - phi beta."""
    m, d = phi.shape
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, float)
    c = np.concatenate([np.zeros(d), (1 - alpha) * w, alpha * w])
    a_eq = np.hstack([phi, np.eye(m), -np.eye(m)])
    bounds = [(None, None)] * d + [(0, None)] * (2 * m)
    res = linprog(c, A_eq=a_eq, b_eq=s, bounds=bounds, method="highs")
    assert res.status == 0
    return res.fun, res.x[:d]


def highs_dual_eta(phi, s, lo, hi):
    """max s.eta s.t. phi^T eta = 0, lo <= eta <= hi; returns (value, eta)."""
    res = linprog(-s, A_eq=phi.T, b_eq=np.zeros(phi.shape[1]), bounds=list(zip(lo, hi)), method="highs")
    assert res.status == 0
    return -res.fun, res.x


def augmented_eta_range(phi_aug, s_aug, alpha):
    """Range of the test-row dual variable over the optimal face of the augmented dual.

    Solves for the optimal value, then minimizes and maximizes eta_{n+1}
    subject to s.eta attaining it (up to a relative 1e-9).
    """
    m = s_aug.size
    lo, hi = np.full(m, -alpha), np.full(m, 1 - alpha)
    val, _ = highs_dual_eta(phi_aug, s_aug, lo, hi)
    floor = val - 1e-9 * (1 + abs(val))
    out = []
    for sign in (1.0, -1.0):
        c = np.zeros(m)
        c[-1] = sign
        res = linprog(
            c, A_eq=phi_aug.T, b_eq=np.zeros(phi_aug.shape[1]), A_ub=-s_aug[None, :],
            b_ub=[-floor], bounds=list(zip(lo, hi)), method="highs",
        )
        assert res.status == 0
        out.append(sign * res.fun)
    return out[0], out[1]


def max_optimal_fit(phi, s, alpha, phi_x):
    """Largest value of phi_x . beta over all minimizers of the pinball loss (primal LPs)."""
    m, d = phi.shape
    val, _ = highs_qr(phi, s, alpha)
    c = np.concatenate([np.zeros(d), np.full(m, (1 - alpha) / m), np.full(m, alpha / m)])
    a_eq = np.hstack([phi, np.eye(m), -np.eye(m)])
    bounds = [(None, None)] * d + [(0, None)] * (2 * m)
    obj = np.concatenate([-np.asarray(phi_x, float), np.zeros(2 * m)])
    res = linprog(obj, A_ub=c[None, :], b_ub=[val + 1e-10 * (1 + abs(val))], A_eq=a_eq, b_eq=s,
                  bounds=bounds, method="highs")
    assert res.status == 0
    return -res.fun


def refit_threshold(phi, s, phi_x, alpha, grid):
    """Grid bracket (a, b) of the largest imputed score kept in the set, by full refits.

    By complementary slackness the test dual variable is 1 - alpha when S
    exceeds every optimal augmented fit at the test row and -alpha when S is
    below one of them. When S ties the largest fit, the optimal dual face
    decides.
    """
    phi_aug = np.vstack([phi, phi_x])
    grid = np.asarray(grid, float)

    def out(i):
        g = grid[i]
        s_aug = np.append(s, g)
        top = max_optimal_fit(phi_aug, s_aug, alpha, phi_x)
        tol = 1e-9 * (1 + abs(g))
        if abs(g - top) > tol:
            return g > top
        lo_e, _ = augmented_eta_range(phi_aug, s_aug, alpha)
        return lo_e >= 1 - alpha - 1e-5

    # membership is monotone in S, so bisect over grid indices
    if not out(len(grid) - 1):
        return grid[-1], np.inf
    if out(0):
        return -np.inf, grid[0]
    a, b = 0, len(grid) - 1
    while b - a > 1:
        mid = (a + b) // 2
        if out(mid):
            b = mid
        else:
            a = mid
    return grid[a], grid[b]


def slsqp_kernel_qr(k, phi, s, alpha, lam, w=None):
    """Kernel pinball regression with slack variables, solved by SLSQP."""
    m, d = phi.shape
    w = m if w is None else w

    def unpack(z):
        return z[:m], z[m : m + d], z[m + d : 2 * m + d], z[2 * m + d :]

    def obj(z):
        g, b, u, v = unpack(z)
        return ((1 - alpha) * u.sum() + alpha * v.sum()) / w + lam * g @ k @ g

    def grad(z):
        g, b, u, v = unpack(z)
        return np.concatenate([2 * lam * k @ g, np.zeros(d), np.full(m, (1 - alpha) / w), np.full(m, alpha / w)])

    cons = {
        "type": "eq",
        "fun": lambda z: unpack(z)[2] - unpack(z)[3] - (s - k @ unpack(z)[0] - phi @ unpack(z)[1]),
        "jac": lambda z: np.hstack([k, phi, np.eye(m), -np.eye(m)]),
    }
    z0 = np.concatenate([np.zeros(m + d), np.maximum(s, 0), np.maximum(-s, 0)])
    bounds = [(None, None)] * (m + d) + [(0, None)] * (2 * m)
    res = minimize(obj, z0, jac=grad, constraints=[cons], bounds=bounds, method="SLSQP",
                   options={"ftol": 1e-14, "maxiter": 2000})
    return res.fun, unpack(res.x)


def slsqp_lipschitz_qr(x, phi, s, alpha, lam, w=None):
    """Lipschitz pinball regression with an epigraph variable, solved by SLSQP."""
    x = np.asarray(x, float).reshape(len(s), -1)
    m, d = phi.shape
    w = m if w is None else w
    pairs = [(i, j) for i in range(m) for j in range(m) if i != j]
    dist = {p: np.linalg.norm(x[p[0]] - x[p[1]]) for p in pairs}
    n_var = m + d + 1 + 2 * m

    def obj(z):
        u, v = z[m + d + 1 : 2 * m + d + 1], z[2 * m + d + 1 :]
        return ((1 - alpha) * u.sum() + alpha * v.sum()) / w + lam * z[m + d]

    cons = [
        {"type": "eq", "fun": lambda z: z[m + d + 1 : 2 * m + d + 1] - z[2 * m + d + 1 :] - (s - z[:m] - phi @ z[m : m + d])},
        {"type": "ineq", "fun": lambda z: np.array([z[m + d] * dist[p] - (z[p[0]] - z[p[1]]) for p in pairs])},
    ]
    z0 = np.concatenate([np.zeros(m + d + 1), np.maximum(s, 0), np.maximum(-s, 0)])
    bounds = [(None, None)] * (m + d) + [(0, None)] * (1 + 2 * m)
    assert len(bounds) == n_var
    res = minimize(obj, z0, constraints=cons, bounds=bounds, method="SLSQP",
                   options={"ftol": 1e-14, "maxiter": 3000})
    return res.fun
