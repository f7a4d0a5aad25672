"""Bounded-variable revised simplex for the quantile regression dual.

Solves

    maximize    c^T x
    subject to  A x = b,   lo <= x <= hi

with A of full row rank. Pricing is Dantzig (largest reduced cost) and
switches to Bland's rule once a run of degenerate pivots is detected, so the
method terminates on degenerate problems. All ties break on the smallest
variable index, which keeps the result a deterministic function of the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

DEGENERATE_RUN = 50


class SolverError(RuntimeError):
    """The LP could not be solved to an exact vertex."""


class RankDeficientError(SolverError):
    def __init__(self, dependent: list[int]):
        self.dependent = list(dependent)
        super().__init__(f"basis matrix is rank deficient; dependent columns {self.dependent}")


@dataclass
class Vertex:
    x: np.ndarray
    basis: np.ndarray
    y: np.ndarray
    iterations: int


def dependent_columns(phi: np.ndarray, tol: float = 1e-10) -> list[int]:
    """Columns of ``phi`` that are linear combinations of earlier-pivoted ones."""
    if phi.shape[0] < phi.shape[1]:
        return list(range(phi.shape[0], phi.shape[1])) if phi.shape[0] else list(range(phi.shape[1]))
    _, r, piv = sla.qr(phi, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = diag[0] if diag.size and diag[0] > 0 else 1.0
    rank = int((diag > tol * scale * max(phi.shape)).sum())
    return sorted(int(j) for j in piv[rank:])


def _solve(lu, rhs, trans=0):
    return sla.lu_solve(lu, rhs, trans=trans, check_finite=False)


def _factor(a_b: np.ndarray):
    lu = sla.lu_factor(a_b, check_finite=False)
    piv = np.abs(np.diag(lu[0]))
    if piv.min() <= 1e-13 * max(1.0, piv.max()):
        raise SolverError("singular basis matrix")
    return lu


def bounded_simplex(
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    x: np.ndarray,
    basis: np.ndarray,
    max_iter: int,
    tol: float = 1e-9,
) -> Vertex:
    """Run primal simplex from a feasible basic solution.

    ``x`` holds the nonbasic variables at one of their bounds; basic entries
    are recomputed. Returns an optimal vertex or raises :class:`SolverError`.
    """
    m, n = a.shape
    x = x.astype(float).copy()
    basis = np.asarray(basis, dtype=int).copy()
    is_basic = np.zeros(n, dtype=bool)
    is_basic[basis] = True
    ctol = tol * max(1.0, float(np.abs(c).max()))
    degenerate = 0
    for it in range(max_iter + 1):
        lu = _factor(a[:, basis])
        x[is_basic] = 0.0
        x[basis] = _solve(lu, b - a @ x)
        y = _solve(lu, c[basis], trans=1)
        rc = c - a.T @ y
        rc[is_basic] = 0.0
        finite_hi = np.isfinite(hi)
        hi_f = np.where(finite_hi, hi, 0.0)
        at_hi = finite_hi & (x >= hi_f - tol * (1.0 + np.abs(hi_f)))
        up = (~is_basic) & (rc > ctol) & ~at_hi
        down = (~is_basic) & (rc < -ctol) & at_hi
        cand = up | down
        if not cand.any():
            return Vertex(x, basis, y, it)
        if it == max_iter:
            break
        if degenerate >= DEGENERATE_RUN:
            j = int(np.flatnonzero(cand)[0])
        else:
            score = np.where(cand, np.abs(rc), -1.0)
            j = int(np.argmax(score))
        sigma = 1.0 if up[j] else -1.0
        w = -sigma * _solve(lu, a[:, j])
        xb = x[basis]
        lob, hib = lo[basis], hi[basis]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.full(m, np.inf)
            pos = w > tol
            neg = w < -tol
            ratio[pos] = (hib[pos] - xb[pos]) / w[pos]
            ratio[neg] = (lob[neg] - xb[neg]) / w[neg]
        ratio = np.maximum(ratio, 0.0)
        own = hi[j] - lo[j]
        theta_b = ratio.min() if m else np.inf
        if not np.isfinite(theta_b) and not np.isfinite(own):
            raise SolverError("LP is unbounded")
        if own <= theta_b:
            theta = own
            x[j] = hi[j] if sigma > 0 else lo[j]
            leave = -1
        else:
            theta = theta_b
            ties = np.flatnonzero(ratio <= theta_b + tol)
            leave = int(ties[np.argmin(basis[ties])])
        degenerate = degenerate + 1 if theta <= tol else 0
        if leave >= 0:
            x[basis] = xb + theta * w
            out = basis[leave]
            x[out] = hi[out] if w[leave] > 0 else lo[out]
            x[j] = x[j] + sigma * theta
            is_basic[out] = False
            is_basic[j] = True
            basis[leave] = j
    raise SolverError(f"simplex did not converge in {max_iter} iterations")


def solve_box_dual(
    phi: np.ndarray,
    s: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    max_iter: int | None = None,
) -> Vertex:
    """Vertex solution of max s^T eta s.t. phi^T eta = 0, lo <= eta <= hi.

    Requires lo < 0 < hi elementwise so the problem is feasible; uses a
    phase-one with one artificial per constraint row.
    """
    m, d = phi.shape
    dep = dependent_columns(phi)
    if dep:
        raise RankDeficientError(dep)
    if max_iter is None:
        max_iter = 50 * (m + d) + 1000
    a0 = phi.T
    x0 = lo.astype(float).copy()
    r = a0 @ x0
    sgn = np.where(r > 0, -1.0, 1.0)
    a1 = np.hstack([a0, np.diag(sgn)])
    lo1 = np.concatenate([lo, np.zeros(d)])
    hi1 = np.concatenate([hi, np.full(d, np.inf)])
    c1 = np.concatenate([np.zeros(m), -np.ones(d)])
    x1 = np.concatenate([x0, np.abs(r)])
    basis = np.arange(m, m + d)
    v = bounded_simplex(a1, np.zeros(d), c1, lo1, hi1, x1, basis, max_iter)
    scale = max(1.0, float(np.abs(phi).sum(axis=0).max()))
    if v.x[m:].sum() > 1e-8 * scale:
        raise SolverError("phase one failed to find a feasible point")
    x = v.x[:m].copy()
    basis = v.basis.copy()
    # pivot remaining (zero-level) artificials out of the basis
    for pos in np.flatnonzero(basis >= m):
        lu = _factor(a1[:, basis])
        row = _solve(lu, a0, trans=0)[pos]
        nonbasic = np.setdiff1d(np.arange(m), basis)
        ok = nonbasic[np.abs(row[nonbasic]) > 1e-9]
        if ok.size == 0:
            raise RankDeficientError([int(basis[pos] - m)])
        basis[pos] = int(ok[0])
    return bounded_simplex(a0, np.zeros(d), s.astype(float), lo, hi, x, basis, max_iter, tol=1e-10)
