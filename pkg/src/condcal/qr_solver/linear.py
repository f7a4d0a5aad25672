"""Unregularized linear quantile regression solved through its dual LP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from ..core import ValidationError
from .simplex import RankDeficientError, SolverError, solve_box_dual


def pinball_loss(theta, s, alpha: float):
    """Pinball loss: (1-alpha)(s-theta) if s >= theta else alpha(theta-s)."""
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    diff = np.asarray(s, dtype=float) - np.asarray(theta, dtype=float)
    out = np.where(diff >= 0, (1 - alpha) * diff, -alpha * diff)
    return float(out) if out.ndim == 0 else out


def eq_tolerance(s) -> np.ndarray:
    """Tolerance for deciding that a row is interpolated by the fit."""
    return 1e-9 * (1.0 + np.abs(np.asarray(s, dtype=float)))


@dataclass(frozen=True)
class PinballProblem:
    phi: np.ndarray
    s: np.ndarray
    alpha: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim == 1:
            phi = phi[:, None]
        s = np.asarray(self.s, dtype=float).ravel()
        if phi.shape[0] != s.size or s.size < 1:
            raise ValidationError("phi and s must have the same (positive) number of rows")
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(s))):
            raise ValidationError("pinball problem has non-finite entries")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        w = np.full(s.size, 1.0 / s.size) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != s.shape or np.any(w <= 0):
            raise ValidationError("weights must be positive, one per row")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "weights", w)

    @property
    def m(self) -> int:
        return self.s.size

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def dual_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box for eta, scaled so uniform weights give [-alpha, 1-alpha]."""
        c = self.weights * self.m / self.weights.sum()
        return -self.alpha * c, (1 - self.alpha) * c

    def objective(self, fitted) -> float:
        return float(self.weights @ pinball_loss(fitted, self.s, self.alpha))


@dataclass(frozen=True)
class QrFit:
    """Primal-dual solution of a linear quantile regression.

    ``beta`` is the largest minimizer (maximal total fitted value over the
    optimal face). ``vertex`` lists the rows of the dual simplex basis and
    ``vertex_beta`` the primal solution that basis induces; the sensitivity
    trace starts from that pair.
    """

    beta: np.ndarray
    eta: np.ndarray
    basis_rows: tuple[int, ...]
    duality_gap: float
    objective: float
    vertex: tuple[int, ...]
    vertex_beta: np.ndarray
    iterations: int = 0

    def predict(self, phi) -> np.ndarray:
        return np.asarray(phi, dtype=float) @ self.beta


def _largest_minimizer(phi, s, eta, lo, hi, beta0, tol):
    """Maximize sum(phi @ beta) over the primal optimal face defined by eta."""
    at_hi = eta >= hi - tol
    at_lo = eta <= lo + tol
    inner = ~(at_hi | at_lo)
    if inner.sum() >= phi.shape[1] and np.linalg.matrix_rank(phi[inner]) == phi.shape[1]:
        return beta0
    a_ub = np.vstack([phi[at_hi], -phi[at_lo]])
    b_ub = np.concatenate([s[at_hi], -s[at_lo]])
    res = linprog(
        -phi.sum(axis=0),
        A_ub=a_ub if a_ub.size else None,
        b_ub=b_ub if a_ub.size else None,
        A_eq=phi[inner] if inner.any() else None,
        b_eq=s[inner] if inner.any() else None,
        bounds=[(None, None)] * phi.shape[1],
        method="highs",
    )
    if res.status != 0:
        return beta0
    beta = res.x
    # snap to the exact vertex through the rows it interpolates
    resid = np.abs(s - phi @ beta)
    act = np.flatnonzero(resid <= 1e-7 * (1 + np.abs(s)))
    if act.size and np.linalg.matrix_rank(phi[act]) == phi.shape[1]:
        beta = np.linalg.lstsq(phi[act], s[act], rcond=None)[0]
    return beta


def solve_linear_qr(p: PinballProblem) -> QrFit:
    """Exact pinball-loss regression of ``s`` on ``phi``."""
    if p.d > p.m:
        raise ValidationError(f"need d <= m for an unregularized fit (d={p.d}, m={p.m})")
    lo, hi = p.dual_bounds()
    try:
        v = solve_box_dual(p.phi, p.s, lo, hi)
    except RankDeficientError as exc:
        raise ValidationError(f"rank-deficient basis; dependent columns {exc.dependent}") from exc
    eta = v.x
    vertex_beta = v.y
    tol = 1e-9 * (1 + np.abs(hi))
    beta = _largest_minimizer(p.phi, p.s, eta, lo, hi, vertex_beta, tol)
    fitted = p.phi @ beta
    primal = p.objective(fitted)
    dual = float(p.s @ eta) * p.weights.sum() / p.m
    gap = abs(primal - dual)
    if gap > 1e-7 * (1 + abs(primal)):
        raise SolverError(f"duality gap {gap:.3e} too large")
    rows = tuple(int(i) for i in np.flatnonzero(np.abs(p.s - fitted) <= eq_tolerance(p.s)))
    return QrFit(
        beta=beta,
        eta=eta,
        basis_rows=rows,
        duality_gap=gap,
        objective=primal,
        vertex=tuple(int(i) for i in v.basis),
        vertex_beta=vertex_beta,
        iterations=v.iterations,
    )
