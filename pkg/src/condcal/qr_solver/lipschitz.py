"""Lipschitz-penalized quantile regression as a linear program.

The Lipschitz part is represented by its values ``gamma`` at the data
points; the penalty max_{i != j} |gamma_i - gamma_j| / ||x_i - x_j|| is
linearized with a single epigraph variable and one constraint per ordered
pair, so the LP has m(m-1) inequality rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.spatial.distance import pdist, squareform

from ..core import ValidationError
from .linear import pinball_loss
from .simplex import SolverError

DEFAULT_CAP = 2000


@dataclass(frozen=True)
class LipschitzQrFit:
    gamma: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    lip_value: float
    objective: float
    fitted: np.ndarray
    lam: float


def lipschitz_constant(x, values) -> float:
    """max_{i != j} |v_i - v_j| / ||x_i - x_j||."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        return 0.0
    dist = pdist(x)
    dv = pdist(np.asarray(values, dtype=float)[:, None])
    return float((dv / dist).max())


def solve_lipschitz_qr(
    x,
    phi,
    s,
    alpha: float,
    lam: float,
    n_weight: float | None = None,
    cap: int = DEFAULT_CAP,
) -> LipschitzQrFit:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    s = np.asarray(s, dtype=float).ravel()
    m, d = phi.shape
    if x.shape[0] != m or s.size != m:
        raise ValidationError("covariates, basis and scores disagree on the row count")
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    if m > cap:
        raise ValidationError(f"{m} rows exceeds the Lipschitz solver cap of {cap}")
    dist = squareform(pdist(x))
    iu = np.triu_indices(m, 1)
    if m > 1 and dist[iu].min() == 0.0:
        i, j = (a[np.argmin(dist[iu])] for a in iu)
        raise ValidationError(f"duplicate covariate rows {i} and {j}")
    w = float(m if n_weight is None else n_weight)

    # variable layout: gamma (m) | beta (d) | p (m) | q (m) | L (1)
    nv = 3 * m + d + 1
    c = np.zeros(nv)
    c[m + d : 2 * m + d] = 1 - alpha
    c[2 * m + d : 3 * m + d] = alpha
    c[-1] = w * lam
    eye = sp.identity(m, format="csr")
    a_eq = sp.hstack(
        [eye, sp.csr_matrix(phi), eye, -eye, sp.csr_matrix((m, 1))], format="csr"
    )
    ii, jj = np.nonzero(~np.eye(m, dtype=bool))
    npair = ii.size
    rows = np.repeat(np.arange(npair), 3)
    cols = np.column_stack([ii, jj, np.full(npair, nv - 1)]).ravel()
    vals = np.column_stack([np.ones(npair), -np.ones(npair), -dist[ii, jj]]).ravel()
    a_ub = sp.csr_matrix((vals, (rows, cols)), shape=(npair, nv)) if npair else None
    bounds = [(None, None)] * (m + d) + [(0, None)] * (2 * m + 1)
    res = linprog(
        c,
        A_ub=a_ub,
        b_ub=np.zeros(npair) if npair else None,
        A_eq=a_eq,
        b_eq=s,
        bounds=bounds,
        method="highs-ds",
    )
    if res.status != 0:
        raise SolverError(f"Lipschitz LP failed: {res.message}")
    gamma = res.x[:m]
    beta = res.x[m : m + d]
    eta = np.clip(res.eqlin.marginals, -alpha, 1 - alpha)
    fitted = gamma + phi @ beta
    lip = lipschitz_constant(x, gamma)
    objective = float(pinball_loss(fitted, s, alpha).sum()) / w + lam * lip
    return LipschitzQrFit(gamma, beta, eta, lip, objective, fitted, lam)
