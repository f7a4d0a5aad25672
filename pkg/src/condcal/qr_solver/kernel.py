"""Kernel-penalized quantile regression through its box-constrained dual.

Primal, with ``w = n_weight``::

    (1/w) sum_i pinball(K_i gamma + Phi_i beta, s_i) + lam gamma^T K gamma

Dual::

    maximize  s^T eta - eta^T K eta / (4 w lam)
    s.t.      Phi^T eta = 0,  -alpha <= eta_i <= 1 - alpha

and the representer coefficients are gamma = eta / (2 w lam).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from ..core import GRAM_RIDGE, ValidationError, check_psd
from .boxqp import homotopy, solve_box_qp
from .linear import pinball_loss


@dataclass(frozen=True)
class KernelQrFit:
    gamma: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    objective: float
    dual_objective: float
    fitted: np.ndarray
    state: np.ndarray
    lam: float
    n_weight: float

    @property
    def duality_gap(self) -> float:
        return abs(self.objective - self.dual_objective)

    def rkhs_norm_sq(self, k: np.ndarray) -> float:
        return float(self.gamma @ k @ self.gamma)


def solve_kernel_qr(
    k,
    phi,
    s,
    alpha: float,
    lam: float,
    n_weight: float | None = None,
    warm_state=None,
    check: bool = True,
    path_from: tuple | None = None,
) -> KernelQrFit:
    """Fit the kernel quantile regression; ``n_weight`` defaults to len(s).

    ``path_from = (s0, state0)`` gives scores at which ``state0`` is the
    optimal active set; the solution is then tracked from ``s0`` to ``s``
    along the straight line between them, falling back to a fresh solve.
    """
    k = np.asarray(k, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    s = np.asarray(s, dtype=float).ravel()
    m = s.size
    if k.shape != (m, m) or phi.shape[0] != m:
        raise ValidationError("Gram matrix, basis and scores disagree on the row count")
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    if check:
        check_psd(k)
    w = float(m if n_weight is None else n_weight)
    kr = k + GRAM_RIDGE * np.eye(m)
    q_mat = kr / (2.0 * w * lam)
    lo = np.full(m, -alpha)
    hi = np.full(m, 1.0 - alpha)
    out = None
    if path_from is not None:
        s0 = np.asarray(path_from[0], dtype=float)
        out = homotopy(q_mat, -s0, -(s - s0), phi, lo, hi, path_from[1], 1.0)
    if out is None:
        res = solve_box_qp(q_mat, -s, phi, lo, hi, warm_state)
        out = (res.x, res.nu, res.state)
    eta, beta, state = out
    beta = _largest_beta(q_mat @ eta - s, phi, eta, lo, hi, beta)
    gamma = eta / (2.0 * w * lam)
    fitted = kr @ gamma + phi @ beta
    pen = lam * float(gamma @ kr @ gamma)
    primal = float(pinball_loss(fitted, s, alpha).sum()) / w + pen
    dual = (float(s @ eta) - float(eta @ kr @ eta) / (4.0 * w * lam)) / w
    return KernelQrFit(
        gamma=gamma,
        beta=beta,
        eta=eta,
        objective=primal,
        dual_objective=dual,
        fitted=fitted,
        state=state,
        lam=lam,
        n_weight=w,
    )


def _largest_beta(g0, phi, eta, lo, hi, beta, tol=1e-9):
    """Largest optimal beta (maximal total fitted value) when it is not unique.

    With ``g = g0 + Phi beta`` the optimality conditions are g = 0 on rows
    strictly inside the box, g >= 0 at the lower bound and g <= 0 at the
    upper bound. Beta is unique unless the interior rows are rank deficient.
    """
    d = phi.shape[1]
    width = hi - lo
    inner = (eta - lo > tol * width) & (hi - eta > tol * width)
    if inner.sum() >= d and np.linalg.matrix_rank(phi[inner]) == d:
        return beta
    slack = tol * max(1.0, float(np.abs(g0).max()))
    low = ~inner & (eta - lo <= hi - eta)
    up = ~inner & ~low
    # rows of a_ub @ beta <= b_ub
    a_ub = np.vstack([phi[inner], -phi[inner], -phi[low], phi[up]])
    b_ub = np.concatenate([slack - g0[inner], slack + g0[inner], slack + g0[low], slack - g0[up]])
    res = linprog(-phi.sum(axis=0), A_ub=a_ub, b_ub=b_ub, bounds=[(None, None)] * d, method="highs")
    return res.x if res.status == 0 else beta
