"""Conditional calibration of prediction thresholds for a test point.

A test point ``x`` is appended to the calibration set with an imputed score
``S`` and the augmented quantile regression is solved through its dual. The
test row's dual variable ``eta(S)`` is nondecreasing in ``S``, and the
prediction set is ``{S : eta(S) < C}`` with cutoff ``C = 1 - alpha`` (or a
uniform draw for the randomized set). The threshold ``sup{S : eta(S) < C}``
is computed either by tracing the piecewise-linear dual path with simplex
pivots (exact, linear classes only) or by bisection (any class).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .core import (
    BasisSpec,
    CalibrationSet,
    KernelSpec,
    LipschitzSpec,
    PredictionInterval,
    ScoreFunction,
    ValidationError,
    realize_set,
    realize_two_sided,
)
from .qr_solver import (
    KernelQrFit,
    LipschitzQrFit,
    PinballProblem,
    QrFit,
    SolverError,
    eq_tolerance,
    solve_kernel_qr,
    solve_linear_qr,
    solve_lipschitz_qr,
)
from .qr_solver.simplex import dependent_columns, solve_box_dual

PIVOT_TOL = 1e-10
# eta within this of the cutoff counts as reaching it
ETA_TOL = 1e-9
OVERFLOW_GUARD = 1e15

STREAMS = {"one-sided": 0, "two-sided-lower": 1, "two-sided-upper": 2}


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibratedModel:
    """Calibration data, function class and the cached n-point fit.

    ``alpha`` is the level of the pinball loss, so the dual box is
    ``[-alpha, 1 - alpha]``. The base fit weights each row by 1/(n+1), the
    same weight the augmented program gives each of its n+1 rows.
    """

    calib: CalibrationSet
    basis: BasisSpec
    alpha: float
    base_fit: QrFit | KernelQrFit | LipschitzQrFit
    phi: np.ndarray
    kernel: KernelSpec | LipschitzSpec | None = None
    gram: np.ndarray | None = None
    keep: tuple[int, ...] | None = None
    combo: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.calib.n

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def features(self, rows) -> np.ndarray:
        """Basis rows restricted to the columns kept by the fit."""
        full = self.basis.evaluate(rows)
        return full if self.keep is None else full[:, list(self.keep)]

    def escapes(self, full_row: np.ndarray) -> bool:
        """True when a dropped column is independent once this row is added.

        The augmented program then has a constraint that forces the test
        dual variable to zero for every imputed score.
        """
        if self.keep is None:
            return False
        dropped = np.setdiff1d(np.arange(full_row.size), self.keep)
        resid = full_row[dropped] - full_row[list(self.keep)] @ self.combo
        return bool(np.any(np.abs(resid) > 1e-9 * (1.0 + np.abs(full_row[dropped]))))

    @property
    def kind(self) -> str:
        if self.kernel is None:
            return "linear"
        return "lipschitz" if isinstance(self.kernel, LipschitzSpec) else "kernel"

    @property
    def bounds(self) -> tuple[float, float]:
        return -self.alpha, 1.0 - self.alpha

    def predict(self, x_new) -> float:
        """The n-point fit evaluated at ``x_new``."""
        row = _row(x_new)
        phi_x = self.features(row[None, :])[0]
        fit = self.base_fit
        if self.kind == "linear":
            return float(phi_x @ fit.beta)
        if self.kind == "kernel":
            k_x = self.kernel.gram(self.calib.x, row[None, :])[:, 0]
            return float(k_x @ fit.gamma + phi_x @ fit.beta)
        # the Lipschitz part is only known at the data points
        return float(phi_x @ fit.beta) + _lip_extend(self, row)

    def negated(self) -> "CalibratedModel":
        """Model for the scores ``-s`` at level ``1 - alpha``.

        Its dual solution is the negated dual of this model, so thresholds
        of the negated problem give lower thresholds of this one.
        """
        calib = CalibrationSet(self.calib.x, -self.calib.s, self.calib.y)
        alpha = 1.0 - self.alpha
        f = self.base_fit
        if self.kind == "linear":
            fit = QrFit(
                beta=-f.beta,
                eta=-f.eta,
                basis_rows=f.basis_rows,
                duality_gap=f.duality_gap,
                objective=f.objective,
                vertex=f.vertex,
                vertex_beta=-f.vertex_beta,
                iterations=f.iterations,
            )
            return dataclasses.replace(self, calib=calib, alpha=alpha, base_fit=fit)
        return fit_model(calib, self.basis, alpha, self.kernel)


def _row(x_new) -> np.ndarray:
    row = np.atleast_1d(np.asarray(x_new, dtype=float)).ravel()
    if not np.all(np.isfinite(row)):
        raise ValidationError("test covariates must be finite")
    return row


def _lip_extend(model: CalibratedModel, row: np.ndarray) -> float:
    # midpoint of the McShane and Whitney extensions of the fitted gamma
    f = model.base_fit
    dist = np.linalg.norm(model.calib.x - row[None, :], axis=1)
    hi = float(np.min(f.gamma + f.lip_value * dist))
    lo = float(np.max(f.gamma - f.lip_value * dist))
    return 0.5 * (hi + lo)


def reduce_columns(phi: np.ndarray) -> tuple[tuple[int, ...] | None, np.ndarray | None]:
    """Independent column subset of ``phi`` and the combination giving the rest.

    Dropping dependent columns leaves the span, and hence the function
    class, unchanged. Returns (None, None) when ``phi`` has full column rank.
    """
    dep = dependent_columns(phi)
    if not dep:
        return None, None
    keep = tuple(j for j in range(phi.shape[1]) if j not in set(dep))
    if not keep:
        raise ValidationError("basis is identically zero on the calibration data")
    combo = np.linalg.lstsq(phi[:, list(keep)], phi[:, dep], rcond=None)[0]
    return keep, combo


def fit_model(
    calib: CalibrationSet,
    basis: BasisSpec,
    alpha: float,
    kernel: KernelSpec | LipschitzSpec | None = None,
) -> CalibratedModel:
    """Fit the n-point quantile regression that seeds every threshold computation."""
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    full = basis.evaluate(calib.x)
    keep, combo = reduce_columns(full)
    phi = full if keep is None else np.ascontiguousarray(full[:, list(keep)])
    if phi.shape[1] > calib.n:
        raise ValidationError(f"need at most n={calib.n} independent basis columns, got {phi.shape[1]}")
    n = calib.n
    w = float(n + 1)
    gram = None
    if kernel is None:
        fit = solve_linear_qr(PinballProblem(phi, calib.s, alpha))
    elif isinstance(kernel, LipschitzSpec):
        fit = solve_lipschitz_qr(calib.x, phi, calib.s, alpha, kernel.lam, n_weight=w, cap=kernel.cap)
    else:
        gram = kernel.gram(calib.x)
        fit = solve_kernel_qr(gram, phi, calib.s, alpha, kernel.lam, n_weight=w)
    phi.setflags(write=False)
    return CalibratedModel(calib, basis, alpha, fit, phi, kernel, gram, keep, combo)


fit = fit_model


def fit_two_sided(calib, basis, alpha: float, kernel=None) -> tuple[CalibratedModel, CalibratedModel]:
    """Models for the lower (quantile alpha/2) and upper (1 - alpha/2) bounds."""
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    model_lo = fit_model(calib, basis, 1.0 - alpha / 2, kernel)
    model_hi = fit_model(calib, basis, alpha / 2, kernel)
    return model_lo, model_hi


# --------------------------------------------------------------------------
# Augmented duals
# --------------------------------------------------------------------------


class AugmentedDual:
    """Dual of the augmented program at one test point, as a function of S."""

    def __init__(self, model: CalibratedModel, x_new):
        self.model = model
        self.row = _row(x_new)
        full = model.basis.evaluate(self.row[None, :])[0]
        # eta_{n+1} is pinned at zero when the test row escapes the span
        self.pinned = model.escapes(full)
        self.phi_x = full if model.keep is None else full[list(model.keep)]
        self.phi = np.vstack([model.phi, self.phi_x])
        lo, hi = model.bounds
        m = model.n + 1
        self.lo = np.full(m, lo)
        self.hi = np.full(m, hi)
        self.x_aug = np.vstack([model.calib.x, self.row])
        self.gram = None
        if model.kind == "kernel":
            k_x = model.kernel.gram(model.calib.x, self.row[None, :])[:, 0]
            k_xx = float(model.kernel.gram(self.row[None, :])[0, 0])
            g = np.empty((m, m))
            g[:-1, :-1] = model.gram
            g[:-1, -1] = k_x
            g[-1, :-1] = k_x
            g[-1, -1] = k_xx
            self.gram = g
            # the padded n-point solution is optimal when S equals the n-point fit
            pred = float(k_x @ model.base_fit.gamma + self.phi_x @ model.base_fit.beta)
            self._states = {pred: np.append(model.base_fit.state, 0).astype(np.int8)}

    def scores(self, s_imputed: float) -> np.ndarray:
        return np.append(self.model.calib.s, float(s_imputed))

    def solve(self, s_imputed: float):
        """Full augmented fit; returns (eta, fitted values)."""
        m = self.model
        s = self.scores(s_imputed)
        if m.kind == "linear":
            try:
                v = solve_box_dual(self.phi, s, self.lo, self.hi)
            except SolverError:
                f = solve_linear_qr(PinballProblem(self.phi, s, m.alpha))
                return f.eta, self.phi @ f.beta
            return v.x, self.phi @ v.y
        if m.kind == "kernel":
            # follow the solution path from the closest imputed score solved so far
            near = min(self._states, key=lambda v: abs(v - s_imputed))
            f = solve_kernel_qr(
                self.gram, self.phi, s, m.alpha, m.kernel.lam,
                check=False, path_from=(self.scores(near), self._states[near]),
            )
            self._states[float(s_imputed)] = f.state
            return f.eta, f.fitted
        f = solve_lipschitz_qr(self.x_aug, self.phi, s, m.alpha, m.kernel.lam, cap=m.kernel.cap)
        return f.eta, f.fitted

    def eta(self, s_imputed: float) -> float:
        if self.pinned:
            return 0.0
        return float(self.solve(s_imputed)[0][-1])

    def below(self, s_imputed: float, cutoff: float) -> bool:
        """Membership test eta(S) < cutoff."""
        return self.eta(s_imputed) < cutoff - ETA_TOL


def _pinned(cutoff: float, method: str) -> ThresholdResult:
    s_star = math.inf if cutoff > ETA_TOL else -math.inf
    return ThresholdResult(s_star, method, cutoff, eta_trace=())


def eta_at(model: CalibratedModel, x_new, s_imputed: float) -> float:
    """Test-row dual variable of the augmented program with imputed score."""
    return AugmentedDual(model, x_new).eta(s_imputed)


# --------------------------------------------------------------------------
# Threshold results and randomization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomDraw:
    u: float
    seed: int
    stream: str
    index: int = 0


@dataclass(frozen=True)
class ThresholdResult:
    """Threshold S* for one test point and how it was obtained.

    ``eta_trace`` lists (S, eta) breakpoints of the traced dual path.
    ``fallback`` is set when tracing gave up and bisection produced the value.
    """

    s_star: float
    method: str
    cutoff: float
    randomized: RandomDraw | None = None
    eta_trace: tuple[tuple[float, float], ...] | None = None
    interp_count: int = 0
    pivots: int = 0
    fallback: bool = False


def draw_uniform(seed: int, index: int, stream: str, low: float, high: float) -> RandomDraw:
    """Uniform on [low, high] from a counter-based stream keyed by (seed, index, stream)."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValidationError("seed must be a 64-bit unsigned integer")
    if index < 0:
        raise ValidationError("test index must be nonnegative")
    bitgen = np.random.Philox(key=seed, counter=[0, STREAMS[stream], int(index), 0])
    u = float(np.random.Generator(bitgen).random())
    return RandomDraw(low + (high - low) * u, seed, stream, int(index))


def _check_cutoff(model: CalibratedModel, cutoff: float) -> float:
    cutoff = float(cutoff)
    lo, hi = model.bounds
    if not lo - 1e-12 <= cutoff <= hi + 1e-12:
        raise ValidationError(f"cutoff {cutoff} outside the dual box [{lo}, {hi}]")
    return cutoff


# --------------------------------------------------------------------------
# Sensitivity tracing
# --------------------------------------------------------------------------


class _TraceLimit(RuntimeError):
    pass


def _trace_up(phi, s, lo, hi, eta0, vertex, target, max_pivots):
    """Follow the augmented dual from S = fit(x), eta_{n+1} = 0 upward.

    ``phi`` has n+1 rows, the last one the test point. ``eta0`` and
    ``vertex`` are an optimal basic solution of the n-point dual (whose
    primal interpolates the rows in ``vertex``). Returns (S*, trace, pivots,
    basis) where S* = sup{S : eta_{n+1}(S) < target}, target in [0, hi].
    """
    m, d = phi.shape
    n = m - 1
    eta = np.append(eta0, 0.0)
    basis = list(vertex)
    sv = np.append(s, 0.0)
    beta = np.linalg.solve(phi[basis], sv[basis])
    big_s = float(phi[n] @ beta)
    sv[n] = big_s
    trace = [(big_s, 0.0)]
    if target <= 0.0:
        return big_s, trace, 0, basis
    j, sigma = n, 1.0
    last_left = -1
    for piv in range(max_pivots):
        # eta-move: push variable j off its bound at fixed S
        ab = phi[basis]
        lu = sla.lu_factor(ab.T, check_finite=False)
        w = -sigma * sla.lu_solve(lu, phi[j], check_finite=False)
        if j == n:
            rate = sigma
        elif n in basis:
            rate = w[basis.index(n)]
        else:
            rate = 0.0
        gap = target - eta[n]
        theta_t = gap / rate if rate > PIVOT_TOL else math.inf
        own = hi[j] - lo[j] if j != n else (hi[n] - eta[n] if sigma > 0 else eta[n] - lo[n])
        eb = eta[basis]
        lob = lo[basis]
        hib = hi[basis]
        ratio = np.full(d, math.inf)
        pos = w > PIVOT_TOL
        neg = w < -PIVOT_TOL
        ratio[pos] = (hib[pos] - eb[pos]) / w[pos]
        ratio[neg] = (lob[neg] - eb[neg]) / w[neg]
        ratio = np.maximum(ratio, 0.0)
        theta_b = float(ratio.min())
        theta = min(own, theta_b)
        if theta_t <= theta + PIVOT_TOL:
            trace.append((big_s, float(target)))
            return big_s, trace, piv, basis
        eta[basis] = eb + theta * w
        eta[j] += sigma * theta
        if own <= theta_b:
            eta[j] = hi[j] if sigma > 0 else lo[j]
        else:
            ties = np.flatnonzero(ratio <= theta_b + PIVOT_TOL)
            leave = int(ties[np.argmin(np.asarray(basis)[ties])])
            out = basis[leave]
            eta[out] = hi[out] if w[leave] > 0 else lo[out]
            basis[leave] = j
            last_left = out
        trace.append((big_s, float(eta[n])))
        if n not in basis:
            # test row sits at a bound and its residual is free to grow
            if eta[n] >= hi[n] - PIVOT_TOL:
                trace.append((big_s, float(hi[n])))
                return big_s, trace, piv + 1, basis
            raise SolverError("test row left the basis below the cutoff")
        # S-move: raise the imputed score with the test row interpolated
        ab = phi[basis]
        try:
            lu = sla.lu_factor(ab, check_finite=False)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise SolverError("singular basis during tracing") from exc
        if np.abs(np.diag(lu[0])).min() <= 1e-13 * max(1.0, np.abs(ab).max()):
            raise SolverError("singular basis during tracing")
        beta = sla.lu_solve(lu, sv[basis], check_finite=False)
        e = np.zeros(d)
        e[basis.index(n)] = 1.0
        dbeta = sla.lu_solve(lu, e, check_finite=False)
        r = sv - phi @ beta
        dr = -(phi @ dbeta)
        dr[n] = 0.0
        nonbasic = np.ones(m, dtype=bool)
        nonbasic[basis] = False
        nonbasic[n] = False
        at_hi = eta >= hi - PIVOT_TOL
        at_lo = eta <= lo + PIVOT_TOL
        step = np.full(m, math.inf)
        c1 = nonbasic & at_hi & (dr < -PIVOT_TOL)
        c2 = nonbasic & at_lo & (dr > PIVOT_TOL) & ~at_hi
        with np.errstate(divide="ignore", invalid="ignore"):
            step[c1] = r[c1] / -dr[c1]
            step[c2] = -r[c2] / dr[c2]
        step = np.maximum(step, 0.0)
        if last_left >= 0 and step[last_left] <= PIVOT_TOL:
            step[last_left] = math.inf
        k = int(np.argmin(step))
        if not math.isfinite(step[k]):
            trace.append((math.inf, float(eta[n])))
            return math.inf, trace, piv + 1, basis
        big_s += float(step[k])
        sv[n] = big_s
        trace.append((big_s, float(eta[n])))
        j = k
        sigma = -1.0 if c1[k] else 1.0
        last_left = -1
    raise _TraceLimit


def _interp_count(phi, s, basis) -> int:
    beta = np.linalg.lstsq(phi[basis], s[basis], rcond=None)[0]
    if not np.all(np.isfinite(beta)):
        return 0
    return int((np.abs(s - phi @ beta) <= eq_tolerance(s)).sum())


def threshold_sensitivity(model: CalibratedModel, x_new, cutoff: float | None = None) -> ThresholdResult:
    """Exact threshold by tracing the dual path in the imputed score.

    Starts from the n-point solution padded with eta_{n+1} = 0, which is
    optimal for S = fit(x_new). Cutoffs at or below zero are handled on the
    negated problem, where the same trace runs upward. Falls back to
    bisection after 10 (n + d) pivots.
    """
    if model.kind != "linear":
        raise ValidationError("sensitivity tracing needs an unregularized linear class")
    lo, hi = model.bounds
    cutoff = hi if cutoff is None else _check_cutoff(model, cutoff)
    if cutoff <= lo:
        return ThresholdResult(-math.inf, "sensitivity", cutoff, eta_trace=())
    aug = AugmentedDual(model, x_new)
    if aug.pinned:
        return _pinned(cutoff, "sensitivity")
    f = model.base_fit
    sign = 1.0
    s = model.calib.s
    eta0, vb_lo, vb_hi, target = f.eta, aug.lo, aug.hi, cutoff
    if cutoff <= 0.0:
        sign = -1.0
        s = -s
        eta0 = -f.eta
        vb_lo, vb_hi = -aug.hi, -aug.lo
        target = -cutoff
    limit = 10 * (model.n + model.d)
    try:
        s_star, trace, pivots, basis = _trace_up(
            aug.phi, s, vb_lo, vb_hi, eta0, f.vertex, target, limit
        )
    except (_TraceLimit, SolverError):
        res = threshold_binary_search(model, x_new, cutoff)
        return dataclasses.replace(res, method="binary-search", fallback=True)
    trace = tuple((sign * a, sign * b) for a, b in trace)
    s_star = sign * s_star
    count = 0
    if math.isfinite(s_star):
        count = _interp_count(aug.phi, aug.scores(s_star), basis)
    return ThresholdResult(s_star, "sensitivity", cutoff, eta_trace=trace, interp_count=count, pivots=pivots)


@dataclass(frozen=True)
class ThresholdPath:
    """The full dual path at one test point, usable for any cutoff.

    ``up`` traces S upward from the n-point fit until eta reaches 1 - alpha
    and ``down`` traces downward until eta reaches -alpha; both are lists of
    (S, eta) breakpoints with eta moving monotonically away from zero.
    """

    up: tuple[tuple[float, float], ...]
    down: tuple[tuple[float, float], ...]
    bounds: tuple[float, float]

    def s_star(self, cutoff: float) -> float:
        lo, hi = self.bounds
        if cutoff <= lo:
            return -math.inf
        if cutoff > 0.0:
            for s_k, e_k in self.up:
                if e_k >= cutoff - ETA_TOL:
                    return s_k
            return math.inf
        # walking down, the threshold is where eta first drops to the cutoff
        for s_k, e_k in self.down:
            if e_k <= cutoff + ETA_TOL:
                return s_k
        return -math.inf


def threshold_path(model: CalibratedModel, x_new) -> ThresholdPath | None:
    """Trace both directions of the dual path; None if tracing gives up."""
    if model.kind != "linear":
        raise ValidationError("sensitivity tracing needs an unregularized linear class")
    aug = AugmentedDual(model, x_new)
    if aug.pinned:
        return ThresholdPath((), (), model.bounds)
    f = model.base_fit
    limit = 10 * (model.n + model.d)
    s = model.calib.s
    try:
        _, up, _, _ = _trace_up(aug.phi, s, aug.lo, aug.hi, f.eta, f.vertex, aug.hi[-1], limit)
        _, dn, _, _ = _trace_up(aug.phi, -s, -aug.hi, -aug.lo, -f.eta, f.vertex, -aug.lo[-1], limit)
    except (_TraceLimit, SolverError):
        return None
    down = tuple((-a, -b) for a, b in dn)
    return ThresholdPath(tuple(up), down, model.bounds)


# --------------------------------------------------------------------------
# Bisection
# --------------------------------------------------------------------------


def threshold_binary_search(
    model: CalibratedModel,
    x_new,
    cutoff: float | None = None,
    eps: float | None = None,
    bracket: tuple[float, float] | None = None,
) -> ThresholdResult:
    """Threshold sup{S : eta(S) < cutoff} by doubling then bisection.

    The bracket starts at [min(min s, -1), max(max s, 1)] unless given and
    is doubled outward until it straddles the crossing. Returns +inf (or
    -inf) when doubling passes the overflow guard.
    """
    lo, hi = model.bounds
    cutoff = hi if cutoff is None else _check_cutoff(model, cutoff)
    s = model.calib.s
    scale = 1.0 + float(np.abs(s).max())
    if eps is None:
        eps = 1e-8 * scale
    if not eps > 0:
        raise ValidationError("eps must be positive")
    if cutoff <= lo:
        return ThresholdResult(-math.inf, "binary-search", cutoff)
    aug = AugmentedDual(model, x_new)
    if aug.pinned:
        return _pinned(cutoff, "binary-search")
    guard = OVERFLOW_GUARD * scale
    if bracket is None:
        a, b = min(float(s.min()), -1.0), max(float(s.max()), 1.0)
    else:
        a, b = map(float, bracket)
        if not a < b:
            raise ValidationError("bracket must satisfy a < b")
    evals = 0
    while aug.below(b, cutoff):
        evals += 1
        b = 2.0 * b if b > 0 else b + (b - a)
        if b > guard:
            return ThresholdResult(math.inf, "binary-search", cutoff, pivots=evals)
    while not aug.below(a, cutoff):
        evals += 1
        a = 2.0 * a if a < 0 else a - (b - a)
        if a < -guard:
            return ThresholdResult(-math.inf, "binary-search", cutoff, pivots=evals)
    while b - a > eps:
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        evals += 1
        if aug.below(mid, cutoff):
            a = mid
        else:
            b = mid
    s_star = 0.5 * (a + b)
    eta_v, fitted = aug.solve(s_star)
    sv = aug.scores(s_star)
    count = int((np.abs(sv - fitted) <= eq_tolerance(sv)).sum())
    return ThresholdResult(s_star, "binary-search", cutoff, interp_count=count, pivots=evals)


# --------------------------------------------------------------------------
# Conservative threshold
# --------------------------------------------------------------------------


def conservative_threshold(model: CalibratedModel, x_new, m_upper: float) -> ThresholdResult:
    """Single augmented fit with the imputed score ``m_upper``.

    Returns the fitted value at ``x_new``; for a linear class this is the
    largest minimizer of the augmented program. The set {S <= S*} contains
    every score at most ``m_upper`` that the exact set contains.
    """
    m_upper = float(m_upper)
    if not math.isfinite(m_upper):
        raise ValidationError("m_upper must be finite")
    aug = AugmentedDual(model, x_new)
    if aug.pinned:
        # the escaping column lets the fit interpolate the test row
        return ThresholdResult(m_upper, "conservative", model.bounds[1])
    sv = aug.scores(m_upper)
    if model.kind == "linear":
        f = solve_linear_qr(PinballProblem(aug.phi, sv, model.alpha))
        fitted = aug.phi @ f.beta
    else:
        _, fitted = aug.solve(m_upper)
    count = int((np.abs(sv - fitted) <= eq_tolerance(sv)).sum())
    return ThresholdResult(float(fitted[-1]), "conservative", model.bounds[1], interp_count=count)


# --------------------------------------------------------------------------
# Prediction sets
# --------------------------------------------------------------------------


METHODS = ("auto", "sensitivity", "binary", "conservative")


def threshold(
    model: CalibratedModel,
    x_new,
    cutoff: float | None = None,
    method: str = "auto",
    eps: float | None = None,
    m_upper: float | None = None,
) -> ThresholdResult:
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "auto":
        method = "sensitivity" if model.kind == "linear" else "binary"
    if method == "sensitivity":
        return threshold_sensitivity(model, x_new, cutoff)
    if method == "binary":
        return threshold_binary_search(model, x_new, cutoff, eps)
    if cutoff is not None and cutoff != model.bounds[1]:
        raise ValidationError("the conservative set has no randomized variant")
    if m_upper is None:
        raise ValidationError("conservative method needs m_upper")
    return conservative_threshold(model, x_new, m_upper)


def predict_set(
    model: CalibratedModel,
    x_new,
    score_fn: ScoreFunction,
    variant: str = "unrandomized",
    rng_seed: int = 0,
    index: int = 0,
    prediction=None,
    method: str = "auto",
    eps: float | None = None,
    m_upper: float | None = None,
    u: float | None = None,
) -> PredictionInterval:
    """One-sided calibrated set {y : S(x_new, y) <= S*} for a test point.

    The randomized variant replaces the cutoff 1 - alpha with a uniform
    draw on [-alpha, 1 - alpha] taken from the stream keyed by
    ``(rng_seed, index)``; ``u`` overrides the draw.
    """
    if variant not in ("unrandomized", "randomized"):
        raise ValidationError(f"unknown variant {variant!r}")
    lo, hi = model.bounds
    draw = None
    cutoff = hi
    if variant == "randomized":
        draw = draw_uniform(rng_seed, index, "one-sided", lo, hi)
        if u is not None:
            draw = dataclasses.replace(draw, u=float(u))
        cutoff = draw.u
    if prediction is None and score_fn.predictor is not None and score_fn.kind != "identity":
        prediction = score_fn.predictor(_row(x_new))
    res = threshold(model, x_new, cutoff, method, eps, m_upper)
    out = realize_set(score_fn, res.s_star, prediction)
    return dataclasses.replace(
        out, method=res.method, u=None if draw is None else (draw.u,)
    )


def two_sided_thresholds(
    model_lo: CalibratedModel,
    model_hi: CalibratedModel,
    x_new,
    cutoffs: tuple[float, float] | None = None,
    method: str = "auto",
    eps: float | None = None,
) -> tuple[ThresholdResult, ThresholdResult]:
    """Lower and upper score thresholds.

    The lower bound is inf{S : eta_lo(S) > c_lo}, computed as the negative
    of an upper threshold of the negated lower model.
    """
    if method == "conservative":
        raise ValidationError("two-sided sets support sensitivity or binary methods")
    if cutoffs is None:
        c_lo, c_hi = model_lo.bounds[0], model_hi.bounds[1]
    else:
        c_lo, c_hi = map(float, cutoffs)
    neg = model_lo.negated()
    r_lo = threshold(neg, x_new, -c_lo, method, eps)
    r_lo = dataclasses.replace(
        r_lo,
        s_star=-r_lo.s_star,
        cutoff=c_lo,
        eta_trace=None if r_lo.eta_trace is None else tuple((-a, -b) for a, b in r_lo.eta_trace),
    )
    r_hi = threshold(model_hi, x_new, c_hi, method, eps)
    return r_lo, r_hi


def predict_two_sided(
    model_lo: CalibratedModel,
    model_hi: CalibratedModel,
    x_new,
    score_fn: ScoreFunction,
    variant: str = "unrandomized",
    rng_seed: int = 0,
    index: int = 0,
    prediction=None,
    method: str = "auto",
    eps: float | None = None,
    u: tuple[float, float] | None = None,
) -> PredictionInterval:
    """Two-sided set {y : S_lo <= S(x_new, y) <= S_hi}.

    ``model_lo`` estimates the alpha/2 quantile (loss level 1 - alpha/2) and
    ``model_hi`` the 1 - alpha/2 quantile (loss level alpha/2). Crossing
    thresholds give an explicitly empty set.
    """
    if variant not in ("unrandomized", "randomized"):
        raise ValidationError(f"unknown variant {variant!r}")
    if abs(model_lo.alpha + model_hi.alpha - 1.0) > 1e-12 or model_hi.alpha >= 0.5:
        raise ValidationError("model_lo and model_hi must be fitted at levels 1 - alpha/2 and alpha/2")
    cutoffs = None
    us = None
    if variant == "randomized":
        d1 = draw_uniform(rng_seed, index, "two-sided-lower", *model_lo.bounds)
        d2 = draw_uniform(rng_seed, index, "two-sided-upper", *model_hi.bounds)
        us = (d1.u, d2.u) if u is None else tuple(map(float, u))
        cutoffs = us
    if prediction is None and score_fn.predictor is not None and score_fn.kind != "identity":
        prediction = score_fn.predictor(_row(x_new))
    r_lo, r_hi = two_sided_thresholds(model_lo, model_hi, x_new, cutoffs, method, eps)
    out = realize_two_sided(score_fn, r_lo.s_star, r_hi.s_star, prediction)
    return dataclasses.replace(out, method=r_hi.method, u=us)
