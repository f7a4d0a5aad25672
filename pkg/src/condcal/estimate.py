"""Coverage estimates for regularized classes and interpolation diagnostics.

For an RKHS class the coverage under a tilt ``f = f_K + Phi^T b`` is
approximately

    1 - alpha - 2 lam <g_K, f_K>_K / mean_i |f(X_i)|

where ``g_K`` is the kernel part of the n-point fit. For a Lipschitz class
the tilt's Lipschitz constant bounds the deviation from 1 - alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibrate import CalibratedModel, reduce_columns
from .core import BasisSpec, CalibrationSet, KernelSpec, LipschitzSpec, ValidationError, _as_matrix
from .qr_solver import eq_tolerance, pinball_loss, solve_kernel_qr
from .qr_solver.lipschitz import lipschitz_constant

TILT_KINDS = ("basis-column", "kernel-point", "gaussian-tilt", "custom-table")


@dataclass(frozen=True)
class TiltSpec:
    """A covariate shift ``f``.

    ``basis-column`` is column ``column`` of the model's basis, scaled by
    ``scale``. ``kernel-point`` is ``scale * K(point, .)`` under the model's
    kernel. ``gaussian-tilt`` is ``scale * exp(-||x - mu||^2 / (2 sigma^2))``.
    ``custom-table`` wraps ``func`` (covariate matrix to values); its RKHS
    decomposition, if any, is given by ``coef`` and ``points`` with
    ``f_K = sum_j coef_j K(points_j, .)``.
    """

    kind: str
    column: int | None = None
    point: tuple | None = None
    mu: tuple | None = None
    sigma: float | None = None
    func: object = None
    coef: tuple | None = None
    points: tuple | None = None
    scale: float = 1.0
    nonneg: bool = True
    name: str | None = None

    def __post_init__(self):
        if self.kind not in TILT_KINDS:
            raise ValidationError(f"unknown tilt kind {self.kind!r}")
        need = {
            "basis-column": ("column",),
            "kernel-point": ("point",),
            "gaussian-tilt": ("mu", "sigma"),
            "custom-table": ("func",),
        }[self.kind]
        for attr in need:
            if getattr(self, attr) is None:
                raise ValidationError(f"{self.kind} tilt needs {attr!r}")
        if self.kind == "gaussian-tilt" and not self.sigma > 0:
            raise ValidationError("gaussian tilt needs sigma > 0")
        if (self.coef is None) != (self.points is None):
            raise ValidationError("tilt decomposition needs both coef and points")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "basis-column":
            return f"column-{self.column}"
        if self.kind == "kernel-point":
            return f"kernel-{list(self.point)}"
        if self.kind == "gaussian-tilt":
            return f"gaussian-{list(self.mu)}-{self.sigma}"
        return "custom"

    def evaluate(self, x, basis: BasisSpec | None = None, kernel: KernelSpec | None = None) -> np.ndarray:
        x = _as_matrix(x)
        if self.kind == "basis-column":
            if basis is None:
                raise ValidationError("basis-column tilt needs the model basis")
            if not 0 <= self.column < basis.d:
                raise ValidationError(f"basis has no column {self.column}")
            v = basis.columns[self.column].evaluate(x)
        elif self.kind == "kernel-point":
            if not isinstance(kernel, KernelSpec):
                raise ValidationError("kernel-point tilt needs a kernel model")
            v = kernel.gram(x, np.asarray(self.point, dtype=float)[None, :])[:, 0]
        elif self.kind == "gaussian-tilt":
            mu = np.asarray(self.mu, dtype=float)
            v = np.exp(-((x - mu[None, :]) ** 2).sum(axis=1) / (2.0 * self.sigma**2))
        else:
            v = np.asarray(self.func(x), dtype=float).ravel()
        v = self.scale * np.asarray(v, dtype=float)
        if v.shape != (x.shape[0],) or not np.all(np.isfinite(v)):
            raise ValidationError("tilt must give one finite value per covariate row")
        if self.nonneg and np.any(v < 0):
            raise ValidationError("tilt flagged nonnegative took a negative value")
        return v

    def to_dict(self) -> dict:
        if self.kind == "custom-table":
            raise ValidationError("custom-table tilts cannot be serialized")
        d = {"kind": self.kind, "scale": self.scale, "nonneg": self.nonneg}
        for key in ("column", "point", "mu", "sigma", "name"):
            val = getattr(self, key)
            if val is not None:
                d[key] = list(val) if isinstance(val, tuple) else val
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TiltSpec":
        try:
            tup = lambda v: None if v is None else tuple(float(a) for a in np.atleast_1d(v))
            return cls(
                kind=d["kind"],
                column=None if d.get("column") is None else int(d["column"]),
                point=tup(d.get("point")),
                mu=tup(d.get("mu")),
                sigma=None if d.get("sigma") is None else float(d["sigma"]),
                scale=float(d.get("scale", 1.0)),
                nonneg=bool(d.get("nonneg", True)),
                name=d.get("name"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed tilt document: {exc}") from exc


@dataclass(frozen=True)
class CoverageEstimate:
    """Estimated coverage under a tilt.

    ``value`` is the raw estimate ``base + penalty_term``; ``display`` clamps
    it to [0, 1].
    """

    value: float
    base: float
    penalty_term: float
    inner_product: float = 0.0
    mean_abs_f: float = 1.0
    effective_n: float | None = None
    stderr_hint: float | None = None

    @property
    def display(self) -> float:
        return float(min(1.0, max(0.0, self.value)))

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "display": self.display,
            "base": self.base,
            "penalty_term": self.penalty_term,
            "inner_product": self.inner_product,
            "mean_abs_f": self.mean_abs_f,
            "effective_n": self.effective_n,
        }


@dataclass(frozen=True)
class CoverageBounds:
    """Raw Lipschitz coverage bounds; iterating yields the [0, 1]-clamped pair."""

    raw_lower: float
    raw_upper: float

    @property
    def lower(self) -> float:
        return float(min(1.0, max(0.0, self.raw_lower)))

    @property
    def upper(self) -> float:
        return float(min(1.0, max(0.0, self.raw_upper)))

    def __iter__(self):
        return iter((self.lower, self.upper))


def _decompose(tilt: TiltSpec, kernel: KernelSpec) -> tuple[np.ndarray, np.ndarray] | None:
    """RKHS part of the tilt as (coef, points), or None when f_K = 0."""
    if tilt.kind == "basis-column":
        return None
    if tilt.kind == "kernel-point":
        return np.array([tilt.scale]), np.asarray(tilt.point, dtype=float)[None, :]
    if tilt.coef is not None:
        coef = tilt.scale * np.asarray(tilt.coef, dtype=float).ravel()
        pts = _as_matrix(np.asarray(tilt.points, dtype=float))
        if pts.shape[0] != coef.size:
            raise ValidationError("tilt decomposition has mismatched coef and points")
        return coef, pts
    if tilt.kind == "gaussian-tilt" and kernel.family == "gaussian":
        # exp(-||x - mu||^2 / (2 sigma^2)) is K(mu, .) when gamma = 1 / (2 sigma^2)
        if np.isclose(kernel.gamma * 2.0 * tilt.sigma**2, 1.0, rtol=1e-9):
            return np.array([tilt.scale]), np.asarray(tilt.mu, dtype=float)[None, :]
        raise ValidationError(
            f"gaussian tilt with sigma={tilt.sigma} is not a kernel section of the "
            f"model's kernel (gamma={kernel.gamma}; need sigma={np.sqrt(0.5 / kernel.gamma):.6g}); "
            "supply coef and points explicitly"
        )
    raise ValidationError(
        f"{tilt.kind} tilt has no RKHS decomposition under the model's kernel; supply coef and points"
    )


def n_sample_fit(model: CalibratedModel):
    """Kernel fit on the n calibration points with weight 1/n per row."""
    if model.kind != "kernel":
        raise ValidationError("the coverage estimate needs a kernel model")
    f = model.base_fit
    return solve_kernel_qr(
        model.gram, model.phi, model.calib.s, model.alpha, model.kernel.lam,
        n_weight=model.n, warm_state=f.state, check=False,
    )


def rkhs_coverage_estimate(model: CalibratedModel, tilt: TiltSpec, fit=None) -> CoverageEstimate:
    """Plug-in estimate of the coverage under ``tilt`` for a kernel model."""
    if model.kind != "kernel":
        raise ValidationError("the coverage estimate needs a kernel model")
    kernel = model.kernel
    f_vals = tilt.evaluate(model.calib.x, model.basis, kernel)
    mean_f = float(np.mean(np.abs(f_vals)))
    if mean_f <= 0:
        raise ValidationError("tilt vanishes on the calibration set")
    base = 1.0 - model.alpha
    ess = float(f_vals.sum() ** 2 / (f_vals**2).sum())
    parts = _decompose(tilt, kernel)
    if parts is None:
        return CoverageEstimate(base, base, 0.0, 0.0, mean_f, ess)
    coef, pts = parts
    if fit is None:
        fit = n_sample_fit(model)
    inner = float(fit.gamma @ kernel.gram(model.calib.x, pts) @ coef)
    pen = -2.0 * kernel.lam * inner / mean_f
    return CoverageEstimate(base + pen, base, pen, inner, mean_f, ess)


def lipschitz_coverage_bounds(
    model: CalibratedModel,
    tilt: TiltSpec | None = None,
    lip_f: float | None = None,
    mean_f: float | None = None,
) -> CoverageBounds:
    """Bounds 1 - alpha -/+ lam Lip(f) / E f(X).

    Missing ``lip_f`` or ``mean_f`` are computed from the tilt on the
    calibration covariates.
    """
    if model.kind != "lipschitz":
        raise ValidationError("Lipschitz bounds need a Lipschitz model")
    if lip_f is None or mean_f is None:
        if tilt is None:
            raise ValidationError("need a tilt or both lip_f and mean_f")
        vals = tilt.evaluate(model.calib.x, model.basis)
        if lip_f is None:
            lip_f = lipschitz_constant(model.calib.x, vals)
        if mean_f is None:
            mean_f = float(vals.mean())
    if lip_f < 0:
        raise ValidationError("lip_f must be nonnegative")
    if not mean_f > 0:
        raise ValidationError("mean_f must be positive")
    dev = model.kernel.lam * lip_f / mean_f
    base = 1.0 - model.alpha
    return CoverageBounds(base - dev, base + dev)


def _fitted(model: CalibratedModel) -> np.ndarray:
    f = model.base_fit
    if model.kind == "linear":
        return model.phi @ f.beta
    return f.fitted


def interp_diagnostic(model: CalibratedModel, tilt: TiltSpec | None = None) -> float:
    """Tilt-weighted fraction of calibration rows interpolated by the n-point fit.

    With no tilt, f = 1.
    """
    s = model.calib.s
    hit = np.abs(s - _fitted(model)) <= eq_tolerance(s)
    if tilt is None:
        vals = np.ones(s.size)
    else:
        kernel = model.kernel if isinstance(model.kernel, KernelSpec) else None
        vals = tilt.evaluate(model.calib.x, model.basis, kernel)
    return float(np.mean(np.abs(vals) * hit))


def fold_indices(n: int, folds: int) -> list[np.ndarray]:
    """Deterministic interleaved folds: row i goes to fold i mod ``folds``."""
    return [np.arange(k, n, folds) for k in range(folds)]


def cross_validate_lambda(
    calib: CalibrationSet,
    basis: BasisSpec,
    kernel_family: KernelSpec,
    lambda_grid,
    folds: int,
    alpha: float,
    return_losses: bool = False,
):
    """Grid value of lambda with the smallest out-of-fold mean pinball loss.

    Ties (within 1e-12 relative) go to the smallest lambda.
    """
    grid = sorted(float(v) for v in np.atleast_1d(lambda_grid))
    if not grid:
        raise ValidationError("lambda grid is empty")
    if any(not v > 0 for v in grid):
        raise ValidationError("lambda values must be positive")
    if isinstance(kernel_family, LipschitzSpec):
        raise ValidationError("cross-validation supports kernel classes")
    n = calib.n
    folds = int(folds)
    if folds < 2:
        raise ValidationError("need at least 2 folds")
    if folds > n:
        raise ValidationError(f"{folds} folds for {n} points leaves empty folds")
    parts = fold_indices(n, folds)
    if n - max(p.size for p in parts) < 2:
        raise ValidationError("training folds need at least 2 points")
    phi = basis.evaluate(calib.x)
    gram = kernel_family.gram(calib.x)
    losses = np.zeros(len(grid))
    for test in parts:
        train = np.setdiff1d(np.arange(n), test)
        k_tr = gram[np.ix_(train, train)]
        k_te = gram[np.ix_(test, train)]
        keep, _ = reduce_columns(phi[train])
        cols = slice(None) if keep is None else list(keep)
        phi_tr, phi_te = phi[train][:, cols], phi[test][:, cols]
        warm = None
        for g, lam in enumerate(grid):
            f = solve_kernel_qr(k_tr, phi_tr, calib.s[train], alpha, lam, warm_state=warm, check=False)
            warm = f.state
            pred = k_te @ f.gamma + phi_te @ f.beta
            losses[g] += float(np.sum(pinball_loss(pred, calib.s[test], alpha)))
    losses /= n
    best = losses.min()
    pick = next(v for v, l in zip(grid, losses) if l <= best + 1e-12 * max(1.0, abs(best)))
    if return_losses:
        return pick, dict(zip(grid, losses.tolist()))
    return pick
