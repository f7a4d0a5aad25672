"""Simulation designs and empirical coverage evaluation.

Each trial draws a calibration set and a test set, calibrates every
requested method, and records per-test-point coverage and set length.
Reports pool trials; standard errors treat trials as clusters so that the
shared calibration set of a trial is accounted for.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibrate import (
    AugmentedDual,
    CalibratedModel,
    draw_uniform,
    fit_model,
    fit_two_sided,
    reduce_columns,
    threshold_binary_search,
    threshold_path,
)
from .core import (
    BasisSpec,
    CalibrationSet,
    GroupPredicate,
    KernelSpec,
    LipschitzSpec,
    ValidationError,
    interval_groups,
    regularizer_from_dict,
    split_conformal_threshold,
)
from .estimate import TiltSpec, n_sample_fit, rkhs_coverage_estimate
from .qr_solver import PinballProblem, solve_linear_qr

DESIGNS = ("gaussian-linear", "independent-null", "romano-1d")
SCORES = ("identity", "absolute-residual", "signed-residual")
METHODS = ("randomized", "unrandomized", "vanilla-qr", "split-conformal")
DEFAULT_SCORE = {"gaussian-linear": "identity", "independent-null": "identity", "romano-1d": "absolute-residual"}

# Heteroscedastic 1-d stand-in design on [0, 5]:
#   Y = Poisson(sin(X)^2 + 0.1) + 0.03 X eps1 + 25 1{U < 0.01} eps2
# with conditional mean sin(X)^2 + 0.1.
ROMANO_1D = "Y = Pois(sin(X)^2 + 0.1) + 0.03*X*eps1 + 25*1{U<0.01}*eps2, X ~ Unif(0, 5)"


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimSpec:
    """A synthetic design.

    ``p`` is the covariate dimension (ignored by ``romano-1d``). Scores use
    the design's true conditional mean as the point prediction.
    """

    design: str
    n: int
    p: int = 1
    test_n: int = 1000
    seed: int = 0
    score: str | None = None

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValidationError(f"unknown design {self.design!r}; expected one of {DESIGNS}")
        if self.n < 1 or self.test_n < 0 or self.p < 1:
            raise ValidationError("n and p must be positive and test_n nonnegative")
        if self.score is not None and self.score not in SCORES:
            raise ValidationError(f"unknown score {self.score!r}; expected one of {SCORES}")
        if self.score is None:
            object.__setattr__(self, "score", DEFAULT_SCORE[self.design])

    @property
    def score_kind(self) -> str:
        return self.score or DEFAULT_SCORE[self.design]

    @property
    def dim(self) -> int:
        return 1 if self.design == "romano-1d" else self.p

    def to_dict(self) -> dict:
        d = {"design": self.design, "n": self.n, "p": self.p, "test_n": self.test_n, "seed": self.seed}
        d["score"] = self.score_kind
        if self.design == "romano-1d":
            d["formula"] = ROMANO_1D
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        try:
            return cls(
                design=d["design"],
                n=int(d["n"]),
                p=int(d.get("p", d.get("d", 1))),
                test_n=int(d.get("test_n", 1000)),
                seed=int(d.get("seed", 0)),
                score=d.get("score"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed simulation spec: {exc}") from exc


@dataclass(frozen=True)
class SimData:
    calib: CalibrationSet
    x_test: np.ndarray
    y_test: np.ndarray
    s_test: np.ndarray
    mu_test: np.ndarray
    mu_calib: np.ndarray | None = None


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial)]))


def _draw(design: str, rng, size: int, p: int, w):
    if design == "gaussian-linear":
        x = rng.standard_normal((size, p))
        mu = x @ w
        y = mu + rng.standard_normal(size)
    elif design == "independent-null":
        x = rng.standard_normal((size, p))
        mu = np.zeros(size)
        y = rng.standard_normal(size)
    else:
        x = rng.uniform(0.0, 5.0, (size, 1))
        mu = np.sin(x[:, 0]) ** 2 + 0.1
        y = (
            rng.poisson(mu).astype(float)
            + 0.03 * x[:, 0] * rng.standard_normal(size)
            + 25.0 * (rng.uniform(size=size) < 0.01) * rng.standard_normal(size)
        )
    return x, y, mu


def _score(kind: str, y, mu):
    if kind == "identity":
        return y.copy()
    if kind == "absolute-residual":
        return np.abs(y - mu)
    return y - mu


def simulate(spec: SimSpec, trial: int = 0) -> SimData:
    """Calibration and test draws for one trial; deterministic in (seed, trial)."""
    rng = trial_rng(spec.seed, trial)
    p = spec.dim
    w = None
    if spec.design == "gaussian-linear":
        w = rng.standard_normal(p)
        w /= np.linalg.norm(w)
    x, y, mu = _draw(spec.design, rng, spec.n, p, w)
    xt, yt, mut = _draw(spec.design, rng, spec.test_n, p, w)
    kind = spec.score_kind
    calib = CalibrationSet(x, _score(kind, y, mu), y)
    return SimData(calib, xt, yt, _score(kind, yt, mut), mut, mu)


# --------------------------------------------------------------------------
# Coverage statistics
# --------------------------------------------------------------------------


def ratio_stderr(weights, covered, clusters=None) -> tuple[float, float]:
    """Ratio estimate sum(f c) / sum(f) with a delta-method standard error.

    ``clusters`` labels dependent groups of points (e.g. trials sharing a
    calibration set); with fewer than two clusters points are treated as
    independent.
    """
    f = np.asarray(weights, dtype=float).ravel()
    c = np.asarray(covered, dtype=float).ravel()
    if f.shape != c.shape:
        raise ValidationError("weights and coverage indicators differ in length")
    total = f.sum()
    if not total > 0:
        raise ValidationError("tilt has zero total weight on the test set")
    r = float((f * c).sum() / total)
    resid = f * (c - r)
    if clusters is not None:
        labels = np.asarray(clusters).ravel()
        uniq, inv = np.unique(labels, return_inverse=True)
        if uniq.size >= 2:
            sums = np.bincount(inv, weights=resid)
            g = uniq.size
            return r, float(math.sqrt((sums**2).sum() * g / (g - 1)) / total)
    return r, float(math.sqrt((resid**2).sum()) / total)


def coverage_under_tilt(x_test, covered, tilt: TiltSpec | np.ndarray | None = None, basis=None, kernel=None, clusters=None):
    """Tilt-weighted empirical coverage and its standard error.

    ``tilt`` may be a :class:`TiltSpec`, an array of precomputed weights,
    or None for plain coverage.
    """
    covered = np.asarray(covered, dtype=float).ravel()
    if tilt is None:
        f = np.ones(covered.size)
    elif isinstance(tilt, TiltSpec):
        f = tilt.evaluate(x_test, basis, kernel)
    else:
        f = np.asarray(tilt, dtype=float).ravel()
    if np.any(f < 0):
        raise ValidationError("tilt must be nonnegative")
    return ratio_stderr(f, covered, clusters)


def baseline_vanilla_qr(calib: CalibrationSet, basis: BasisSpec, alpha: float, x_test=None) -> np.ndarray:
    """Quantile regression fitted on the calibration data alone, evaluated at ``x_test``.

    ``alpha`` is the pinball level, so the fit estimates the 1 - alpha
    quantile. Defaults to evaluating at the calibration covariates.
    """
    phi = basis.evaluate(calib.x)
    keep, _ = reduce_columns(phi)
    cols = slice(None) if keep is None else list(keep)
    fit = solve_linear_qr(PinballProblem(phi[:, cols], calib.s, alpha))
    x_test = calib.x if x_test is None else x_test
    return basis.evaluate(x_test)[:, cols] @ fit.beta


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    """Everything one evaluation run needs.

    ``methods`` is a subset of ``randomized``, ``unrandomized``,
    ``vanilla-qr`` and ``split-conformal``. ``estimate`` adds plug-in
    coverage estimates per tilt (kernel classes).
    """

    sim: SimSpec
    basis: BasisSpec
    alpha: float = 0.1
    kernel: KernelSpec | LipschitzSpec | None = None
    methods: tuple[str, ...] = ("randomized", "unrandomized")
    trials: int = 1
    two_sided: bool = False
    tilts: tuple[TiltSpec, ...] = ()
    groups: tuple[GroupPredicate, ...] = ()
    seed: int = 0
    eps: float | None = None
    estimate: bool = False
    coverage_only: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.trials < 1:
            raise ValidationError("need at least one trial")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValidationError(f"unknown methods {bad}; expected a subset of {METHODS}")
        if not self.methods:
            raise ValidationError("no methods selected")
        if self.two_sided and self.sim.score_kind == "absolute-residual":
            raise ValidationError("two-sided evaluation needs an identity or signed-residual score")
        if self.kernel is not None and "vanilla-qr" in self.methods:
            raise ValidationError("the vanilla-qr baseline supports linear classes only")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "tilts", tuple(self.tilts))
        object.__setattr__(self, "groups", tuple(self.groups))

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "basis": self.basis.to_dict(),
            "alpha": self.alpha,
            "kernel": None if self.kernel is None else self.kernel.to_dict(),
            "methods": list(self.methods),
            "trials": self.trials,
            "two_sided": self.two_sided,
            "tilts": [t.to_dict() for t in self.tilts],
            "groups": [g.to_dict() for g in self.groups],
            "seed": self.seed,
            "eps": self.eps,
            "estimate": self.estimate,
            "coverage_only": self.coverage_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        try:
            return cls(
                sim=SimSpec.from_dict(d["sim"]),
                basis=BasisSpec.from_dict(d["basis"]),
                alpha=float(d.get("alpha", 0.1)),
                kernel=None if d.get("kernel") is None else regularizer_from_dict(d["kernel"]),
                methods=tuple(d.get("methods", ("randomized", "unrandomized"))),
                trials=int(d.get("trials", 1)),
                two_sided=bool(d.get("two_sided", False)),
                tilts=tuple(TiltSpec.from_dict(t) for t in d.get("tilts", [])),
                groups=_groups(d.get("groups", [])),
                seed=int(d.get("seed", 0)),
                eps=None if d.get("eps") is None else float(d["eps"]),
                estimate=bool(d.get("estimate", False)),
                coverage_only=bool(d.get("coverage_only", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed evaluation config: {exc}") from exc


def _groups(doc) -> tuple[GroupPredicate, ...]:
    """A list of predicates, or {"endpoints": [...], "feature": j} for all subintervals."""
    if isinstance(doc, dict):
        return tuple(interval_groups(doc["endpoints"], int(doc.get("feature", 0))))
    return tuple(GroupPredicate.from_dict(g) for g in doc)


@dataclass
class TrialResult:
    trial: int
    x_test: np.ndarray
    s_test: np.ndarray
    lower: dict = field(default_factory=dict)
    upper: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)
    fallbacks: int = 0
    member: dict = field(default_factory=dict)

    def covered(self, method: str) -> np.ndarray:
        if method in self.member:
            return self.member[method]
        return (self.s_test >= self.lower[method]) & (self.s_test <= self.upper[method])


def trial_seed(seed: int, trial: int) -> int:
    """64-bit key for the randomization streams of one trial."""
    return int(np.random.SeedSequence([int(seed), int(trial), 1]).generate_state(1, np.uint64)[0])


class _PathCache:
    """Threshold paths of a linear model, shared by test points with equal basis rows."""

    def __init__(self, model: CalibratedModel):
        self.model = model
        self.paths = {}
        self.fallbacks = 0

    def s_star(self, x_row, cutoff: float, eps=None) -> float:
        key = self.model.basis.evaluate(x_row[None, :])[0].tobytes()
        if key not in self.paths:
            self.paths[key] = threshold_path(self.model, x_row)
        path = self.paths[key]
        if path is None:
            self.fallbacks += 1
            return threshold_binary_search(self.model, x_row, cutoff, eps).s_star
        return path.s_star(cutoff)


def _conditional(cfg: EvalConfig, data: SimData, randomized: bool, key: int):
    """Per-point (lower, upper) score bounds of the conditional method.

    Returns (lower, upper, fallbacks, covered); ``covered`` is set only in
    coverage-only mode, where the bounds are NaN.
    """
    x = data.x_test
    m = x.shape[0]
    lo = np.full(m, -np.inf)
    hi = np.empty(m)
    fallbacks = 0
    if cfg.two_sided:
        model_lo, model_hi = fit_two_sided(data.calib, cfg.basis, cfg.alpha, cfg.kernel)
        models = (model_lo.negated(), model_hi)
    else:
        models = (fit_model(data.calib, cfg.basis, cfg.alpha, cfg.kernel),)
    if cfg.coverage_only:
        return _membership(cfg, data, models, randomized, key)
    linear = cfg.kernel is None
    caches = [_PathCache(mm) for mm in models] if linear else None
    for i in range(m):
        cuts = _cutoffs(cfg, models, randomized, key, i)
        vals = []
        for j, (mm, c) in enumerate(zip(models, cuts)):
            if linear:
                vals.append(caches[j].s_star(x[i], c, cfg.eps))
            else:
                vals.append(threshold_binary_search(mm, x[i], c, cfg.eps).s_star)
        if cfg.two_sided:
            lo[i], hi[i] = -vals[0], vals[1]
        else:
            hi[i] = vals[0]
    if linear:
        fallbacks = sum(c.fallbacks for c in caches)
    return lo, hi, fallbacks, None


def _cutoffs(cfg: EvalConfig, models, randomized: bool, key: int, i: int) -> tuple:
    if cfg.two_sided:
        lo_b, hi_b = (-models[0].bounds[1], -models[0].bounds[0]), models[1].bounds
        if randomized:
            c_lo = draw_uniform(key, i, "two-sided-lower", *lo_b).u
            c_hi = draw_uniform(key, i, "two-sided-upper", *hi_b).u
        else:
            c_lo, c_hi = lo_b[0], hi_b[1]
        return (-c_lo, c_hi)
    b = models[0].bounds
    return (draw_uniform(key, i, "one-sided", *b).u if randomized else b[1],)


def _membership(cfg: EvalConfig, data: SimData, models, randomized: bool, key: int):
    """Coverage indicators from eta_{n+1}(S_test) < cutoff, one solve per point and side."""
    x = data.x_test
    m = x.shape[0]
    cov = np.empty(m, dtype=bool)
    for i in range(m):
        cuts = _cutoffs(cfg, models, randomized, key, i)
        s_i = data.s_test[i]
        if cfg.two_sided:
            inside = AugmentedDual(models[0], x[i]).below(-s_i, cuts[0])
            cov[i] = inside and AugmentedDual(models[1], x[i]).below(s_i, cuts[1])
        else:
            cov[i] = AugmentedDual(models[0], x[i]).below(s_i, cuts[0])
    nan = np.full(m, np.nan)
    return nan, nan.copy(), 0, cov


def run_trial(cfg: EvalConfig, trial: int) -> TrialResult:
    data = simulate(cfg.sim, trial)
    res = TrialResult(trial, data.x_test, data.s_test)
    key = trial_seed(cfg.seed, trial)
    m = data.x_test.shape[0]
    alpha = cfg.alpha
    for method in cfg.methods:
        if method in ("randomized", "unrandomized"):
            lo, hi, fb, cov = _conditional(cfg, data, method == "randomized", key)
            res.fallbacks += fb
            if cov is not None:
                res.member[method] = cov
        elif method == "vanilla-qr":
            if cfg.two_sided:
                lo = baseline_vanilla_qr(data.calib, cfg.basis, 1 - alpha / 2, data.x_test)
                hi = baseline_vanilla_qr(data.calib, cfg.basis, alpha / 2, data.x_test)
            else:
                lo = np.full(m, -np.inf)
                hi = baseline_vanilla_qr(data.calib, cfg.basis, alpha, data.x_test)
        else:
            s = data.calib.s
            if cfg.two_sided:
                lo = np.full(m, -split_conformal_threshold(-s, alpha / 2))
                hi = np.full(m, split_conformal_threshold(s, alpha / 2))
            else:
                lo = np.full(m, -np.inf)
                hi = np.full(m, split_conformal_threshold(s, alpha))
        res.lower[method] = lo
        res.upper[method] = hi
    if cfg.estimate and cfg.tilts:
        model = fit_model(data.calib, cfg.basis, alpha, cfg.kernel)
        nfit = n_sample_fit(model)
        for t in cfg.tilts:
            res.estimates[t.label] = rkhs_coverage_estimate(model, t, nfit).value
    return res


def _workers(requested: int | None, trials: int) -> int:
    cap = os.environ.get("CONDCAL_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap is not None:
        try:
            n = min(n, int(cap))
        except ValueError as exc:
            raise ValidationError("CONDCAL_THREADS must be an integer") from exc
    return max(1, min(n, trials))


def run_trials(cfg: EvalConfig, workers: int | None = None) -> list[TrialResult]:
    """Run all trials; results are ordered by trial and independent of ``workers``."""
    n = _workers(workers, cfg.trials)
    if n == 1:
        return [run_trial(cfg, t) for t in range(cfg.trials)]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(run_trial, [cfg] * cfg.trials, range(cfg.trials)))


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageReport:
    """Pooled coverage summary of one method."""

    method: str
    marginal: float
    marginal_stderr: float
    per_tilt: dict
    per_group: dict
    mean_length: float
    worst_deviation: float
    trial_marginal: tuple = ()
    estimates: dict = field(default_factory=dict)
    test_n: int = 0

    def to_dict(self) -> dict:
        fin = lambda v: v if math.isfinite(v) else None
        return {
            "method": self.method,
            "marginal": self.marginal,
            "marginal_stderr": self.marginal_stderr,
            "per_tilt": {k: {"coverage": v[0], "stderr": v[1]} for k, v in self.per_tilt.items()},
            "per_group": {k: {"coverage": v[0], "count": v[1]} for k, v in self.per_group.items()},
            "mean_length": fin(self.mean_length),
            "worst_deviation": self.worst_deviation,
            "trial_marginal": list(self.trial_marginal),
            "estimates": self.estimates,
            "test_n": self.test_n,
        }


def _lengths(cfg: EvalConfig, lo, hi) -> np.ndarray:
    if cfg.two_sided:
        return np.maximum(hi - lo, 0.0)
    if cfg.sim.score_kind == "absolute-residual":
        return 2.0 * np.maximum(hi, 0.0)
    return np.where(np.isneginf(hi), 0.0, np.inf)


def group_label(g: GroupPredicate) -> str:
    lb = "[" if g.lower_closed else "("
    ub = "]" if g.upper_closed else ")"
    return f"x{g.feature + 1}in{lb}{g.lower:g},{g.upper:g}{ub}"


def report(cfg: EvalConfig, results: list[TrialResult], method: str) -> CoverageReport:
    """Aggregate trials into a :class:`CoverageReport` for ``method``."""
    if not results:
        raise ValidationError("no trial results to report")
    x = np.vstack([r.x_test for r in results])
    cov = np.concatenate([r.covered(method) for r in results]).astype(float)
    cl = np.concatenate([np.full(r.s_test.size, r.trial) for r in results])
    if cov.size == 0:
        raise ValidationError("no test points")
    marg, marg_se = ratio_stderr(np.ones(cov.size), cov, cl)
    kernel = cfg.kernel if isinstance(cfg.kernel, KernelSpec) else None
    per_tilt = {}
    for t in cfg.tilts:
        per_tilt[t.label] = coverage_under_tilt(x, cov, t, cfg.basis, kernel, cl)
    per_group = {}
    for g in cfg.groups:
        mask = g(x).astype(bool)
        per_group[group_label(g)] = (float(cov[mask].mean()) if mask.any() else float("nan"), int(mask.sum()))
    lengths = np.concatenate([_lengths(cfg, r.lower[method], r.upper[method]) for r in results])
    z = cfg.basis.evaluate(x)
    miss = 1.0 - cov
    denom = np.abs(z).mean(axis=0)
    dev = np.abs((z * (miss - cfg.alpha)[:, None]).mean(axis=0)) / np.where(denom > 0, denom, 1.0)
    trial_marg = tuple(float(r.covered(method).mean()) for r in results if r.s_test.size)
    est = {}
    if results[0].estimates:
        for k in results[0].estimates:
            est[k] = float(np.mean([r.estimates[k] for r in results]))
    return CoverageReport(
        method=method,
        marginal=marg,
        marginal_stderr=marg_se,
        per_tilt=per_tilt,
        per_group=per_group,
        mean_length=float(lengths.mean()),
        worst_deviation=float(dev.max()),
        trial_marginal=trial_marg,
        estimates=est,
        test_n=int(cov.size),
    )


def evaluate(cfg: EvalConfig, workers: int | None = None) -> tuple[dict[str, CoverageReport], list[TrialResult]]:
    results = run_trials(cfg, workers)
    return {m: report(cfg, results, m) for m in cfg.methods}, results


def long_rows(cfg: EvalConfig, results: list[TrialResult]) -> list[dict]:
    """Per-trial rows: method, trial, tilt_or_group, coverage, length."""
    rows = []
    kernel = cfg.kernel if isinstance(cfg.kernel, KernelSpec) else None
    for r in results:
        for method in cfg.methods:
            cov = r.covered(method).astype(float)
            length = _lengths(cfg, r.lower[method], r.upper[method])
            mean_len = float(length.mean()) if length.size else float("nan")
            rows.append({"method": method, "trial": r.trial, "tilt_or_group": "marginal",
                         "coverage": float(cov.mean()) if cov.size else float("nan"), "length": mean_len})
            for t in cfg.tilts:
                f = t.evaluate(r.x_test, cfg.basis, kernel)
                c = float((f * cov).sum() / f.sum()) if f.sum() > 0 else float("nan")
                ln = float((f * length).sum() / f.sum()) if f.sum() > 0 else float("nan")
                rows.append({"method": method, "trial": r.trial, "tilt_or_group": t.label, "coverage": c, "length": ln})
            for g in cfg.groups:
                mask = g(r.x_test).astype(bool)
                c = float(cov[mask].mean()) if mask.any() else float("nan")
                ln = float(length[mask].mean()) if mask.any() else float("nan")
                rows.append({"method": method, "trial": r.trial, "tilt_or_group": group_label(g), "coverage": c, "length": ln})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["method", "trial", "tilt_or_group", "coverage", "length"], lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def reports_to_json(cfg: EvalConfig, reports: dict[str, CoverageReport], digest: str | None = None) -> str:
    doc = {"config": cfg.to_dict(), "reports": {k: v.to_dict() for k, v in reports.items()}}
    if digest is not None:
        doc["config_digest"] = digest
    return json.dumps(_finite(doc), indent=2, sort_keys=True, allow_nan=False, default=_json_default)


def _finite(o):
    """Replace non-finite floats by None so the document is strict JSON."""
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    if isinstance(o, (float, np.floating)) and not math.isfinite(o):
        return None
    return o


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


# --------------------------------------------------------------------------
# Assertions
# --------------------------------------------------------------------------

ASSERTIONS = (
    "randomized-exact",
    "unrandomized-bracket",
    "group-bracket",
    "baseline-undercover",
    "estimate-accuracy",
)


def _need(reports, method, name):
    if method not in reports:
        raise ValidationError(f"assertion {name!r} needs method {method!r} in the run")
    return reports[method]


def check_assertions(cfg: EvalConfig, reports: dict, results: list[TrialResult], names) -> list[str]:
    """Check the selected coverage guarantees; returns a message per violation.

    Monte Carlo slack is three cluster-robust standard errors, except for
    ``randomized-exact`` which uses a fixed band of 0.01.
    """
    target = 1.0 - cfg.alpha
    n = cfg.sim.n
    d = cfg.basis.d
    out = []
    for name in names:
        if name not in ASSERTIONS:
            raise ValidationError(f"unknown assertion {name!r}; expected one of {ASSERTIONS}")
        if name == "randomized-exact":
            r = _need(reports, "randomized", name)
            if abs(r.marginal - target) > 0.01:
                out.append(f"{name}: randomized coverage {r.marginal:.4f} outside {target:.3f} +/- 0.010")
        elif name == "unrandomized-bracket":
            r = _need(reports, "unrandomized", name)
            lo = target - 3 * r.marginal_stderr
            hi = target + d / (n + 1) + 3 * r.marginal_stderr
            if not lo <= r.marginal <= hi:
                out.append(f"{name}: unrandomized coverage {r.marginal:.4f} outside [{lo:.4f}, {hi:.4f}]")
        elif name == "group-bracket":
            method = "unrandomized" if "unrandomized" in reports else "randomized"
            _need(reports, method, name)
            if not cfg.groups:
                raise ValidationError("group-bracket needs groups in the config")
            x = np.vstack([r.x_test for r in results])
            cov = np.concatenate([r.covered(method) for r in results])
            cl = np.concatenate([np.full(r.s_test.size, r.trial) for r in results])
            for g in cfg.groups:
                w = g(x)
                if w.sum() == 0:
                    out.append(f"{name}: group {group_label(g)} has no test points")
                    continue
                c, se = ratio_stderr(w, cov, cl)
                upper = target + d / ((n + 1) * w.mean())
                if not target - 3 * se <= c <= upper + 3 * se:
                    out.append(
                        f"{name}: group {group_label(g)} coverage {c:.4f} outside "
                        f"[{target:.3f}, {upper:.4f}] (stderr {se:.4f})"
                    )
        elif name == "baseline-undercover":
            r = _need(reports, "vanilla-qr", name)
            if not r.marginal < target - 3 * r.marginal_stderr:
                out.append(
                    f"{name}: vanilla-qr coverage {r.marginal:.4f} not below "
                    f"{target:.3f} - 3 stderr ({r.marginal_stderr:.4f})"
                )
        else:
            method = "randomized" if "randomized" in reports else cfg.methods[0]
            r = reports[method]
            if not r.estimates:
                raise ValidationError("estimate-accuracy needs estimate=true and tilts in the config")
            for label, est in r.estimates.items():
                c, se = r.per_tilt[label]
                if abs(est - c) > 3 * se:
                    out.append(f"{name}: tilt {label} estimate {est:.4f} vs empirical {c:.4f} (stderr {se:.4f})")
    return out
