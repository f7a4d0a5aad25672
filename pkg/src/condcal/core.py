"""Domain types, conformity scores, basis and kernel evaluation.

Also hosts the split conformal baseline, which every conditional method in
this package reduces to when the function class is intercept-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

GRAM_RIDGE = 1e-10
PSD_TOL = 1e-8


class ValidationError(ValueError):
    """Raised when user-supplied data or configuration is malformed."""


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValidationError(f"expected a 2-d covariate matrix, got shape {x.shape}")
    return x


# --------------------------------------------------------------------------
# Calibration data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationSet:
    """Covariates ``x`` (n x p) and conformity scores ``s`` (n,)."""

    x: np.ndarray
    s: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        x = _as_matrix(self.x)
        s = np.asarray(self.s, dtype=float).ravel()
        if s.size < 1:
            raise ValidationError("calibration set must contain at least one point")
        if x.shape[0] != s.size:
            raise ValidationError(
                f"row count mismatch: x has {x.shape[0]} rows, s has {s.size} entries"
            )
        bad = ~np.isfinite(x)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValidationError(f"non-finite covariate at row {r}, column {c}")
        bad_s = np.flatnonzero(~np.isfinite(s))
        if bad_s.size:
            raise ValidationError(f"non-finite score at row {bad_s[0]}")
        x.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "s", s)
        if self.y is not None:
            y = np.asarray(self.y, dtype=float).ravel()
            y.setflags(write=False)
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.s.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def take(self, rows) -> "CalibrationSet":
        rows = np.asarray(rows)
        y = None if self.y is None else self.y[rows]
        return CalibrationSet(self.x[rows], self.s[rows], y)


# --------------------------------------------------------------------------
# Conformity scores
# --------------------------------------------------------------------------

SCORE_KINDS = ("absolute-residual", "signed-residual", "identity", "aps-classification", "custom")


@dataclass(frozen=True)
class ScoreFunction:
    """A fixed conformity score S(x, y).

    ``predictor`` maps a covariate row to the model output the score needs:
    a point prediction for residual scores, a probability vector for
    ``aps-classification``. ``custom`` takes ``(x, y)`` and returns the score.
    Predictor outputs may also be passed explicitly to :func:`evaluate_score`.
    """

    kind: str
    predictor: Callable | None = None
    custom: Callable | None = None

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValidationError(f"unknown score kind {self.kind!r}; expected one of {SCORE_KINDS}")
        if self.kind == "custom" and self.custom is None:
            raise ValidationError("custom score requires a callable")

    @property
    def invertible(self) -> bool:
        return self.kind != "custom"


def _check_probs(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float).ravel()
    if probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValidationError("class probabilities must be nonnegative and sum to 1")
    return probs


def aps_score(probs, label: int) -> float:
    """Sum of class probabilities strictly exceeding that of ``label``."""
    probs = _check_probs(probs)
    label = int(label)
    if not 0 <= label < probs.size:
        raise ValidationError(f"unknown class label {label} for {probs.size} classes")
    return float(probs[probs > probs[label]].sum())


def evaluate_score(sf: ScoreFunction, x, y, prediction=None) -> float:
    """Evaluate S(x, y).

    Labels for ``aps-classification`` are 0-based class indices.
    """
    if sf.kind == "identity":
        return float(y)
    if sf.kind == "custom":
        return float(sf.custom(x, y))
    if prediction is None:
        if sf.predictor is None:
            raise ValidationError(f"score kind {sf.kind!r} needs a predictor output")
        prediction = sf.predictor(x)
    if sf.kind == "aps-classification":
        return aps_score(prediction, y)
    mu = float(prediction)
    if sf.kind == "absolute-residual":
        return abs(float(y) - mu)
    return float(y) - mu


# --------------------------------------------------------------------------
# Finite-dimensional basis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupPredicate:
    """Membership of ``x[feature]`` in an interval; endpoints may be open."""

    feature: int
    lower: float = -math.inf
    upper: float = math.inf
    lower_closed: bool = True
    upper_closed: bool = True

    def __call__(self, x: np.ndarray) -> np.ndarray:
        v = x[:, self.feature]
        lo = v >= self.lower if self.lower_closed else v > self.lower
        hi = v <= self.upper if self.upper_closed else v < self.upper
        return (lo & hi).astype(float)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "lower": None if math.isinf(self.lower) else self.lower,
            "upper": None if math.isinf(self.upper) else self.upper,
            "lower_closed": self.lower_closed,
            "upper_closed": self.upper_closed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupPredicate":
        lower = d.get("lower")
        upper = d.get("upper")
        return cls(
            int(d["feature"]),
            -math.inf if lower is None else float(lower),
            math.inf if upper is None else float(upper),
            bool(d.get("lower_closed", True)),
            bool(d.get("upper_closed", True)),
        )


COLUMN_KINDS = ("intercept", "raw-feature", "group-indicator", "product", "gaussian", "custom")


@dataclass(frozen=True)
class Column:
    """One generator of the basis Phi.

    ``product`` multiplies ``x[feature]`` by a group indicator. ``gaussian``
    evaluates exp(-||x - mu||^2 / (2 sigma^2)). ``custom`` wraps a callable
    mapping the covariate matrix to a column vector.
    """

    kind: str
    feature: int | None = None
    group: GroupPredicate | None = None
    mu: tuple | None = None
    sigma: float | None = None
    func: Callable | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise ValidationError(f"unknown column kind {self.kind!r}")
        if self.kind in ("raw-feature", "product") and self.feature is None:
            raise ValidationError(f"{self.kind} column needs a feature index")
        if self.kind in ("group-indicator", "product") and self.group is None:
            raise ValidationError(f"{self.kind} column needs a group predicate")
        if self.kind == "gaussian" and (self.mu is None or not self.sigma or self.sigma <= 0):
            raise ValidationError("gaussian column needs mu and a positive sigma")
        if self.kind == "custom" and self.func is None:
            raise ValidationError("custom column needs a callable")

    def max_feature(self) -> int:
        idx = [-1]
        if self.feature is not None:
            idx.append(self.feature)
        if self.group is not None:
            idx.append(self.group.feature)
        if self.kind == "gaussian":
            idx.append(len(self.mu) - 1)
        return max(idx)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "intercept":
            return np.ones(x.shape[0])
        if self.kind == "raw-feature":
            return x[:, self.feature].copy()
        if self.kind == "group-indicator":
            return self.group(x)
        if self.kind == "product":
            return x[:, self.feature] * self.group(x)
        if self.kind == "gaussian":
            mu = np.asarray(self.mu, dtype=float)
            d2 = ((x[:, : mu.size] - mu) ** 2).sum(axis=1)
            return np.exp(-d2 / (2.0 * self.sigma**2))
        return np.asarray(self.func(x), dtype=float).reshape(x.shape[0])

    def to_dict(self) -> dict:
        if self.kind == "custom":
            raise ValidationError("custom columns cannot be serialized")
        d: dict = {"kind": self.kind}
        if self.feature is not None:
            d["feature"] = self.feature
        if self.group is not None:
            d["group"] = self.group.to_dict()
        if self.kind == "gaussian":
            d["mu"] = list(self.mu)
            d["sigma"] = self.sigma
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict | str) -> "Column":
        if isinstance(d, str):
            d = {"kind": d}
        group = d.get("group")
        mu = d.get("mu")
        if mu is not None:
            mu = tuple(float(v) for v in np.atleast_1d(mu))
        return cls(
            kind=d["kind"],
            feature=None if d.get("feature") is None else int(d["feature"]),
            group=None if group is None else GroupPredicate.from_dict(group),
            mu=mu,
            sigma=None if d.get("sigma") is None else float(d["sigma"]),
            name=d.get("name"),
        )


@dataclass(frozen=True)
class BasisSpec:
    columns: tuple[Column, ...]

    def __post_init__(self):
        cols = tuple(self.columns)
        if not cols:
            raise ValidationError("basis needs at least one column")
        object.__setattr__(self, "columns", cols)

    @property
    def d(self) -> int:
        return len(self.columns)

    @classmethod
    def intercept(cls) -> "BasisSpec":
        return cls((Column("intercept"),))

    @classmethod
    def linear(cls, p: int, intercept: bool = True) -> "BasisSpec":
        cols = [Column("intercept")] if intercept else []
        cols += [Column("raw-feature", feature=j) for j in range(p)]
        return cls(tuple(cols))

    @classmethod
    def sign_indicators(cls, p: int) -> "BasisSpec":
        """Intercept plus 1{x_j > 0} for each of the ``p`` features."""
        cols = [Column("intercept")]
        cols += [
            Column("group-indicator", group=GroupPredicate(j, 0.0, math.inf, lower_closed=False))
            for j in range(p)
        ]
        return cls(tuple(cols))

    @classmethod
    def groups(cls, predicates: Sequence[GroupPredicate], intercept: bool = False) -> "BasisSpec":
        cols = [Column("intercept")] if intercept else []
        cols += [Column("group-indicator", group=g) for g in predicates]
        return cls(tuple(cols))

    def evaluate(self, x) -> np.ndarray:
        """Basis matrix of shape (rows, d)."""
        x = _as_matrix(x)
        need = max(c.max_feature() for c in self.columns)
        if need >= x.shape[1]:
            raise ValidationError(
                f"basis references feature {need} but covariates have {x.shape[1]} columns"
            )
        phi = np.column_stack([c.evaluate(x) for c in self.columns])
        if not np.all(np.isfinite(phi)):
            raise ValidationError("basis evaluation produced non-finite values")
        return phi

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        """Explicit ``columns`` or a ``preset``.

        Presets: ``intercept``; ``linear`` (needs ``p``); ``sign-indicators``
        (needs ``p``); ``interval-groups`` (needs ``endpoints``, optional
        ``feature`` and ``intercept``).
        """
        if not isinstance(d, dict):
            raise ValidationError("basis document must be a JSON object")
        if "preset" in d:
            return cls._preset(d)
        try:
            return cls(tuple(Column.from_dict(c) for c in d["columns"]))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"malformed basis document: {exc}") from exc

    @classmethod
    def _preset(cls, d: dict) -> "BasisSpec":
        preset = d["preset"]
        try:
            if preset == "intercept":
                return cls.intercept()
            if preset == "linear":
                return cls.linear(int(d["p"]), bool(d.get("intercept", True)))
            if preset == "sign-indicators":
                return cls.sign_indicators(int(d["p"]))
            if preset == "interval-groups":
                groups = interval_groups(d["endpoints"], int(d.get("feature", 0)))
                return cls.groups(groups, bool(d.get("intercept", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"basis preset {preset!r} is missing a field: {exc}") from exc
        raise ValidationError(f"unknown basis preset {preset!r}")


def evaluate_basis(b: BasisSpec, x) -> np.ndarray:
    """Evaluate the basis on one covariate row; returns a length-d vector."""
    row = np.atleast_1d(np.asarray(x, dtype=float))
    return b.evaluate(row[None, :])[0]


def interval_groups(endpoints: Sequence[float], feature: int = 0) -> list[GroupPredicate]:
    """All closed sub-intervals [a, b], a < b, with endpoints from ``endpoints``."""
    pts = sorted(float(e) for e in endpoints)
    return [
        GroupPredicate(feature, a, b)
        for i, a in enumerate(pts)
        for b in pts[i + 1 :]
    ]


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

KERNEL_FAMILIES = ("gaussian", "polynomial", "custom-gram")


@dataclass(frozen=True)
class KernelSpec:
    """RKHS component of the function class and its penalty weight ``lam``.

    ``gaussian``: K(x, y) = exp(-gamma ||x - y||^2).
    ``polynomial``: K(x, y) = (x.y + c)^degree.
    ``custom-gram``: ``func(X, Y)`` returns the cross-Gram matrix.
    """

    family: str
    lam: float
    basis: BasisSpec = field(default_factory=BasisSpec.intercept)
    gamma: float = 1.0
    c: float = 1.0
    degree: int = 2
    func: Callable | None = None

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}")
        if not self.lam > 0:
            raise ValidationError("kernel penalty lambda must be positive")
        if self.family == "gaussian" and not self.gamma > 0:
            raise ValidationError("gaussian kernel needs gamma > 0")
        if self.family == "polynomial" and (self.c < 0 or int(self.degree) < 1):
            raise ValidationError("polynomial kernel needs c >= 0 and degree >= 1")
        if self.family == "custom-gram" and self.func is None:
            raise ValidationError("custom-gram kernel needs a callable")

    def with_lambda(self, lam: float) -> "KernelSpec":
        return KernelSpec(self.family, lam, self.basis, self.gamma, self.c, self.degree, self.func)

    def gram(self, x, z=None) -> np.ndarray:
        """Cross-Gram matrix K(x_i, z_j); ``z`` defaults to ``x``."""
        x = _as_matrix(x)
        z = x if z is None else _as_matrix(z)
        if self.family == "gaussian":
            d2 = (
                (x**2).sum(axis=1)[:, None]
                + (z**2).sum(axis=1)[None, :]
                - 2.0 * x @ z.T
            )
            return np.exp(-self.gamma * np.maximum(d2, 0.0))
        if self.family == "polynomial":
            return (x @ z.T + self.c) ** int(self.degree)
        return np.asarray(self.func(x, z), dtype=float)

    def to_dict(self) -> dict:
        if self.family == "custom-gram":
            raise ValidationError("custom-gram kernels cannot be serialized")
        d = {"family": self.family, "lambda": self.lam, "basis": self.basis.to_dict()}
        if self.family == "gaussian":
            d["gamma"] = self.gamma
        else:
            d["c"] = self.c
            d["degree"] = int(self.degree)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        try:
            basis = BasisSpec.from_dict(d["basis"]) if "basis" in d else BasisSpec.intercept()
            return cls(
                family=d["family"],
                lam=float(d["lambda"]),
                basis=basis,
                gamma=float(d.get("gamma", 1.0)),
                c=float(d.get("c", 1.0)),
                degree=int(d.get("degree", 2)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed kernel document: {exc}") from exc


def check_psd(k: np.ndarray, tol: float = PSD_TOL) -> None:
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValidationError("Gram matrix must be square")
    scale = max(1.0, float(np.abs(k).max()))
    if not np.allclose(k, k.T, atol=tol * scale):
        raise ValidationError("Gram matrix is not symmetric")
    lo = float(np.linalg.eigvalsh(0.5 * (k + k.T))[0])
    if lo < -tol * scale:
        raise ValidationError(f"Gram matrix is not PSD (min eigenvalue {lo:.3e})")


@dataclass(frozen=True)
class LipschitzSpec:
    """Lipschitz-penalized component with penalty weight ``lam``."""

    lam: float
    basis: BasisSpec = field(default_factory=BasisSpec.intercept)
    cap: int = 2000

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("Lipschitz penalty lambda must be positive")

    def to_dict(self) -> dict:
        return {"family": "lipschitz", "lambda": self.lam, "basis": self.basis.to_dict(), "cap": self.cap}

    @classmethod
    def from_dict(cls, d: dict) -> "LipschitzSpec":
        basis = BasisSpec.from_dict(d["basis"]) if "basis" in d else BasisSpec.intercept()
        return cls(float(d["lambda"]), basis, int(d.get("cap", 2000)))


def regularizer_from_dict(d: dict):
    """Parse a kernel document; family ``lipschitz`` yields a :class:`LipschitzSpec`."""
    if d.get("family") == "lipschitz":
        try:
            return LipschitzSpec.from_dict(d)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed kernel document: {exc}") from exc
    return KernelSpec.from_dict(d)


# --------------------------------------------------------------------------
# Prediction sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionInterval:
    """Calibrated set for one test point.

    One-sided sets carry ``threshold``; two-sided sets carry ``lower`` and
    ``upper`` score bounds. ``realized`` is the set in label space: a
    ``(lo, hi)`` pair for residual scores (``None`` when empty), a tuple of
    class indices for classification, or ``None`` for non-invertible scores.
    """

    score_kind: str
    threshold: float | None = None
    lower: float | None = None
    upper: float | None = None
    realized: tuple | None = None
    empty: bool = False
    method: str | None = None
    u: tuple | None = None

    @property
    def two_sided(self) -> bool:
        return self.threshold is None

    def contains_score(self, s: float) -> bool:
        if self.empty:
            return False
        if self.two_sided:
            return self.lower <= s <= self.upper
        return s <= self.threshold

    def length(self) -> float:
        if self.empty or self.realized is None:
            return 0.0
        if self.score_kind == "aps-classification":
            return float(len(self.realized))
        return float(self.realized[1] - self.realized[0])


def realize_set(sf: ScoreFunction, s_star: float, prediction=None) -> PredictionInterval:
    """Invert the one-sided score set {y : S(x, y) <= s_star}."""
    kind = sf.kind
    if kind == "custom":
        return PredictionInterval(kind, threshold=s_star)
    if kind == "identity":
        empty = s_star == -math.inf
        return PredictionInterval(kind, threshold=s_star, realized=None if empty else (-math.inf, s_star), empty=empty)
    if kind == "aps-classification":
        probs = _check_probs(prediction)
        labels = tuple(k for k in range(probs.size) if aps_score(probs, k) <= s_star)
        return PredictionInterval(kind, threshold=s_star, realized=labels, empty=not labels)
    mu = float(prediction)
    if kind == "absolute-residual":
        if s_star < 0:
            return PredictionInterval(kind, threshold=s_star, empty=True)
        return PredictionInterval(kind, threshold=s_star, realized=(mu - s_star, mu + s_star))
    empty = s_star == -math.inf
    return PredictionInterval(kind, threshold=s_star, realized=None if empty else (-math.inf, mu + s_star), empty=empty)


def realize_two_sided(sf: ScoreFunction, s_lo: float, s_hi: float, prediction=None) -> PredictionInterval:
    """Invert {y : s_lo <= S(x, y) <= s_hi} for signed-residual or identity scores."""
    if sf.kind not in ("signed-residual", "identity"):
        raise ValidationError("two-sided sets need a signed-residual or identity score")
    if s_lo > s_hi:
        return PredictionInterval(sf.kind, lower=s_lo, upper=s_hi, empty=True)
    shift = 0.0 if sf.kind == "identity" else float(prediction)
    return PredictionInterval(sf.kind, lower=s_lo, upper=s_hi, realized=(shift + s_lo, shift + s_hi))


# --------------------------------------------------------------------------
# Split conformal
# --------------------------------------------------------------------------


def split_conformal_threshold(s, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score, or +inf if that exceeds n."""
    s = np.asarray(s, dtype=float).ravel()
    if s.size == 0:
        raise ValidationError("empty score vector")
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    n = s.size
    # guard against (n+1)(1-alpha) landing a hair above an integer
    k = math.ceil((n + 1) * (1 - alpha) - 1e-12)
    if k > n:
        return math.inf
    return float(np.partition(s, k - 1)[k - 1])
