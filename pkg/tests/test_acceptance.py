"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
before its assertion runs, so a failing criterion still reports its numbers.
"""

import math

import numpy as np
import pytest

from condcal import (
    BasisSpec,
    CalibrationSet,
    KernelSpec,
    LipschitzSpec,
    TiltSpec,
    eta_at,
    fit_model,
    interval_groups,
    split_conformal_threshold,
    threshold_binary_search,
    threshold_sensitivity,
)
from condcal.eval import EvalConfig, SimSpec, check_assertions, evaluate
from condcal.qr_solver import solve_kernel_qr, solve_lipschitz_qr
from condcal.qr_solver.lipschitz import lipschitz_constant
from conftest import ACCEPTANCE_LINES
from oracles import order_stat_quantile, refit_threshold

pytestmark = pytest.mark.acceptance


def _record(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {num:2d} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _linear_instance(rng, n_max=25, d_max=3):
    d = int(rng.integers(1, d_max + 1))
    n = int(rng.integers(10, n_max + 1))
    x = rng.normal(size=(n, max(d - 1, 1)))
    w = rng.normal(size=x.shape[1])
    s = x @ w + rng.normal(size=n)
    basis = BasisSpec.linear(d - 1) if d > 1 else BasisSpec.intercept()
    alpha = float(rng.uniform(0.05, 0.5))
    model = fit_model(CalibrationSet(x, s), basis, alpha)
    x_new = rng.normal(size=x.shape[1])
    return model, x_new


# -- 1, 2: marginal coverage on the gaussian-linear design -----------------------


@pytest.fixture(scope="module")
def gaussian_linear_run():
    cfg = EvalConfig(
        sim=SimSpec("gaussian-linear", n=200, p=4, test_n=1000, seed=0),
        basis=BasisSpec.sign_indicators(4),
        methods=("randomized", "unrandomized"),
        trials=100,
    )
    reports, results = evaluate(cfg, workers=1)
    return cfg, reports, results


def test_randomized_exact_coverage(gaussian_linear_run):
    cfg, reports, results = gaussian_linear_run
    r = reports["randomized"]
    ok = abs(r.marginal - 0.9) <= 0.01
    _record(1, "randomized exact coverage", ok, f"coverage {r.marginal:.4f} (stderr {r.marginal_stderr:.4f}), band 0.900 +/- 0.010")
    assert ok


def test_unrandomized_bracket(gaussian_linear_run):
    cfg, reports, results = gaussian_linear_run
    r = reports["unrandomized"]
    upper = 0.9 + cfg.basis.d / (cfg.sim.n + 1)
    failures = check_assertions(cfg, reports, results, ["unrandomized-bracket"])
    ok = not failures
    _record(2, "unrandomized bracket", ok,
            f"coverage {r.marginal:.4f} (stderr {r.marginal_stderr:.4f}), bracket [0.900, {upper:.4f}] +/- 3 stderr")
    assert ok, failures


# -- 3: group-conditional coverage ------------------------------------------------


def test_group_conditional_bracket():
    groups = tuple(interval_groups([0.0, 1.25, 2.5, 3.75, 5.0]))
    assert len(groups) == 10
    cfg = EvalConfig(
        sim=SimSpec("romano-1d", n=500, test_n=1000, seed=0),
        basis=BasisSpec.groups(groups),
        groups=groups,
        methods=("unrandomized",),
        trials=100,
    )
    reports, results = evaluate(cfg, workers=1)
    failures = check_assertions(cfg, reports, results, ["group-bracket"])
    per = reports["unrandomized"].per_group
    lo, hi = min(c for c, _ in per.values()), max(c for c, _ in per.values())
    ok = not failures
    _record(3, "group-conditional bracket", ok, f"10 groups, coverage range [{lo:.4f}, {hi:.4f}], {len(failures)} outside")
    assert ok, failures


# -- 4: refit oracle ----------------------------------------------------------------


def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    step = 1e-4
    grid = np.round(np.arange(-100.0, 100.0 + step / 2, step), 6)
    bad = []
    unbounded = 0
    for k in range(200):
        model, x_new = _linear_instance(rng)
        s_star = threshold_sensitivity(model, x_new).s_star
        phi_x = model.features(x_new[None, :])[0]
        a, b = refit_threshold(model.phi, model.calib.s, phi_x, model.alpha, grid)
        # too few points for the level: the set is everything and no refit ever flips
        unbounded += s_star == math.inf
        if not (a - 1e-9 <= s_star <= b + 1e-9) or (math.isfinite(s_star) and not math.isfinite(b)):
            bad.append((k, s_star, a, b))
    ok = not bad
    _record(4, "oracle equivalence", ok,
            f"{200 - len(bad)}/200 instances within grid step {step:g} ({unbounded} with an unbounded set)")
    assert ok, bad[:5]


# -- 5: bisection vs tracing --------------------------------------------------------


def test_algorithm_agreement():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        model, x_new = _linear_instance(rng, n_max=60, d_max=4)
        a = threshold_sensitivity(model, x_new).s_star
        b = threshold_binary_search(model, x_new, eps=1e-8).s_star
        worst = max(worst, abs(a - b) if math.isfinite(a) or a != b else 0.0)
    ok = worst <= 1e-6
    _record(5, "algorithm agreement", ok, f"max |sensitivity - bisection| = {worst:.2e} over 200 instances")
    assert ok


# -- 6: monotonicity of the test dual ------------------------------------------------


def test_monotone_dual():
    rng = np.random.default_rng(6)
    violations = 0
    kinds = []
    for k in range(50):
        kind = ("linear", "kernel", "lipschitz")[k % 3]
        n = int(rng.integers(8, 16 if kind == "lipschitz" else 30))
        x = rng.uniform(-1, 1, size=(n, 1))
        s = np.sin(3 * x[:, 0]) + 0.5 * rng.normal(size=n)
        alpha = float(rng.uniform(0.05, 0.5))
        calib = CalibrationSet(x, s)
        if kind == "linear":
            model = fit_model(calib, BasisSpec.linear(1), alpha)
        elif kind == "kernel":
            model = fit_model(calib, BasisSpec.intercept(), alpha, KernelSpec("gaussian", float(rng.uniform(0.01, 1.0)), gamma=2.0))
        else:
            model = fit_model(calib, BasisSpec.intercept(), alpha, LipschitzSpec(float(rng.uniform(0.05, 1.0))))
        x_new = rng.uniform(-1, 1, size=1)
        grid = np.linspace(s.min() - 2.0, s.max() + 2.0, 200)
        eta = np.array([eta_at(model, x_new, g) for g in grid])
        violations += int(np.sum(np.diff(eta) < -1e-9))
        kinds.append(kind)
    ok = violations == 0
    _record(6, "monotonicity", ok, f"{violations} violations over 50 models x 200 grid points "
            f"({kinds.count('linear')} linear, {kinds.count('kernel')} kernel, {kinds.count('lipschitz')} Lipschitz)")
    assert ok


# -- 7: split conformal recovery -----------------------------------------------------


def test_split_conformal_recovery():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 80))
        alpha = float(rng.uniform(0.02, 0.6))
        s = rng.normal(size=n)
        model = fit_model(CalibrationSet(np.zeros((n, 1)), s), BasisSpec.intercept(), alpha)
        got = threshold_sensitivity(model, [0.0]).s_star
        want = split_conformal_threshold(s, alpha)
        if not (got == want == order_stat_quantile(s, alpha)):
            mismatches += 1
    ok = mismatches == 0
    _record(7, "split-conformal recovery", ok, f"{100 - mismatches}/100 exact matches")
    assert ok


# -- 8: representer and norm invariants ------------------------------------------------


def test_representer_and_norm_bounds():
    rng = np.random.default_rng(8)
    rep_err, norm_bad, lip_bad = 0.0, 0, 0
    for _ in range(50):
        m = int(rng.integers(5, 40))
        x = rng.uniform(0, 1, size=(m, 1))
        s = 2 * x[:, 0] + rng.normal(size=m)
        lam = float(10 ** rng.uniform(-3, 1))
        alpha = float(rng.uniform(0.05, 0.5))
        kernel = KernelSpec("gaussian", lam, gamma=float(rng.uniform(0.5, 20.0)))
        k = kernel.gram(x)
        f = solve_kernel_qr(k, np.ones((m, 1)), s, alpha, lam)
        rep_err = max(rep_err, float(np.abs(f.gamma - f.eta / (2 * lam * m)).max()))
        rep_err = max(rep_err, abs(f.objective - f.dual_objective))
        if f.gamma @ k @ f.gamma > np.abs(s).mean() / lam + 1e-9:
            norm_bad += 1
    for _ in range(50):
        m = int(rng.integers(4, 14))
        x = rng.uniform(0, 1, size=(m, 1))
        s = 2 * x[:, 0] + rng.normal(size=m)
        lam = float(10 ** rng.uniform(-2, 1))
        f = solve_lipschitz_qr(x, np.ones((m, 1)), s, float(rng.uniform(0.05, 0.5)), lam)
        if lam * lipschitz_constant(x, f.gamma) > np.abs(s).mean() + 1e-9:
            lip_bad += 1
    ok = rep_err <= 1e-6 and norm_bad == 0 and lip_bad == 0
    _record(8, "representer and norm invariants", ok,
            f"max representer/duality error {rep_err:.1e}; norm bound violations {norm_bad}/50 kernel, {lip_bad}/50 Lipschitz")
    assert ok


# -- 9: RKHS coverage estimate ------------------------------------------------------------


def test_rkhs_estimate_accuracy():
    tilts = (TiltSpec("gaussian-tilt", mu=(1.5,), sigma=0.2), TiltSpec("gaussian-tilt", mu=(3.5,), sigma=0.2))
    cfg = EvalConfig(
        sim=SimSpec("romano-1d", n=200, test_n=1000, seed=0),
        basis=BasisSpec.intercept(),
        kernel=KernelSpec("gaussian", 0.005, gamma=12.5),
        methods=("randomized",),
        trials=50,
        tilts=tilts,
        estimate=True,
        coverage_only=True,
    )
    reports, results = evaluate(cfg, workers=1)
    failures = check_assertions(cfg, reports, results, ["estimate-accuracy"])
    r = reports["randomized"]
    parts = []
    for t in tilts:
        c, se = r.per_tilt[t.label]
        parts.append(f"mu={t.mu[0]}: est {r.estimates[t.label]:.4f} vs emp {c:.4f} (stderr {se:.4f})")
    ok = not failures
    _record(9, "RKHS estimate accuracy", ok, "; ".join(parts))
    assert ok, failures


# -- 10: vanilla baseline undercovers ------------------------------------------------------


def test_baseline_contrast():
    cfg = EvalConfig(
        sim=SimSpec("independent-null", n=200, p=19, test_n=1000, seed=0),
        basis=BasisSpec.linear(19),
        methods=("randomized", "vanilla-qr"),
        trials=100,
    )
    reports, results = evaluate(cfg, workers=1)
    failures = check_assertions(cfg, reports, results, ["baseline-undercover", "randomized-exact"])
    v, r = reports["vanilla-qr"], reports["randomized"]
    ok = not failures
    _record(10, "baseline contrast", ok,
            f"d/n = {cfg.basis.d / cfg.sim.n:.2f}; vanilla {v.marginal:.4f} (stderr {v.marginal_stderr:.4f}), "
            f"randomized {r.marginal:.4f} (stderr {r.marginal_stderr:.4f})")
    assert ok, failures
