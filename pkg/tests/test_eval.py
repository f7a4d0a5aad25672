import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condcal import BasisSpec, CalibrationSet, GroupPredicate, KernelSpec, TiltSpec, ValidationError
from condcal import fit_model, threshold_sensitivity
from condcal.eval import (
    EvalConfig,
    SimSpec,
    TrialResult,
    baseline_vanilla_qr,
    check_assertions,
    coverage_under_tilt,
    evaluate,
    long_rows,
    ratio_stderr,
    report,
    reports_to_json,
    rows_to_csv,
    run_trials,
    simulate,
)


# -- simulation ---------------------------------------------------------------


def test_simulation_is_deterministic():
    spec = SimSpec("gaussian-linear", n=4, p=2, test_n=3, seed=7)
    a, b = simulate(spec), simulate(spec)
    assert a.calib.x.tobytes() == b.calib.x.tobytes()
    assert a.calib.s.tobytes() == b.calib.s.tobytes()
    assert a.y_test.tobytes() == b.y_test.tobytes()
    assert simulate(spec, trial=1).calib.s.tobytes() != a.calib.s.tobytes()


def test_gaussian_linear_response_has_zero_mean():
    data = simulate(SimSpec("gaussian-linear", n=100_000, p=3, test_n=0, seed=1))
    assert abs(data.calib.y.mean()) <= 0.02


def test_independent_null_has_no_correlation():
    n = 20_000
    data = simulate(SimSpec("independent-null", n=n, p=4, test_n=0, seed=2))
    for j in range(4):
        r = np.corrcoef(data.calib.x[:, j], data.calib.y)[0, 1]
        assert abs(r) <= 3 / math.sqrt(n)


def test_romano_design_uses_absolute_residuals():
    data = simulate(SimSpec("romano-1d", n=50, test_n=10, seed=3))
    assert np.allclose(data.calib.s, np.abs(data.calib.y - data.mu_calib))
    assert data.calib.x.min() >= 0 and data.calib.x.max() <= 5


def test_sim_spec_validation():
    with pytest.raises(ValidationError):
        SimSpec("laplace", n=10)
    with pytest.raises(ValidationError):
        SimSpec("gaussian-linear", n=0)


# -- weighted coverage --------------------------------------------------------


def test_constant_tilt_gives_plain_coverage():
    cov = np.array([1, 0, 1, 1], bool)
    c, _ = coverage_under_tilt(np.zeros((4, 1)), cov)
    assert c == 0.75
    c2, _ = coverage_under_tilt(np.zeros((4, 1)), cov, TiltSpec("basis-column", column=0), BasisSpec.intercept())
    assert c2 == 0.75


def test_point_mass_tilt_gives_that_indicator():
    cov = np.array([1, 0, 1], bool)
    assert coverage_under_tilt(None, cov, np.array([0.0, 2.0, 0.0]))[0] == 0.0
    assert coverage_under_tilt(None, cov, np.array([0.0, 0.0, 5.0]))[0] == 1.0


@given(st.integers(0, 10**6))
def test_group_tilt_matches_subgroup_filtering(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 3, size=(60, 1))
    cov = rng.uniform(size=60) < 0.8
    g = GroupPredicate(0, 1.0, 2.0)
    mask = g(x).astype(bool)
    if not mask.any():
        return
    basis = BasisSpec.groups((g,))
    c, _ = coverage_under_tilt(x, cov, TiltSpec("basis-column", column=0), basis)
    assert c == pytest.approx(cov[mask].mean(), abs=1e-12)


def test_zero_weight_tilt_is_rejected():
    with pytest.raises(ValidationError):
        coverage_under_tilt(None, np.ones(3, bool), np.zeros(3))
    with pytest.raises(ValidationError):
        coverage_under_tilt(None, np.ones(3, bool), np.array([1.0, -1.0, 1.0]))


def test_unit_weight_stderr_is_binomial():
    cov = np.array([1] * 30 + [0] * 10, float)
    r, se = ratio_stderr(np.ones(40), cov)
    assert r == 0.75
    assert se == pytest.approx(math.sqrt(0.75 * 0.25 / 40))


def test_cluster_stderr_uses_cluster_totals():
    f = np.ones(6)
    c = np.array([1, 1, 0, 0, 1, 0], float)
    cl = np.array([0, 0, 1, 1, 2, 2])
    r, se = ratio_stderr(f, c, cl)
    sums = np.array([1.0, -1.0, 0.0])
    assert r == 0.5
    assert se == pytest.approx(math.sqrt((sums**2).sum() * 3 / 2) / 6)


# -- baselines ----------------------------------------------------------------


def test_vanilla_intercept_is_empirical_quantile():
    s = np.random.default_rng(0).normal(size=25)
    v = baseline_vanilla_qr(CalibrationSet(np.zeros((25, 1)), s), BasisSpec.intercept(), 0.1, np.zeros((1, 1)))
    # 25 * 0.9 = 22.5, so the minimizer is the 23rd order statistic
    assert v[0] == pytest.approx(np.sort(s)[22])


@settings(max_examples=25)
@given(st.integers(0, 10**6))
def test_vanilla_threshold_below_augmented(seed):
    rng = np.random.default_rng(seed)
    n, p = int(rng.integers(8, 30)), int(rng.integers(1, 3))
    x = rng.normal(size=(n, p))
    calib = CalibrationSet(x, rng.normal(size=n))
    basis = BasisSpec.linear(p)
    xt = rng.normal(size=(1, p))
    v = baseline_vanilla_qr(calib, basis, 0.2, xt)[0]
    assert v <= threshold_sensitivity(fit_model(calib, basis, 0.2), xt[0]).s_star + 1e-9


# -- reports ------------------------------------------------------------------


def _cfg(**kw):
    base = dict(sim=SimSpec("gaussian-linear", n=40, p=2, test_n=30, seed=5), basis=BasisSpec.linear(2), trials=2)
    base.update(kw)
    return EvalConfig(**base)


def test_single_covered_point_gives_full_coverage():
    cfg = _cfg(methods=("split-conformal",))
    r = TrialResult(0, np.zeros((1, 2)), np.array([0.0]), {"split-conformal": np.array([-np.inf])}, {"split-conformal": np.array([1.0])})
    assert report(cfg, [r], "split-conformal").marginal == 1.0


def test_empty_sets_give_zero_coverage():
    cfg = _cfg(methods=("split-conformal",))
    r = TrialResult(0, np.zeros((3, 2)), np.zeros(3), {"split-conformal": np.full(3, -np.inf)}, {"split-conformal": np.full(3, -np.inf)})
    rep = report(cfg, [r], "split-conformal")
    assert rep.marginal == 0.0 and rep.mean_length == 0.0


def test_partition_groups_average_to_marginal():
    groups = (GroupPredicate(0, -np.inf, 0.0, upper_closed=False), GroupPredicate(0, 0.0, np.inf))
    cfg = _cfg(groups=groups, methods=("unrandomized", "split-conformal"))
    reports, _ = evaluate(cfg)
    for rep in reports.values():
        parts = list(rep.per_group.values())
        assert sum(n for _, n in parts) == rep.test_n
        avg = sum(c * n for c, n in parts) / rep.test_n
        assert avg == pytest.approx(rep.marginal, abs=1e-12)


def test_evaluation_is_deterministic_and_worker_invariant():
    cfg = _cfg(methods=("randomized", "unrandomized", "vanilla-qr", "split-conformal"), trials=3)
    a = run_trials(cfg, workers=1)
    b = run_trials(cfg, workers=2)
    for ra, rb in zip(a, b):
        for m in cfg.methods:
            assert np.array_equal(ra.upper[m], rb.upper[m])
    rows_a = rows_to_csv(long_rows(cfg, a))
    assert rows_a == rows_to_csv(long_rows(cfg, b))
    rep = {m: report(cfg, a, m) for m in cfg.methods}
    assert reports_to_json(cfg, rep) == reports_to_json(cfg, {m: report(cfg, b, m) for m in cfg.methods})


def test_coverage_only_mode_agrees_with_thresholds():
    kw = dict(methods=("randomized", "unrandomized"), trials=2, two_sided=True,
              sim=SimSpec("gaussian-linear", n=40, p=2, test_n=30, seed=5, score="signed-residual"))
    full = run_trials(_cfg(**kw))
    fast = run_trials(_cfg(coverage_only=True, **kw))
    for a, b in zip(full, fast):
        for m in kw["methods"]:
            assert np.array_equal(a.covered(m), b.covered(m))
            assert np.all(np.isnan(b.upper[m]))


def test_kernel_coverage_only_agrees_with_bisection():
    sim = SimSpec("romano-1d", n=40, test_n=15, seed=2)
    kw = dict(sim=sim, basis=BasisSpec.intercept(), kernel=KernelSpec("gaussian", 0.01, gamma=2.0),
              methods=("randomized",), trials=1)
    full = run_trials(EvalConfig(**kw))
    fast = run_trials(EvalConfig(coverage_only=True, **kw))
    assert np.array_equal(full[0].covered("randomized"), fast[0].covered("randomized"))


def test_conditional_method_covers_at_least_vanilla():
    cfg = _cfg(methods=("unrandomized", "vanilla-qr"), trials=3)
    reports, _ = evaluate(cfg)
    assert reports["unrandomized"].marginal >= reports["vanilla-qr"].marginal


def test_config_roundtrip():
    cfg = _cfg(tilts=(TiltSpec("gaussian-tilt", mu=(0.0, 0.0), sigma=1.0),), groups=(GroupPredicate(0, 0.0, 1.0),))
    assert EvalConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        EvalConfig.from_dict({"basis": {"preset": "intercept"}})
    with pytest.raises(ValidationError):
        _cfg(methods=("bogus",))


# -- assertions ----------------------------------------------------------------


def test_assertions_flag_violations():
    cfg = _cfg(methods=("split-conformal", "vanilla-qr", "randomized"))
    results = [
        TrialResult(0, np.zeros((4, 2)), np.zeros(4), {m: np.full(4, -np.inf) for m in cfg.methods}, {m: np.full(4, -1.0) for m in cfg.methods})
    ]
    reports = {m: report(cfg, results, m) for m in cfg.methods}
    msgs = check_assertions(cfg, reports, results, ["randomized-exact", "baseline-undercover"])
    assert len(msgs) == 1 and msgs[0].startswith("randomized-exact")
    with pytest.raises(ValidationError):
        check_assertions(cfg, reports, results, ["unrandomized-bracket"])
    with pytest.raises(ValidationError):
        check_assertions(cfg, reports, results, ["nonsense"])


def test_unrandomized_bracket_passes_on_small_run():
    cfg = _cfg(methods=("unrandomized",), trials=4, sim=SimSpec("gaussian-linear", n=60, p=2, test_n=200, seed=1))
    reports, results = evaluate(cfg)
    assert check_assertions(cfg, reports, results, ["unrandomized-bracket"]) == []


def test_vanilla_has_lower_worst_group_coverage_on_null_design():
    groups = (GroupPredicate(0, -np.inf, 0.0, upper_closed=False), GroupPredicate(0, 0.0, np.inf))
    cfg = EvalConfig(
        sim=SimSpec("independent-null", n=100, p=9, test_n=200, seed=4),
        basis=BasisSpec.linear(9),
        methods=("randomized", "vanilla-qr"),
        groups=groups,
        trials=20,
    )
    reports, _ = evaluate(cfg)
    worst = {m: min(c for c, _ in r.per_group.values()) for m, r in reports.items()}
    assert worst["vanilla-qr"] < worst["randomized"]
