import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from condcal.core import (
    BasisSpec,
    CalibrationSet,
    Column,
    GroupPredicate,
    KernelSpec,
    LipschitzSpec,
    ScoreFunction,
    ValidationError,
    aps_score,
    check_psd,
    evaluate_basis,
    evaluate_score,
    interval_groups,
    realize_set,
    realize_two_sided,
    regularizer_from_dict,
    split_conformal_threshold,
)
from oracles import order_stat_quantile


# -- scores -----------------------------------------------------------------


def test_absolute_residual_score():
    assert evaluate_score(ScoreFunction("absolute-residual"), None, 3.5, prediction=2.0) == 1.5


def test_identity_score():
    assert evaluate_score(ScoreFunction("identity"), None, 0.7) == 0.7


def test_signed_residual_score_uses_predictor():
    sf = ScoreFunction("signed-residual", predictor=lambda x: 2.0 * x[0])
    assert evaluate_score(sf, np.array([1.0]), 1.5) == pytest.approx(-0.5)


def test_aps_sums_strictly_larger_probabilities():
    # class 2 (0-based label 1) has prob 0.3; only 0.5 exceeds it
    assert aps_score([0.5, 0.3, 0.2], 1) == pytest.approx(0.5)
    assert evaluate_score(ScoreFunction("aps-classification"), None, 1, prediction=[0.5, 0.3, 0.2]) == pytest.approx(0.5)


def test_aps_ties_are_not_counted():
    assert aps_score([0.4, 0.4, 0.2], 0) == 0.0
    assert aps_score([0.4, 0.4, 0.2], 2) == pytest.approx(0.8)


def test_aps_rejects_unknown_label_and_bad_probs():
    with pytest.raises(ValidationError):
        aps_score([0.5, 0.5], 2)
    with pytest.raises(ValidationError):
        aps_score([0.5, 0.6], 0)
    with pytest.raises(ValidationError):
        aps_score([1.2, -0.2], 0)


def test_residual_score_needs_prediction():
    with pytest.raises(ValidationError):
        evaluate_score(ScoreFunction("absolute-residual"), None, 1.0)


def test_custom_score_needs_callable():
    with pytest.raises(ValidationError):
        ScoreFunction("custom")
    sf = ScoreFunction("custom", custom=lambda x, y: y**2)
    assert evaluate_score(sf, None, 3.0) == 9.0


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6), st.data())
def test_aps_score_is_deterministic_and_bounded(raw, data):
    p = np.asarray(raw) + 1e-3
    p = p / p.sum()
    k = data.draw(st.integers(0, p.size - 1))
    a = aps_score(p, k)
    assert a == aps_score(p, k)
    assert 0.0 <= a <= 1.0 - p[k] + 1e-12


# -- calibration sets -------------------------------------------------------


def test_calibration_set_validates_shapes():
    with pytest.raises(ValidationError):
        CalibrationSet(np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(ValidationError):
        CalibrationSet(np.zeros((2, 1)), np.array([1.0, np.nan]))
    c = CalibrationSet(np.arange(3.0), np.ones(3))
    assert c.x.shape == (3, 1) and c.n == 3 and c.p == 1


# -- bases ------------------------------------------------------------------


def test_intercept_basis_is_one_everywhere():
    b = BasisSpec.intercept()
    assert np.array_equal(evaluate_basis(b, [0.3]), [1.0])
    assert np.array_equal(b.evaluate(np.array([[0.3], [-7.0]])), np.ones((2, 1)))


def test_intercept_plus_indicator():
    b = BasisSpec((Column("intercept"), Column("group-indicator", group=GroupPredicate(0, 1.0, 2.0))))
    assert np.array_equal(b.evaluate(np.array([[1.5]])), [[1.0, 1.0]])
    assert np.array_equal(b.evaluate(np.array([[2.5]])), [[1.0, 0.0]])


def test_subinterval_groups_on_half_grid():
    groups = interval_groups(np.arange(0, 5.01, 0.5))
    assert len(groups) == 55
    row = BasisSpec.groups(groups).evaluate(np.array([[0.75]]))[0]
    expect = [1.0 if g.lower <= 0.75 <= g.upper else 0.0 for g in groups]
    assert np.array_equal(row, expect)
    # subintervals [a, b] with a in {0, 0.5} and b >= 1
    assert row.sum() == 2 * 9


def test_group_predicate_closedness():
    g = GroupPredicate(0, 0.0, 1.0, lower_closed=False, upper_closed=True)
    assert np.array_equal(g(np.array([[0.0], [0.5], [1.0]])), [0.0, 1.0, 1.0])


def test_basis_rejects_missing_feature():
    b = BasisSpec.linear(3)
    with pytest.raises(ValidationError):
        b.evaluate(np.zeros((2, 2)))


def test_sign_indicator_basis():
    b = BasisSpec.sign_indicators(2)
    z = b.evaluate(np.array([[1.0, -1.0], [-0.5, 0.2]]))
    assert np.array_equal(z, [[1, 1, 0], [1, 0, 1]])


def test_basis_json_roundtrip_and_presets():
    b = BasisSpec(
        (
            Column("intercept"),
            Column("raw-feature", feature=1),
            Column("group-indicator", group=GroupPredicate(0, -1.0, 2.0, lower_closed=False)),
            Column("gaussian", mu=(0.5, 0.0), sigma=0.3),
        )
    )
    x = np.random.default_rng(0).normal(size=(6, 2))
    b2 = BasisSpec.from_dict(b.to_dict())
    assert np.array_equal(b.evaluate(x), b2.evaluate(x))
    assert BasisSpec.from_dict({"preset": "linear", "p": 2}).d == 3
    assert BasisSpec.from_dict({"preset": "interval-groups", "endpoints": [0, 1, 2]}).d == 3
    assert BasisSpec.from_dict({"columns": ["intercept"]}).d == 1
    with pytest.raises(ValidationError):
        BasisSpec.from_dict({"preset": "linear"})
    with pytest.raises(ValidationError):
        BasisSpec.from_dict({"columns": [{"linear": 1}]})


def test_custom_column_is_not_serializable():
    b = BasisSpec((Column("custom", func=lambda x: x[:, 0] ** 2),))
    assert np.allclose(b.evaluate(np.array([[2.0]])), [[4.0]])
    with pytest.raises(ValidationError):
        b.to_dict()


# -- split conformal --------------------------------------------------------


def test_split_conformal_examples():
    s = np.arange(1.0, 10.0)
    assert split_conformal_threshold(s, 0.1) == 9.0
    assert split_conformal_threshold([5.0], 0.6) == 5.0
    assert split_conformal_threshold(s, 0.05) == math.inf


@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40),
    st.floats(0.01, 0.99),
)
def test_split_conformal_matches_counting_definition(s, alpha):
    assert split_conformal_threshold(s, alpha) == order_stat_quantile(s, alpha)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(0.02, 0.98))
def test_split_conformal_is_permutation_invariant(s, alpha):
    rng = np.random.default_rng(len(s))
    assert split_conformal_threshold(s, alpha) == split_conformal_threshold(rng.permutation(s), alpha)


# -- kernels ----------------------------------------------------------------


def test_gaussian_gram_matches_formula():
    x = np.array([[0.0], [1.0], [3.0]])
    k = KernelSpec("gaussian", 0.1, gamma=0.5).gram(x)
    assert k[0, 1] == pytest.approx(math.exp(-0.5))
    assert k[0, 2] == pytest.approx(math.exp(-4.5))
    assert np.allclose(np.diag(k), 1.0)


def test_polynomial_gram_matches_formula():
    x = np.array([[1.0, 2.0], [0.5, -1.0]])
    k = KernelSpec("polynomial", 1.0, c=1.0, degree=2).gram(x)
    assert k[0, 1] == pytest.approx((0.5 - 2.0 + 1.0) ** 2)


def test_check_psd_rejects_indefinite():
    with pytest.raises(ValidationError):
        check_psd(np.array([[1.0, 2.0], [2.0, 1.0]]))
    check_psd(np.eye(3))


def test_kernel_spec_validation_and_json():
    with pytest.raises(ValidationError):
        KernelSpec("gaussian", 0.0)
    with pytest.raises(ValidationError):
        KernelSpec("laplace", 1.0)
    k = regularizer_from_dict({"family": "gaussian", "gamma": 12.5, "lambda": 0.005})
    assert isinstance(k, KernelSpec) and k.lam == 0.005
    assert regularizer_from_dict(k.to_dict()) == k
    lip = regularizer_from_dict({"family": "lipschitz", "lambda": 0.2})
    assert isinstance(lip, LipschitzSpec) and lip.lam == 0.2
    assert regularizer_from_dict(lip.to_dict()) == lip


# -- realized sets ----------------------------------------------------------


def test_absolute_residual_interval():
    pi = realize_set(ScoreFunction("absolute-residual"), 9.0, prediction=1.0)
    assert pi.realized == (-8.0, 10.0)
    assert realize_set(ScoreFunction("absolute-residual"), -1.0, prediction=1.0).empty


def test_identity_set_is_half_line_and_empty_at_minus_inf():
    sf = ScoreFunction("identity")
    assert realize_set(sf, 2.0).realized == (-math.inf, 2.0)
    assert realize_set(sf, -math.inf).empty


def test_aps_set_lists_labels():
    pi = realize_set(ScoreFunction("aps-classification"), 0.5, prediction=[0.5, 0.3, 0.2])
    assert pi.realized == (0, 1)


def test_two_sided_crossing_is_explicitly_empty():
    sf = ScoreFunction("signed-residual")
    pi = realize_two_sided(sf, 1.0, -1.0, prediction=0.0)
    assert pi.empty and pi.realized is None
    ok = realize_two_sided(sf, -1.0, 2.0, prediction=3.0)
    assert ok.realized == (2.0, 5.0)
    with pytest.raises(ValidationError):
        realize_two_sided(ScoreFunction("absolute-residual"), 0.0, 1.0, prediction=0.0)
