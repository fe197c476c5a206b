import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feasregions.constraints import (
    ConstraintError,
    build_constraint,
    check_not_weaker,
    constant_constraint,
    make_cbf_constraint,
    make_field_constraint,
    make_pointwise,
    make_si_constraint,
    si_design_rule_check,
)
from feasregions.dynamics import braking
from feasregions.fields import SIParams, braking_cbf, hjr_braking_analytic
from feasregions.grid import braking_grid

H = braking().h


def states(*rows):
    return np.array(rows, dtype=float)[None]


def test_pointwise_n0_is_h():
    g = make_pointwise(H, 0)
    assert g.n == 0
    np.testing.assert_allclose(g.evaluate(states([3.0, 1.0])), [[-3.0]])


def test_pointwise_constant_trajectory():
    g = make_pointwise(H, 10)
    s = np.tile([1.0, 0.0], (1, 11, 1))
    np.testing.assert_allclose(g.evaluate(s), -np.ones((1, 11)))


def test_pointwise_prefix_violation():
    g = make_pointwise(H, 2)
    r = g.evaluate(states([3.0, 0.0], [1.0, 0.0], [-0.5, 0.0]))[0]
    np.testing.assert_allclose(r, [-3.0, -1.0, 0.5])
    assert np.argmax(r > 0) == 2


def test_pointwise_needs_enough_states():
    with pytest.raises(ConstraintError):
        make_pointwise(H, 3).evaluate(states([1.0, 0.0]))
    with pytest.raises(ConstraintError):
        make_pointwise(H, -1)


def test_cbf_examples():
    g = make_cbf_constraint(braking_cbf(0.05), 0.1)
    r = g.evaluate(states([5.0, 10.0], [4.0, 9.0]))[0]
    assert r[0] == pytest.approx(0.0, abs=1e-12)
    assert r[1] == pytest.approx(0.05, abs=1e-12)
    r = g.evaluate(states([5.0, 10.0], [5.0, 10.0]))[0]
    np.testing.assert_allclose(r, [0.0, 0.0], atol=1e-12)


def test_cbf_alpha_range():
    with pytest.raises(ConstraintError):
        make_cbf_constraint(braking_cbf(0.05), 0.0)


def test_si_examples():
    g = make_si_constraint(SIParams(), H)
    # phi = 0.12 - sqrt(d) at v = 0: d = 0.0256 -> -0.04, d = 0.0121 -> 0.01
    r = g.evaluate(states([0.0256, 0.0], [0.0121, 0.0]))[0]
    assert r[1] == pytest.approx(0.01, abs=1e-12)
    d0 = 0.12**2
    r = g.evaluate(states([d0, 0.0], [d0, 0.0]))[0]
    np.testing.assert_allclose(r, [0.0, 0.0], atol=1e-12)


def test_si_design_rule():
    assert si_design_rule_check(SIParams(n_exp=0.5, k=0.23)) is True
    assert si_design_rule_check(SIParams(n_exp=2, k=5)) is False
    assert si_design_rule_check(SIParams(n_exp=1, k=1e9)) is True


def test_field_constraint_examples():
    g = make_field_constraint(hjr_braking_analytic(), "two_step")
    assert g.n == 1 and g.closed
    assert float(g.g0(np.array([5.0, 10.0]))) == pytest.approx(0.0, abs=1e-12)
    assert float(g.g0(np.array([4.9, 10.0]))) == pytest.approx(0.1, abs=1e-12)


def test_field_equal_h_reduces_to_pointwise():
    from feasregions.fields import AnalyticField

    F = AnalyticField(H, name="h")
    s = np.random.default_rng(0).uniform(-2, 10, size=(50, 2, 2))
    for mode, n in (("first_step", 0), ("two_step", 1)):
        np.testing.assert_array_equal(make_field_constraint(F, mode).evaluate(s),
                                      make_pointwise(H, n).evaluate(s))
    with pytest.raises(ConstraintError):
        make_field_constraint(F, "three_step")


def test_not_weaker_checks():
    X = braking_grid(0.5).states().reshape(-1, 2)
    assert len(check_not_weaker(make_pointwise(H, 3), H, X)) == 0
    assert len(check_not_weaker(make_cbf_constraint(braking_cbf(0.2)), H, X)) == 0
    Xneg = np.concatenate([X, X - [10.5, 0.0]])
    bad = check_not_weaker(constant_constraint(-1.0), H, Xneg)
    assert len(bad) == len(X)
    assert np.all(bad[:, 0] < 0)
    with pytest.raises(ConstraintError):
        check_not_weaker(make_pointwise(H, 0), H, np.empty((0, 2)))


@pytest.mark.parametrize("family", ["pointwise", "cbf", "si", "hjr"])
def test_built_constraints_not_weaker(family):
    X = np.random.default_rng(1).uniform([-5, 0], [10, 10], size=(2000, 2))
    assert len(check_not_weaker(build_constraint(braking(), family), H, X)) == 0


@settings(max_examples=200, deadline=None)
@given(d=st.floats(-10, 10), v=st.floats(0, 10), k=st.floats(0.01, 1))
def test_cbf_zero_sublevel_implies_safe(d, v, k):
    if braking_cbf(k)(np.array([d, v])) <= 0:
        assert H(np.array([d, v])) <= 0


@settings(max_examples=200, deadline=None)
@given(n=st.floats(0.1, 3), k=st.floats(0.05, 10))
def test_design_rule_matches_formula(n, k):
    lhs = n * (0.12 + 10 * k) ** ((n - 1) / n) / k
    if abs(lhs - 1.0) > 1e-9:
        assert si_design_rule_check(SIParams(n_exp=n, k=k)) == (lhs <= 1.0)
