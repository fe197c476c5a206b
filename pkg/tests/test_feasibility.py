import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feasregions.dynamics import BestEffortPolicy, ConstantPolicy, braking
from feasregions.feasibility import (
    BackupRule,
    NonConvergenceError,
    backup_values,
    ca_predicates,
    cdf_recursion_residual,
    cdf_rollout,
    cdf_trajectory,
    cvf_rollout,
    cvf_values,
    fixed_point_solve,
    hjr_rollout,
    risky_backup,
    self_consistency_residual,
)
from feasregions.fields import AnalyticField, FieldError, TabularField, hjr_braking_analytic
from feasregions.grid import braking_grid

SPEC = braking()
BEST = BestEffortPolicy(SPEC)
ZERO = ConstantPolicy(SPEC)


def test_hjr_analytic_values():
    F = hjr_braking_analytic(-10.0)
    assert F(np.array([5.0, 10.0])) == pytest.approx(0.0, abs=1e-12)
    assert F(np.array([5.0, 0.0])) == -5.0
    assert F(np.array([0.0, 0.0])) == 0.0
    with pytest.raises(FieldError):
        hjr_braking_analytic(1.0)


def test_cvf_examples():
    assert cvf_rollout(SPEC, ZERO, [3.0, 0.0]) == 0.0
    c = np.zeros((1, 10))
    c[0, 0] = 1
    assert cvf_values(c, 0.99)[0] == 1.0
    c[0, 1] = 1
    assert cvf_values(c, 0.99)[0] == pytest.approx(1.99, abs=1e-15)


def test_hjr_rollout_examples():
    assert hjr_rollout(SPEC, BEST, [5.0, 10.0]) == pytest.approx(0.0, abs=1e-9)
    assert hjr_rollout(SPEC, BEST, [10.0, 0.0]) == -10.0
    assert hjr_rollout(SPEC, BEST, [0.5, 10.0]) >= 0.5


def test_cdf_examples():
    assert cdf_rollout(SPEC, ZERO, [-1.0, 0.0]) == 1.0
    assert cdf_rollout(SPEC, BEST, [10.0, 5.0]) == 0.0
    # d = 0.25, 0.15, 0.05, -0.05: first violation at step 3
    assert cdf_rollout(SPEC, ZERO, [0.25, 1.0]) == pytest.approx(0.99**3, abs=1e-15)


def test_cdf_residual_exactly_zero():
    c = (np.random.default_rng(0).uniform(size=(20, 50)) < 0.1).astype(float)
    F = cdf_trajectory(c, 0.99)
    assert cdf_recursion_residual(c, F, 0.99).max() == 0.0


def test_gamma_range():
    with pytest.raises(ValueError):
        cvf_rollout(SPEC, ZERO, [1.0, 0.0], gamma=1.0)
    with pytest.raises(ValueError):
        BackupRule("cvf", SPEC, gamma=0.0)
    with pytest.raises(ValueError):
        BackupRule("q", SPEC)


def test_backup_constant_field_fixed_point():
    rule = BackupRule("hjr_discounted", SPEC, 0.99, policy=BEST)
    x = np.array([[2.0, 0.0]])
    const = AnalyticField(lambda s: 0.0 * s[..., 0] - 2.0)
    assert backup_values(rule, const, x)[0] == pytest.approx(-2.0, abs=1e-12)


def test_cvf_absorbing_safe_value():
    rule = BackupRule("cvf", SPEC, policy=ZERO)
    zero = AnalyticField(lambda s: 0.0 * s[..., 0])
    assert backup_values(rule, zero, np.array([[4.0, 0.0]]))[0] == 0.0


def test_cdf_all_violating_grid():
    from feasregions.grid import StateGrid

    g = StateGrid.regular([(-5.0, -1.0), (0.0, 4.0)], 1.0)
    res = fixed_point_solve(BackupRule("cdf", SPEC, policy=ZERO), g)
    assert np.all(res.field.values == 1.0)
    assert res.iterations == 1


def test_hjr_fixed_point_matches_analytic_coarse():
    g = braking_grid(0.5)
    res = fixed_point_solve(BackupRule("hjr_discounted", SPEC, 0.99), g, tol=1e-6)
    F = res.field
    X = g.flat_states()
    ours = F.values.ravel() <= 0
    truth = np.asarray(hjr_braking_analytic()(X)) <= 0
    band = g.boundary_band(truth.reshape(g.shape)).ravel()
    assert np.all(ours[~band] == truth[~band])
    # contraction: nonincreasing residuals after a short burn-in
    h = np.array(res.history[5:])
    assert np.all(np.diff(h) <= 1e-12)
    assert self_consistency_residual(BackupRule("hjr_discounted", SPEC, 0.99), F, X) <= 1e-6


def test_analytic_hjr_self_consistency_under_best_effort():
    rule = BackupRule("hjr_discounted", SPEC, 0.99, policy=BEST)
    X = np.random.default_rng(0).uniform([1, 1], [10, 10], size=(500, 2))
    # field dominated by h only near d = 0; residual is bounded by one step of travel
    assert self_consistency_residual(rule, hjr_braking_analytic(), X) <= SPEC.dt * 10.0


def test_fixed_point_nonconvergence():
    with pytest.raises(NonConvergenceError):
        fixed_point_solve(BackupRule("hjr_discounted", SPEC, 0.99), braking_grid(1.0), max_iters=2)


def test_tabular_field_counts_outside_queries():
    g = braking_grid(1.0)
    F = TabularField(g, np.zeros(g.shape))
    F(np.array([[20.0, 3.0], [1.0, 1.0]]))
    assert F.outside_queries == 1
    with pytest.raises(FieldError):
        TabularField(g, np.full(g.shape, np.nan))


def test_risky_backup_returns_tabular():
    g = braking_grid(2.0)
    out = risky_backup(BackupRule("cvf", SPEC, policy=BEST), TabularField(g, np.zeros(g.shape)), g)
    assert isinstance(out, TabularField) and out.values.shape == g.shape


@settings(max_examples=60, deadline=None)
@given(d=st.floats(-2, 10), v=st.floats(0, 10))
def test_ca_predicates_agree(d, v):
    for pol in (BEST, ZERO):
        rep = ca_predicates(SPEC, pol, np.array([[d, v]]), T_max=200)
        assert rep.agree.all()
        assert rep.cdf_residual == 0.0


@settings(max_examples=60, deadline=None)
@given(d=st.floats(-2, 10), v=st.floats(0, 10))
def test_cdf_bounded(d, v):
    val = cdf_rollout(SPEC, ZERO, [d, v], T_max=100)
    assert 0.0 <= val <= 1.0
