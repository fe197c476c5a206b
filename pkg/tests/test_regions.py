import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feasregions.constraints import build_constraint, constant_constraint
from feasregions.dynamics import BestEffortPolicy, braking
from feasregions.fields import braking_cbf
from feasregions.grid import StateGrid, braking_grid
from feasregions.ocp import OcpSpec, mpc_policy
from feasregions.regions import (
    Label,
    RegionMap,
    check_containment,
    check_equivalence_conditions,
    check_forward_invariance,
    check_monotonicity,
    constrained_set,
    differing_cells,
    label_policy_region,
    label_state_region,
    max_efr_braking,
    region_stats,
)

SPEC = braking()
GRID = braking_grid(0.25)


def mpc(g, N=10):
    return mpc_policy(OcpSpec(SPEC, g, N=N))


@pytest.fixture(scope="module")
def maps():
    out = {}
    for n in (2, 3, 5, 10):
        g = build_constraint(SPEC, "pointwise", n=n)
        out[f"pw{n}"] = label_policy_region(SPEC, g, mpc(g), GRID, T_max=200)
    g = build_constraint(SPEC, "hjr")
    out["hjr"] = label_policy_region(SPEC, g, mpc(g), GRID, T_max=200)
    return out


def test_max_efr_examples():
    g = StateGrid.regular([(4.9, 5.0), (9.9, 10.0)], 0.1)
    m = max_efr_braking(g)
    assert m.labels[0, 1] == Label.INFEASIBLE and m.labels[1, 1] == Label.ENDLESSLY_FEASIBLE
    assert max_efr_braking(braking_grid(1.0)).labels[0, 0] == Label.ENDLESSLY_FEASIBLE


def test_max_efr_is_the_predicate():
    g = braking_grid(0.1)
    X = g.states()
    np.testing.assert_array_equal(max_efr_braking(g).efr, X[..., 0] >= X[..., 1] ** 2 / 20)


def test_max_efr_fraction_matches_area():
    g = braking_grid(0.1)
    st_ = region_stats(max_efr_braking(g))
    assert st_["efr"] == 8455
    assert st_["endlessly_feasible_fraction"] == pytest.approx(1 - 1 / 6, abs=0.02)


def test_hjr_mpc_boundary_matches_analytic(maps):
    mx = max_efr_braking(GRID)
    assert not differing_cells(maps["hjr"], mx, exclude_band=True, reference=mx.efr).any()


def test_pointwise_n2_blue_band(maps):
    m = maps["pw2"]
    assert (m.labels == Label.INITIALLY_FEASIBLE).sum() > 0


def test_containment_chain(maps):
    xc = constrained_set(SPEC, GRID)
    mx = max_efr_braking(GRID)
    for m in maps.values():
        assert check_containment(m, m, Label.ENDLESSLY_FEASIBLE, level_b=Label.INITIALLY_FEASIBLE).holds
        assert check_containment(m, xc).holds
        assert check_containment(m, mx, Label.ENDLESSLY_FEASIBLE).holds


def test_monotonicity(maps):
    chain = [maps[f"pw{n}"] for n in (2, 3, 5, 10)]
    assert check_monotonicity(chain).holds
    assert check_monotonicity(chain[:1]).holds
    bad = check_monotonicity(chain[::-1])
    assert not bad.holds and bad.failures


def test_always_violating_toy():
    m = label_policy_region(SPEC, constant_constraint(1.0), BestEffortPolicy(SPEC), GRID, T_max=5)
    assert np.all(m.labels == Label.INFEASIBLE)


def test_state_region_cbf_equals_sublevel_set():
    g = build_constraint(SPEC, "cbf", k=0.05)
    m = label_state_region(SPEC, g, GRID)
    assert m.metadata["efr_method"] == "equivalence"
    B = braking_cbf(0.05)(GRID.states())
    np.testing.assert_array_equal(m.efr, B <= 1e-6)
    np.testing.assert_array_equal(m.ifr, m.efr)


def test_state_region_pointwise_n0():
    m = label_state_region(SPEC, build_constraint(SPEC, "pointwise", n=0), GRID)
    assert m.ifr.all()


def test_equivalence_conditions():
    g = build_constraint(SPEC, "hjr")
    rep = check_equivalence_conditions(label_state_region(SPEC, g, GRID), SPEC, g)
    assert rep.holds and rep.n_failures == 0
    g2 = build_constraint(SPEC, "pointwise", n=2)
    m2 = label_state_region(SPEC, g2, GRID)
    rep2 = check_equivalence_conditions(m2, SPEC, g2)
    assert rep2.n_failures > 0
    fail = np.zeros(GRID.shape, dtype=bool)
    fail[tuple(np.array(rep2.failures).T)] = True
    assert not (fail & max_efr_braking(GRID).efr).any()
    empty = RegionMap(GRID, np.zeros(GRID.shape))
    assert check_equivalence_conditions(empty, SPEC, g).n_failures == 0


def test_forward_invariance(maps):
    g = build_constraint(SPEC, "hjr")
    assert check_forward_invariance(maps["hjr"], SPEC, mpc(g), T=50).holds


def test_region_stats_all_infeasible():
    s = region_stats(RegionMap(GRID, np.zeros(GRID.shape)))
    assert (s["infeasible_fraction"], s["initially_feasible_fraction"], s["endlessly_feasible_fraction"]) == (1.0, 0.0, 0.0)


def test_grid_mismatch_rejected():
    with pytest.raises(ValueError):
        check_containment(max_efr_braking(GRID), max_efr_braking(braking_grid(0.5)))
    with pytest.raises(ValueError):
        RegionMap(GRID, np.full(GRID.shape, 3))


def test_parallel_sweep_identical():
    g = build_constraint(SPEC, "pointwise", n=3)
    grid = braking_grid(0.5)
    a = label_policy_region(SPEC, g, mpc(g), grid, T_max=100, jobs=1)
    b = label_policy_region(SPEC, g, mpc(g), grid, T_max=100, jobs=2)
    np.testing.assert_array_equal(a.labels, b.labels)


@settings(max_examples=50, deadline=None)
@given(labels=st.lists(st.integers(0, 2), min_size=25, max_size=25))
def test_label_lattice(labels):
    g = StateGrid.regular([(0.0, 4.0), (0.0, 4.0)], 1.0)
    m = RegionMap(g, np.array(labels))
    s = region_stats(m)
    assert s["efr"] <= s["ifr"] <= s["total"]
    assert check_containment(m, m, Label.ENDLESSLY_FEASIBLE, level_b=Label.INITIALLY_FEASIBLE).holds
    assert sum(m.counts().values()) == 25
