"""Executable theorem checks over braking region maps, shared by ``verify`` and the test-suite.

Every check returns a ``Check`` with a pass flag and machine-readable details
(counts and up to ``MAX_REPORTED`` counterexample cells). Region maps are cached
per constraint so suites that share a map sweep it once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .constraints import build_constraint, check_not_weaker, constant_constraint, si_design_rule_check
from .dynamics import VIOLATION_TOL, BestEffortPolicy, rollout_batch
from .feasibility import ca_predicates
from .fields import SIParams
from .grid import braking_grid
from .ocp import FEAS_TOL, OcpSpec, SolverConfig, mpc_policy
from .regions import (
    MAX_REPORTED,
    Label,
    check_containment,
    check_equivalence_conditions,
    check_forward_invariance,
    check_monotonicity,
    constrained_set,
    differing_cells,
    label_policy_region,
    label_state_region,
    max_efr_braking,
)

log = logging.getLogger(__name__)

SI_RULE_OK = SIParams(n_exp=0.5, k=0.23)
SI_RULE_BAD = SIParams(n_exp=2.0, k=5.0)
POINTWISE_N = (2, 3, 5, 10)
CBF_K = (0.5, 0.2, 0.1, 0.05)


@dataclass
class Check:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def as_dict(self):
        return {"name": self.name, "passed": self.passed, "details": self.details}


def _cells(mask):
    return [list(map(int, c)) for c in np.argwhere(mask)[:MAX_REPORTED]]


def constraint_key(family, value=None):
    if family == "pointwise":
        return f"pointwise_n{value}"
    if family == "cbf":
        return f"cbf_k{value}"
    if family == "si":
        p = value or SI_RULE_OK
        return f"si_n{p.n_exp}_k{p.k}"
    return family


class BrakingLab:
    """Lazily swept braking maps keyed by constraint and policy."""

    def __init__(self, spec, grid=None, N=10, T_max=500, jobs=1, feas_tol=FEAS_TOL):
        if spec.name != "braking":
            raise ValueError("the theorem suites need the braking system (analytic maximum EFR)")
        self.spec = spec
        self.grid = grid or braking_grid()
        self.N, self.T_max, self.jobs, self.feas_tol = N, T_max, jobs, feas_tol
        self.solver = SolverConfig(feas_tol=feas_tol)
        self._g, self._maps = {}, {}

    def constraint(self, family, value=None):
        key = constraint_key(family, value)
        if key not in self._g:
            if family == "pointwise":
                g = build_constraint(self.spec, "pointwise", n=value)
            elif family == "cbf":
                g = build_constraint(self.spec, "cbf", k=value)
            elif family == "si":
                g = build_constraint(self.spec, "si", si=value or SI_RULE_OK)
            else:
                g = build_constraint(self.spec, "hjr")
            self._g[key] = g
        return self._g[key]

    def mpc(self, family, value=None):
        return mpc_policy(OcpSpec(self.spec, self.constraint(family, value), N=self.N, solver=self.solver))

    def policy(self, family, value, which):
        return self.mpc(family, value) if which == "mpc" else BestEffortPolicy(self.spec)

    def policy_map(self, family, value=None, which="mpc"):
        key = (constraint_key(family, value), which)
        if key not in self._maps:
            log.info("sweeping %s / %s", *key)
            self._maps[key] = label_policy_region(self.spec, self.constraint(family, value),
                                                  self.policy(family, value, which), self.grid,
                                                  self.T_max, self.feas_tol, self.jobs)
        return self._maps[key]

    def state_map(self, family, value=None):
        key = (constraint_key(family, value), "state")
        if key not in self._maps:
            log.info("sweeping %s / state", key[0])
            self._maps[key] = label_state_region(self.spec, self.constraint(family, value), self.grid,
                                                 self.solver, self.N, self.T_max, self.feas_tol, self.jobs)
        return self._maps[key]

    @property
    def max_efr(self):
        return max_efr_braking(self.grid, self.spec.a_brk)

    @property
    def x_cstr(self):
        return constrained_set(self.spec, self.grid)


def all_constraints():
    return ([("pointwise", n) for n in POINTWISE_N] + [("cbf", k) for k in CBF_K]
            + [("si", SI_RULE_OK), ("hjr", None)])


# ---------------------------------------------------------------- suites


def containment_suite(lab: BrakingLab, constraints=None, policies=("mpc", "best_effort")):
    """EFR(pi) in IFR(pi) in IFR in X_cstr and EFR(pi) in max EFR, cellwise."""
    out = []
    cstr, mx = lab.x_cstr, lab.max_efr
    E, I = Label.ENDLESSLY_FEASIBLE, Label.INITIALLY_FEASIBLE
    for family, value in constraints or all_constraints():
        key = constraint_key(family, value)
        state = lab.state_map(family, value)
        reports = [check_containment(state, cstr, I, f"{key}: IFR in X_cstr", level_b=E)]
        for which in policies:
            pol = lab.policy_map(family, value, which)
            reports += [
                check_containment(pol, pol, E, f"{key}/{which}: EFR(pi) in IFR(pi)", level_b=I),
                check_containment(pol, state, I, f"{key}/{which}: IFR(pi) in IFR"),
                check_containment(pol, mx, E, f"{key}/{which}: EFR(pi) in max EFR"),
            ]
        for r in reports:
            out.append(Check(r.name, r.holds, {"n_violations": r.n_violations, "count_a": r.count_a,
                                               "count_b": r.count_b, "cells": r.violations}))
    return out


def monotonicity_suite(lab: BrakingLab, horizons=POINTWISE_N, coverage=0.99):
    maps = [lab.policy_map("pointwise", n) for n in horizons]
    rep = check_monotonicity(maps)
    mx = int(lab.max_efr.efr.sum())
    last = rep.efr_counts[-1]
    out = [
        Check("pointwise MPC: EFR nondecreasing, IFR nonincreasing in n", rep.holds and rep.counts_hold,
              {"horizons": list(horizons), "efr_counts": rep.efr_counts, "ifr_counts": rep.ifr_counts,
               "failures": rep.failures}),
        Check(f"pointwise n={horizons[-1]} EFR covers >= {coverage:.0%} of max EFR", last >= coverage * mx,
              {"efr": last, "max_efr": mx, "fraction": last / mx}),
    ]
    # negative control: reversing the order must break monotonicity
    shuffled = check_monotonicity(maps[::-1])
    out.append(Check("negative control: reversed horizon order fails monotonicity",
                     not (shuffled.holds and shuffled.counts_hold),
                     {"efr_counts": shuffled.efr_counts, "ifr_counts": shuffled.ifr_counts}))
    return out


def _ifr_only_outside_band(m):
    gap = m.ifr & ~m.efr
    return gap & ~m.grid.boundary_band(m.ifr)


def equivalence_suite(lab: BrakingLab, ks=CBF_K, conditions=True):
    """CIS-type constraints give IFR = EFR (one-cell band); the rule-violating SI shows a gap."""
    out = []
    for family, value in [("cbf", k) for k in ks] + [("si", SI_RULE_OK)]:
        key = constraint_key(family, value)
        for kind, m in (("mpc", lab.policy_map(family, value)), ("state", lab.state_map(family, value))):
            bad = _ifr_only_outside_band(m)
            out.append(Check(f"{key}/{kind}: IFR = EFR up to a one-cell band", not bad.any(),
                             {"ifr": int(m.ifr.sum()), "efr": int(m.efr.sum()),
                              "n_outside_band": int(bad.sum()), "cells": _cells(bad)}))
        if conditions:
            rep = check_equivalence_conditions(lab.state_map(family, value), lab.spec,
                                               lab.constraint(family, value), lab.solver, N=lab.N)
            out.append(Check(f"{key}: every IFR cell has an action staying in the IFR", rep.holds,
                             {"n_failures": rep.n_failures, "n_ifr": rep.n_ifr, "cells": rep.failures}))
    rule_ok = si_design_rule_check(SI_RULE_OK, a_brk=lab.spec.a_brk)
    rule_bad = si_design_rule_check(SI_RULE_BAD, a_brk=lab.spec.a_brk)
    out.append(Check("SI design rule: (0.5, 0.23) passes, (2, 5) fails", rule_ok and not rule_bad,
                     {"rule_ok": rule_ok, "rule_bad": rule_bad}))
    m = lab.policy_map("si", SI_RULE_BAD)
    gap = m.ifr & ~m.efr
    out.append(Check(f"{constraint_key('si', SI_RULE_BAD)}/mpc: EFR strictly inside IFR", bool(gap.any()),
                     {"ifr": int(m.ifr.sum()), "efr": int(m.efr.sum()), "gap": int(gap.sum())}))
    # CBF with k = -1/(2 a_brk) has the same zero-sublevel set as the HJ function
    k_eq = -1.0 / (2.0 * lab.spec.a_brk)
    for kind, a, b in (("mpc", lab.policy_map("cbf", k_eq), lab.policy_map("hjr")),
                       ("state", lab.state_map("cbf", k_eq), lab.state_map("hjr"))):
        diff = differing_cells(a, b)
        out.append(Check(f"cbf_k{k_eq}/{kind} maps equal the HJR maps", not diff.any(),
                         {"n_differing": int(diff.sum()), "cells": _cells(diff)}))
    return out


def cis_invariance_suite(lab: BrakingLab, T=100, safety_steps=300):
    """Forward invariance of CIS-type EFRs under MPC, and violation-free MPC rollouts."""
    out = []
    for family, value in [("cbf", k) for k in CBF_K] + [("si", SI_RULE_OK), ("hjr", None)]:
        key = constraint_key(family, value)
        rep = check_forward_invariance(lab.state_map(family, value), lab.spec, lab.mpc(family, value), T)
        out.append(Check(f"{key}: EFR forward invariant under MPC", rep.holds,
                         {"n_failures": rep.n_failures, "n_outside_band": rep.n_failures_outside_band,
                          "cells": rep.failures}))
    out.append(mpc_safety_check(lab, safety_steps))
    return out


def mpc_safety_check(lab: BrakingLab, steps=300):
    """HJR MPC from every node strictly inside the maximum EFR: h <= 0 at every real-time step."""
    mx = lab.max_efr.efr
    inner = mx & ~lab.grid.boundary_band(mx)
    X = lab.grid.states()[inner]
    states, _, viol = rollout_batch(lab.spec, lab.mpc("hjr"), X, steps)
    h = np.asarray(lab.spec.h(states))
    bad = (h > VIOLATION_TOL).any(axis=1)
    return Check(f"HJR MPC: {steps}-step rollouts from inside max EFR never violate h", not bad.any(),
                 {"n_starts": int(len(X)), "n_violating": int(bad.sum()),
                  "max_h": float(h.max()) if h.size else 0.0})


def ca_equivalence_suite(lab: BrakingLab, samples=1000, seed=0, gamma=0.99, T_max=500):
    """CVF = 0, HJR <= 0 and CDF = 0 agree on sampled states; exact CDF recursion along rollouts."""
    rng = np.random.default_rng(seed)
    X = rng.uniform([0.0, 0.0], [10.0, 10.0], size=(samples, 2))
    out = []
    for name, pol in (("best_effort", BestEffortPolicy(lab.spec)), ("mpc", lab.mpc("hjr"))):
        rep = ca_predicates(lab.spec, pol, X, gamma, T_max)
        agree = rep.agree
        out.append(Check(f"{name}: CVF/HJR/CDF safe predicates agree", bool(agree.all()),
                         {"samples": samples, "n_disagree": int((~agree).sum()),
                          "n_safe": int(rep.hjr_safe.sum())}))
        out.append(Check(f"{name}: CDF recursion residual is exactly 0", rep.cdf_residual == 0.0,
                         {"residual": rep.cdf_residual}))
    return out


def negative_controls(lab: BrakingLab):
    """A constraint g == -1 accepts constraint-violating states and must be flagged."""
    # the analysis grid has d >= 0 everywhere, so extend it below the obstacle
    X = lab.grid.states().reshape(-1, 2)
    X = np.concatenate([X, X - [10.5, 0.0]])
    bad = check_not_weaker(constant_constraint(-1.0), lab.spec.h, X)
    weak = check_not_weaker(lab.constraint("hjr"), lab.spec.h, X)
    return [
        Check("negative control: g == -1 is caught as weaker than h", len(bad) > 0,
              {"n_counterexamples": int(len(bad)), "examples": bad[:5].tolist()}),
        Check("hjr constraint is not weaker than h", len(weak) == 0, {"n_counterexamples": int(len(weak))}),
    ]


SUITE_FUNCS = {
    "containment": containment_suite,
    "monotonicity": monotonicity_suite,
    "equivalence": equivalence_suite,
    "cis_invariance": cis_invariance_suite,
    "ca_equivalence": ca_equivalence_suite,
}


def run_suites(lab: BrakingLab, names, samples=1000, seed=0, invariance_T=100):
    report = {}
    for name in names:
        if name == "ca_equivalence":
            checks = ca_equivalence_suite(lab, samples, seed)
        elif name == "cis_invariance":
            checks = cis_invariance_suite(lab, invariance_T)
        else:
            checks = SUITE_FUNCS[name](lab)
        report[name] = checks
    report["negative_controls"] = negative_controls(lab)
    return report
