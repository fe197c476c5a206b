"""Grid sweeps labelling initially / endlessly feasible states, plus theorem checks on the maps."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
import multiprocessing as mp

import numpy as np

from .constraints import VirtualTimeConstraint
from .dynamics import clamp, step
from .fields import hjr_braking_analytic
from .grid import StateGrid
from .ocp import (
    FEAS_TOL,
    OcpSpec,
    SolverConfig,
    lazy_first_action,
    policy_feasibility,
    solve_ocp,
)

log = logging.getLogger(__name__)

MAX_REPORTED = 100


class Label(IntEnum):
    INFEASIBLE = 0
    INITIALLY_FEASIBLE = 1
    ENDLESSLY_FEASIBLE = 2


@dataclass
class RegionMap:
    grid: StateGrid
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(self.grid.shape)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 2):
            raise ValueError("labels must be 0, 1 or 2")

    @property
    def ifr(self):
        return self.labels >= Label.INITIALLY_FEASIBLE

    @property
    def efr(self):
        return self.labels == Label.ENDLESSLY_FEASIBLE

    def at_least(self, level):
        return self.labels >= int(level)

    def counts(self):
        return {lab.name.lower(): int(np.count_nonzero(self.labels == lab)) for lab in Label}


# ---------------------------------------------------------------- sweeps

_WORK = {}


def _run_chunk(args):
    key, lo, hi = args
    fn, X = _WORK[key]
    return fn(X[lo:hi])


def _map_chunks(fn, X, jobs, chunk=None):
    """Apply ``fn`` to row chunks of X, optionally in forked workers; results in input order."""
    jobs = max(1, int(jobs or 1))
    if jobs == 1 or len(X) < 2:
        return [fn(X)]
    chunk = chunk or int(np.ceil(len(X) / jobs))
    bounds = [(i, min(i + chunk, len(X))) for i in range(0, len(X), chunk)]
    key = id(fn)
    _WORK[key] = (fn, X)
    try:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as ex:
            return list(ex.map(_run_chunk, [(key, lo, hi) for lo, hi in bounds]))
    finally:
        _WORK.pop(key, None)


def _sweep_policy(spec, g, policy, X, T_max, feas_tol):
    """Labels and truncation flags for rows of X under ``policy``."""
    M = len(X)
    labels = np.zeros(M, dtype=np.int8)
    truncated = np.zeros(M, dtype=bool)
    active = np.arange(M)
    x = X.copy()
    for t in range(T_max + 1):
        if len(active) == 0:
            break
        ok, u0, _ = policy_feasibility(spec, g, policy, x, feas_tol)
        bad = ~ok
        labels[active[bad]] = Label.INFEASIBLE if t == 0 else Label.INITIALLY_FEASIBLE
        active, x, u0 = active[ok], x[ok], u0[ok]
        if t == T_max:
            labels[active] = Label.ENDLESSLY_FEASIBLE
            truncated[active] = True
            break
        x_next = step(spec, x, clamp(spec, u0))
        rest = np.all(x_next == x, axis=-1)
        labels[active[rest]] = Label.ENDLESSLY_FEASIBLE
        keep = ~rest
        active, x = active[keep], x_next[keep]
    return labels, truncated


def label_policy_region(spec, g: VirtualTimeConstraint, policy, grid: StateGrid, T_max=500,
                        feas_tol=FEAS_TOL, jobs=1):
    """IFR(pi) / EFR(pi) over the grid.

    A node is initially feasible when pi's n-step virtual plan satisfies g, and
    endlessly feasible when every state of the T_max-step real-time rollout is
    initially feasible for pi. Rollouts stop early at rest (x' == x exactly).
    """
    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    X = grid.flat_states()
    parts = _map_chunks(lambda xs: _sweep_policy(spec, g, policy, xs, T_max, feas_tol), X, jobs)
    labels = np.concatenate([p[0] for p in parts])
    truncated = np.concatenate([p[1] for p in parts])
    meta = {"kind": "policy", "system": spec.name, "policy": getattr(policy, "name", "policy"),
            "T_max": T_max, "feas_tol": feas_tol, "truncated": int(truncated.sum())}
    meta.update(g.describe())
    return RegionMap(grid, labels.reshape(grid.shape), meta)


def _state_ifr(spec, g, X, solver, N):
    p = OcpSpec(spec, g, N=N, solver=solver, feasibility_only=True)
    return solve_ocp(p, X).feasible


class LazyPolicy:
    """Least-effort first action that keeps the OCP feasible; an adversarial initially feasible policy."""

    name = "lazy"

    def __init__(self, ocp):
        self.ocp = ocp

    def plan(self, x, n):
        u0 = lazy_first_action(self.ocp, x)
        # committed continuation: full braking, the plan that certified u0
        acts = np.full((len(u0), max(n, 1), 1), self.ocp.spec.a_brk)
        acts[:, 0] = u0
        return u0, acts

    def __call__(self, x):
        return lazy_first_action(self.ocp, np.atleast_2d(x))


def label_state_region(spec, g: VirtualTimeConstraint, grid: StateGrid, solver: SolverConfig | None = None,
                       N=10, T_max=500, feas_tol=FEAS_TOL, jobs=1):
    """Policy-free IFR plus an endless-feasibility label with the method recorded in metadata.

    * two-step (closed) families: EFR = IFR when the grid certifies that every
      node with g_0 <= 0 is initially feasible (the zero-sublevel set of g_0 is
      then control invariant and any feasible action stays inside it);
    * otherwise: EFR of the lazy adversary, the initially feasible policy that
      brakes least at every step (braking only).
    """
    solver = solver or SolverConfig(feas_tol=feas_tol)
    X = grid.flat_states()
    ifr = np.concatenate(_map_chunks(lambda xs: _state_ifr(spec, g, xs, solver, N), X, jobs))
    g0_ok = np.asarray(g.g0(X)) <= feas_tol
    meta = {"kind": "state", "system": spec.name, "policy": "none", "T_max": T_max, "feas_tol": feas_tol}
    meta.update(g.describe())
    certified = bool(g.closed and np.array_equal(ifr, g0_ok))
    if certified:
        labels = np.where(ifr, Label.ENDLESSLY_FEASIBLE, Label.INFEASIBLE).astype(np.int8)
        meta["efr_method"] = "equivalence"
    else:
        lazy = LazyPolicy(OcpSpec(spec, g, N=N, solver=solver))
        parts = _map_chunks(lambda xs: _sweep_policy(spec, g, lazy, xs, T_max, feas_tol), X, jobs)
        lazy_labels = np.concatenate([p[0] for p in parts])
        labels = np.where(ifr, Label.INITIALLY_FEASIBLE, Label.INFEASIBLE).astype(np.int8)
        labels[ifr & (lazy_labels == Label.ENDLESSLY_FEASIBLE)] = Label.ENDLESSLY_FEASIBLE
        meta["efr_method"] = "lazy_adversary"
    return RegionMap(grid, labels.reshape(grid.shape), meta)


def max_efr_braking(grid: StateGrid, a_brk=-10.0):
    """Analytic maximum EFR: endlessly feasible iff -d - v**2 / (2 a_brk) <= 0."""
    F = hjr_braking_analytic(a_brk)(grid.states())
    labels = np.where(F <= 0, Label.ENDLESSLY_FEASIBLE, Label.INFEASIBLE).astype(np.int8)
    return RegionMap(grid, labels, {"kind": "max_efr", "system": "braking", "a_brk": a_brk})


def constrained_set(spec, grid: StateGrid):
    """X_cstr = {h <= 0} as a map (labelled endlessly feasible so any level compares)."""
    h = np.asarray(spec.h(grid.states()))
    labels = np.where(h <= 0, Label.ENDLESSLY_FEASIBLE, Label.INFEASIBLE).astype(np.int8)
    return RegionMap(grid, labels, {"kind": "constrained_set", "system": spec.name})


# ---------------------------------------------------------------- reports


@dataclass
class ContainmentReport:
    name: str
    holds: bool
    violations: list
    n_violations: int
    count_a: int
    count_b: int

    def as_dict(self):
        return {"name": self.name, "holds": self.holds, "n_violations": self.n_violations,
                "count_a": self.count_a, "count_b": self.count_b, "violations": self.violations}


def _check_grid(a: RegionMap, b: RegionMap):
    if not a.grid.same_as(b.grid):
        raise ValueError("region maps live on different grids")


def check_containment(A: RegionMap, B: RegionMap, level=Label.INITIALLY_FEASIBLE, name="",
                      level_b=None):
    """{A >= level} subset of {B >= level_b} (level_b defaults to level)."""
    _check_grid(A, B)
    sa = A.at_least(level)
    sb = B.at_least(level if level_b is None else level_b)
    bad = sa & ~sb
    cells = [list(map(int, ix)) for ix in np.argwhere(bad)[:MAX_REPORTED]]
    n = int(bad.sum())
    return ContainmentReport(name, n == 0, cells, n, int(sa.sum()), int(sb.sum()))


@dataclass
class MonotonicityReport:
    holds: bool
    counts_hold: bool
    efr_counts: list
    ifr_counts: list
    failures: list

    def as_dict(self):
        return self.__dict__.copy()


def check_monotonicity(maps):
    """EFR sets nondecreasing and IFR sets nonincreasing along ``maps`` (weak to strong)."""
    failures = []
    for i in range(len(maps) - 1):
        a, b = maps[i], maps[i + 1]
        _check_grid(a, b)
        efr_bad = a.efr & ~b.efr
        ifr_bad = b.ifr & ~a.ifr
        if efr_bad.any():
            failures.append({"pair": [i, i + 1], "set": "efr", "n": int(efr_bad.sum()),
                             "cells": [list(map(int, c)) for c in np.argwhere(efr_bad)[:MAX_REPORTED]]})
        if ifr_bad.any():
            failures.append({"pair": [i, i + 1], "set": "ifr", "n": int(ifr_bad.sum()),
                             "cells": [list(map(int, c)) for c in np.argwhere(ifr_bad)[:MAX_REPORTED]]})
    efr = [int(m.efr.sum()) for m in maps]
    ifr = [int(m.ifr.sum()) for m in maps]
    counts_ok = all(x <= y for x, y in zip(efr, efr[1:])) and all(x >= y for x, y in zip(ifr, ifr[1:]))
    return MonotonicityReport(not failures, counts_ok, efr, ifr, failures)


def _action_lattice(spec, levels):
    axes = [np.linspace(lo, hi, levels) for lo, hi in zip(spec.lower, spec.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class EquivalenceReport:
    holds: bool
    failures: list
    n_failures: int
    n_ifr: int

    def as_dict(self):
        return self.__dict__.copy()


def check_equivalence_conditions(map_state: RegionMap, spec, g, solver: SolverConfig | None = None,
                                 levels=21, N=10, map_policy: RegionMap | None = None):
    """Necessary condition for IFR = EFR: from every IFR cell some lattice action reaches the IFR.

    Membership of the successor is decided by a feasibility solve at the successor.
    ``map_policy`` (optional) must share the grid and is only checked for that.
    """
    if map_policy is not None:
        _check_grid(map_state, map_policy)
    solver = solver or SolverConfig()
    X = map_state.grid.states()[map_state.ifr]
    idx = np.argwhere(map_state.ifr)
    if len(X) == 0:
        return EquivalenceReport(True, [], 0, 0)
    lat = _action_lattice(spec, levels)
    ok = np.zeros(len(X), dtype=bool)
    p = OcpSpec(spec, g, N=N, solver=solver, feasibility_only=True)
    for u in lat:
        todo = ~ok
        if not todo.any():
            break
        xn = step(spec, X[todo], np.broadcast_to(u, (int(todo.sum()), spec.action_dim)))
        ok[np.flatnonzero(todo)[solve_ocp(p, xn).feasible]] = True
    fail = idx[~ok]
    return EquivalenceReport(bool(ok.all()), [list(map(int, c)) for c in fail[:MAX_REPORTED]],
                             int((~ok).sum()), int(len(X)))


@dataclass
class InvarianceReport:
    holds: bool
    n_failures: int
    n_failures_outside_band: int
    failures: list


def check_forward_invariance(region: RegionMap, spec, policy, T=100):
    """Rollouts from EFR cells stay on EFR cells (nearest-node lookup).

    Failures within one cell of the EFR boundary are counted separately.
    """
    grid = region.grid
    starts = np.argwhere(region.efr)
    if len(starts) == 0:
        return InvarianceReport(True, 0, 0, [])
    x = grid.states()[region.efr]
    band = grid.boundary_band(region.efr)
    bad = np.zeros(len(x), dtype=bool)
    bad_out = np.zeros(len(x), dtype=bool)
    for _ in range(T):
        x = step(spec, x, clamp(spec, policy(x)))
        ix = tuple(grid.nearest_index(x).T)
        off = ~region.efr[ix]
        inside = grid.contains(x)
        bad |= off
        bad_out |= off & ~band[ix] & inside
    return InvarianceReport(not bad_out.any(), int(bad.sum()), int(bad_out.sum()),
                            [list(map(int, c)) for c in starts[bad_out][:MAX_REPORTED]])


def region_stats(region: RegionMap):
    total = region.labels.size
    counts = region.counts()
    out = {"total": total}
    for k, v in counts.items():
        out[k] = v
        out[f"{k}_fraction"] = v / total if total else 0.0
    out["ifr"] = int(region.ifr.sum())
    out["efr"] = int(region.efr.sum())
    return out


def differing_cells(a: RegionMap, b: RegionMap, exclude_band=False, reference=None):
    """Cells whose labels differ, optionally ignoring a one-cell band around ``reference`` (a mask)."""
    _check_grid(a, b)
    diff = a.labels != b.labels
    if exclude_band:
        ref = a.efr if reference is None else reference
        diff &= ~a.grid.boundary_band(ref)
    return diff
