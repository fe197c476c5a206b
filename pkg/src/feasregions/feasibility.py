"""Constraint-aggregation feasibility functions: rollout definitions, risky backups, fixed points.

CVF: F(x) = sum_t gamma^t c(x_t) with c = 1[h > 0].
HJ reachability: F(x) = max_t h(x_t) (discounted variant for fixed-point solving).
CDF: F(x) = gamma^N with N the number of steps to the first violation, 0 if none.

Rollouts are truncated at ``T_max`` states x_0..x_{T_max-1}; the CDF is 0 on
truncation. The violation indicator uses ``dynamics.VIOLATION_TOL`` so the
three predicates below agree exactly on every rollout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import VIOLATION_TOL, SystemSpec, clamp, rollout_batch, step, violates
from .fields import TabularField
from .grid import StateGrid

log = logging.getLogger(__name__)

T_MAX = 500
BACKUP_FAMILIES = ("cvf", "hjr_discounted", "cdf")


class NonConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        super().__init__(f"fixed point not reached after {iterations} sweeps (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


def _rollout_states(spec, policy, x, T_max):
    """States x_0..x_{T_max-1} under ``policy``, shape (M, T_max, n)."""
    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if T_max == 1:
        return x[:, None, :]
    states, _, _ = rollout_batch(spec, policy, x, T_max - 1)
    return states


def _scalar_or_batch(x, values):
    return float(values[0]) if np.ndim(x) == 1 else values


def violation_indicators(spec, states):
    return violates(spec, states).astype(float)


def cvf_values(c, gamma):
    return (c * gamma ** np.arange(c.shape[-1])).sum(axis=-1)


def hjr_values(h):
    return h.max(axis=-1)


def cdf_trajectory(c, gamma):
    """CDF along each rollout by the backward recursion F_t = c_t + (1 - c_t) gamma F_{t+1}, F_T = 0.

    Returns (M, T+1) with the truncation value in the last column.
    """
    M, T = c.shape
    F = np.zeros((M, T + 1))
    for t in range(T - 1, -1, -1):
        F[:, t] = c[:, t] + (1.0 - c[:, t]) * gamma * F[:, t + 1]
    return F


def cdf_recursion_residual(c, F, gamma):
    """max |F_t - (c_t + (1 - c_t) gamma F_{t+1})| along each rollout."""
    return np.abs(F[:, :-1] - (c + (1.0 - c) * gamma * F[:, 1:])).max(axis=-1)


def cvf_rollout(spec, policy, x, gamma=0.99, T_max=T_MAX):
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    c = violation_indicators(spec, _rollout_states(spec, policy, x, T_max))
    return _scalar_or_batch(x, cvf_values(c, gamma))


def hjr_rollout(spec, policy, x, T_max=T_MAX):
    h = np.asarray(spec.h(_rollout_states(spec, policy, x, T_max)))
    return _scalar_or_batch(x, hjr_values(h))


def cdf_rollout(spec, policy, x, gamma=0.99, T_max=T_MAX):
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    c = violation_indicators(spec, _rollout_states(spec, policy, x, T_max))
    return _scalar_or_batch(x, cdf_trajectory(c, gamma)[:, 0])


@dataclass
class CAReport:
    cvf_safe: np.ndarray
    hjr_safe: np.ndarray
    cdf_safe: np.ndarray
    cdf_residual: float

    @property
    def agree(self):
        return (self.cvf_safe == self.hjr_safe) & (self.hjr_safe == self.cdf_safe)


def ca_predicates(spec, policy, x, gamma=0.99, T_max=T_MAX):
    """The three violation-free predicates over one shared rollout per state.

    cvf = 0, hjr <= VIOLATION_TOL and cdf = 0; plus the max CDF recursion residual.
    """
    states = _rollout_states(spec, policy, x, T_max)
    h = np.asarray(spec.h(states))
    c = violation_indicators(spec, states)
    F = cdf_trajectory(c, gamma)
    return CAReport(
        cvf_safe=cvf_values(c, gamma) == 0.0,
        hjr_safe=hjr_values(h) <= VIOLATION_TOL,
        cdf_safe=F[:, 0] == 0.0,
        cdf_residual=float(cdf_recursion_residual(c, F, gamma).max()),
    )


# ---------------------------------------------------------------- risky backups


@dataclass(frozen=True)
class BackupRule:
    """One-step risky backup. ``policy=None`` minimizes over a uniform action lattice."""

    family: str
    spec: SystemSpec
    gamma: float = 0.99
    policy: object = None
    lattice: int = 21

    def __post_init__(self):
        if self.family not in BACKUP_FAMILIES:
            raise ValueError(f"unknown backup family {self.family!r}")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1) for a contraction")
        if self.lattice < 2:
            raise ValueError("lattice needs at least 2 points per axis")

    def actions(self):
        axes = [np.linspace(lo, hi, self.lattice) for lo, hi in zip(self.spec.lower, self.spec.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def backup_values(rule: BackupRule, F, x):
    """Right-hand side of the risky self-consistency / Bellman equation at states x (M, n)."""
    spec = rule.spec
    x = np.asarray(x, dtype=float)
    c = violation_indicators(spec, x)
    h = np.asarray(spec.h(x))
    if rule.policy is not None:
        u = clamp(spec, rule.policy(x))[:, None, :]
    else:
        u = rule.actions()[None, :, :]
    xb = np.broadcast_to(x[:, None, :], (len(x), u.shape[1], spec.state_dim))
    xn = step(spec, xb, np.broadcast_to(u, xb.shape[:-1] + (spec.action_dim,)))
    Fn = np.asarray(F(xn))
    if rule.family == "hjr_discounted":
        # any HJ value dominates h; keeps clamped out-of-hull lookups honest
        Fn = np.maximum(Fn, np.asarray(spec.h(xn)))
    m = Fn.min(axis=1)
    g = rule.gamma
    if rule.family == "cvf":
        return c + g * m
    if rule.family == "hjr_discounted":
        return (1.0 - g) * h + g * np.maximum(h, m)
    return c + (1.0 - c) * g * m


def risky_backup(rule: BackupRule, F, grid: StateGrid):
    """One synchronous sweep over all grid nodes; returns a fresh tabular field."""
    vals = backup_values(rule, F, grid.flat_states()).reshape(grid.shape)
    return TabularField(grid, vals, name=f"{rule.family}_tabular",
                        params={"gamma": rule.gamma, "backup": rule.family})


def initial_values(rule: BackupRule, grid: StateGrid):
    x = grid.flat_states()
    if rule.family == "hjr_discounted":
        v = np.asarray(rule.spec.h(x), dtype=float)
    else:
        v = violation_indicators(rule.spec, x)
    return v.reshape(grid.shape)


@dataclass
class FixedPointResult:
    field: TabularField
    iterations: int
    residual: float
    history: list = field(default_factory=list)


def fixed_point_solve(rule: BackupRule, grid: StateGrid, tol=1e-6, max_iters=10000, init=None):
    """Jacobi iteration of ``risky_backup`` until the sup-norm change drops below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    vals = initial_values(rule, grid) if init is None else np.asarray(init, dtype=float)
    F = TabularField(grid, vals, name=f"{rule.family}_tabular", params={"gamma": rule.gamma})
    history = []
    for it in range(1, max_iters + 1):
        G = risky_backup(rule, F, grid)
        res = float(np.max(np.abs(G.values - F.values)))
        history.append(res)
        F = G
        if res < tol:
            log.info("%s fixed point after %d sweeps (residual %.2e)", rule.family, it, res)
            return FixedPointResult(F, it, res, history)
    raise NonConvergenceError(history[-1], max_iters)


def self_consistency_residual(rule: BackupRule, F, samples):
    """max |F(x) - backup(F)(x)| over sample states."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    return float(np.max(np.abs(np.asarray(F(x)) - backup_values(rule, F, x))))
