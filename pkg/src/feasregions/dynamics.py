"""Discrete-time benchmark systems: emergency braking and unicycle obstacle avoidance.

States and actions are float64 arrays whose last axis holds the components;
any leading axes are treated as a batch. The model formulas are written against
``_xp`` so the same code steps numpy arrays and torch tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from . import _xp as xp


# h(x) above this counts as a violation; absorbs round-off of trajectories that
# end exactly on the constraint boundary (e.g. full braking from d = v**2 / 20)
VIOLATION_TOL = 1e-9


class ModelError(ValueError):
    """Raised on malformed states or actions."""


class RolloutError(RuntimeError):
    """A policy failed while a trajectory was being rolled out."""

    def __init__(self, step_index, cause):
        super().__init__(f"policy evaluation failed at step {step_index}: {cause!r}")
        self.step_index = step_index


@dataclass(frozen=True)
class SystemSpec:
    name: str
    dt: float
    state_names: tuple
    action_names: tuple
    action_lower: tuple
    action_upper: tuple

    def __post_init__(self):
        if self.dt <= 0:
            raise ModelError("dt must be positive")
        if len(self.action_lower) != len(self.action_upper):
            raise ModelError("action bound lengths differ")
        if any(lo > hi for lo, hi in zip(self.action_lower, self.action_upper)):
            raise ModelError("action_lower must not exceed action_upper")

    @property
    def state_dim(self):
        return len(self.state_names)

    @property
    def action_dim(self):
        return len(self.action_names)

    @property
    def lower(self):
        return np.asarray(self.action_lower, dtype=float)

    @property
    def upper(self):
        return np.asarray(self.action_upper, dtype=float)

    def check_state(self, x):
        if x.shape[-1] != self.state_dim:
            raise ModelError(
                f"{self.name} expects state dimension {self.state_dim}, got {x.shape[-1]}"
            )

    def check_action(self, u):
        if u.shape[-1] != self.action_dim:
            raise ModelError(
                f"{self.name} expects action dimension {self.action_dim}, got {u.shape[-1]}"
            )

    # subclasses implement the three model functions
    def _step(self, x, u):
        raise NotImplementedError

    def reward(self, x, u):
        raise NotImplementedError

    def h(self, x):
        raise NotImplementedError


@dataclass(frozen=True)
class Braking(SystemSpec):
    """Longitudinal braking toward a static obstacle; state (d, v), action (a,).

    ``integrator="exact"`` integrates the double integrator over each step under
    a zero-order hold (d' = d - dt*v - dt**2/2*a), so the vehicle travels exactly
    the continuous-time distance. ``"euler"`` is the explicit update
    d' = d - dt*v. With ``stop_at_rest`` the state is frozen once v <= 0 and a
    step that would reverse the vehicle stops it instead.
    """

    a_brk: float = -10.0
    integrator: str = "exact"
    stop_at_rest: bool = True

    def __post_init__(self):
        super().__post_init__()
        if self.integrator not in ("exact", "euler"):
            raise ModelError(f"unknown integrator {self.integrator!r}")
        if self.a_brk >= 0:
            raise ModelError("a_brk must be negative")

    def _step(self, x, u):
        d, v, a = x[..., 0], x[..., 1], u[..., 0]
        dt = self.dt
        v_raw = v + dt * a
        if self.integrator == "exact":
            d_raw = d - dt * v - 0.5 * dt * dt * a
        else:
            d_raw = d - dt * v
        if not self.stop_at_rest:
            return xp.stack([d_raw, v_raw])
        moving = v > 0
        stops = moving & (v_raw < 0)
        if self.integrator == "exact":
            # stopping time -v/a lies inside the step; travelled distance is v**2 / (2|a|)
            safe_a = xp.where(a < 0, a, -1.0)
            d_stop = d + v * v / (2.0 * safe_a)
        else:
            d_stop = d_raw
        d_next = xp.where(moving, xp.where(stops, d_stop, d_raw), d)
        v_next = xp.where(moving, xp.where(stops, 0.0 * v, v_raw), v)
        return xp.stack([d_next, v_next])

    def reward(self, x, u):
        return -u[..., 0] ** 2

    def h(self, x):
        return -x[..., 0]


@dataclass(frozen=True)
class Unicycle(SystemSpec):
    """Planar unicycle; state (y, z, v, theta), action (a, omega), explicit Euler update."""

    obstacle_radius: float = 0.5
    obstacle_center: tuple = (0.0, 0.0)

    def _step(self, x, u):
        y, z, v, th = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        a, w = u[..., 0], u[..., 1]
        dt = self.dt
        return xp.stack(
            [
                y + dt * v * xp.cos(th),
                z + dt * v * xp.sin(th),
                v + dt * a,
                th + dt * w,
            ]
        )

    def reward(self, x, u):
        return x[..., 1] + 0.0 * u[..., 0]

    def distance(self, x):
        cy, cz = self.obstacle_center
        return xp.hypot(x[..., 0] - cy, x[..., 1] - cz)

    def h(self, x):
        return self.obstacle_radius - self.distance(x)


def braking(dt=0.1, a_brk=-10.0, integrator="exact", stop_at_rest=True):
    return Braking(
        name="braking",
        dt=dt,
        state_names=("d", "v"),
        action_names=("a",),
        action_lower=(a_brk,),
        action_upper=(0.0,),
        a_brk=a_brk,
        integrator=integrator,
        stop_at_rest=stop_at_rest,
    )


def unicycle(dt=0.1, a_max=1.0, omega_max=np.pi / 4, radius=0.5):
    return Unicycle(
        name="unicycle",
        dt=dt,
        state_names=("y", "z", "v", "theta"),
        action_names=("a", "omega"),
        action_lower=(-a_max, -omega_max),
        action_upper=(a_max, omega_max),
        obstacle_radius=radius,
    )


def make_system(name, **kwargs):
    if name == "braking":
        return braking(**kwargs)
    if name == "unicycle":
        return unicycle(**kwargs)
    raise ModelError(f"unknown system {name!r}")


def step(spec, x, u):
    """One transition x' = f(x, u); ``u`` is expected to be inside the action box."""
    if not xp.is_torch(x):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
    spec.check_state(x)
    spec.check_action(u)
    return spec._step(x, u)


def clamp(spec, u):
    """Project actions elementwise onto [action_lower, action_upper]."""
    if xp.is_torch(u):
        return xp.clip(u, spec.lower, spec.upper)
    u = np.asarray(u, dtype=float)
    spec.check_action(u)
    return np.clip(u, spec.lower, spec.upper)


class Policy(Protocol):
    """State -> action map over a batch of states shaped (..., state_dim)."""

    name: str

    def __call__(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class ConstantPolicy:
    spec: SystemSpec
    action: tuple = None
    name: str = "constant"

    def __post_init__(self):
        if self.action is None:
            self.action = (0.0,) * self.spec.action_dim
        if all(a == 0.0 for a in self.action):
            self.name = "zero"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.action, dtype=float), x.shape[:-1] + (self.spec.action_dim,)).copy()


@dataclass
class BestEffortPolicy:
    """Most cautious analytic policy.

    Braking: full deceleration a_brk at every step. Unicycle: full deceleration
    while turning the heading away from the obstacle center.
    """

    spec: SystemSpec
    name: str = "best_effort"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        spec = self.spec
        if isinstance(spec, Braking):
            return np.full(x.shape[:-1] + (1,), spec.a_brk)
        if isinstance(spec, Unicycle):
            cy, cz = spec.obstacle_center
            away = np.arctan2(x[..., 1] - cz, x[..., 0] - cy)
            err = np.angle(np.exp(1j * (away - x[..., 3])))
            omega = np.where(err >= 0, spec.upper[1], spec.lower[1])
            a = np.where(x[..., 2] > 0, spec.lower[0], np.where(x[..., 2] < 0, spec.upper[0], 0.0))
            return np.stack([a, omega], axis=-1)
        raise ModelError(f"no best-effort policy for {spec.name}")


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    violated_at: Optional[int] = None

    def __len__(self):
        return len(self.states)


def violates(spec, x):
    """Real-time constraint violation h(x) > 0, up to ``VIOLATION_TOL``."""
    return np.asarray(spec.h(np.asarray(x, dtype=float))) > VIOLATION_TOL


def first_violation(spec, states):
    """Index of the first violating state along the second-to-last axis, -1 if none."""
    bad = violates(spec, states)
    idx = np.argmax(bad, axis=-1)
    return np.where(bad.any(axis=-1), idx, -1)


def rollout_batch(spec, policy, x0, T):
    """Roll a batch of initial states forward T steps under ``policy``.

    Returns (states (M, T+1, n), actions (M, T, m), violated_at (M,) with -1 = none).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    spec.check_state(x)
    M = x.shape[0]
    states = np.empty((M, T + 1, spec.state_dim))
    actions = np.empty((M, T, spec.action_dim))
    states[:, 0] = x
    for k in range(T):
        try:
            u = clamp(spec, policy(x))
        except Exception as exc:  # noqa: BLE001 - re-raised with step context
            raise RolloutError(k, exc) from exc
        actions[:, k] = u
        x = step(spec, x, u)
        states[:, k + 1] = x
    return states, actions, first_violation(spec, states)


def rollout(spec, policy, x0, T):
    """Roll a single initial state forward T steps."""
    states, actions, viol = rollout_batch(spec, policy, np.asarray(x0, dtype=float)[None], T)
    v = int(viol[0])
    return Trajectory(states=states[0], actions=actions[0], violated_at=None if v < 0 else v)
