"""Scalar feasibility fields F(x) whose zero-sublevel set stands for a feasible region."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _xp as xp
from .grid import StateGrid

log = logging.getLogger(__name__)


class FieldError(ValueError):
    pass


class FeasibilityField:
    """Base class. ``__call__`` maps states (..., state_dim) to values (...)."""

    kind = "abstract"
    name = "field"
    differentiable = False

    def __call__(self, x):
        raise NotImplementedError

    def describe(self):
        return {"field": self.name, "field_kind": self.kind}


@dataclass
class AnalyticField(FeasibilityField):
    """Closed-form field; ``fn`` is written against ``_xp`` so it accepts torch tensors."""

    fn: Callable
    name: str = "analytic"
    params: dict = field(default_factory=dict)
    kind = "analytic_closed_form"
    differentiable = True

    def __call__(self, x):
        if not xp.is_torch(x):
            x = np.asarray(x, dtype=float)
        return self.fn(x)

    def describe(self):
        out = super().describe()
        out.update({f"field.{k}": v for k, v in self.params.items()})
        return out


@dataclass
class TabularField(FeasibilityField):
    """Node values on a StateGrid with multilinear interpolation between nodes.

    Queries outside the hull are clamped and counted in ``outside_queries``.
    """

    grid: StateGrid
    values: np.ndarray
    name: str = "tabular"
    params: dict = field(default_factory=dict)
    outside_queries: int = 0
    kind = "tabular"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise FieldError(f"values shape {self.values.shape} != grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise FieldError("tabular field values must be finite")

    def __call__(self, x):
        if xp.is_torch(x):
            raise FieldError("tabular fields are evaluated on numpy arrays only")
        out, outside = self.grid.interpolate(self.values, x)
        n_out = int(np.count_nonzero(outside))
        if n_out:
            self.outside_queries += n_out
            log.debug("%s: %d queries clamped to the grid hull", self.name, n_out)
        return out

    def describe(self):
        out = super().describe()
        out.update({f"field.{k}": v for k, v in self.params.items()})
        return out


def hjr_braking_analytic(a_brk=-10.0):
    """Negative minimum future distance under full braking: F = -d - v**2 / (2 a_brk)."""
    if a_brk >= 0:
        raise FieldError("a_brk must be negative")

    def fn(x):
        d, v = x[..., 0], x[..., 1]
        return -d - v * v / (2.0 * a_brk)

    return AnalyticField(fn, name="hjr_analytic", params={"a_brk": a_brk})


def braking_cbf(k):
    """B(d, v) = -d + k v**2."""
    if k <= 0:
        raise FieldError("k must be positive")

    def fn(x):
        return -x[..., 0] + k * x[..., 1] ** 2

    return AnalyticField(fn, name="cbf_braking", params={"k": k})


def unicycle_distance_rate(x, center=(0.0, 0.0)):
    """d/dt of the distance to the obstacle center: v cos(theta - bearing)."""
    ry, rz = x[..., 0] - center[0], x[..., 1] - center[1]
    return x[..., 2] * xp.cos(x[..., 3] - xp.atan2(rz, ry))


def unicycle_cbf(k, margin=0.7, center=(0.0, 0.0)):
    """B = margin - d - k * d_dot with d the distance to the obstacle center."""
    if k <= 0:
        raise FieldError("k must be positive")

    def fn(x):
        d = xp.hypot(x[..., 0] - center[0], x[..., 1] - center[1])
        return margin - d - k * unicycle_distance_rate(x, center)

    return AnalyticField(fn, name="cbf_unicycle", params={"k": k, "margin": margin})


@dataclass(frozen=True)
class SIParams:
    sigma: float = 0.12
    d_min: float = 0.0
    n_exp: float = 0.5
    k: float = 0.23
    eta: float = 0.0

    def __post_init__(self):
        if self.n_exp <= 0 or self.k <= 0:
            raise FieldError("SI needs n_exp > 0 and k > 0")
        if self.eta < 0:
            raise FieldError("eta must be nonnegative")


def safety_index(p: SIParams):
    """phi = sigma + d_min**n - d**n + k v, with signed powers for d < 0."""
    offset = p.sigma + float(xp.signed_power(np.float64(p.d_min), p.n_exp))

    def fn(x):
        d, v = x[..., 0], x[..., 1]
        return offset - xp.signed_power(d, p.n_exp) + p.k * v

    return AnalyticField(
        fn,
        name="safety_index",
        params={"sigma": p.sigma, "d_min": p.d_min, "n_exp": p.n_exp, "k": p.k, "eta": p.eta},
    )
