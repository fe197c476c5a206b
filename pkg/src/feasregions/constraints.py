"""Virtual-time constraints g(x_{i|t}) <= 0, i = 0..n, for the six constraint families.

Each per-step function receives the virtual prefix ``states[..., :i+1, :]`` and
returns the residual at step i; positive residuals are violations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _xp as xp
from .fields import (
    FeasibilityField,
    SIParams,
    braking_cbf,
    hjr_braking_analytic,
    safety_index,
    unicycle_cbf,
)

FAMILIES = ("pointwise", "cbf", "si", "hjr", "cvf", "cdf")


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class VirtualTimeConstraint:
    """Finite sequence of per-step inequality functions over the first n+1 virtual states.

    ``closed`` marks two-step families where g_1 <= 0 forces g_0(x_1) <= 0, so
    the zero-sublevel set of g_0 is a candidate control invariant set.
    """

    family: str
    per_step: tuple
    params: dict = field(default_factory=dict)
    closed: bool = False
    differentiable: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES and not self.family.startswith("custom"):
            raise ConstraintError(f"unknown family {self.family!r}")
        if len(self.per_step) < 1:
            raise ConstraintError("need at least the step-0 constraint")

    @property
    def n(self):
        """Index of the last constrained virtual step."""
        return len(self.per_step) - 1

    def evaluate(self, states):
        """Residuals (..., n+1) for virtual states (..., >= n+1, state_dim)."""
        if states.shape[-2] < self.n + 1:
            raise ConstraintError(f"need {self.n + 1} virtual states, got {states.shape[-2]}")
        return xp.stack([g(states[..., : i + 1, :]) for i, g in enumerate(self.per_step)])

    def g0(self, x):
        """Step-0 residual at states (..., state_dim)."""
        return self.per_step[0](x[..., None, :])

    def max_violation(self, states):
        r = self.evaluate(states)
        if xp.is_torch(r):
            return r.max(dim=-1).values
        return r.max(axis=-1)

    def describe(self):
        out = {"family": self.family, "n": self.n}
        out.update({f"constraint.{k}": v for k, v in self.params.items()})
        return out


def _at(fn, i):
    return lambda s: fn(s[..., i, :])


def make_pointwise(h, n):
    """g(x_{i|t}) = h(x_{i|t}) for i = 0..n."""
    if n < 0:
        raise ConstraintError("n must be >= 0")
    return VirtualTimeConstraint("pointwise", tuple(_at(h, i) for i in range(n + 1)), {"n": n})


def make_cbf_constraint(B, alpha_rate=0.1, h=None):
    """Two-step CBF constraint with linear class-K function alpha(z) = alpha_rate * z.

    g_0 = B(x_0), or max(B, h)(x_0) when ``h`` is given so that the step-0
    constraint is never weaker than h. g_1 = B(x_1) - (1 - alpha_rate) B(x_0).
    """
    if not 0 < alpha_rate <= 1:
        raise ConstraintError("alpha_rate must lie in (0, 1]")

    if h is None:
        def g0(s):
            return B(s[..., 0, :])
    else:
        def g0(s):
            return xp.maximum(B(s[..., 0, :]), h(s[..., 0, :]))

    def g1(s):
        return B(s[..., 1, :]) - (1.0 - alpha_rate) * B(s[..., 0, :])

    params = {"alpha_rate": alpha_rate}
    params.update(getattr(B, "params", {}))
    return VirtualTimeConstraint("cbf", (g0, g1), params, closed=True)


def make_si_constraint(params: SIParams, h):
    """g_0 = max(phi, h)(x_0); g_1 = phi(x_1) - max(phi(x_0) - eta, 0)."""
    phi = safety_index(params)

    def g0(s):
        x0 = s[..., 0, :]
        return xp.maximum(phi(x0), h(x0))

    def g1(s):
        return phi(s[..., 1, :]) - xp.maximum(phi(s[..., 0, :]) - params.eta, 0.0)

    return VirtualTimeConstraint("si", (g0, g1), dict(phi.params), closed=True)


def si_design_rule_check(params: SIParams, v_max=10.0, a_brk=-10.0):
    """n (sigma + d_min**n + k v_max)**((n-1)/n) / k <= -a_brk / v_max."""
    if v_max <= 0 or a_brk >= 0:
        raise ConstraintError("need v_max > 0 and a_brk < 0")
    n, k = params.n_exp, params.k
    base = params.sigma + params.d_min**n + k * v_max
    lhs = n * base ** ((n - 1.0) / n) / k
    return bool(lhs <= -a_brk / v_max)


def make_field_constraint(F: FeasibilityField, mode="two_step", h=None, family="hjr"):
    """F(x_0) <= 0 (first_step) or F(x_i) <= 0 for i = 0, 1 (two_step).

    With ``h`` the residual is max(F, h) so the constraint is never weaker than h.
    """
    if mode not in ("first_step", "two_step"):
        raise ConstraintError(f"unknown field constraint mode {mode!r}")

    if h is None:
        def val(x):
            return F(x)
    else:
        def val(x):
            return xp.maximum(F(x), h(x))

    steps = (_at(val, 0),) if mode == "first_step" else (_at(val, 0), _at(val, 1))
    params = {"mode": mode}
    params.update(getattr(F, "params", {}))
    params["field"] = getattr(F, "name", "field")
    return VirtualTimeConstraint(
        family, steps, params, closed=mode == "two_step", differentiable=F.differentiable
    )


def check_not_weaker(g: VirtualTimeConstraint, h, samples, tol=0.0):
    """States where g_0 <= tol but h > tol; empty for a valid constraint."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ConstraintError("empty sample set")
    flat = samples.reshape(-1, samples.shape[-1])
    bad = (np.asarray(g.g0(flat)) <= tol) & (np.asarray(h(flat)) > tol)
    return flat[bad]


def constant_constraint(value, n=0):
    """Negative-control constraint g == value at every step."""
    fn = lambda s: 0.0 * s[..., -1, 0] + value  # noqa: E731
    return VirtualTimeConstraint("custom_constant", (fn,) * (n + 1), {"value": value})


def build_constraint(spec, family, *, n=2, k=0.05, alpha_rate=0.1, si: SIParams | None = None,
                     feas_field: FeasibilityField | None = None, mode="two_step"):
    """Constraint for one of the benchmark systems from flat parameters."""
    if family == "pointwise":
        return make_pointwise(spec.h, n)
    if family == "cbf":
        if spec.name == "braking":
            return make_cbf_constraint(braking_cbf(k), alpha_rate, h=spec.h)
        return make_cbf_constraint(unicycle_cbf(k), alpha_rate, h=spec.h)
    if family == "si":
        if spec.name != "braking":
            raise ConstraintError("the safety index is defined for braking only")
        return make_si_constraint(si or SIParams(), spec.h)
    if family in ("hjr", "cvf", "cdf"):
        if feas_field is None:
            if family == "hjr" and spec.name == "braking":
                feas_field = hjr_braking_analytic(spec.a_brk)
            else:
                raise ConstraintError(f"{family} constraint needs a field")
        return make_field_constraint(feas_field, mode, h=spec.h, family=family)
    raise ConstraintError(f"unknown family {family!r}")
