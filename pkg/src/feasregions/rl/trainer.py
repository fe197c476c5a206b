"""Alternating value / policy (and optionally feasibility-field) updates on uniform state samples."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from ..dynamics import Braking, Unicycle
from ..constraints import make_field_constraint
from ..ocp import FEAS_TOL
from ..regions import Label, _sweep_policy
from .checkpoint import Checkpoint
from .losses import hj_field_loss, policy_loss, value_loss
from .nets import DTYPE, LearnedField, TorchPolicy, make_policy_net, make_value_net

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, iteration, which, last_good: Checkpoint | None):
        super().__init__(f"non-finite {which} loss at iteration {iteration}")
        self.iteration = iteration
        self.which = which
        self.last_good = last_good


def default_sampling_box(spec):
    """Training-state hull: the braking grid, or the unicycle slice extended over v and theta."""
    if isinstance(spec, Braking):
        return (0.0, 0.0), (10.0, 10.0)
    if isinstance(spec, Unicycle):
        return (-3.0, -3.0, 0.0, -math.pi), (3.0, 3.0, 3.0, math.pi)
    raise ValueError(f"no default sampling box for {spec.name!r}")


@dataclass
class TrainerConfig:
    iterations: int = 10000
    checkpoints: tuple = (10, 100, 1000, 10000)
    lr: float = 1e-4
    batch: int = 256
    seed: int = 0
    gamma: float = 0.99
    hidden: tuple = (64, 64)
    reward_scale: float = 0.005
    sample_lo: tuple | None = None
    sample_hi: tuple | None = None
    learn_field: bool = False
    field_gamma: float = 0.99
    target_sync: int = 100
    field_lr: float | None = None
    field_backup: str = "policy"
    backup_levels: int = 5
    indicator: str = "policy_region"
    region_horizon: int = 100

    def __post_init__(self):
        if self.lr <= 0 or (self.field_lr is not None and self.field_lr <= 0):
            raise ValueError("lr must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.gamma < 1 or not 0 < self.field_gamma < 1:
            raise ValueError("discount factors must lie in (0, 1)")
        if self.target_sync < 1:
            raise ValueError("target_sync must be >= 1")
        if self.indicator not in ("field", "policy_region"):
            raise ValueError(f"unknown indicator {self.indicator!r}")
        if self.field_backup not in ("policy", "lattice") or self.backup_levels < 2:
            raise ValueError("field_backup must be 'policy' or 'lattice' with backup_levels >= 2")
        if self.region_horizon < 1:
            raise ValueError("region_horizon must be >= 1")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")

    def box(self, spec):
        lo, hi = default_sampling_box(spec) if self.sample_lo is None else (self.sample_lo, self.sample_hi)
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        if lo.shape != (spec.state_dim,) or hi.shape != lo.shape or np.any(hi <= lo):
            raise ValueError("sampling box must match the state dimension with lo < hi")
        return lo, hi


class _Scaled:
    """Spec view with the reward multiplied by a positive constant."""

    def __init__(self, spec, scale):
        self._spec, self._scale = spec, scale

    def __getattr__(self, name):
        return getattr(self._spec, name)

    def reward(self, x, u):
        return self._scale * self._spec.reward(x, u)


def policy_region_mask(spec, g, policy_net, x, horizon):
    """Membership of each sampled state in the policy's endlessly feasible region under ``g``,
    judged over a ``horizon``-step rollout."""
    labels, _ = _sweep_policy(spec, g, TorchPolicy(policy_net), x.detach().numpy(), horizon, FEAS_TOL)
    return torch.as_tensor(labels == Label.ENDLESSLY_FEASIBLE)


def _snapshot(it, seed, nets):
    return Checkpoint(it, seed, {k: copy.deepcopy(v) for k, v in nets.items()})


def train(config: TrainerConfig, spec, field=None, g=None):
    """Feasible policy iteration. Returns checkpoints at iteration 0 and every scheduled iteration reached.

    With ``config.learn_field`` the feasibility field is a network trained jointly on the
    discounted HJ backup; otherwise ``field`` (e.g. the analytic HJ function) is used as given.
    ``g`` is the virtual-time constraint whose policy region drives the in/out split; it
    defaults to the two-step constraint on ``field``.
    """
    if field is None and not config.learn_field:
        raise ValueError("a feasibility field is required unless learn_field is set")
    torch.set_num_threads(1)
    lo, hi = config.box(spec)
    shift, scale = (lo + hi) / 2, (hi - lo) / 2
    s = config.seed
    nets = {
        "policy": make_policy_net(spec, config.hidden, s, shift, scale),
        "value": make_value_net(spec.state_dim, config.hidden, s + 1, shift, scale),
    }
    if config.learn_field:
        nets["field"] = make_value_net(spec.state_dim, config.hidden, s + 2, shift, scale)
        target = copy.deepcopy(nets["field"])
        field = LearnedField(nets["field"])
        lattice = None
        if config.field_backup == "lattice":
            axes = [np.linspace(a, b, config.backup_levels) for a, b in zip(spec.lower, spec.upper)]
            mesh = np.meshgrid(*axes, indexing="ij")
            lattice = torch.as_tensor(np.stack([m.ravel() for m in mesh], axis=-1), dtype=DTYPE)
        opt_f = torch.optim.Adam(nets["field"].parameters(), lr=config.field_lr or config.lr)
    opt_v = torch.optim.Adam(nets["value"].parameters(), lr=config.lr)
    opt_p = torch.optim.Adam(nets["policy"].parameters(), lr=config.lr)

    gen = torch.Generator().manual_seed(config.seed)
    tlo, tspan = torch.as_tensor(lo, dtype=DTYPE), torch.as_tensor(hi - lo, dtype=DTYPE)
    rspec = _Scaled(spec, config.reward_scale)
    schedule = sorted({int(c) for c in config.checkpoints if 0 < int(c) <= config.iterations})
    out = [_snapshot(0, s, nets)]
    if g is None:
        g = make_field_constraint(field, h=spec.h)

    def guard(loss, which, it):
        if not torch.isfinite(loss):
            raise DivergenceError(it, which, out[-1])

    for it in range(1, config.iterations + 1):
        x = tlo + tspan * torch.rand(config.batch, spec.state_dim, generator=gen, dtype=DTYPE)
        if config.learn_field:
            lf = hj_field_loss(nets["field"], target, nets["policy"], spec, x, config.field_gamma, lattice)
            guard(lf, "field", it)
            opt_f.zero_grad()
            lf.backward()
            opt_f.step()
            if it % config.target_sync == 0:
                target.load_state_dict(nets["field"].state_dict())
        lv = value_loss(nets["value"], nets["policy"], rspec, x, config.gamma)
        guard(lv, "value", it)
        opt_v.zero_grad()
        lv.backward()
        opt_v.step()
        inside = None
        if config.indicator == "policy_region" and not config.learn_field:
            inside = policy_region_mask(spec, g, nets["policy"], x, config.region_horizon)
        lp = policy_loss(nets["policy"], nets["value"], field, rspec, x, config.gamma, inside)
        guard(lp, "policy", it)
        opt_p.zero_grad()
        lp.backward()
        opt_p.step()
        if it in schedule:
            log.info("iteration %d: value loss %.4g, policy loss %.4g", it, lv.item(), lp.item())
            out.append(_snapshot(it, s, nets))
    return out


def train_hj_field(config: TrainerConfig, spec, gamma=0.99):
    """Jointly learn policy, value and a discounted-HJ field; returns (field, checkpoints)."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    cfg = replace(config, learn_field=True, field_gamma=gamma)
    cks = train(cfg, spec)
    return LearnedField(cks[-1].nets["field"], params={"gamma": gamma, "iteration": cks[-1].iteration}), cks
