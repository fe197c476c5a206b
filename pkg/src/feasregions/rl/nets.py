"""Small float64 MLPs for value, policy and learned feasibility functions."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..fields import FeasibilityField

DTYPE = torch.float64


class Mlp(nn.Module):
    """ReLU MLP. ``head="box"`` squashes the output with tanh onto [lower, upper].

    Inputs are standardized by fixed buffers: z = (x - in_shift) / in_scale.
    """

    def __init__(self, sizes, head="identity", lower=None, upper=None, in_shift=None, in_scale=None):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if head not in ("identity", "box"):
            raise ValueError(f"unknown head {head!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.head = head
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(self.sizes[:-1], self.sizes[1:])
        )
        shift = np.zeros(self.sizes[0]) if in_shift is None else np.asarray(in_shift, dtype=float)
        scale = np.ones(self.sizes[0]) if in_scale is None else np.asarray(in_scale, dtype=float)
        if shift.shape != (self.sizes[0],) or scale.shape != shift.shape or np.any(scale <= 0):
            raise ValueError("input standardization must match the input size with positive scales")
        self.register_buffer("in_shift", torch.as_tensor(shift, dtype=DTYPE))
        self.register_buffer("in_scale", torch.as_tensor(scale, dtype=DTYPE))
        if head == "box":
            lo = torch.as_tensor(np.asarray(lower, dtype=float), dtype=DTYPE)
            hi = torch.as_tensor(np.asarray(upper, dtype=float), dtype=DTYPE)
            if lo.shape != (self.sizes[-1],) or hi.shape != lo.shape:
                raise ValueError("box bounds must match the output size")
            self.register_buffer("box_mid", (hi + lo) / 2)
            self.register_buffer("box_half", (hi - lo) / 2)

    @property
    def in_dim(self):
        return self.sizes[0]

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dimension {self.in_dim}, got {x.shape[-1]}")
        x = (x - self.in_shift) / self.in_scale
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        if self.head == "box":
            x = self.box_mid + self.box_half * torch.tanh(x)
        return x

    def flat_parameters(self):
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def seeded(seed, build):
    """Run ``build()`` with torch's global generator seeded, leaving the outer state untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def make_value_net(in_dim, hidden=(64, 64), seed=0, in_shift=None, in_scale=None):
    return seeded(seed, lambda: Mlp((in_dim, *hidden, 1), in_shift=in_shift, in_scale=in_scale))


def make_policy_net(spec, hidden=(64, 64), seed=0, in_shift=None, in_scale=None):
    return seeded(seed, lambda: Mlp((spec.state_dim, *hidden, spec.action_dim), head="box",
                                    lower=spec.lower, upper=spec.upper,
                                    in_shift=in_shift, in_scale=in_scale))


def mlp_forward(net: Mlp, x):
    """Forward pass on numpy input, numpy output."""
    with torch.no_grad():
        return net(torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)).numpy()


class TorchPolicy:
    """Batched numpy policy around a policy network."""

    def __init__(self, net: Mlp, name="rl"):
        self.net = net
        self.name = name

    def __call__(self, x):
        return mlp_forward(self.net, x)


class LearnedField(FeasibilityField):
    """Feasibility function represented by a scalar-output network; accepts numpy or torch input."""

    kind = "learned"
    differentiable = True

    def __init__(self, net: Mlp, name="learned_hj", params=None):
        self.net = net
        self.name = name
        self.params = dict(params or {})

    def __call__(self, x):
        if isinstance(x, torch.Tensor):
            return self.net(x)[..., 0]
        return mlp_forward(self.net, x)[..., 0]
