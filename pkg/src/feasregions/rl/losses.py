"""Approximate dynamic programming losses with feasible policy improvement.

All losses take a batch of states ``x`` (B, state_dim) as a float64 tensor and
differentiate through the closed-form dynamics.
"""

from __future__ import annotations

import torch


def _step(spec, x, u):
    return spec._step(x, u)


def value_loss(value_net, policy_net, spec, x, gamma=0.99, target_net=None):
    """mean (V(x) - (r + gamma V'(x')))**2 with the target held constant.

    V' is ``target_net`` when given, else the current value net (semi-gradient).
    """
    boot = value_net if target_net is None else target_net
    with torch.no_grad():
        u = policy_net(x)
        x1 = _step(spec, x, u)
        target = spec.reward(x, u) + gamma * boot(x1)[..., 0]
    return ((value_net(x)[..., 0] - target) ** 2).mean()


def policy_loss_terms(policy_net, value_net, field, spec, x, gamma=0.99, inside=None):
    """(L_in, L_out): value ascent inside the feasible region, feasibility descent outside.

    ``inside`` is a precomputed 0/1 membership mask; by default it is {F(x) <= 0}
    on the current field. Either way it is held constant.
    """
    if inside is None:
        with torch.no_grad():
            inside = field(x) <= 0
    inside = torch.as_tensor(inside).to(x.dtype)
    u = policy_net(x)
    x1 = _step(spec, x, u)
    q = spec.reward(x, u) + gamma * value_net(x1)[..., 0]
    l_in = -(inside * q).mean()
    l_out = ((1.0 - inside) * field(x1)).mean()
    return l_in, l_out


def policy_loss(policy_net, value_net, field, spec, x, gamma=0.99, inside=None):
    l_in, l_out = policy_loss_terms(policy_net, value_net, field, spec, x, gamma, inside)
    return l_in + l_out


def hj_field_loss(field_net, target_net, policy_net, spec, x, gamma=0.99, actions=None):
    """TD regression onto the discounted HJ backup (1-g) h + g max(h, F_target(x')).

    x' follows the policy, or with ``actions`` (K, m) the backup takes the min over them.
    """
    with torch.no_grad():
        h = spec.h(x)
        if actions is None:
            nxt = target_net(_step(spec, x, policy_net(x)))[..., 0]
        else:
            xb = x[:, None, :].expand(-1, len(actions), -1)
            ub = actions[None].expand(len(x), -1, -1)
            nxt = target_net(_step(spec, xb, ub))[..., 0].min(dim=1).values
        target = (1.0 - gamma) * h + gamma * torch.maximum(h, nxt)
    return ((field_net(x)[..., 0] - target) ** 2).mean()


def autograd_gradient(loss_fn, net):
    """Flat gradient of ``loss_fn()`` w.r.t. the parameters of ``net``."""
    params = list(net.parameters())
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                      for g, p in zip(grads, params)])


def finite_difference_gradient(loss_fn, net, eps=1e-5):
    """Central differences over every parameter of ``net``."""
    out = []
    with torch.no_grad():
        for p in net.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                out.append((up - down) / (2 * eps))
    return torch.tensor(out, dtype=torch.float64)


def gradient_relative_error(loss_fn, net, eps=1e-5):
    """max |g_auto - g_fd| / max(max |g_fd|, 1e-12)."""
    ga = autograd_gradient(loss_fn, net)
    gf = finite_difference_gradient(loss_fn, net, eps)
    return float((ga - gf).abs().max() / gf.abs().max().clamp_min(1e-12))
