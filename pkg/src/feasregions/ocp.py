"""Finite-horizon virtual-time OCPs, receding-horizon (MPC) policies and initial-feasibility tests.

All solves are batched over root states ``x0`` of shape (M, state_dim).

Two backends:

* ``layered``: generic. A beam search over an action lattice (pruned by
  constraint residuals, with a constant-action look-ahead on the remaining
  constrained steps) seeds an augmented-Lagrangian projected-gradient refinement
  with random restarts. Gradients come from torch autograd.
* ``structured``: braking only. Exploits monotonicity of the braking model:
  two-step constraints depend on the first action alone (1-D search), and the
  pointwise constraint reduces to d_n >= 0, solved by a water-filling plan.

``auto`` picks ``structured`` for braking and ``layered`` otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .constraints import VirtualTimeConstraint
from .dynamics import Braking, SystemSpec, clamp, step

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "auto"
    lattice_levels: int = 5
    beam_width: int = 32
    restarts: int = 4
    rounds: int = 6
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    grad_iters: int = 30
    feas_tol: float = FEAS_TOL
    seed: int = 0

    def __post_init__(self):
        if self.backend not in ("auto", "layered", "structured"):
            raise ValueError(f"unknown solver backend {self.backend!r}")
        if self.lattice_levels < 2 or self.beam_width < 1 or self.restarts < 0 or self.rounds < 0:
            raise ValueError("invalid solver configuration")
        if self.feas_tol < 0:
            raise ValueError("feas_tol must be nonnegative")


@dataclass(frozen=True)
class OcpSpec:
    """Virtual-time OCP template: objective horizon N, discount gamma, constraint g."""

    spec: SystemSpec
    g: VirtualTimeConstraint
    N: int = 10
    gamma: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    feasibility_only: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def horizon(self):
        return max(self.N, self.g.n)

    def feasibility_problem(self):
        return replace(self, feasibility_only=True)


@dataclass
class OcpSolution:
    actions: np.ndarray  # (M, H, m)
    states: np.ndarray  # (M, H+1, n)
    objective: np.ndarray  # (M,)
    max_violation: np.ndarray  # (M,)
    feasible: np.ndarray  # (M,) bool
    backend: str = ""
    iterations: int = 0
    restarts: int = 0

    def __len__(self):
        return len(self.objective)


# ---------------------------------------------------------------- evaluation


def simulate_plan(spec, x0, actions):
    """States (M, H+1, n) reached by open-loop ``actions`` (M, H, m) from ``x0``."""
    x = np.asarray(x0, dtype=float)
    H = actions.shape[-2]
    out = np.empty(x.shape[:-1] + (H + 1, spec.state_dim))
    out[..., 0, :] = x
    for i in range(H):
        x = step(spec, x, actions[..., i, :])
        out[..., i + 1, :] = x
    return out


def plan_objective(p: OcpSpec, states, actions):
    r = p.spec.reward(states[..., : p.N, :], actions[..., : p.N, :])
    disc = p.gamma ** np.arange(p.N)
    return (r * disc).sum(axis=-1)


def evaluate_plan(p: OcpSpec, x0, actions, backend="", iterations=0, restarts=0):
    """Honest re-simulation of ``actions`` into an OcpSolution."""
    actions = clamp(p.spec, actions)
    states = simulate_plan(p.spec, x0, actions)
    viol = np.asarray(p.g.max_violation(states[..., : p.g.n + 1, :]))
    obj = plan_objective(p, states, actions)
    return OcpSolution(
        actions=actions,
        states=states,
        objective=obj,
        max_violation=viol,
        feasible=viol <= p.solver.feas_tol,
        backend=backend,
        iterations=iterations,
        restarts=restarts,
    )


def _select(p, cands):
    """Pick per root state among candidate solutions (list of OcpSolution).

    Feasible first; then best objective; ties broken by smallest action norm.
    Infeasible candidates are ranked by max violation.
    """
    tol = p.solver.feas_tol
    viol = np.stack([c.max_violation for c in cands], axis=1)
    obj = np.stack([c.objective for c in cands], axis=1)
    norm = np.stack([np.sum(c.actions**2, axis=(-2, -1)) for c in cands], axis=1)
    infeasible = viol > tol
    viol_key = np.where(infeasible, viol, 0.0)
    obj_key = np.where(infeasible | p.feasibility_only, 0.0, -np.round(obj, 9))
    M = viol.shape[0]
    best = np.lexsort((norm, obj_key, viol_key), axis=-1)[:, 0]
    pick = lambda name: np.stack([getattr(c, name) for c in cands], axis=1)[np.arange(M), best]  # noqa: E731
    return OcpSolution(
        actions=pick("actions"),
        states=pick("states"),
        objective=pick("objective"),
        max_violation=pick("max_violation"),
        feasible=pick("feasible"),
    )


# ---------------------------------------------------------------- structured (braking)


def _bisect(fn, good, bad, iters=60):
    """Shrink the interval between ``good`` (fn True) and ``bad`` (fn False) elementwise."""
    for _ in range(iters):
        mid = 0.5 * (good + bad)
        ok = fn(mid)
        good = np.where(ok, mid, good)
        bad = np.where(ok, bad, mid)
    return good, bad


def _first_action_residual(p, x0, a):
    """Step-1 residual of a two-step constraint for first actions ``a`` (broadcast with x0)."""
    spec = p.spec
    shape = np.broadcast_shapes(x0.shape[:-1], a.shape[:-1])
    x0b = np.broadcast_to(x0, shape + (spec.state_dim,))
    x1 = step(spec, x0b, np.broadcast_to(a, shape + (a.shape[-1],)))
    return np.asarray(p.g.per_step[1](np.stack([x0b, x1], axis=-2)))


def _structured_two_step(p, x0, K=41):
    spec = p.spec
    M = len(x0)
    lat = np.linspace(spec.a_brk, 0.0, K)
    g1 = _first_action_residual(p, x0[:, None, :], lat[None, :, None])  # (M, K)
    strict = g1 <= 0
    idx_strict = np.where(strict.any(1), K - 1 - np.argmax(strict[:, ::-1], axis=1), -1)
    # no strictly feasible action: min violation, ties toward the gentlest action.
    # Taking the gentlest action within feas_tol instead lets rounding drift accumulate
    # along the boundary into real violations.
    idx_min = K - 1 - np.argmin(g1[:, ::-1], axis=1)
    idx = np.where(idx_strict >= 0, idx_strict, idx_min)
    a = lat[idx]
    refine = (idx_strict >= 0) & (idx_strict < K - 1)
    if refine.any():
        xr = x0[refine]
        lo, hi = lat[idx_strict[refine]], lat[idx_strict[refine] + 1]
        ok = lambda aa: _first_action_residual(p, xr, aa[:, None]) <= 0  # noqa: E731
        lo, _ = _bisect(ok, lo, hi)
        a = a.copy()
        a[refine] = lo
    acts = np.zeros((M, p.horizon, 1))
    acts[:, 0, 0] = a
    return acts


def _pointwise_weights(spec, n):
    j = np.arange(n, dtype=float)
    return n - j - (0.5 if spec.integrator == "exact" else 1.0)


def _final_distance(spec, x0, acts):
    return simulate_plan(spec, x0, acts)[:, -1, 0]


def _structured_pointwise(p, x0):
    """Minimum-effort plan with d_n >= 0: b_j = min(|a_brk|, lam * w_j), lam by bisection."""
    spec, n, H = p.spec, p.g.n, p.horizon
    M = len(x0)
    bmax = -spec.a_brk
    w = _pointwise_weights(spec, n)
    lam_max = bmax / w[w > 0].min()

    def plan(lam):
        acts = np.zeros((len(lam), H, 1))
        acts[:, :n, 0] = 0.0 - np.minimum(bmax, lam[:, None] * w[None, :])
        return acts

    def ok_for(xs):
        return lambda lam: _final_distance(spec, xs, plan(lam)[:, :n]) >= 0

    lam = np.zeros(M)
    coast_ok = ok_for(x0)(np.zeros(M))
    full_ok = ok_for(x0)(np.full(M, lam_max))
    need = ~coast_ok & full_ok
    if need.any():
        k = int(need.sum())
        lam[need], _ = _bisect(ok_for(x0[need]), np.full(k, lam_max), np.zeros(k))
    lam[~coast_ok & ~full_ok] = lam_max
    return plan(lam)


def _structured(p, x0):
    spec, g = p.spec, p.g
    if not isinstance(spec, Braking):
        raise ValueError("structured backend supports the braking system only")
    if g.n == 0:
        acts = np.zeros((len(x0), p.horizon, 1))
    elif g.n == 1:
        acts = _structured_two_step(p, x0)
    elif g.family == "pointwise":
        acts = _structured_pointwise(p, x0)
    else:
        raise ValueError(f"structured backend cannot handle {g.family} with n={g.n}")
    return evaluate_plan(p, x0, acts, backend="structured")


def lazy_first_action(p: OcpSpec, x0):
    """Least-effort first action that keeps the OCP feasible (braking, structured).

    Used as the adversarial "lazy" initially feasible policy when labelling
    endless feasibility of states without a proven equivalence.
    """
    spec, g = p.spec, p.g
    x0 = np.asarray(x0, dtype=float)
    M = len(x0)
    if g.n == 0:
        return np.zeros((M, 1))
    if g.n == 1:
        return _structured_two_step(p, x0)[:, 0]
    if g.family != "pointwise" or not isinstance(spec, Braking):
        raise ValueError("lazy first action is implemented for braking pointwise and two-step constraints")
    n = g.n

    def dn(a0, xs):
        acts = np.full((len(xs), n, 1), spec.a_brk)
        acts[:, 0, 0] = a0
        return _final_distance(spec, xs, acts)

    a = np.full(M, spec.a_brk)
    coast = dn(np.zeros(M), x0) >= 0
    a[coast] = 0.0
    need = ~coast & (dn(np.full(M, spec.a_brk), x0) >= 0)
    if need.any():
        xs = x0[need]
        lo, _ = _bisect(lambda aa: dn(aa, xs) >= 0, np.full(len(xs), spec.a_brk), np.zeros(len(xs)))
        a[need] = lo
    return a[:, None]


# ---------------------------------------------------------------- layered (generic)


def _lattice(spec, levels):
    axes = [np.linspace(lo, hi, levels) for lo, hi in zip(spec.lower, spec.upper)]
    return np.array(list(product(*axes)))


def _corner_actions(spec):
    corners = list(product(*zip(spec.lower, spec.upper)))
    mid = tuple(np.clip(0.0, lo, hi) for lo, hi in zip(spec.lower, spec.upper))
    return np.array(corners + [mid])


def _lookahead_violation(p, prefix_states, t_next, cont):
    """Min over constant continuations of the max residual over the remaining constrained steps."""
    spec, g = p.spec, p.g
    n = g.n
    if t_next >= n:
        return np.full(prefix_states.shape[:-2], -np.inf)
    best = np.full(prefix_states.shape[:-2], np.inf)
    for u in cont:
        s = [prefix_states[..., i, :] for i in range(prefix_states.shape[-2])]
        x = s[-1]
        ub = np.broadcast_to(u, x.shape[:-1] + (spec.action_dim,))
        worst = np.full(x.shape[:-1], -np.inf)
        for i in range(t_next + 1, n + 1):
            x = step(spec, x, ub)
            s.append(x)
            worst = np.maximum(worst, np.asarray(g.per_step[i](np.stack(s, axis=-2))))
        best = np.minimum(best, worst)
    return best


def _lookahead_objective(p, x_last, t_next, cont):
    """Best discounted reward-to-go over constant continuations from step ``t_next`` to N - 1.

    ``cont`` holds actions broadcastable against ``x_last``'s batch shape.
    """
    spec = p.spec
    if t_next >= p.N:
        return np.zeros(x_last.shape[:-1])
    best = np.full(x_last.shape[:-1], -np.inf)
    for u in cont:
        ub = np.broadcast_to(u, x_last.shape[:-1] + (spec.action_dim,))
        x, tot = x_last, 0.0
        for i in range(t_next, p.N):
            tot = tot + p.gamma**i * np.asarray(spec.reward(x, ub))
            x = step(spec, x, ub)
        best = np.maximum(best, tot)
    return best


def _beam_search(p, x0):
    spec, g, cfg = p.spec, p.g, p.solver
    H, n, W = p.horizon, g.n, cfg.beam_width
    tol = cfg.feas_tol
    lat = _lattice(spec, cfg.lattice_levels)
    cont = _corner_actions(spec)
    K = len(lat)
    M = len(x0)
    states = x0[:, None, None, :]  # (M, B, t+1, n)
    acts = np.zeros((M, 1, 0, spec.action_dim))
    viol = np.asarray(g.g0(x0))[:, None]
    obj = np.zeros((M, 1))
    for t in range(H):
        B = states.shape[1]
        x_t = np.repeat(states[:, :, -1, :], K, axis=1)  # (M, B*K, n)
        u_t = np.broadcast_to(lat[None, None], (M, B, K, lat.shape[1])).reshape(M, B * K, -1)
        x_next = step(spec, x_t, u_t)
        states = np.concatenate([np.repeat(states, K, axis=1), x_next[:, :, None, :]], axis=2)
        acts = np.concatenate([np.repeat(acts, K, axis=1), u_t[:, :, None, :]], axis=2)
        viol = np.repeat(viol, K, axis=1)
        obj = np.repeat(obj, K, axis=1)
        if t < p.N:
            obj = obj + p.gamma**t * np.asarray(spec.reward(x_t, u_t))
        if t + 1 <= n:
            viol = np.maximum(viol, np.asarray(g.per_step[t + 1](states)))
        ahead = np.maximum(viol, _lookahead_violation(p, states, t + 1, cont))
        key_v = np.maximum(ahead - tol, 0.0)
        if p.feasibility_only:
            key_o = np.zeros_like(obj)
        else:
            # rank partial plans by what they can still collect, not only what they have
            key_o = -(obj + _lookahead_objective(p, states[:, :, -1, :], t + 1, [cont[-1], u_t]))
        keep = min(W, states.shape[1])
        order = np.lexsort((key_o, key_v), axis=-1)[:, :keep]
        take = lambda a: np.take_along_axis(a, order.reshape(order.shape + (1,) * (a.ndim - 2)), axis=1)  # noqa: E731
        states, acts, viol, obj = take(states), take(acts), take(viol), take(obj)
    return acts[:, 0]


def _row_rng(seed, x):
    words = np.ascontiguousarray(x, dtype=np.float64).view(np.uint64)
    return np.random.default_rng([seed] + [int(w) for w in words])


def _refine(p, x0, U0):
    """Augmented-Lagrangian projected gradient from starts U0 (M, R, H, m); returns refined plans."""
    import torch

    spec, g, cfg = p.spec, p.g, p.solver
    n = g.n
    lo = torch.as_tensor(spec.lower, dtype=torch.float64)
    hi = torch.as_tensor(spec.upper, dtype=torch.float64)
    span = hi - lo
    M, R = U0.shape[:2]
    X0 = torch.as_tensor(x0, dtype=torch.float64)[:, None, :].expand(M, R, spec.state_dim)
    disc = torch.as_tensor(p.gamma ** np.arange(p.N), dtype=torch.float64)

    def pieces(U):
        xs = [X0]
        x = X0
        for i in range(U.shape[-2]):
            x = spec._step(x, U[..., i, :])
            xs.append(x)
        S = torch.stack(xs, dim=-2)
        res = g.evaluate(S[..., : n + 1, :])
        if p.feasibility_only:
            obj = torch.zeros(M, R, dtype=torch.float64)
        else:
            obj = (spec.reward(S[..., : p.N, :], U[..., : p.N, :]) * disc).sum(-1)
        return obj, res

    def al_loss(U, lam, rho):
        obj, res = pieces(U)
        if p.feasibility_only:
            return res.max(dim=-1).values, res
        pen = (torch.clamp(lam + rho * res, min=0.0) ** 2 - lam**2) / (2.0 * rho)
        return -obj + pen.sum(-1), res

    U = torch.as_tensor(U0, dtype=torch.float64).clone()
    lam = torch.zeros(M, R, n + 1, dtype=torch.float64)
    rho = cfg.penalty0
    s = torch.full((M, R, 1, 1), 0.25, dtype=torch.float64)
    iters = 0
    with torch.enable_grad():
        for _ in range(cfg.rounds):
            for _ in range(cfg.grad_iters):
                iters += 1
                Ug = U.detach().requires_grad_(True)
                loss, _ = al_loss(Ug, lam, rho)
                (grad,) = torch.autograd.grad(loss.sum(), Ug)
                scale = grad.abs().amax(dim=(-2, -1), keepdim=True).clamp_min(1e-300)
                with torch.no_grad():
                    trial = torch.maximum(torch.minimum(U - s * span * grad / scale, hi), lo)
                    new_loss, _ = al_loss(trial, lam, rho)
                    better = (new_loss < loss.detach())[..., None, None]
                    U = torch.where(better, trial, U)
                    s = torch.where(better, torch.clamp(s * 1.5, max=1.0), s * 0.5)
            with torch.no_grad():
                _, res = al_loss(U, lam, rho)
                lam = torch.clamp(lam + rho * res, min=0.0)
            rho *= cfg.penalty_growth
    return U.detach().numpy(), iters


def _layered(p, x0, chunk=64):
    if len(x0) > chunk:
        parts = [_layered(p, x0[i : i + chunk], chunk) for i in range(0, len(x0), chunk)]
        out = OcpSolution(
            *(np.concatenate([getattr(q, f) for q in parts]) for f in
              ("actions", "states", "objective", "max_violation", "feasible"))
        )
        out.backend, out.iterations, out.restarts = "layered", parts[0].iterations, p.solver.restarts
        return out
    spec, cfg = p.spec, p.solver
    H, m = p.horizon, spec.action_dim
    M = len(x0)
    seed_plan = _beam_search(p, x0)
    cands = [evaluate_plan(p, x0, seed_plan)]
    iters = 0
    if p.g.differentiable and cfg.restarts >= 0 and cfg.rounds > 0 and cfg.grad_iters > 0:
        starts = np.empty((M, cfg.restarts + 1, H, m))
        starts[:, 0] = seed_plan
        for i in range(M):
            rng = _row_rng(cfg.seed, x0[i])
            starts[i, 1:] = rng.uniform(spec.lower, spec.upper, size=(cfg.restarts, H, m))
        refined, iters = _refine(p, x0, starts)
        for r in range(refined.shape[1]):
            cands.append(evaluate_plan(p, x0, refined[:, r]))
    best = _select(p, cands)
    best.backend, best.iterations, best.restarts = "layered", iters, cfg.restarts
    return best


# ---------------------------------------------------------------- public API


def resolve_backend(p: OcpSpec):
    b = p.solver.backend
    if b == "auto":
        return "structured" if isinstance(p.spec, Braking) else "layered"
    return b


def solve_ocp(p: OcpSpec, x0):
    """Solve the OCP rooted at each row of ``x0``; infeasible outcomes are valid results."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    p.spec.check_state(x0)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    if len(x0) == 0:
        H, m, n = p.horizon, p.spec.action_dim, p.spec.state_dim
        return OcpSolution(np.zeros((0, H, m)), np.zeros((0, H + 1, n)), np.zeros(0), np.zeros(0),
                           np.zeros(0, dtype=bool), resolve_backend(p))
    if resolve_backend(p) == "structured":
        return _structured(p, x0)
    return _layered(p, x0)


class MPCPolicy:
    """Receding-horizon policy: solve the OCP at x and apply the first action.

    On an infeasible solve the minimum-violation plan's first action is applied
    and the state is flagged in ``last_infeasible``.
    """

    name = "mpc"

    def __init__(self, ocp: OcpSpec):
        self.ocp = ocp
        self.last_infeasible = np.zeros(0, dtype=bool)

    def solve(self, x):
        sol = solve_ocp(self.ocp, x)
        self.last_infeasible = ~sol.feasible
        return sol

    def plan(self, x, n):
        """First action and the n-step virtual plan (M, n, m) the controller commits to."""
        sol = self.solve(x)
        return sol.actions[:, 0], sol.actions[:, :n]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        return self.solve(flat).actions[:, 0].reshape(x.shape[:-1] + (-1,))


def mpc_policy(ocp: OcpSpec):
    return MPCPolicy(ocp)


def policy_plan(spec, policy, x, n):
    """First action and n-step virtual action sequence of ``policy`` from states x (M, n_x).

    Policies exposing ``plan`` (MPC) report their own open-loop plan; feedback
    policies are rolled forward in virtual time.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if hasattr(policy, "plan"):
        u0, acts = policy.plan(x, max(n, 1))
        return clamp(spec, u0), clamp(spec, acts[:, :n])
    acts = np.empty((len(x), n, spec.action_dim))
    u0 = clamp(spec, policy(x))
    xi, ui = x, u0
    for i in range(n):
        acts[:, i] = ui
        xi = step(spec, xi, ui)
        if i + 1 < n:
            ui = clamp(spec, policy(xi))
    return u0, acts


def policy_feasibility(spec, g, policy, x, feas_tol=FEAS_TOL):
    """(initially feasible mask, first action, max residual) of ``policy`` at states x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u0, acts = policy_plan(spec, policy, x, g.n)
    states = simulate_plan(spec, x, acts)
    viol = np.asarray(g.max_violation(states))
    return viol <= feas_tol, u0, viol


def is_initially_feasible_policy(spec, g, policy, x, feas_tol=FEAS_TOL):
    ok, _, _ = policy_feasibility(spec, g, policy, x, feas_tol)
    return ok if np.ndim(x) > 1 else bool(ok[0])


def is_initially_feasible_state(spec, g, x, solver: SolverConfig | None = None, N=10):
    """Whether some action sequence satisfies g from x (feasibility-only solve)."""
    p = OcpSpec(spec, g, N=N, solver=solver or SolverConfig(), feasibility_only=True)
    sol = solve_ocp(p, x)
    return sol.feasible if np.ndim(x) > 1 else bool(sol.feasible[0])
