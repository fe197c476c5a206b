"""Scenario configuration: TOML files with dotted sections, validated before any work starts.

One file describes one experiment. Unknown keys and out-of-range values are
rejected with the offending key path. ``defaults_toml()`` prints every default.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import List, Literal, Optional

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .constraints import build_constraint, make_field_constraint
from .dynamics import BestEffortPolicy, ConstantPolicy, make_system
from .fields import SIParams
from .grid import braking_grid, unicycle_slice
from .ocp import FEAS_TOL, OcpSpec, SolverConfig, mpc_policy

SUITES = ("containment", "monotonicity", "equivalence", "cis_invariance", "ca_equivalence")

# starts inside the analytic maximum EFR (d >= v**2 / 20)
BRAKING_STARTS = ((10.0, 10.0), (6.0, 10.0), (5.0, 9.0), (3.0, 7.0), (2.0, 6.0), (1.0, 4.0))


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SystemSection(_Strict):
    name: Literal["braking", "unicycle"] = "braking"
    dt: float = Field(0.1, gt=0, le=1)
    a_brk: float = Field(-10.0, lt=0)
    integrator: Literal["exact", "euler"] = "exact"
    a_max: float = Field(1.0, gt=0)
    omega_max: float = Field(math.pi / 4, gt=0)
    radius: float = Field(0.5, gt=0)


class SISection(_Strict):
    sigma: float = Field(0.12, ge=0)
    d_min: float = Field(0.0, ge=0)
    n_exp: float = Field(0.5, gt=0)
    k: float = Field(0.23, gt=0)
    eta: float = Field(0.0, ge=0)


class ConstraintSection(_Strict):
    family: Literal["pointwise", "cbf", "si", "hjr"] = "hjr"
    n: int = Field(2, ge=0, le=100)
    k: float = Field(0.05, gt=0)
    alpha_rate: float = Field(0.1, gt=0, le=1)
    mode: Literal["first_step", "two_step"] = "two_step"
    si: SISection = SISection()
    # learned HJ field: path to a checkpoint holding a "field" network
    field_checkpoint: Optional[str] = None


class SolverSection(_Strict):
    backend: Literal["auto", "layered", "structured"] = "auto"
    lattice_levels: int = Field(5, ge=2, le=21)
    beam_width: int = Field(32, ge=1)
    restarts: int = Field(4, ge=0)
    rounds: int = Field(6, ge=0)
    grad_iters: int = Field(30, ge=0)
    feas_tol: float = Field(FEAS_TOL, ge=0)


class ControllerSection(_Strict):
    kind: Literal["mpc", "rl", "best_effort", "zero"] = "mpc"
    N: int = Field(10, ge=1, le=200)
    solver: SolverSection = SolverSection()
    checkpoint: Optional[str] = None


class GridSection(_Strict):
    # default: 0.1 for braking, 0.05 for the unicycle slice
    resolution: Optional[float] = Field(None, gt=0)
    extent: float = Field(3.0, gt=0)
    v0: float = 1.0
    theta0: float = math.pi / 2


class RegionSection(_Strict):
    kind: Literal["policy", "state"] = "policy"
    T_max: int = Field(500, ge=1)
    feas_tol: float = Field(FEAS_TOL, ge=0)


class SimulateSection(_Strict):
    # None selects the documented start set of the system
    starts: Optional[List[List[float]]] = None
    steps: int = Field(300, ge=1)


class TrainSection(_Strict):
    iterations: int = Field(10000, ge=0)
    checkpoints: List[int] = [10, 100, 1000, 10000]
    lr: float = Field(1e-4, gt=0)
    batch: int = Field(256, ge=1)
    gamma: float = Field(0.99, gt=0, lt=1)
    hidden: List[int] = [64, 64]
    reward_scale: float = Field(0.005, gt=0)
    sample_lo: Optional[List[float]] = None
    sample_hi: Optional[List[float]] = None
    field: Literal["analytic", "learned"] = "analytic"
    field_gamma: float = Field(0.99, gt=0, lt=1)
    field_backup: Literal["policy", "lattice"] = "policy"
    target_sync: int = Field(100, ge=1)
    indicator: Literal["field", "policy_region"] = "policy_region"
    region_horizon: int = Field(100, ge=1)
    region_T_max: int = Field(500, ge=1)


class VerifySection(_Strict):
    suites: List[Literal[SUITES]] = list(SUITES)
    samples: int = Field(1000, ge=1)
    invariance_T: int = Field(100, ge=1)


class ScenarioConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**63)
    out: str = "out"
    jobs: int = Field(1, ge=1)
    system: SystemSection = SystemSection()
    constraint: ConstraintSection = ConstraintSection()
    controller: ControllerSection = ControllerSection()
    grid: GridSection = GridSection()
    region: RegionSection = RegionSection()
    simulate: SimulateSection = SimulateSection()
    train: TrainSection = TrainSection()
    verify: VerifySection = VerifySection()

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.constraint.family == "si" and self.system.name != "braking":
            raise ValueError("constraint.family: the safety index is defined for braking only")
        if self.constraint.family == "hjr" and self.system.name != "braking" and not self.constraint.field_checkpoint:
            raise ValueError("constraint.field_checkpoint: unicycle HJ constraints need a learned field")
        if self.controller.kind == "rl" and not self.controller.checkpoint:
            raise ValueError("controller.checkpoint: the rl controller needs a checkpoint path")
        dim = 2 if self.system.name == "braking" else 4
        for key in ("sample_lo", "sample_hi"):
            v = getattr(self.train, key)
            if v is not None and len(v) != dim:
                raise ValueError(f"train.{key}: expected {dim} values")
        if (self.train.sample_lo is None) != (self.train.sample_hi is None):
            raise ValueError("train.sample_lo and train.sample_hi must be given together")
        for s in self.simulate.starts or []:
            if len(s) != dim:
                raise ValueError(f"simulate.starts: each start needs {dim} values")
        return self


def _format_error(exc: ValidationError):
    lines = []
    for e in exc.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def parse_config(data: dict, seed: int | None = None) -> ScenarioConfig:
    if seed is not None:
        data = {**data, "seed": seed}
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path=None, seed: int | None = None, out: str | None = None, jobs: int | None = None):
    data = {}
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if out is not None:
        data["out"] = out
    if jobs is not None:
        data["jobs"] = jobs
    return parse_config(data, seed)


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def to_toml(cfg: ScenarioConfig) -> str:
    return tomli_w.dumps(_drop_none(cfg.model_dump()))


def defaults_toml() -> str:
    return to_toml(ScenarioConfig())


# ---------------------------------------------------------------- builders


def build_system(cfg: ScenarioConfig):
    s = cfg.system
    if s.name == "braking":
        return make_system("braking", dt=s.dt, a_brk=s.a_brk, integrator=s.integrator)
    return make_system("unicycle", dt=s.dt, a_max=s.a_max, omega_max=s.omega_max, radius=s.radius)


def build_grid(cfg: ScenarioConfig, spec):
    g = cfg.grid
    if spec.name == "braking":
        return braking_grid(g.resolution or 0.1)
    return unicycle_slice(g.resolution or 0.05, g.extent, g.v0, g.theta0)


def load_learned_field(path):
    from .rl import LearnedField, load

    ck = load(path)
    if ck.field is None:
        raise ConfigError(f"{path}: checkpoint has no field network")
    return LearnedField(ck.field, params={"iteration": ck.iteration, "seed": ck.seed})


def build_constraint_from(cfg: ScenarioConfig, spec):
    c = cfg.constraint
    if c.field_checkpoint:
        return make_field_constraint(load_learned_field(c.field_checkpoint), c.mode, h=spec.h, family="hjr")
    si = SIParams(c.si.sigma, c.si.d_min, c.si.n_exp, c.si.k, c.si.eta)
    return build_constraint(spec, c.family, n=c.n, k=c.k, alpha_rate=c.alpha_rate, si=si, mode=c.mode)


def build_solver(cfg: ScenarioConfig):
    s = cfg.controller.solver
    return SolverConfig(backend=s.backend, lattice_levels=s.lattice_levels, beam_width=s.beam_width,
                        restarts=s.restarts, rounds=s.rounds, grad_iters=s.grad_iters,
                        feas_tol=s.feas_tol, seed=cfg.seed)


def build_policy(cfg: ScenarioConfig, spec, g):
    c = cfg.controller
    if c.kind == "mpc":
        return mpc_policy(OcpSpec(spec, g, N=c.N, solver=build_solver(cfg)))
    if c.kind == "best_effort":
        return BestEffortPolicy(spec)
    if c.kind == "zero":
        return ConstantPolicy(spec)
    from .rl import TorchPolicy, load

    return TorchPolicy(load(c.checkpoint).policy)


def trainer_config(cfg: ScenarioConfig):
    from .rl import TrainerConfig

    t = cfg.train
    return TrainerConfig(
        iterations=t.iterations, checkpoints=tuple(t.checkpoints), lr=t.lr, batch=t.batch,
        seed=cfg.seed, gamma=t.gamma, hidden=tuple(t.hidden), reward_scale=t.reward_scale,
        sample_lo=None if t.sample_lo is None else tuple(t.sample_lo),
        sample_hi=None if t.sample_hi is None else tuple(t.sample_hi),
        learn_field=t.field == "learned", field_gamma=t.field_gamma, field_backup=t.field_backup,
        target_sync=t.target_sync, indicator=t.indicator, region_horizon=t.region_horizon,
    )
