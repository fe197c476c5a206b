"""Command-line entry point: simulate, region, train, verify, plot, defaults.

Exit status: 0 success, 1 a verification check failed or training diverged,
2 invalid configuration or unreadable input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    BRAKING_STARTS,
    ConfigError,
    build_constraint_from,
    build_grid,
    build_policy,
    build_solver,
    build_system,
    defaults_toml,
    load_config,
    to_toml,
    trainer_config,
)
from .csvio import ParseError, atomic_write_text, read_region, read_trajectory, trajectory_to_csv, write_json, write_region
from .dynamics import rollout
from .ocp import policy_feasibility
from .regions import label_policy_region, label_state_region, max_efr_braking, region_stats

log = logging.getLogger("feasregions")

UNICYCLE_STARTS = 20
UNICYCLE_CLEARANCE = 0.5


class CliError(Exception):
    def __init__(self, msg, code=2):
        super().__init__(msg)
        self.code = code


def default_starts(cfg, spec):
    """Documented start sets: six braking states inside the maximum EFR, or seeded unicycle
    starts on the configured slice with at least ``UNICYCLE_CLEARANCE`` m to the obstacle."""
    if cfg.simulate.starts is not None:
        return np.asarray(cfg.simulate.starts, dtype=float).reshape(-1, spec.state_dim)
    if spec.name == "braking":
        return np.asarray(BRAKING_STARTS, dtype=float)
    return unicycle_starts(spec, cfg.seed, cfg.grid.extent, cfg.grid.v0, cfg.grid.theta0)


def unicycle_starts(spec, seed, extent=3.0, v0=1.0, theta0=np.pi / 2, count=UNICYCLE_STARTS,
                    clearance=UNICYCLE_CLEARANCE):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        y, z = rng.uniform(-extent, extent, size=2)
        x = np.array([y, z, v0, theta0])
        if spec.distance(x) >= spec.obstacle_radius + clearance:
            out.append(x)
    return np.array(out)


def _out_dir(cfg):
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _save_config(cfg, d):
    atomic_write_text(d / "config.toml", to_toml(cfg))


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg):
    spec = build_system(cfg)
    g = build_constraint_from(cfg, spec)
    policy = build_policy(cfg, spec, g)
    d = _out_dir(cfg)
    _save_config(cfg, d)
    starts = default_starts(cfg, spec)
    summary = []
    for i, x0 in enumerate(starts):
        tr = rollout(spec, policy, x0, cfg.simulate.steps)
        _, _, viol = policy_feasibility(spec, g, policy, tr.states)
        name = f"traj_{i:03d}.csv"
        meta = {"system": spec.name, "policy": getattr(policy, "name", "policy"), "start_index": i,
                "family": g.family}
        atomic_write_text(d / name, trajectory_to_csv(spec, tr.states, tr.actions, viol, meta))
        summary.append({"file": name, "start": x0.tolist(), "violated_at": tr.violated_at})
        log.info("%s: violated_at=%s", name, tr.violated_at)
    write_json(d / "simulate.json", {"trajectories": summary})
    print(f"wrote {len(summary)} trajectories to {d}")
    return 0


def sweep_region(cfg, spec, g, grid, policy=None):
    r = cfg.region
    if r.kind == "state":
        return label_state_region(spec, g, grid, build_solver(cfg), cfg.controller.N, r.T_max,
                                  r.feas_tol, cfg.jobs)
    policy = policy or build_policy(cfg, spec, g)
    return label_policy_region(spec, g, policy, grid, r.T_max, r.feas_tol, cfg.jobs)


def _stats(region, spec):
    st = region_stats(region)
    if spec.name == "braking":
        mx = int(max_efr_braking(region.grid, spec.a_brk).efr.sum())
        st["max_efr"] = mx
        st["efr_over_max_efr"] = st["efr"] / mx if mx else 0.0
    return st


def cmd_region(cfg):
    spec = build_system(cfg)
    g = build_constraint_from(cfg, spec)
    grid = build_grid(cfg, spec)
    d = _out_dir(cfg)
    _save_config(cfg, d)
    region = sweep_region(cfg, spec, g, grid)
    write_region(d / "region.csv", region)
    st = _stats(region, spec)
    write_json(d / "stats.json", {"stats": st, "metadata": {k: str(v) for k, v in region.metadata.items()}})
    print(json.dumps(st, sort_keys=True))
    return 0


def training_field(cfg, spec):
    from .fields import SIParams, braking_cbf, hjr_braking_analytic, safety_index, unicycle_cbf

    c = cfg.constraint
    if cfg.train.field == "learned":
        return None
    if c.family == "hjr" and spec.name == "braking":
        return hjr_braking_analytic(spec.a_brk)
    if c.family == "cbf":
        return braking_cbf(c.k) if spec.name == "braking" else unicycle_cbf(c.k)
    if c.family == "si":
        return safety_index(SIParams(c.si.sigma, c.si.d_min, c.si.n_exp, c.si.k, c.si.eta))
    raise ConfigError(f"constraint.family={c.family!r} has no feasibility field for training; "
                      "use hjr, cbf, si or train.field='learned'")


def cmd_train(cfg):
    from .constraints import make_field_constraint
    from .rl import DivergenceError, LearnedField, TorchPolicy, save, train

    spec = build_system(cfg)
    field = training_field(cfg, spec)
    grid = build_grid(cfg, spec)
    d = _out_dir(cfg)
    _save_config(cfg, d)
    tc = trainer_config(cfg)
    g_train = None if field is None else build_constraint_from(cfg, spec)
    try:
        cks = train(tc, spec, field, g=g_train)
    except DivergenceError as exc:
        path = d / f"ckpt_{exc.last_good.iteration:06d}.bin" if exc.last_good else None
        if path is not None:
            save(path, exc.last_good)
        raise CliError(f"training diverged: {exc}; last good checkpoint: {path}", code=1) from None
    evolution = []
    for ck in cks:
        name = f"ckpt_{ck.iteration:06d}.bin"
        save(d / name, ck)
        if field is None:
            g = make_field_constraint(LearnedField(ck.field), h=spec.h)
        else:
            g = g_train
        region = label_policy_region(spec, g, TorchPolicy(ck.policy), grid, cfg.train.region_T_max,
                                     cfg.region.feas_tol, cfg.jobs)
        rname = f"region_{ck.iteration:06d}.csv"
        write_region(d / rname, region)
        evolution.append({"iteration": ck.iteration, "checkpoint": name, "region": rname, **_stats(region, spec)})
        log.info("iteration %d: efr=%d ifr=%d", ck.iteration, evolution[-1]["efr"], evolution[-1]["ifr"])
    write_json(d / "evolution.json", {"evolution": evolution})
    for e in evolution:
        print(f"iteration {e['iteration']:>6}: efr={e['efr']} ifr={e['ifr']}")
    return 0


def cmd_verify(cfg):
    from .suites import BrakingLab, run_suites

    spec = build_system(cfg)
    if spec.name != "braking":
        raise CliError("verify needs system.name = 'braking' (the suites compare against the analytic maximum EFR)")
    lab = BrakingLab(spec, build_grid(cfg, spec), N=cfg.controller.N, T_max=cfg.region.T_max,
                     jobs=cfg.jobs, feas_tol=cfg.region.feas_tol)
    report = run_suites(lab, cfg.verify.suites, cfg.verify.samples, cfg.seed, cfg.verify.invariance_T)
    d = _out_dir(cfg)
    _save_config(cfg, d)
    ok = True
    out = {}
    for suite, checks in report.items():
        out[suite] = [c.as_dict() for c in checks]
        for c in checks:
            ok &= c.passed
            print(f"{'PASS' if c.passed else 'FAIL'} [{suite}] {c.name}")
    write_json(d / "verify.json", {"passed": ok, "suites": out})
    return 0 if ok else 1


def cmd_plot(cfg, files):
    from .plotting import PlotError, region_figure, trajectory_arrays, write_figure

    if not files:
        raise CliError("plot needs at least one region or trajectory file")
    region, trajs, system = None, [], None
    for f in files:
        try:
            head = Path(f).read_text().split("\n", 1)[0]
        except OSError as exc:
            raise CliError(f"{f}: {exc.strerror}") from None
        if not head.strip():
            raise CliError(f"{f}:1: empty file")
        try:
            if "format=region_map" in head:
                if region is not None:
                    raise CliError("plot takes at most one region file")
                region = read_region(f)
                system = region.metadata.get("system", system)
            elif "format=trajectory" in head:
                meta, cols, rows = read_trajectory(f)
                system = meta.get("meta.system", system)
                trajs.append((cols, rows))
            else:
                raise CliError(f"{f}:1: not a region map or trajectory file")
        except (ParseError, PlotError) as exc:
            raise CliError(str(exc)) from None
    spec = build_system(cfg.model_copy(update={"system": cfg.system.model_copy(update={"name": system})})
                        if system in ("braking", "unicycle") else cfg)
    try:
        arrays = [trajectory_arrays(c, r, spec.state_names) for c, r in trajs]
    except PlotError as exc:
        raise CliError(str(exc)) from None
    names = spec.state_names[:2]
    kw = {}
    if spec.name == "braking":
        kw["braking_a_brk"] = spec.a_brk
    else:
        kw["obstacle"] = (spec.obstacle_center, spec.obstacle_radius)
    svg = region_figure(region, arrays, axis_names=names, **kw)
    d = _out_dir(cfg)
    path = d / "figure.svg"
    write_figure(path, svg)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------- parsing


def build_parser():
    p = argparse.ArgumentParser(prog="feasregions", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML scenario file")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, metavar="N", help="seed (overrides config)")
    common.add_argument("--jobs", type=int, metavar="N", help="worker processes for region sweeps")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="roll out the controller from start states")
    sub.add_parser("region", parents=[common], help="label a grid of states by feasibility")
    sub.add_parser("train", parents=[common], help="train an RL policy and sweep each checkpoint")
    sub.add_parser("verify", parents=[common], help="run the theorem suites")
    pl = sub.add_parser("plot", parents=[common], help="draw region and trajectory files as SVG")
    pl.add_argument("files", nargs="*", help="region CSV and/or trajectory CSVs")
    sub.add_parser("defaults", help="print the default configuration")
    return p


COMMANDS = {"simulate": cmd_simulate, "region": cmd_region, "train": cmd_train, "verify": cmd_verify}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(defaults_toml())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, seed=args.seed, out=args.out, jobs=args.jobs)
        if args.command == "plot":
            return cmd_plot(cfg, args.files)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
