"""Command-line front door.

Exit codes: 0 ok, 1 runtime/solver error, 2 usage or validation error.
Every CSV starts with a `# manifest:` comment line followed by a header row;
identical invocations (same seed) produce byte-identical output.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import __version__
from .control import optimal_control
from .drift import SolverError
from .fluid import fluid_trajectory, is_stable, stability_threshold
from .model import ConfigError, load_config, violations
from .policy import parse_policy, policy_label, tie_label
from .presets import (
    CONTROL_HEADER,
    DRIFT_HEADER,
    FLUID_HEADER,
    PRESET_NAMES,
    STABILITY_HEADER,
    TRAJECTORY_HEADER,
    drift_rows,
    fluid_rows,
    run_preset,
    trajectory_rows,
    write_csv,
)
from .simulator import run_trajectory


def _out(args):
    if args.out:
        return open(args.out, "w")
    return sys.stdout


def _parse_x0(text: str, K: int) -> np.ndarray:
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        vals = vals * K
    if len(vals) != K:
        raise ConfigError([f"x0 needs {K} entries"])
    return np.array(vals)


def _manifest(args, cfg, **extra) -> dict:
    from .model import config_to_dict

    doc = {"command": args.command, "version": __version__, "config": config_to_dict(cfg)}
    doc.update(extra)
    return doc


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return 2
    print(f"ok: {cfg.n_classes} classes, arrival_kind={cfg.arrival_kind}")
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    spec = parse_policy(args.policy, args.tie)
    x0 = _parse_x0(args.x0, cfg.n_classes)
    seed = cfg.seed if args.seed is None else args.seed
    traj = run_trajectory(
        spec, cfg, r=args.r, x0=x0, horizon=args.horizon,
        sample_dt=args.sample_dt, seed=seed,
    )
    man = _manifest(args, cfg, policy=policy_label(spec), tie=tie_label(spec.tie),
                    r=args.r, horizon=args.horizon, seed=seed,
                    sample_dt=args.sample_dt, x0=list(map(float, x0)))
    write_csv(_out(args), TRAJECTORY_HEADER, trajectory_rows(traj), man)
    return 0


def cmd_drift(args) -> int:
    cfg = load_config(args.config)
    spec = parse_policy(args.policy, args.tie)
    K = cfg.n_classes
    if args.sat == "all":
        sat = set(range(K))
    elif args.sat in ("none", ""):
        sat = set()
    else:
        sat = {int(v) - 1 for v in args.sat.split(",")}
    U = frozenset(range(K)) - sat
    man = _manifest(args, cfg, policy=policy_label(spec), tie=tie_label(spec.tie),
                    saturated=sorted(k + 1 for k in sat))
    write_csv(_out(args), DRIFT_HEADER, drift_rows(spec, cfg, [U]), man)
    return 0


def cmd_fluid(args) -> int:
    cfg = load_config(args.config)
    spec = parse_policy(args.policy, args.tie)
    x0 = _parse_x0(args.x0, cfg.n_classes)
    traj = fluid_trajectory(spec, cfg, x0)
    man = _manifest(args, cfg, policy=policy_label(spec), tie=tie_label(spec.tie),
                    x0=list(map(float, x0)))
    write_csv(_out(args), FLUID_HEADER, fluid_rows(traj), man)
    return 0


def cmd_stability(args) -> int:
    cfg = load_config(args.config)
    spec = parse_policy(args.policy, args.tie)
    rep = is_stable(spec, cfg)
    rho_star = float("nan")
    if args.sweep:
        name, lo, hi = args.sweep.split(":")
        if not name.startswith("lambda"):
            raise ConfigError([f"unknown sweep parameter {name!r}"])
        k = int(name[len("lambda"):]) - 1
        thr = stability_threshold(spec, cfg, k, float(lo), float(hi))
        rho_star = thr.rho_star
    man = _manifest(args, cfg, policy=policy_label(spec), tie=tie_label(spec.tie),
                    sweep=args.sweep)
    rows = [[policy_label(spec), tie_label(spec.tie), rep.rho, int(rep.max_stable),
             int(rep.policy_stable), rho_star]]
    write_csv(_out(args), STABILITY_HEADER, rows, man)
    return 0


def cmd_control(args) -> int:
    cfg = load_config(args.config)
    x0 = _parse_x0(args.x0, cfg.n_classes)
    oc = optimal_control(cfg, x0)
    rows = []
    for i, seg in enumerate(oc.segments):
        for k in range(cfg.n_classes):
            rows.append([i, float(seg.t_start), float(seg.t_end), k + 1,
                         float(seg.u[k]), float(seg.x_start[k])])
    man = _manifest(args, cfg, x0=list(map(float, x0)))
    write_csv(_out(args), CONTROL_HEADER, rows, man)
    return 0


def cmd_preset(args) -> int:
    files = run_preset(
        args.name, args.out or ".", seed=args.seed, r=args.r,
        horizon=args.horizon, replications=args.reps, grid_points=args.grid_points,
    )
    for f in files:
        print(f)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="oppsched",
        description="Opportunistic scheduling: simulation, fluid limits, stability, control",
    )
    p.add_argument("--version", action="version", version=f"oppsched {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("validate", help="validate a config file")
    sp.add_argument("config")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("simulate", help="fluid-scaled trajectory CSV")
    sp.add_argument("config")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--tie")
    sp.add_argument("--r", type=int, default=1)
    sp.add_argument("--horizon", type=float, required=True)
    sp.add_argument("--x0", default="1")
    sp.add_argument("--sample-dt", type=float, default=0.01)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("drift", help="averaged drift CSV for one saturated set")
    sp.add_argument("config")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--tie")
    sp.add_argument("--sat", default="all",
                    help="saturated classes, 1-based comma list, or 'all'/'none'")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_drift)

    sp = sub.add_parser("fluid", help="piecewise-linear fluid trajectory CSV")
    sp.add_argument("config")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--tie")
    sp.add_argument("--x0", default="1")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fluid)

    sp = sub.add_parser("stability", help="stability verdict and optional threshold sweep")
    sp.add_argument("config")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--tie")
    sp.add_argument("--sweep", help="lambda<k>:<lo>:<hi>, e.g. lambda1:0.004:0.196")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_stability)

    sp = sub.add_parser("control", help="optimal fluid control CSV")
    sp.add_argument("config")
    sp.add_argument("--x0", default="1")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_control)

    sp = sub.add_parser("preset", help=f"run an experiment preset: {', '.join(PRESET_NAMES)}")
    sp.add_argument("name")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--r", type=int)
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--grid-points", type=int)
    sp.set_defaults(func=cmd_preset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return 2
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SolverError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
