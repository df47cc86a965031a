"""Experiment presets for the two-class CDMA 1xEV-DO system.

Every preset resolves to the Table-I channel data with lambda_2 = 0.05 and
unit holding costs; the sweeps vary lambda_1. Each preset writes CSV files
(schema fixed per subcommand) plus a manifest that suffices to re-run it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .drift import NotErgodicError, averaged_drift
from .fluid import fluid_trajectory, is_stable, load_rho, stability_threshold
from .model import ClassParams, RateParams, SystemConfig, mu_from_rates
from .policy import (
    NAMED_POLICIES,
    PolicySpec,
    TieBreakRule,
    policy_label,
    potential_improvement,
    tie_label,
)
from .simulator import estimate_mean_cost, run_trajectory

# Table-I physical layer: 11 feasible rates (kb/s), slot length, mean job size
TABLE1_RATES_KBPS = (
    38.4, 76.8, 102.6, 153.6, 204.8, 307.2, 614.4, 921.6, 1228.8, 1843.2, 2457.6,
)
SLOT_SECONDS = 1.67e-3
MEAN_SIZE_KB = 10.257

CLASS1_Q = (0.0, 0.0, 0.05, 0.0, 0.23, 0.0, 0.42, 0.0, 0.21, 0.0, 0.09)
CLASS1_MU = (0.0, 0.0, 0.017, 0.0, 0.033, 0.0, 0.1, 0.0, 0.2, 0.0, 0.4)
CLASS2_Q = (0.0, 0.0, 0.15, 0.0, 0.33, 0.0, 0.52)
CLASS2_MU = (0.0, 0.0, 0.017, 0.0, 0.033, 0.0, 0.1)

LAMBDA2 = 0.05
DEFAULT_SEED = 20104


def cdma_config(lam1: float = 0.14, lam2: float = LAMBDA2, seed: int = DEFAULT_SEED) -> SystemConfig:
    """The two-class CDMA system; identical to the bundled cdma_table1 config."""
    return SystemConfig(
        classes=(
            ClassParams(lam=lam1, q=CLASS1_Q, mu=CLASS1_MU, cost=1.0),
            ClassParams(lam=lam2, q=CLASS2_Q, mu=CLASS2_MU, cost=1.0),
        ),
        arrival_kind="bernoulli",
        seed=seed,
    )


def lam1_for_rho(rho: float) -> float:
    """lambda_1 giving total load rho when lambda_2 = 0.05 (rho_2 = 0.5)."""
    return (rho - 0.5) * CLASS1_MU[-1]


def paper_policies() -> dict[str, PolicySpec]:
    """The five named policies with their default tie-breaking rules."""
    return {name: ctor(None) for name, ctor in NAMED_POLICIES.items()}


PRESET_NAMES = ("fig2", "fig3a", "fig3b", "fig3c", "table2", "table3", "table1_check")


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    seed: int = DEFAULT_SEED
    r: int | None = None
    horizon: float | None = None
    replications: int | None = None
    grid_points: int | None = None


FLOAT_FMT = "%.9g"


def _fmt(v) -> str:
    if isinstance(v, float):
        if np.isnan(v):
            return "nan"
        return FLOAT_FMT % v
    return str(v)


def write_csv(path, header: list[str], rows: list[list], manifest: dict) -> None:
    lines = ["# manifest: " + json.dumps(manifest, sort_keys=True, separators=(",", ":"))]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text)


def trajectory_rows(traj) -> list[list]:
    rows = []
    tb = traj.tau_best()
    tn = traj.tau_nonbest()
    for i, t in enumerate(traj.t):
        for k in range(traj.y.shape[1]):
            rows.append([float(t), k + 1, float(traj.y[i, k]), float(tb[i, k]), float(tn[i, k])])
    return rows


TRAJECTORY_HEADER = ["t", "class", "Y", "tau_best", "tau_nonbest"]
COST_HEADER = ["rho", "policy", "tie", "mean_cost", "ci_half", "replications"]
DRIFT_HEADER = ["policy", "tie", "U", "class", "delta_tilde", "method", "tolerance"]
FLUID_HEADER = ["segment", "T_start", "T_end", "U", "class", "drift", "y_start"]
STABILITY_HEADER = ["policy", "tie", "rho", "max_stable", "policy_stable", "rho_star"]
CONTROL_HEADER = ["segment", "t_start", "t_end", "class", "u_star", "x_star"]
DEGRADATION_HEADER = ["rho", "alpha", "mean_cost", "ci_half", "replications", "degradation_pct"]


def fluid_rows(traj) -> list[list]:
    rows = []
    for i, seg in enumerate(traj.segments):
        u_label = "{" + ";".join(str(k + 1) for k in sorted(seg.U)) + "}"
        for k in range(len(seg.y_start)):
            rows.append(
                [i, float(seg.t_start), float(seg.t_end), u_label, k + 1,
                 float(seg.delta[k]), float(seg.y_start[k])]
            )
    return rows


def drift_rows(spec: PolicySpec, cfg: SystemConfig, U_sets, *, tail_tol=1e-8) -> list[list]:
    rows = []
    tol_by_method = {
        "closed_form": 1e-12,
        "product_form": tail_tol,
        "truncated_solve": 1e-10,
        "monte_carlo": float("nan"),
    }
    for U in U_sets:
        u_label = "{" + ";".join(str(k + 1) for k in sorted(U)) + "}"
        try:
            ad = averaged_drift(spec, cfg, U, tail_tol=tail_tol)
            for k in range(cfg.n_classes):
                rows.append(
                    [policy_label(spec), tie_label(spec.tie), u_label, k + 1,
                     float(ad.delta[k]), ad.method, tol_by_method[ad.method]]
                )
        except NotErgodicError:
            for k in range(cfg.n_classes):
                rows.append(
                    [policy_label(spec), tie_label(spec.tie), u_label, k + 1,
                     float("nan"), "not_ergodic", float("nan")]
                )
    return rows


def _manifest(preset: ExperimentPreset, cfg: SystemConfig, extra: dict) -> dict:
    from .model import config_to_dict

    doc = {
        "preset": preset.name,
        "seed": preset.seed,
        "version": __version__,
        "config": config_to_dict(cfg),
    }
    doc.update(extra)
    return doc


def run_preset(name: str, out_dir, *, seed: int | None = None, r: int | None = None,
               horizon: float | None = None, replications: int | None = None,
               grid_points: int | None = None) -> list[Path]:
    """Execute a named preset into ``out_dir``; returns the files written.

    Overrides are limited to seeds, horizons, scale r, replication counts,
    and sweep grid size.
    """
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preset = ExperimentPreset(
        name=name,
        seed=DEFAULT_SEED if seed is None else seed,
        r=r,
        horizon=horizon,
        replications=replications,
        grid_points=grid_points,
    )
    files = globals()[f"_run_{name}"](preset, out)
    manifest_path = out / f"{name}_manifest.json"
    manifest_path.write_text(
        json.dumps(
            _manifest(preset, cdma_config(seed=preset.seed), {
                "overrides": {
                    "r": preset.r, "horizon": preset.horizon,
                    "replications": preset.replications, "grid_points": preset.grid_points,
                },
                "files": [f.name for f in files],
            }),
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    return files + [manifest_path]


def _run_fig2(preset: ExperimentPreset, out: Path) -> list[Path]:
    r = preset.r or 10_000
    horizon = preset.horizon or 90.0
    cfg = cdma_config(lam1=0.14, seed=preset.seed)
    files = []
    for pname, spec in paper_policies().items():
        traj = run_trajectory(spec, cfg, r=r, x0=(1.0, 1.0), horizon=horizon, seed=preset.seed)
        man = _manifest(preset, cfg, {"policy": pname, "r": r, "horizon": horizon})
        path = out / f"fig2_traj_{pname}.csv"
        write_csv(path, TRAJECTORY_HEADER, trajectory_rows(traj), man)
        files.append(path)
        ftraj = fluid_trajectory(spec, cfg, (1.0, 1.0))
        fpath = out / f"fig2_fluid_{pname}.csv"
        write_csv(fpath, FLUID_HEADER, fluid_rows(ftraj), man)
        files.append(fpath)
    return files


def _run_fig3a(preset: ExperimentPreset, out: Path) -> list[Path]:
    horizon = int(preset.horizon or 5_000_000)
    warmup = horizon // 5
    reps = preset.replications or 10
    n_grid = preset.grid_points or 16
    lam_grid = np.linspace(0.004, 0.196, n_grid)
    cost_rows = []
    for pname, spec in paper_policies().items():
        for lam1 in lam_grid:
            cfg = cdma_config(lam1=float(lam1), seed=preset.seed)
            est = estimate_mean_cost(spec, cfg, horizon, warmup, reps, seed=preset.seed)
            cost_rows.append(
                [load_rho(cfg), pname, tie_label(spec.tie), est.mean_cost,
                 est.ci_half, est.replications]
            )
    man = _manifest(preset, cdma_config(seed=preset.seed),
                    {"horizon": horizon, "warmup": warmup, "replications": reps,
                     "lambda1_grid": [float(v) for v in lam_grid]})
    cost_path = out / "fig3a_cost.csv"
    write_csv(cost_path, COST_HEADER, cost_rows, man)
    stab_rows = []
    base = cdma_config(lam1=0.14, seed=preset.seed)
    for pname, spec in paper_policies().items():
        rep = is_stable(spec, base)
        thr = stability_threshold(spec, base, 0, 0.004, 0.196)
        stab_rows.append(
            [pname, tie_label(spec.tie), rep.rho, int(rep.max_stable),
             int(rep.policy_stable), thr.rho_star]
        )
    stab_path = out / "fig3a_stability.csv"
    write_csv(stab_path, STABILITY_HEADER, stab_rows, man)
    return [cost_path, stab_path]


def _run_fig3b(preset: ExperimentPreset, out: Path) -> list[Path]:
    horizon = int(preset.horizon or 5_000_000)
    warmup = horizon // 5
    reps = preset.replications or 10
    alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
    rhos = [0.7, 0.8, 0.9]
    rows = []
    for rho in rhos:
        cfg = cdma_config(lam1=lam1_for_rho(rho), seed=preset.seed)
        base_cost = None
        for alpha in alphas:
            spec = potential_improvement(TieBreakRule.random(alpha, 1.0 - alpha))
            est = estimate_mean_cost(spec, cfg, horizon, warmup, reps, seed=preset.seed)
            if alpha == 1.0:
                base_cost = est.mean_cost
            rows.append([rho, alpha, est.mean_cost, est.ci_half, est.replications])
        for row in rows:
            if row[0] == rho and len(row) == 5:
                row.append(100.0 * (row[2] / base_cost - 1.0))
    man = _manifest(preset, cdma_config(seed=preset.seed),
                    {"horizon": horizon, "warmup": warmup, "replications": reps,
                     "alphas": alphas, "rhos": rhos})
    path = out / "fig3b_degradation.csv"
    write_csv(path, DEGRADATION_HEADER, rows, man)
    return [path]


def _run_fig3c(preset: ExperimentPreset, out: Path) -> list[Path]:
    r = preset.r or 100
    horizon = preset.horizon or 50.0
    cfg = cdma_config(lam1=0.24, seed=preset.seed)
    files = []
    for pname, spec in paper_policies().items():
        traj = run_trajectory(spec, cfg, r=r, x0=(0.0, 0.0), horizon=horizon, seed=preset.seed)
        man = _manifest(preset, cfg, {"policy": pname, "r": r, "horizon": horizon})
        path = out / f"fig3c_traj_{pname}.csv"
        write_csv(path, TRAJECTORY_HEADER, trajectory_rows(traj), man)
        files.append(path)
    return files


def _drift_table(preset: ExperimentPreset, out: Path, lam1: float, fname: str) -> list[Path]:
    cfg = cdma_config(lam1=lam1, seed=preset.seed)
    rows = []
    for pname, spec in paper_policies().items():
        rows.extend(drift_rows(spec, cfg, [frozenset(), frozenset({0})]))
    man = _manifest(preset, cfg, {"lambda1": lam1, "U_sets": ["{}", "{1}"]})
    path = out / fname
    write_csv(path, DRIFT_HEADER, rows, man)
    return [path]


def _run_table2(preset: ExperimentPreset, out: Path) -> list[Path]:
    return _drift_table(preset, out, 0.14, "table2_drift.csv")


def _run_table3(preset: ExperimentPreset, out: Path) -> list[Path]:
    return _drift_table(preset, out, 0.24, "table3_drift.csv")


def _run_table1_check(preset: ExperimentPreset, out: Path) -> list[Path]:
    rows = []
    for k, (q, mu_expect, n_states) in enumerate(
        [(CLASS1_Q, CLASS1_MU, 11), (CLASS2_Q, CLASS2_MU, 7)], start=1
    ):
        rp = RateParams(
            rates=TABLE1_RATES_KBPS[:n_states],
            slot_length=SLOT_SECONDS,
            mean_size=MEAN_SIZE_KB,
        )
        derived = mu_from_rates(rp)
        for n in range(n_states):
            if q[n] > 0:
                rows.append(
                    [k, n + 1, TABLE1_RATES_KBPS[n], mu_expect[n], derived[n],
                     abs(derived[n] - mu_expect[n])]
                )
    man = _manifest(preset, cdma_config(seed=preset.seed),
                    {"slot_seconds": SLOT_SECONDS, "mean_size_kb": MEAN_SIZE_KB})
    path = out / "table1_check.csv"
    write_csv(path, ["class", "state", "rate_kbps", "mu_expected", "mu_derived", "abs_err"], rows, man)
    return [path]
