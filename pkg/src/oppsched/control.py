"""Deterministic fluid control: closed-form optimal allocation and optimality checks.

The optimal control orders classes by cost * mu_best (descending, stable) and
on every segment maintains the emptied prefix at rate lambda_k / mu_best while
the first nonempty class receives all residual capacity; only best states are
ever allocated. The resulting trajectory lower-bounds the scaled cost of any
policy and coincides with the fluid limit of best-rate policies under the
myopic tie-break.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fluid import FluidTrajectory, fluid_trajectory
from .model import SystemConfig
from .policy import PolicySpec

EMPTY_TOL = 1e-12
MATCH_TOL = 1e-9


@dataclass(frozen=True)
class ControlSegment:
    t_start: float
    t_end: float  # inf on the terminal segment of a non-draining system
    u: np.ndarray  # capacity share of each class's best state
    x_start: np.ndarray
    slope: np.ndarray


@dataclass(frozen=True)
class OptimalControl:
    """Closed-form solution of the fluid control problem."""

    order: tuple[int, ...]  # classes by cost*mu_best descending (stable)
    segments: tuple[ControlSegment, ...]
    terminal: str  # 'emptied' or 'grows_forever'

    @property
    def breakpoints(self) -> list[float]:
        pts = [seg.t_start for seg in self.segments]
        last = self.segments[-1]
        if np.isfinite(last.t_end):
            pts.append(last.t_end)
        return pts

    @property
    def emptied_time(self) -> float | None:
        return self.segments[-1].t_end if self.terminal == "emptied" else None

    def value(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError("t must be >= 0")
        for seg in self.segments:
            if t < seg.t_end or seg is self.segments[-1]:
                tt = min(t, seg.t_end)
                return np.maximum(seg.x_start + seg.slope * (tt - seg.t_start), 0.0)
        return np.zeros(len(self.order))

    def values(self, ts: Sequence[float]) -> np.ndarray:
        return np.stack([self.value(float(t)) for t in ts])


def optimal_control(cfg: SystemConfig, x0: Sequence[float]) -> OptimalControl:
    """Solve the fluid control problem from ``x0``.

    In overload the drain proceeds down the order until the residual capacity
    is exhausted; classes beyond that point grow at their net rate forever.
    """
    K = cfg.n_classes
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (K,):
        raise ValueError(f"x0 must have {K} entries")
    if (x < 0).any():
        raise ValueError("x0 must be nonnegative")
    lam = np.array([cp.lam for cp in cfg.classes])
    mu_best = np.array([cp.mu_best for cp in cfg.classes])
    order = tuple(
        sorted(range(K), key=lambda k: (-cfg.classes[k].cost * mu_best[k], k))
    )
    segments: list[ControlSegment] = []
    t = 0.0
    while True:
        u = np.zeros(K)
        residual = 1.0
        for k in order:
            if x[k] > EMPTY_TOL:
                u[k] = residual
                residual = 0.0
            else:
                u[k] = min(lam[k] / mu_best[k], residual)
                residual -= u[k]
        slope = lam - mu_best * u
        draining = [k for k in range(K) if x[k] > EMPTY_TOL and slope[k] < -EMPTY_TOL]
        if not draining:
            if (x <= EMPTY_TOL).all() and (slope <= EMPTY_TOL).all():
                segments.append(ControlSegment(t, t, u, x.copy(), np.zeros(K)))
                terminal = "emptied"
            else:
                segments.append(ControlSegment(t, np.inf, u, x.copy(), slope))
                terminal = "grows_forever"
            break
        k_star = draining[0]  # at most one class drains per segment
        dt = x[k_star] / -slope[k_star]
        segments.append(ControlSegment(t, t + dt, u, x.copy(), slope))
        x = np.maximum(x + slope * dt, 0.0)
        x[k_star] = 0.0
        t += dt
        if (x <= EMPTY_TOL).all():
            # the last class drained, which requires rho < 1; maintenance
            # keeps everything at zero from here on
            terminal = "emptied"
            break
    return OptimalControl(order=order, segments=tuple(segments), terminal=terminal)


# ---------------------------------------------------------------------------
# Optimality check


def _canonical(breaks: list[float], values: np.ndarray, final_slope: np.ndarray | None):
    """Drop breakpoints where the trajectory slope does not actually change."""
    keep = [0]
    for i in range(1, len(breaks) - 1):
        dt0 = breaks[i] - breaks[keep[-1]]
        dt1 = breaks[i + 1] - breaks[i]
        s0 = (values[i] - values[keep[-1]]) / dt0 if dt0 > 0 else None
        s1 = (values[i + 1] - values[i]) / dt1 if dt1 > 0 else None
        if dt0 <= MATCH_TOL and np.allclose(values[i], values[keep[-1]], atol=MATCH_TOL):
            continue
        if s0 is not None and s1 is not None and np.allclose(s0, s1, atol=MATCH_TOL):
            continue
        keep.append(i)
    if len(breaks) > 1:
        keep.append(len(breaks) - 1)
    return [breaks[i] for i in keep], values[keep], final_slope


def _piecewise_form(traj) -> tuple[list[float], np.ndarray, np.ndarray | None]:
    breaks = traj.breakpoints
    values = traj.values(breaks)
    final = None
    last = traj.segments[-1]
    if not np.isfinite(last.t_end):
        final = last.delta if isinstance(traj, FluidTrajectory) else last.slope
    return _canonical(breaks, values, final)


def check_fluid_optimality(
    spec: PolicySpec, cfg: SystemConfig, x0: Sequence[float]
) -> bool:
    """True iff the policy's fluid limit equals the optimal-control trajectory:
    same breakpoints (within 1e-9) and same values classwise."""
    ft = _piecewise_form(fluid_trajectory(spec, cfg, x0))
    oc = _piecewise_form(optimal_control(cfg, x0))
    b1, v1, f1 = ft
    b2, v2, f2 = oc
    if (f1 is None) != (f2 is None):
        return False
    if len(b1) != len(b2):
        return False
    if not np.allclose(b1, b2, atol=MATCH_TOL, rtol=0.0):
        return False
    if not np.allclose(v1, v2, atol=MATCH_TOL, rtol=0.0):
        return False
    if f1 is not None and not np.allclose(f1, f2, atol=MATCH_TOL, rtol=0.0):
        return False
    return True


def lower_bound_gap(
    spec: PolicySpec,
    cfg: SystemConfig,
    x0: Sequence[float],
    r: int,
    seeds: Sequence[int],
    *,
    horizon: float | None = None,
    sample_dt: float = 0.01,
):
    """Per-seed time series of sum_k c_k Y^r(t) minus the optimal fluid cost.

    Asymptotically the gap is nonnegative for every policy and vanishes for
    best-rate policies with the myopic tie-break.
    """
    from .simulator import run_trajectory  # local import: simulator pulls in numba

    oc = optimal_control(cfg, x0)
    if horizon is None:
        drained = oc.emptied_time
        horizon = 1.25 * drained if drained else 10.0
    cost = np.array([cp.cost for cp in cfg.classes])
    gaps = []
    t_ref = None
    for seed in seeds:
        traj = run_trajectory(spec, cfg, r=r, x0=x0, horizon=horizon,
                              sample_dt=sample_dt, seed=int(seed))
        t_ref = traj.t
        sim_cost = traj.y @ cost
        star_cost = oc.values(traj.t) @ cost
        gaps.append(sim_cost - star_cost)
    return t_ref, np.stack(gaps)
