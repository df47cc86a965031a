"""Strong fluid limits, stability verdicts, thresholds, and overload growth rates.

The fluid limit is piecewise linear: on each segment the drift is the
averaged drift for the set U of classes already emptied; the next breakpoint
is the earliest emptying time among classes with negative drift, and every
minimizer joins U. A class whose drift is exactly zero on a segment stays
constant and never triggers a breakpoint.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .drift import SolverError, averaged_drift
from .model import SystemConfig
from .policy import PolicySpec, is_best_rate

DRIFT_NEG_TOL = 1e-12  # drifts above -tol count as nonnegative (no breakpoint)
TIE_RTOL = 1e-9  # relative tolerance for simultaneous emptying


@dataclass(frozen=True)
class FluidSegment:
    t_start: float
    t_end: float  # inf on the terminal growing segment
    U: frozenset[int]
    delta: np.ndarray
    y_start: np.ndarray
    method: str


@dataclass(frozen=True)
class FluidTrajectory:
    """Piecewise-linear strong fluid limit from a given scaled initial state."""

    x0: np.ndarray
    segments: tuple[FluidSegment, ...]
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

    @property
    def final_drift(self) -> np.ndarray:
        return self.segments[-1].delta

    def value(self, t: float) -> np.ndarray:
        """y(t), classwise; constant zero after full emptying."""
        if t < 0:
            raise ValueError("t must be >= 0")
        for seg in self.segments:
            if t < seg.t_end or seg is self.segments[-1]:
                tt = min(t, seg.t_end)
                return np.maximum(seg.y_start + seg.delta * (tt - seg.t_start), 0.0)
        return np.zeros_like(self.x0)

    def values(self, ts: Sequence[float]) -> np.ndarray:
        return np.stack([self.value(float(t)) for t in ts])


def fluid_trajectory(
    spec: PolicySpec, cfg: SystemConfig, x0: Sequence[float]
) -> FluidTrajectory:
    """Recursive construction of the strong fluid limit from ``x0``.

    Classes starting at zero are handled by a pre-pass: any zero class whose
    averaged drift (given the current emptied set) is nonpositive joins U
    immediately; zero classes with positive drift start growing.
    """
    K = cfg.n_classes
    y = np.asarray(x0, dtype=float).copy()
    if y.shape != (K,):
        raise ValueError(f"x0 must have {K} entries")
    if (y < 0).any():
        raise ValueError("x0 must be nonnegative")
    U: set[int] = set()
    if (y == 0).any():
        warnings.warn(
            "zero-initial ambiguity: fluid recursion assumes positive starts; "
            "zero classes with nonpositive averaged drift are treated as emptied",
            stacklevel=2,
        )
        changed = True
        while changed and len(U) < K:
            changed = False
            ad = averaged_drift(spec, cfg, U)
            for k in range(K):
                if k not in U and y[k] == 0.0 and ad.delta[k] <= DRIFT_NEG_TOL:
                    U.add(k)
                    changed = True

    segments: list[FluidSegment] = []
    t = 0.0
    while True:
        if len(U) == K:
            terminal = "emptied"
            break
        ad = averaged_drift(spec, cfg, U)
        delta = np.asarray(ad.delta, dtype=float).copy()
        for k in U:
            delta[k] = 0.0
        draining = [k for k in range(K) if k not in U and delta[k] < -DRIFT_NEG_TOL]
        if not draining:
            segments.append(
                FluidSegment(t, np.inf, frozenset(U), delta, y.copy(), ad.method)
            )
            terminal = "grows_forever"
            break
        times = {k: y[k] / -delta[k] for k in draining}
        t_min = min(times.values())
        joiners = [
            k for k, tk in times.items() if tk - t_min <= TIE_RTOL * max(t_min, 1.0)
        ]
        segments.append(
            FluidSegment(t, t + t_min, frozenset(U), delta, y.copy(), ad.method)
        )
        for k in range(K):
            if k not in U:
                y[k] = max(y[k] + delta[k] * t_min, 0.0)
        for k in joiners:
            y[k] = 0.0
            U.add(k)
        t += t_min
    if not segments:
        # x0 = 0 and everything immediately emptied: single degenerate segment
        segments.append(
            FluidSegment(0.0, 0.0, frozenset(U), np.zeros(K), np.zeros(K), "closed_form")
        )
    return FluidTrajectory(
        x0=np.asarray(x0, dtype=float), segments=tuple(segments), terminal=terminal
    )


# ---------------------------------------------------------------------------
# Stability


def load_rho(cfg: SystemConfig) -> float:
    """Traffic intensity sum lambda_k / mu_{k,best}."""
    return float(sum(cp.rho for cp in cfg.classes))


def is_max_stable(cfg: SystemConfig) -> tuple[bool, float]:
    """Whether any policy can stabilize the system, and the intensity rho."""
    rho = load_rho(cfg)
    return rho < 1.0, rho


@dataclass(frozen=True)
class StabilityReport:
    rho: float
    max_stable: bool
    policy_stable: bool
    method: str  # 'br_fast_path' or 'fluid_recursion'
    breakpoints: tuple[float, ...] = ()
    first_infinite_stage: int | None = None


def is_stable(spec: PolicySpec, cfg: SystemConfig) -> StabilityReport:
    """Stability verdict: best-rate policies are stable iff rho < 1; other
    policies are probed by running the fluid recursion from the all-ones start."""
    max_ok, rho = is_max_stable(cfg)
    if is_best_rate(spec, cfg):
        return StabilityReport(
            rho=rho, max_stable=max_ok, policy_stable=max_ok, method="br_fast_path"
        )
    traj = fluid_trajectory(spec, cfg, np.ones(cfg.n_classes))
    stable = traj.terminal == "emptied"
    return StabilityReport(
        rho=rho,
        max_stable=max_ok,
        policy_stable=stable and max_ok,
        method="fluid_recursion",
        breakpoints=tuple(traj.breakpoints),
        first_infinite_stage=None if stable else len(traj.segments) - 1,
    )


@dataclass(frozen=True)
class ThresholdResult:
    rho_star: float
    lam_star: float
    sweep_class: int
    exact: bool  # True for the best-rate fast path


class NoSignChangeError(SolverError):
    pass


def _rho_at(cfg: SystemConfig, k: int, lam: float) -> float:
    return float(
        lam / cfg.classes[k].mu_best
        + sum(cp.rho for i, cp in enumerate(cfg.classes) if i != k)
    )


def stability_threshold(
    spec: PolicySpec,
    cfg: SystemConfig,
    sweep_class: int,
    lam_lo: float,
    lam_hi: float,
    *,
    rho_tol: float = 1e-3,
) -> ThresholdResult:
    """Critical load rho* along a one-parameter sweep of one class's arrival rate.

    Best-rate policies return exactly 1. Otherwise bisection on the sign of
    the fluid verdict; a not-ergodic stage counts as unstable at that point.
    """
    if is_best_rate(spec, cfg):
        lam_star = (1.0 - sum(cp.rho for i, cp in enumerate(cfg.classes) if i != sweep_class)) * cfg.classes[sweep_class].mu_best
        return ThresholdResult(
            rho_star=1.0, lam_star=lam_star, sweep_class=sweep_class, exact=True
        )

    def stable_at(lam: float) -> bool:
        c = cfg.with_lambda(sweep_class, lam)
        try:
            return is_stable(spec, c).policy_stable
        except SolverError:
            return False

    lo, hi = float(lam_lo), float(lam_hi)
    if not stable_at(lo):
        raise NoSignChangeError(f"no sign change in sweep range: unstable at lambda={lo:g}")
    if stable_at(hi):
        raise NoSignChangeError(f"no sign change in sweep range: stable at lambda={hi:g}")
    while (_rho_at(cfg, sweep_class, hi) - _rho_at(cfg, sweep_class, lo)) > rho_tol:
        mid = 0.5 * (lo + hi)
        if stable_at(mid):
            lo = mid
        else:
            hi = mid
    lam_star = 0.5 * (lo + hi)
    return ThresholdResult(
        rho_star=_rho_at(cfg, sweep_class, lam_star),
        lam_star=lam_star,
        sweep_class=sweep_class,
        exact=False,
    )


def growth_rates(spec: PolicySpec, cfg: SystemConfig) -> np.ndarray:
    """Terminal drift vector of the fluid limit from the all-ones start
    (zero vector when the system drains)."""
    traj = fluid_trajectory(spec, cfg, np.ones(cfg.n_classes))
    if traj.terminal == "emptied":
        return np.zeros(cfg.n_classes)
    return traj.final_drift.copy()
