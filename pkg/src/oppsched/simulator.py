"""Forward simulation of the slotted system and its fluid-scaled trajectories.

Two engines exist. ``step`` is the reference occupancy-level path: it draws a
full per-class multinomial channel assignment and feeds it to the policy's
slot decision. The run loops use a numba kernel that samples only each class's
extreme present state, which induces the same law for every observable (serve
decisions, departures, counts); the equivalence is asserted by chi-square
tests against the exact serve distribution.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernel
from .model import SystemConfig
from .policy import (
    PolicySpec,
    ServeDecision,
    index_tables,
    indices_close,
    select_user,
    state_orders,
    tie_winner_probs,
)

MAX_COMBO_TABLE = 1 << 20


def thread_count() -> int:
    """Worker cap: min(cpu count, OPPSCHED_THREADS when set)."""
    n = os.cpu_count() or 1
    env = os.environ.get("OPPSCHED_THREADS")
    if env:
        n = min(n, max(1, int(env)))
    return n


def spawn_seed(master: int, index: int) -> int:
    """Deterministic per-replication seed from (master seed, replication index)."""
    return int(np.random.SeedSequence([master, index]).generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# Occupancy-level reference path


@dataclass
class Occupancy:
    """Per-class counts of users in each channel state for the current slot."""

    counts: list[np.ndarray]

    @property
    def totals(self) -> np.ndarray:
        return np.array([int(c.sum()) for c in self.counts])

    @staticmethod
    def sample(cfg: SystemConfig, totals: Sequence[int], rng: np.random.Generator) -> "Occupancy":
        counts = []
        for cp, n_users in zip(cfg.classes, totals):
            c = np.zeros(cp.n_states, dtype=np.int64)
            if n_users > 0:
                sup = list(cp.support)
                q = np.array([cp.q[n] for n in sup])
                c[sup] = rng.multinomial(int(n_users), q)
            counts.append(c)
        return Occupancy(counts=counts)

    @staticmethod
    def empty(cfg: SystemConfig) -> "Occupancy":
        return Occupancy(counts=[np.zeros(cp.n_states, dtype=np.int64) for cp in cfg.classes])


@dataclass(frozen=True)
class StepRecord:
    decision: ServeDecision
    departed: bool
    arrivals: np.ndarray


def _draw_arrivals(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    lam = np.array([cp.lam for cp in cfg.classes])
    if cfg.arrival_kind == "poisson":
        return rng.poisson(lam)
    return (rng.random(cfg.n_classes) < lam).astype(np.int64)


def step(
    spec: PolicySpec, x: Sequence[int], cfg: SystemConfig, rng: np.random.Generator
) -> tuple[np.ndarray, StepRecord]:
    """One slot at occupancy totals ``x``: sample channels, serve, then arrivals.

    Arrivals are appended after service, so a user is never served in its
    arrival slot and the one-step mean change equals the drift at ``x``.
    """
    x = np.asarray(x, dtype=np.int64).copy()
    occ = Occupancy.sample(cfg, x, rng)
    decision = select_user(spec, occ, cfg, rng)
    departed = False
    if not decision.idle:
        mu = cfg.classes[decision.cls].mu[decision.state]
        if rng.random() < mu:
            x[decision.cls] -= 1
            departed = True
    arrivals = _draw_arrivals(cfg, rng)
    x += arrivals
    return x, StepRecord(decision=decision, departed=departed, arrivals=arrivals)


# ---------------------------------------------------------------------------
# Kernel plumbing


def _kernel_inputs(spec: PolicySpec, cfg: SystemConfig):
    """Static arrays consumed by the numba loop: per-class order CDFs and the
    pre-resolved tie table over every combination of per-class top states."""
    K = cfg.n_classes
    orders = state_orders(spec, cfg)
    tables = index_tables(spec, cfg)
    m_counts = np.array([len(o) for o in orders], dtype=np.int64)
    mmax = int(m_counts.max())
    logcdf = np.full((K, mmax), 0.0)
    mu_rank = np.zeros((K, mmax))
    for k, cp in enumerate(cfg.classes):
        q = np.array([cp.q[n] for n in orders[k]])
        with np.errstate(divide="ignore"):
            logcdf[k, : len(q)] = np.log(np.cumsum(q))
        logcdf[k, len(q) - 1] = 0.0  # exact: full support mass is 1
        mu_rank[k, : len(q)] = [cp.mu[n] for n in orders[k]]
    sizes = m_counts + 1
    n_combos = int(np.prod(sizes))
    if n_combos > MAX_COMBO_TABLE:
        raise RuntimeError(
            f"kernel tie table would need {n_combos} entries; state space too large"
        )
    strides = np.ones(K, dtype=np.int64)
    for k in range(1, K):
        strides[k] = strides[k - 1] * sizes[k - 1]
    n_tied = np.zeros(n_combos, dtype=np.int64)
    tied_cls = np.full((n_combos, K), -1, dtype=np.int64)
    tied_cum = np.zeros((n_combos, K))
    for combo in itertools.product(*[range(-1, int(m)) for m in m_counts]):
        idx = sum((combo[k] + 1) * strides[k] for k in range(K))
        present = [k for k in range(K) if combo[k] >= 0]
        if not present:
            continue
        vals = {k: float(tables[k][orders[k][combo[k]]]) for k in present}
        vmax = max(vals.values())
        tied = tuple(k for k in present if indices_close(vals[k], vmax))
        probs = tie_winner_probs(spec.tie, tied, cfg)
        entries = [(k, p) for k, p in sorted(probs.items()) if p > 0.0]
        n_tied[idx] = len(entries)
        acc = 0.0
        for i, (k, p) in enumerate(entries):
            acc += p
            tied_cls[idx, i] = k
            tied_cum[idx, i] = acc
    return m_counts, logcdf, mu_rank, strides, n_tied, tied_cls, tied_cum


@dataclass
class _KernelRun:
    cost_sum: float
    slots_done: int
    diverged: bool
    x_final: np.ndarray
    samp_x: np.ndarray
    samp_tau: np.ndarray
    cp_x: np.ndarray
    served: np.ndarray
    deps: np.ndarray
    arrs: np.ndarray
    percls_sum: np.ndarray


def _run_kernel(
    spec: PolicySpec,
    cfg: SystemConfig,
    x0: Sequence[int],
    n_slots: int,
    seed: int,
    *,
    saturated: Sequence[int] = (),
    warmup: int = 0,
    cap: float = 1e7,
    freeze: bool = False,
    sample_every: int = 0,
    n_samples: int = 0,
    cp_every: int = 0,
    n_checkpoints: int = 0,
) -> _KernelRun:
    K = cfg.n_classes
    m_counts, logcdf, mu_rank, strides, n_tied, tied_cls, tied_cum = _kernel_inputs(spec, cfg)
    mmax = logcdf.shape[1]
    x = np.asarray(x0, dtype=np.int64).copy()
    sat = np.zeros(K, dtype=np.bool_)
    for k in saturated:
        sat[k] = True
    lam = np.array([cp.lam for cp in cfg.classes])
    cost_w = np.array([cp.cost for cp in cfg.classes])
    samp_x = np.zeros((n_samples, K), dtype=np.int64)
    samp_tau = np.zeros((n_samples, K, mmax), dtype=np.int64)
    cp_x = np.zeros((n_checkpoints, K), dtype=np.int64)
    served = np.zeros((K, mmax), dtype=np.int64)
    deps = np.zeros(K, dtype=np.int64)
    arrs = np.zeros(K, dtype=np.int64)
    percls_sum = np.zeros(K)
    cost_sum, slots_done, diverged = _kernel.run_slots(
        np.int64(seed),
        np.int64(n_slots),
        x,
        lam,
        cfg.arrival_kind == "poisson",
        sat,
        m_counts,
        logcdf,
        mu_rank,
        strides,
        n_tied,
        tied_cls,
        tied_cum,
        np.int64(warmup),
        cost_w,
        float(cap),
        freeze,
        np.int64(sample_every),
        samp_x,
        samp_tau,
        np.int64(cp_every),
        cp_x,
        served,
        deps,
        arrs,
        percls_sum,
    )
    return _KernelRun(
        cost_sum=float(cost_sum),
        slots_done=int(slots_done),
        diverged=bool(diverged),
        x_final=x,
        samp_x=samp_x,
        samp_tau=samp_tau,
        cp_x=cp_x,
        served=served,
        deps=deps,
        arrs=arrs,
        percls_sum=percls_sum,
    )


# ---------------------------------------------------------------------------
# Fluid-scaled trajectories


@dataclass(frozen=True)
class SimTrajectory:
    """Fluid-scaled sample path: Y(t) = X(floor(r t)) / r plus scaled
    cumulative service times per (class, within-class priority rank)."""

    r: int
    t: np.ndarray
    y: np.ndarray  # (nt, K)
    tau: np.ndarray  # (nt, K, mmax), scaled slots served per rank
    state_ids: tuple[tuple[int, ...], ...]  # rank -> state, per class

    def tau_best(self) -> np.ndarray:
        """Scaled time serving each class in its best state."""
        nt, K, _ = self.tau.shape
        out = np.zeros((nt, K))
        for k, ids in enumerate(self.state_ids):
            out[:, k] = self.tau[:, k, ids.index(max(ids))]
        return out

    def tau_nonbest(self) -> np.ndarray:
        return self.tau.sum(axis=2) - self.tau_best()


def run_trajectory(
    spec: PolicySpec,
    cfg: SystemConfig,
    r: int,
    x0: Sequence[float],
    horizon: float,
    *,
    sample_dt: float = 0.01,
    seed: int | None = None,
) -> SimTrajectory:
    """Simulate floor(r * horizon) slots from counts floor(r * x0), sampling
    the scaled state every ``sample_dt`` fluid time units."""
    if r < 1:
        raise ValueError("scale r must be >= 1")
    n_slots = int(np.floor(r * horizon))
    counts0 = np.floor(np.asarray(x0, dtype=float) * r).astype(np.int64)
    sample_every = max(1, int(round(r * sample_dt)))
    n_samples = (max(n_slots, 1) - 1) // sample_every + 1
    if seed is None:
        seed = spawn_seed(cfg.seed, 0)
    run = _run_kernel(
        spec,
        cfg,
        counts0,
        n_slots,
        seed,
        cap=np.inf,
        sample_every=sample_every,
        n_samples=n_samples,
    )
    t = np.arange(n_samples) * (sample_every / r)
    orders = state_orders(spec, cfg)
    return SimTrajectory(
        r=r,
        t=t,
        y=run.samp_x / r,
        tau=run.samp_tau / r,
        state_ids=tuple(tuple(o) for o in orders),
    )


# ---------------------------------------------------------------------------
# Steady-state cost


@dataclass(frozen=True)
class CostEstimate:
    mean_cost: float
    per_class_means: np.ndarray
    ci_half: float
    horizon: int
    warmup: int
    replications: int
    unstable: bool
    rep_means: np.ndarray


def estimate_mean_cost(
    spec: PolicySpec,
    cfg: SystemConfig,
    horizon: int,
    warmup: int,
    replications: int,
    *,
    seed: int | None = None,
    cap: float = 1e7,
) -> CostEstimate:
    """Time-average holding cost over [warmup, horizon] slots, averaged over
    independent replications; the half-width is the replication-level normal
    interval. Replications whose counts exceed ``cap`` abort and flag apparent
    instability."""
    if not horizon > warmup:
        raise ValueError("horizon must exceed warmup")
    if replications < 1:
        raise ValueError("replications must be >= 1")
    master = cfg.seed if seed is None else seed
    K = cfg.n_classes

    def one(i: int) -> _KernelRun:
        return _run_kernel(
            spec,
            cfg,
            np.zeros(K, dtype=np.int64),
            horizon,
            spawn_seed(master, i),
            warmup=warmup,
            cap=cap,
        )

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        runs = list(pool.map(one, range(replications)))
    unstable = any(run.diverged for run in runs)
    denom = horizon - warmup
    rep_means = np.array(
        [run.cost_sum / max(run.slots_done - warmup, 1) for run in runs]
    )
    per_class = np.mean([run.percls_sum / denom for run in runs], axis=0)
    mean = float(rep_means.mean())
    if replications > 1:
        ci = 1.96 * float(rep_means.std(ddof=1)) / np.sqrt(replications)
    else:
        ci = 0.0
    return CostEstimate(
        mean_cost=mean,
        per_class_means=per_class,
        ci_half=ci,
        horizon=horizon,
        warmup=warmup,
        replications=replications,
        unstable=unstable,
        rep_means=rep_means,
    )


# ---------------------------------------------------------------------------
# Saturated-system drift estimation and conservation checks


@dataclass(frozen=True)
class SaturatedDriftEstimate:
    delta_hat: np.ndarray
    U: frozenset[int]
    horizon: int
    nonergodic: bool
    slopes: np.ndarray  # per-class trend of the unsaturated counts, users/slot


def run_saturated(
    spec: PolicySpec,
    cfg: SystemConfig,
    saturated: Sequence[int],
    horizon: int,
    *,
    seed: int | None = None,
    n_checkpoints: int = 200,
) -> SaturatedDriftEstimate:
    """Monte Carlo averaged drift with the given classes saturated (one user
    pinned in every q>0 state). Unsaturated classes follow normal dynamics;
    their counts are trend-tested for non-ergodicity."""
    K = cfg.n_classes
    sat = frozenset(int(k) for k in saturated)
    if seed is None:
        seed = spawn_seed(cfg.seed, 1)
    cp_every = max(1, horizon // n_checkpoints)
    run = _run_kernel(
        spec,
        cfg,
        np.zeros(K, dtype=np.int64),
        horizon,
        seed,
        saturated=sorted(sat),
        cap=np.inf,
        cp_every=cp_every,
        n_checkpoints=n_checkpoints,
    )
    lam = np.array([cp.lam for cp in cfg.classes])
    delta = np.empty(K)
    for k in range(K):
        if k in sat:
            delta[k] = lam[k] - run.deps[k] / horizon
        else:
            delta[k] = (run.arrs[k] - run.deps[k]) / horizon
    # trend test on the unsaturated counts
    ts = np.arange(run.cp_x.shape[0]) * cp_every
    slopes = np.zeros(K)
    nonergodic = False
    for k in range(K):
        if k in sat or len(ts) < 10:
            continue
        A = np.vstack([ts, np.ones_like(ts)]).T.astype(float)
        coef, res, *_ = np.linalg.lstsq(A, run.cp_x[:, k].astype(float), rcond=None)
        slopes[k] = coef[0]
        n = len(ts)
        dof = n - 2
        if dof > 0 and res.size:
            s2 = res[0] / dof
            se = np.sqrt(s2 / ((ts - ts.mean()) ** 2).sum())
            if se > 0 and coef[0] / se > 4.0 and coef[0] * horizon > 20.0:
                nonergodic = True
    return SaturatedDriftEstimate(
        delta_hat=delta, U=frozenset(range(K)) - sat, horizon=horizon,
        nonergodic=nonergodic, slopes=slopes,
    )


def rate_conservation_check(
    spec: PolicySpec, cfg: SystemConfig, horizon: int, *, seed: int | None = None
) -> list[tuple[float, float, float]]:
    """Per class: (empirical departure rate, lambda, binomial sigma). For a
    stable system the empirical rate converges to lambda."""
    if seed is None:
        seed = spawn_seed(cfg.seed, 2)
    run = _run_kernel(
        spec, cfg, np.zeros(cfg.n_classes, dtype=np.int64), horizon, seed, cap=np.inf
    )
    out = []
    for k, cp in enumerate(cfg.classes):
        rate = run.deps[k] / horizon
        sigma = np.sqrt(max(cp.lam * (1 - min(cp.lam, 1.0)), cp.lam / 4) / horizon)
        if cfg.arrival_kind == "poisson":
            sigma = np.sqrt(cp.lam / horizon)
        out.append((float(rate), cp.lam, float(sigma)))
    return out


def serve_frequencies(
    spec: PolicySpec,
    cfg: SystemConfig,
    x: Sequence[int],
    n_slots: int,
    *,
    saturated: Sequence[int] = (),
    seed: int = 0,
) -> np.ndarray:
    """Kernel-path serve frequencies at frozen occupancy totals ``x``:
    (K, mmax) counts over within-class priority ranks. Used by the
    distributional-equivalence tests against the exact serve distribution."""
    run = _run_kernel(
        spec,
        cfg,
        np.asarray(x, dtype=np.int64),
        n_slots,
        seed,
        saturated=saturated,
        cap=np.inf,
        freeze=True,
    )
    return run.served
