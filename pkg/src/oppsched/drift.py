"""Exact one-step drifts, saturated-system stationary laws, and averaged drifts.

A set of "saturated" classes is modeled as having every q>0 state occupied
with probability one (the infinite-population limit); the remaining classes
carry explicit occupancy totals. All distributions here are exact up to
floating point: the class-maximum index of x i.i.d. users has CDF F(v)^x,
and winner sets / tied-state selection are enumerated over the distinct
index values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Collection, Sequence

import numpy as np
import scipy.sparse as sp

from .model import SystemConfig
from .policy import (
    PolicySpec,
    effective_priority_order,
    index_tables,
    indices_close,
    is_best_rate,
    state_orders,
    tie_winner_probs,
)


class SolverError(RuntimeError):
    """Base class for stationary-solver failures."""


class NotErgodicError(SolverError):
    """The saturated chain has no stationary distribution."""


class TruncationError(SolverError):
    """The truncated grid cannot hold enough probability mass."""


# ---------------------------------------------------------------------------
# Exact serve distribution


@dataclass(frozen=True)
class ServeDistribution:
    """P(serve class k in state n) for one slot, plus P(idle).

    probs[k][n] covers the full state range of class k (zero at q=0 states).
    Context: ``x`` holds totals of the unsaturated classes (entries of
    saturated classes are ignored), ``saturated`` the saturated set.
    """

    probs: tuple[np.ndarray, ...]
    idle: float
    x: tuple[int, ...]
    saturated: frozenset[int]

    def serve_prob(self, cls: int) -> float:
        return float(self.probs[cls].sum())

    def departure_rates(self, cfg: SystemConfig) -> np.ndarray:
        """Per-class P(serve that class AND the served user departs)."""
        return np.array(
            [float(np.dot(self.probs[k], cfg.classes[k].mu)) for k in range(cfg.n_classes)]
        )

    def total(self) -> float:
        return self.idle + sum(float(p.sum()) for p in self.probs)


@lru_cache(maxsize=512)
def _value_groups(spec: PolicySpec, cfg: SystemConfig, saturated: frozenset[int]):
    """Static structure shared by all occupancies of one (policy, config, saturated set).

    Groups the distinct index values across classes (descending), and per
    class per group precomputes: member states in within-class priority
    order, their q-masses, and the per-user probability of indexing strictly
    below the group.
    """
    tables = index_tables(spec, cfg)
    orders = state_orders(spec, cfg)
    entries = []  # (value, class, state) over all q>0 states
    for k, cp in enumerate(cfg.classes):
        for n in cp.support:
            entries.append((float(tables[k][n]), k, n))
    entries.sort(key=lambda e: e[0], reverse=True)
    groups: list[list[tuple[float, int, int]]] = []
    for e in entries:
        if groups and indices_close(groups[-1][0][0], e[0]):
            groups[-1].append(e)
        else:
            groups.append([e])
    K = cfg.n_classes
    G = len(groups)
    values = np.array([g[0][0] for g in groups])
    # members[g][k]: states of class k in group g, highest within-class priority first
    members: list[list[list[int]]] = [[[] for _ in range(K)] for _ in range(G)]
    rank = [{n: i for i, n in enumerate(orders[k])} for k in range(K)]
    for g, grp in enumerate(groups):
        for _, k, n in grp:
            members[g][k].append(n)
        for k in range(K):
            members[g][k].sort(key=lambda n: rank[k][n], reverse=True)
    p_eq = np.zeros((G, K))
    for g in range(G):
        for k in range(K):
            p_eq[g, k] = math.fsum(cfg.classes[k].q[n] for n in members[g][k])
    # per-user P(index strictly below group g) = all mass of lower groups
    p_lt = np.zeros((G, K))
    if G > 1:
        p_lt[: G - 1] = np.cumsum(p_eq[::-1], axis=0)[::-1][1:]
    # top group of each class (the group containing its best-order state)
    top_group = np.empty(K, dtype=int)
    for k in range(K):
        top_state = orders[k][-1]
        for g in range(G):
            if top_state in members[g][k]:
                top_group[k] = g
                break
    return values, members, p_eq, p_lt, top_group


def serve_distribution(
    spec: PolicySpec,
    cfg: SystemConfig,
    x: Sequence[int],
    saturated: Collection[int] = (),
) -> ServeDistribution:
    """Exact serve distribution for one slot.

    ``x`` gives occupancy totals for the unsaturated classes (entries of
    saturated classes are ignored). Saturated classes occupy each of their
    q>0 states with probability one.
    """
    K = cfg.n_classes
    sat = frozenset(int(k) for k in saturated)
    xs = tuple(0 if k in sat else int(x[k]) for k in range(K))
    if any(v < 0 for v in xs):
        raise ValueError("occupancy totals must be nonnegative")
    values, members, p_eq, p_lt, top_group = _value_groups(spec, cfg, sat)
    G = len(values)

    # P(class max falls in group g) and P(class max strictly below group g)
    pm_eq = np.zeros((G, K))
    pm_lt = np.ones((G, K))
    for k in range(K):
        if k in sat:
            pm_eq[:, k] = 0.0
            pm_eq[top_group[k], k] = 1.0
            pm_lt[:, k] = 0.0
            pm_lt[: top_group[k], k] = 1.0
        elif xs[k] == 0:
            pm_eq[:, k] = 0.0
            pm_lt[:, k] = 1.0
        else:
            n_users = xs[k]
            hi = (p_lt[:, k] + p_eq[:, k]) ** n_users
            lo = p_lt[:, k] ** n_users
            pm_eq[:, k] = hi - lo
            pm_lt[:, k] = lo

    probs = [np.zeros(cp.n_states) for cp in cfg.classes]
    for g in range(G):
        cand = [k for k in range(K) if pm_eq[g, k] > 0.0]
        if not cand:
            continue
        for r in range(1, len(cand) + 1):
            for W in itertools.combinations(cand, r):
                p_w = 1.0
                for k in range(K):
                    p_w *= pm_eq[g, k] if k in W else pm_lt[g, k]
                    if p_w == 0.0:
                        break
                if p_w == 0.0:
                    continue
                shares = tie_winner_probs(spec.tie, W, cfg)
                for j, share in shares.items():
                    if share <= 0.0:
                        continue
                    mass = p_w * share
                    tied_states = members[g][j]
                    if j in sat or len(tied_states) == 1:
                        probs[j][tied_states[0]] += mass
                        continue
                    # top present state among the tied ones: telescoped
                    # inclusion-exclusion over presence sets
                    n_users = xs[j]
                    base = p_lt[g, j]
                    tail = p_eq[g, j]
                    denom = pm_eq[g, j]
                    for i, n in enumerate(tied_states):
                        nxt = tail - cfg.classes[j].q[n]
                        piece = (base + tail) ** n_users - (base + nxt) ** n_users
                        probs[j][n] += mass * piece / denom
                        tail = nxt
    idle = 1.0 if (not sat and all(v == 0 for v in xs)) else 0.0
    for p in probs:
        p.setflags(write=False)
    return ServeDistribution(probs=tuple(probs), idle=idle, x=xs, saturated=sat)


def drift(
    spec: PolicySpec,
    cfg: SystemConfig,
    x: Sequence[int],
    saturated: Collection[int] = (),
) -> np.ndarray:
    """One-step expected change per class: lambda_k minus the departure rate.

    Components of saturated classes use the same formula (their populations
    are pinned, but the value is what the averaged-drift formulas consume).
    """
    sd = serve_distribution(spec, cfg, x, saturated)
    lam = np.array([cp.lam for cp in cfg.classes])
    return lam - sd.departure_rates(cfg)


# ---------------------------------------------------------------------------
# Stationary distributions of saturated systems


@dataclass(frozen=True)
class StationaryDistribution:
    """Stationary law of the unsaturated classes, with its truncation quality."""

    kind: str  # 'product_form_1d' or 'truncated_grid'
    masses: np.ndarray  # flat over the support / grid
    shape: tuple[int, ...]
    tail_mass: float
    support: str


def _stationary_1d_full(
    spec: PolicySpec,
    cfg: SystemConfig,
    j: int,
    *,
    tail_tol: float = 1e-8,
    max_states: int = 200_000,
):
    """Product-form birth-death solve of class j with all others saturated.

    Returns (pi, dep_matrix, tail_mass) where dep_matrix[x, i] is the
    departure rate of class i given x class-j users present.
    """
    if cfg.arrival_kind != "bernoulli":
        raise SolverError("stationary_1d requires Bernoulli arrivals")
    K = cfg.n_classes
    sat = frozenset(range(K)) - {j}
    lam = cfg.classes[j].lam

    def dep_at(n_users: int) -> np.ndarray:
        x = [0] * K
        x[j] = n_users
        return serve_distribution(spec, cfg, x, sat).departure_rates(cfg)

    # asymptotic service rate: class j saturated as well
    s_inf = float(
        serve_distribution(spec, cfg, [0] * K, frozenset(range(K))).departure_rates(cfg)[j]
    )
    if lam == 0.0:
        dep = dep_at(0)[None, :]
        return np.array([1.0]), dep, 0.0
    ratio_inf = math.inf if s_inf <= 0.0 else lam * (1.0 - s_inf) / ((1.0 - lam) * s_inf)
    if ratio_inf >= 1.0 - 1e-12:
        raise NotErgodicError(
            f"class {j+1} not ergodic under saturation: "
            f"lambda={lam:g} vs asymptotic service rate {s_inf:g}"
        )
    weights = [1.0]
    deps = [dep_at(0)]
    s_prev = float(deps[0][j])  # s_j(0) = 0 when x=0
    total = 1.0
    n_users = 0
    while True:
        n_users += 1
        if n_users > max_states:
            raise TruncationError("stationary_1d: truncation insufficient")
        d = dep_at(n_users)
        s_cur = float(d[j])
        if s_cur <= 0.0:
            raise NotErgodicError(
                f"class {j+1}: service probability vanishes at occupancy {n_users}"
            )
        ratio = lam * (1.0 - s_prev) / ((1.0 - lam) * s_cur)
        w = weights[-1] * ratio
        weights.append(w)
        deps.append(d)
        total += w
        s_prev = s_cur
        r_bound = max(ratio, ratio_inf)
        if n_users >= 8 and r_bound < 1.0:
            tail = w * r_bound / (1.0 - r_bound)
            if tail < tail_tol * total:
                break
    pi = np.array(weights) / total
    dep_matrix = np.vstack(deps)
    tail = w * r_bound / (1.0 - r_bound) / total
    return pi, dep_matrix, tail


def stationary_1d(
    spec: PolicySpec,
    cfg: SystemConfig,
    j: int,
    *,
    tail_tol: float = 1e-8,
) -> StationaryDistribution:
    """Stationary law of class ``j`` with every other class saturated."""
    pi, _, tail = _stationary_1d_full(spec, cfg, j, tail_tol=tail_tol)
    return StationaryDistribution(
        kind="product_form_1d",
        masses=pi,
        shape=(len(pi),),
        tail_mass=tail,
        support=f"counts of class {j+1}, 0..{len(pi)-1} (others saturated)",
    )


def _arrival_pmfs(cfg: SystemConfig, classes: Sequence[int], a_max: int) -> list[np.ndarray]:
    pmfs = []
    for k in classes:
        lam = cfg.classes[k].lam
        if cfg.arrival_kind == "bernoulli":
            pmfs.append(np.array([1.0 - lam, lam]))
        else:
            n = np.arange(a_max + 1)
            pmf = np.exp(-lam) * lam**n / np.array([math.factorial(int(i)) for i in n])
            pmf[-1] += max(0.0, 1.0 - pmf.sum())  # clip remaining mass at the top
            pmfs.append(pmf)
    return pmfs


def _stationary_grid_full(
    spec: PolicySpec,
    cfg: SystemConfig,
    U: Sequence[int],
    *,
    M: int = 200,
    M_cap: int = 3200,
    tol: float = 1e-10,
    tail_tol: float = 1e-8,
    max_iters: int = 200_000,
    max_cells: int = 3_000_000,
):
    """Truncated-grid power-iteration solve of X^U. Returns (pi, dep_matrix,
    boundary_mass, M) with dep_matrix[(flat state), class]."""
    U = sorted(int(k) for k in U)
    d = len(U)
    K = cfg.n_classes
    sat = frozenset(range(K)) - set(U)
    prev_boundary = None
    while True:
        n_side = M + 1
        n_states = n_side**d
        if n_states > max_cells:
            raise TruncationError(
                f"stationary grid would need {n_states} cells (> {max_cells})"
            )
        coords = np.stack(
            np.meshgrid(*[np.arange(n_side)] * d, indexing="ij"), axis=-1
        ).reshape(n_states, d)
        dep_matrix = np.empty((n_states, K))
        x_full = [0] * K
        for s in range(n_states):
            for i, k in enumerate(U):
                x_full[k] = int(coords[s, i])
            dep_matrix[s] = serve_distribution(spec, cfg, x_full, sat).departure_rates(cfg)
        dep_u = dep_matrix[:, U]
        stay = 1.0 - dep_u.sum(axis=1)
        pmfs = _arrival_pmfs(cfg, U, a_max=min(M, 30))
        rows, cols, data = [], [], []
        row_idx = np.arange(n_states)
        for e in range(d + 1):  # 0 = no departure, e>0 = departure of U[e-1]
            base = coords.copy()
            p_dep = stay if e == 0 else dep_u[:, e - 1]
            if e > 0:
                base[:, e - 1] = np.maximum(base[:, e - 1] - 1, 0)
            for combo in itertools.product(*[range(len(p)) for p in pmfs]):
                p_arr = 1.0
                for i, a in enumerate(combo):
                    p_arr *= pmfs[i][a]
                if p_arr == 0.0:
                    continue
                new = np.minimum(base + np.array(combo), M)
                cols.append(np.ravel_multi_index(new.T, (n_side,) * d))
                rows.append(row_idx)
                data.append(p_dep * p_arr)
        P = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_states, n_states),
        ).tocsr()
        PT = P.T.tocsr()
        pi = np.full(n_states, 1.0 / n_states)
        converged = False
        for _ in range(max_iters):
            new = PT @ pi
            new /= new.sum()
            diff = float(np.abs(new - pi).sum())
            pi = new
            if diff < tol:
                converged = True
                break
        if not converged:
            raise SolverError("stationary grid: power iteration did not converge")
        boundary = float(pi[(coords == M).any(axis=1)].sum())
        if boundary < tail_tol:
            return pi, dep_matrix, boundary, M
        if prev_boundary is not None and boundary > prev_boundary:
            raise NotErgodicError(
                f"stationary grid: boundary mass grows with M ({prev_boundary:g} -> {boundary:g})"
            )
        prev_boundary = boundary
        if 2 * M > M_cap:
            raise TruncationError(
                f"stationary grid: truncation insufficient (boundary mass {boundary:g} at M={M})"
            )
        M *= 2


def stationary_multid(
    spec: PolicySpec,
    cfg: SystemConfig,
    U: Sequence[int],
    *,
    M: int = 200,
    M_cap: int = 3200,
    tol: float = 1e-10,
    tail_tol: float = 1e-8,
) -> StationaryDistribution:
    """Stationary law of the classes in ``U`` on a truncated grid, others saturated."""
    pi, _, boundary, M_used = _stationary_grid_full(
        spec, cfg, U, M=M, M_cap=M_cap, tol=tol, tail_tol=tail_tol
    )
    d = len(U)
    side = round(len(pi) ** (1 / d)) if d > 1 else len(pi)
    return StationaryDistribution(
        kind="truncated_grid",
        masses=pi,
        shape=(side,) * d,
        tail_mass=boundary,
        support=f"grid 0..{M_used} per class in {sorted(int(k)+1 for k in U)}",
    )


# ---------------------------------------------------------------------------
# Averaged drifts


@dataclass(frozen=True)
class AveragedDrift:
    """Asymptotic drift averaged over the stationary law of the classes in U."""

    delta: np.ndarray
    U: frozenset[int]
    method: str  # closed_form | product_form | truncated_solve | monte_carlo

    def __post_init__(self):
        self.delta.setflags(write=False)


def _closed_form_prefix(
    spec: PolicySpec, cfg: SystemConfig, U: frozenset[int], order: tuple[int, ...]
) -> np.ndarray:
    budget = sum(cfg.classes[j].rho for j in U)
    if budget >= 1.0:
        raise NotErgodicError(
            f"emptied classes need capacity share {budget:g} >= 1; X^U not ergodic"
        )
    delta = np.array([cp.lam for cp in cfg.classes])
    for j in U:
        delta[j] = 0.0
    rest = [k for k in order if k not in U]
    if rest:
        nxt = rest[0]
        cp = cfg.classes[nxt]
        delta[nxt] = cp.lam - cp.mu_best * (1.0 - budget)
    return delta


def averaged_drift(
    spec: PolicySpec,
    cfg: SystemConfig,
    U: Collection[int],
    *,
    tail_tol: float = 1e-8,
    grid_M: int = 200,
) -> AveragedDrift:
    """Averaged drift vector for emptied set ``U`` (0-based class indices).

    Dispatch: exact all-saturated drift for U = {}; closed forms for
    best-rate policies with a strict priority-type tie order (U must be a
    prefix of that order) and for the two-class best-rate random-tie case;
    otherwise the stationary law is solved numerically (product form in one
    dimension, truncated grid beyond).
    """
    K = cfg.n_classes
    U = frozenset(int(k) for k in U)
    if not U <= frozenset(range(K)):
        raise ValueError("U must contain valid class indices")
    if not U:
        delta = drift(spec, cfg, [0] * K, saturated=range(K))
        return AveragedDrift(delta=delta, U=U, method="closed_form")
    if is_best_rate(spec, cfg):
        order = effective_priority_order(spec, cfg)
        if (
            spec.tie.kind in ("myopic", "priority")
            and order is not None
            and set(order[: len(U)]) == U
        ):
            delta = _closed_form_prefix(spec, cfg, U, order)
            return AveragedDrift(delta=delta, U=U, method="closed_form")
        if spec.tie.kind == "random" and K == 2 and len(U) == 1:
            (j,) = U
            other = 1 - j
            s_inf = float(
                serve_distribution(spec, cfg, [0, 0], frozenset({0, 1})).departure_rates(cfg)[j]
            )
            lam_j = cfg.classes[j].lam
            if lam_j >= s_inf - 1e-12:
                raise NotErgodicError(
                    f"class {j+1} not ergodic under saturation: "
                    f"lambda={lam_j:g} vs asymptotic service rate {s_inf:g}"
                )
            delta = np.zeros(2)
            cp = cfg.classes[other]
            delta[other] = cp.lam - cp.mu_best * (1.0 - cfg.classes[j].rho)
            return AveragedDrift(delta=delta, U=U, method="closed_form")
    # numeric paths
    lam = np.array([cp.lam for cp in cfg.classes])
    if len(U) == 1 and cfg.arrival_kind == "bernoulli":
        (j,) = U
        pi, dep_matrix, _ = _stationary_1d_full(spec, cfg, j, tail_tol=tail_tol)
        delta = lam - pi @ dep_matrix
        return AveragedDrift(delta=delta, U=U, method="product_form")
    pi, dep_matrix, _, _ = _stationary_grid_full(
        spec, cfg, sorted(U), M=grid_M, tail_tol=tail_tol
    )
    delta = lam - pi @ dep_matrix
    return AveragedDrift(delta=delta, U=U, method="truncated_solve")
