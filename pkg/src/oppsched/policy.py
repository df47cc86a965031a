"""Scheduling policies: index rules, tie-breaking, and the best-rate classification.

A policy is an index rule (one static value per class/state pair) plus a
tie-breaking rule used when users of several classes share the maximal index.
Indices for a given (policy, config) pair are computed once and cached.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .model import SystemConfig

INDEX_RTOL = 1e-12

INDEX_RULES = ("sb", "pi", "pb", "rb", "cmu", "weight", "custom")


@dataclass(frozen=True)
class TieBreakRule:
    """How to pick among classes tied at the maximal index.

    kind 'myopic'   -- serve the class with the largest cost * mu_best
    kind 'random'   -- draw a class with probability proportional to its weight
                       (uniform over the tied set when weights is None)
    kind 'priority' -- fixed permutation of classes, first tied one wins
    """

    kind: str
    weights: tuple[float, ...] | None = None
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("myopic", "random", "priority"):
            raise ValueError(f"unknown tie-break kind {self.kind!r}")
        if self.kind == "random" and self.weights is not None:
            if any(w < 0 for w in self.weights) or not any(w > 0 for w in self.weights):
                raise ValueError("random tie-break weights must be nonnegative, not all zero")
        if self.kind == "priority":
            if self.order is None or sorted(self.order) != list(range(len(self.order))):
                raise ValueError("priority tie-break needs a permutation of 0..K-1")

    @staticmethod
    def myopic() -> "TieBreakRule":
        return TieBreakRule(kind="myopic")

    @staticmethod
    def random_uniform() -> "TieBreakRule":
        return TieBreakRule(kind="random", weights=None)

    @staticmethod
    def random(*weights: float) -> "TieBreakRule":
        return TieBreakRule(kind="random", weights=tuple(float(w) for w in weights))

    @staticmethod
    def priority(*order: int) -> "TieBreakRule":
        return TieBreakRule(kind="priority", order=tuple(int(k) for k in order))


@dataclass(frozen=True)
class PolicySpec:
    """Index rule plus tie-breaking rule; fully determines a scheduler.

    rule:  'sb' (running sum of q up to the state), 'pi' (cost*mu over expected
           improvement mass above the state), 'pb' / 'rb' / 'cmu' (weight-based
           with weight 1/mu_best, 1/E[q.mu], cost), 'weight' (explicit weights),
           'custom' (explicit per-class index tables).
    """

    rule: str
    tie: TieBreakRule
    weights: tuple[float, ...] | None = None
    table: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.rule not in INDEX_RULES:
            raise ValueError(f"unknown index rule {self.rule!r}")
        if self.rule == "weight" and (
            self.weights is None or any(w <= 0 for w in self.weights)
        ):
            raise ValueError("weight rule needs positive per-class weights")
        if self.rule == "custom" and self.table is None:
            raise ValueError("custom rule needs an index table")


@dataclass(frozen=True)
class ServeDecision:
    """Outcome of one scheduling decision: serve (cls, state) or stay idle."""

    cls: int | None = None
    state: int | None = None

    @property
    def idle(self) -> bool:
        return self.cls is None

    @staticmethod
    def serve(cls: int, state: int) -> "ServeDecision":
        return ServeDecision(cls=cls, state=state)


IDLE = ServeDecision()


def score_based(tie: TieBreakRule | None = None) -> PolicySpec:
    return PolicySpec("sb", tie or TieBreakRule.random_uniform())


def potential_improvement(tie: TieBreakRule | None = None) -> PolicySpec:
    return PolicySpec("pi", tie or TieBreakRule.myopic())


def proportionally_best(tie: TieBreakRule | None = None) -> PolicySpec:
    return PolicySpec("pb", tie or TieBreakRule.random_uniform())


def relative_best(tie: TieBreakRule | None = None) -> PolicySpec:
    return PolicySpec("rb", tie or TieBreakRule.random_uniform())


def cmu_rule(tie: TieBreakRule | None = None) -> PolicySpec:
    return PolicySpec("cmu", tie or TieBreakRule.random_uniform())


def weight_based(weights, tie: TieBreakRule | None = None) -> PolicySpec:
    return PolicySpec(
        "weight", tie or TieBreakRule.random_uniform(), weights=tuple(map(float, weights))
    )


def custom(table, tie: TieBreakRule | None = None) -> PolicySpec:
    return PolicySpec(
        "custom",
        tie or TieBreakRule.myopic(),
        table=tuple(tuple(float(v) for v in row) for row in table),
    )


NAMED_POLICIES = {
    "sb": score_based,
    "pi": potential_improvement,
    "pb": proportionally_best,
    "rb": relative_best,
    "cmu": cmu_rule,
}


# ---------------------------------------------------------------------------
# Index tables


@lru_cache(maxsize=256)
def index_tables(spec: PolicySpec, cfg: SystemConfig) -> tuple[np.ndarray, ...]:
    """Per-class index arrays (NaN at q=0 states), cached per (policy, config)."""
    tables = []
    for k, cp in enumerate(cfg.classes):
        q = np.asarray(cp.q)
        mu = np.asarray(cp.mu)
        idx = np.full(cp.n_states, np.nan)
        sup = list(cp.support)
        if spec.rule == "sb":
            idx[sup] = np.cumsum(q)[sup]
        elif spec.rule == "pi":
            for n in sup:
                gain = sum(q[m] * (mu[m] - mu[n]) for m in sup if m > n)
                idx[n] = math.inf if gain <= 0.0 else cp.cost * mu[n] / gain
        elif spec.rule in ("pb", "rb", "cmu", "weight"):
            if spec.rule == "pb":
                w = 1.0 / cp.mu_best
            elif spec.rule == "rb":
                w = 1.0 / float(np.dot(q, mu))
            elif spec.rule == "cmu":
                w = cp.cost
            else:
                w = spec.weights[k]
            idx[sup] = w * mu[sup]
        else:  # custom
            row = spec.table[k]
            if len(row) != cp.n_states:
                raise ValueError(f"custom table row {k} has wrong length")
            for n in sup:
                if math.isnan(row[n]):
                    raise ValueError(f"custom index undefined for class {k+1}, state {n+1}")
            idx[sup] = [row[n] for n in sup]
        idx.setflags(write=False)
        tables.append(idx)
    return tuple(tables)


def index_value(spec: PolicySpec, cls: int, state: int, cfg: SystemConfig) -> float:
    """Index of a class-``cls`` user in ``state`` (0-based); requires q>0 there."""
    if cfg.classes[cls].q[state] <= 0.0:
        raise ValueError(f"state {state+1} of class {cls+1} has q=0")
    return float(index_tables(spec, cfg)[cls][state])


@lru_cache(maxsize=256)
def state_orders(spec: PolicySpec, cfg: SystemConfig) -> tuple[tuple[int, ...], ...]:
    """Per class: q>0 states sorted by (index, mu, state) ascending.

    The last entry is the state a class serves when several of its present
    states share the class-maximal index (highest mu wins, then highest state).
    """
    tables = index_tables(spec, cfg)
    orders = []
    for cp, idx in zip(cfg.classes, tables):
        sup = cp.support
        orders.append(tuple(sorted(sup, key=lambda n: (idx[n], cp.mu[n], n))))
    return tuple(orders)


def indices_close(a: float, b: float) -> bool:
    """Equality of index values up to INDEX_RTOL (infinities compare equal)."""
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= INDEX_RTOL * max(abs(a), abs(b), 1e-300)


def myopic_key(cfg: SystemConfig, cls: int) -> float:
    cp = cfg.classes[cls]
    return cp.cost * cp.mu_best


def tie_winner_probs(
    tie: TieBreakRule, tied: tuple[int, ...], cfg: SystemConfig
) -> dict[int, float]:
    """Probability each tied class wins the tie. Shared by the simulator's
    draw path and the exact serve-distribution computation."""
    if len(tied) == 1:
        return {tied[0]: 1.0}
    if tie.kind == "myopic":
        # exact key ties fall back to the lowest class index
        best = min(tied, key=lambda k: (-myopic_key(cfg, k), k))
        return {best: 1.0}
    if tie.kind == "priority":
        pos = {k: i for i, k in enumerate(tie.order)}
        return {min(tied, key=lambda k: pos[k]): 1.0}
    w = tie.weights if tie.weights is not None else (1.0,) * cfg.n_classes
    tot = sum(w[k] for k in tied)
    if tot <= 0:
        return {k: 1.0 / len(tied) for k in tied}
    return {k: w[k] / tot for k in tied}


# ---------------------------------------------------------------------------
# Slot decision


def select_user(spec: PolicySpec, occ, cfg: SystemConfig, rng: np.random.Generator) -> ServeDecision:
    """Serve decision for the occupancy of one slot.

    ``occ`` provides per-class state counts via ``occ.counts``. The user with
    the highest index wins; cross-class ties at the maximum go through the
    tie-break rule; within a class, the highest-mu present state tied at the
    class maximum is served. Idle only when no user is present.
    """
    tables = index_tables(spec, cfg)
    orders = state_orders(spec, cfg)
    tops: list[int | None] = []
    for k in range(cfg.n_classes):
        counts = occ.counts[k]
        top = None
        for n in reversed(orders[k]):
            if counts[n] > 0:
                top = n
                break
        tops.append(top)
    present = [k for k, t in enumerate(tops) if t is not None]
    if not present:
        return IDLE
    vals = {k: float(tables[k][tops[k]]) for k in present}
    vmax = max(vals.values())
    tied = tuple(k for k in present if indices_close(vals[k], vmax))
    probs = tie_winner_probs(spec.tie, tied, cfg)
    if len(probs) == 1:
        (winner,) = probs
    else:
        ks = sorted(probs)
        winner = int(rng.choice(ks, p=[probs[k] for k in ks]))
    return ServeDecision.serve(winner, tops[winner])


# ---------------------------------------------------------------------------
# Classification


def is_best_rate(spec: PolicySpec, cfg: SystemConfig) -> bool:
    """True iff every best-state index strictly dominates every non-best index.

    Under that condition a best-state user is served whenever one is present,
    for any of the three tie-break kinds. Index equality across a best and a
    non-best state counts as a losable tie, hence not best-rate (none of the
    tie-break kinds prefers best states).
    """
    tables = index_tables(spec, cfg)
    best_vals = [float(tables[k][-1]) for k in range(cfg.n_classes)]
    for j, cp in enumerate(cfg.classes):
        for n in cp.support[:-1]:
            v = float(tables[j][n])
            for bv in best_vals:
                if not (bv > v) or indices_close(bv, v):
                    return False
    return True


def is_brp(spec: PolicySpec, cfg: SystemConfig) -> bool:
    """Best-rate policy with the myopic tie-breaking rule."""
    return spec.tie.kind == "myopic" and is_best_rate(spec, cfg)


def effective_priority_order(spec: PolicySpec, cfg: SystemConfig) -> tuple[int, ...] | None:
    """Strict serve order among classes when all are saturated, or None.

    Classes group by their best-state index (descending); within a group the
    tie-break decides. A random tie-break inside any multi-class group means
    no strict order exists.
    """
    tables = index_tables(spec, cfg)
    best = [float(tables[k][-1]) for k in range(cfg.n_classes)]
    groups: list[list[int]] = []
    for k in sorted(range(cfg.n_classes), key=lambda k: (-best[k], k)):
        if groups and indices_close(best[groups[-1][0]], best[k]):
            groups[-1].append(k)
        else:
            groups.append([k])
    order: list[int] = []
    for g in groups:
        if len(g) == 1:
            order.extend(g)
        elif spec.tie.kind == "myopic":
            order.extend(sorted(g, key=lambda k: (-myopic_key(cfg, k), k)))
        elif spec.tie.kind == "priority":
            pos = {k: i for i, k in enumerate(spec.tie.order)}
            order.extend(sorted(g, key=lambda k: pos[k]))
        else:
            return None
    return tuple(order)


# ---------------------------------------------------------------------------
# CLI string forms


def parse_tie(text: str) -> TieBreakRule:
    """Parse 'myopic' | 'random[:w1,w2,...]' | 'priority:<perm>' (classes 1-based)."""
    if text == "myopic":
        return TieBreakRule.myopic()
    if text == "random":
        return TieBreakRule.random_uniform()
    if text.startswith("random:"):
        return TieBreakRule.random(*[float(v) for v in text.split(":", 1)[1].split(",")])
    if text.startswith("priority:"):
        order = [int(v) - 1 for v in text.split(":", 1)[1].split(",")]
        return TieBreakRule.priority(*order)
    raise ValueError(f"unknown tie-break spec {text!r}")


def parse_policy(text: str, tie: str | None = None) -> PolicySpec:
    """Parse 'sb|pi|pb|rb|cmu|weight:<w1,w2,...>|custom:<file>' with optional tie override."""
    tb = parse_tie(tie) if tie else None
    if text in NAMED_POLICIES:
        return NAMED_POLICIES[text](tb)
    if text.startswith("weight:"):
        weights = [float(v) for v in text.split(":", 1)[1].split(",")]
        return weight_based(weights, tb)
    if text.startswith("custom:"):
        path = Path(text.split(":", 1)[1])
        doc = json.loads(path.read_text())
        table = [[math.inf if v in ("inf", "Infinity") else float(v) for v in row]
                 for row in doc["indices"]]
        return custom(table, tb)
    raise ValueError(f"unknown policy spec {text!r}")


def policy_label(spec: PolicySpec) -> str:
    if spec.rule == "weight":
        return "weight:" + ",".join(f"{w:g}" for w in spec.weights)
    return spec.rule


def tie_label(tie: TieBreakRule) -> str:
    if tie.kind == "random":
        if tie.weights is None:
            return "random"
        return "random:" + ",".join(f"{w:g}" for w in tie.weights)
    if tie.kind == "priority":
        return "priority:" + ",".join(str(k + 1) for k in tie.order)
    return tie.kind
