"""Shared test fixtures and the brute-force serve-distribution oracle.

The oracle enumerates every joint channel configuration explicitly (product
measure over per-user state assignments), resolves the winner per
configuration with its own argmax/tie logic, and therefore shares nothing
with the analytic path beyond the definitional index tables.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from oppsched.model import SystemConfig
from oppsched.policy import PolicySpec, index_tables, myopic_key
from oppsched.presets import cdma_config

RTOL = 1e-12


@lru_cache(maxsize=None)
def _user_grids(m: int, x: int) -> np.ndarray:
    """All m^x state-index tuples as an (x, m^x) array."""
    return np.indices((m,) * x).reshape(x, -1)


def brute_force_serve_distribution(
    spec: PolicySpec, cfg: SystemConfig, x, saturated=()
):
    """Exact serve distribution by enumerating all joint channel configurations.

    Returns (probs, idle) with probs[k] a per-state vector for class k.
    """
    K = cfg.n_classes
    sat = set(saturated)
    tables = index_tables(spec, cfg)
    tops_w = []
    for k, cp in enumerate(cfg.classes):
        sup = list(cp.support)
        order = sorted(sup, key=lambda n: (tables[k][n], cp.mu[n], n))
        if k in sat:
            tops_w.append((np.array([order[-1]]), np.array([1.0])))
            continue
        if x[k] == 0:
            tops_w.append((np.array([-1]), np.array([1.0])))
            continue
        grids = _user_grids(len(sup), int(x[k]))
        rank_of = {n: i for i, n in enumerate(order)}
        ranks = np.array([rank_of[n] for n in sup])
        top_rank = ranks[grids].max(axis=0)
        tops = np.array(order)[top_rank]
        qs = np.array([cp.q[n] for n in sup])
        weights = qs[grids].prod(axis=0)
        tops_w.append((tops, weights))
    sizes = [len(t) for t, _ in tops_w]
    n_cells = int(np.prod(sizes))
    assert n_cells <= 2_000_000, "joint configuration space too large for the oracle"
    cell = np.indices(sizes).reshape(K, -1)
    top_states = np.stack([tops_w[k][0][cell[k]] for k in range(K)])
    weights = np.ones(n_cells)
    for k in range(K):
        weights = weights * tops_w[k][1][cell[k]]
    vals = np.full((K, n_cells), -np.inf)
    for k in range(K):
        present = top_states[k] >= 0
        safe = np.where(present, top_states[k], 0)
        vals[k] = np.where(present, np.asarray(tables[k])[safe], -np.inf)
    vmax = vals.max(axis=0)
    present_any = vmax > -np.inf
    tied = np.zeros((K, n_cells), dtype=bool)
    with np.errstate(invalid="ignore"):
        for k in range(K):
            a = vals[k]
            both_fin = np.isfinite(a) & np.isfinite(vmax)
            close = both_fin & (
                np.abs(a - vmax)
                <= RTOL * np.maximum(np.maximum(np.abs(a), np.abs(vmax)), 1e-300)
            )
            tied[k] = (close | (~both_fin & (a == vmax))) & (a > -np.inf)
    probs = [np.zeros(cp.n_states) for cp in cfg.classes]

    def accumulate(k: int, share: np.ndarray) -> None:
        mask = (share > 0) & present_any
        if mask.any():
            np.add.at(probs[k], top_states[k][mask], weights[mask] * share[mask])

    if spec.tie.kind in ("myopic", "priority"):
        if spec.tie.kind == "myopic":
            resolution = sorted(range(K), key=lambda k: (-myopic_key(cfg, k), k))
        else:
            resolution = list(spec.tie.order)
        unassigned = present_any.copy()
        for k in resolution:
            sel = tied[k] & unassigned
            accumulate(k, sel.astype(float))
            unassigned &= ~sel
    else:
        w = spec.tie.weights if spec.tie.weights is not None else (1.0,) * K
        raw = np.stack([tied[k] * w[k] for k in range(K)])
        tot = raw.sum(axis=0)
        zero_w = (tot == 0) & present_any & tied.any(axis=0)
        if zero_w.any():  # all tied weights zero: uniform over the tied set
            raw = np.where(zero_w, tied.astype(float), raw)
            tot = raw.sum(axis=0)
        for k in range(K):
            share = np.divide(raw[k], tot, out=np.zeros_like(raw[k]), where=tot > 0)
            accumulate(k, share)
    idle = float(weights[~present_any].sum())
    return probs, idle


def cdma(lam1: float = 0.14) -> SystemConfig:
    return cdma_config(lam1)


def all_policy_tie_combos():
    """The five named rules under each of the three tie-break kinds."""
    from oppsched.policy import NAMED_POLICIES, TieBreakRule

    ties = [
        TieBreakRule.myopic(),
        TieBreakRule.random(0.3, 0.7),
        TieBreakRule.priority(1, 0),
    ]
    return [
        (f"{name}+{tie.kind}", ctor(tie))
        for name, ctor in NAMED_POLICIES.items()
        for tie in ties
    ]
