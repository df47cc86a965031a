"""Numba slot loop shared by every forward-simulation entry point.

Per slot and class the kernel samples only the extreme present state (the
top of the within-class priority order), via the inverse transform of the
order-CDF raised to the occupancy count; the serve decision and the departure
law depend on the occupancy through nothing else. Saturated classes have a
pinned population: their top is always the best-order state, departures do
not decrement them, and arrivals are not simulated.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def run_slots(
    seed,
    n_slots,
    x,  # int64[K], mutated in place
    lam,
    poisson,
    sat,
    m_counts,
    logcdf,  # f8[K, mmax], log cumulative order-CDF per class
    mu_rank,  # f8[K, mmax]
    strides,  # i8[K]
    n_tied,  # i8[C]
    tied_cls,  # i8[C, K]
    tied_cum,  # f8[C, K]
    warmup,
    cost_w,
    cap,
    freeze,  # serve decisions only: no departures, no arrivals
    sample_every,
    samp_x,  # i8[nsamp, K]
    samp_tau,  # i8[nsamp, K, mmax]
    cp_every,
    cp_x,  # i8[ncp, K]
    served,  # i8[K, mmax]
    deps,  # i8[K]
    arrs,  # i8[K]
    percls_sum,  # f8[K]
):
    np.random.seed(seed)
    K = x.shape[0]
    tops = np.empty(K, dtype=np.int64)
    cost_sum = 0.0
    for s in range(n_slots):
        if sample_every > 0 and s % sample_every == 0:
            i = s // sample_every
            if i < samp_x.shape[0]:
                for k in range(K):
                    samp_x[i, k] = x[k]
                    for r in range(m_counts[k]):
                        samp_tau[i, k, r] = served[k, r]
        if cp_every > 0 and s % cp_every == 0:
            i = s // cp_every
            if i < cp_x.shape[0]:
                for k in range(K):
                    cp_x[i, k] = x[k]
        combo = 0
        for k in range(K):
            if sat[k]:
                top = m_counts[k] - 1
            elif x[k] == 0:
                top = -1
            else:
                lu = np.log(np.random.random())
                top = m_counts[k] - 1
                xk = x[k]
                for i in range(m_counts[k]):
                    if lu <= xk * logcdf[k, i]:
                        top = i
                        break
            tops[k] = top
            combo += (top + 1) * strides[k]
        nt = n_tied[combo]
        if nt > 0:
            if nt == 1:
                kk = tied_cls[combo, 0]
            else:
                u = np.random.random()
                kk = tied_cls[combo, nt - 1]
                for i in range(nt):
                    if u < tied_cum[combo, i]:
                        kk = tied_cls[combo, i]
                        break
            r = tops[kk]
            served[kk, r] += 1
            if not freeze:
                if np.random.random() < mu_rank[kk, r]:
                    deps[kk] += 1
                    if not sat[kk]:
                        x[kk] -= 1
        if not freeze:
            for k in range(K):
                if not sat[k]:
                    if poisson:
                        a = np.random.poisson(lam[k])
                    else:
                        a = 1 if np.random.random() < lam[k] else 0
                    if a > 0:
                        x[k] += a
                        arrs[k] += a
        if s >= warmup:
            cs = 0.0
            for k in range(K):
                cs += cost_w[k] * x[k]
                percls_sum[k] += x[k]
            cost_sum += cs
        for k in range(K):
            if x[k] > cap:
                return cost_sum, s + 1, True
    return cost_sum, n_slots, False
