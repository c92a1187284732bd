"""Compiled inner loops for the streaming detectors.

Each ``*_scan`` advances detector state over a block of inputs, writes the
per-step statistic, and stops early once a statistic exceeds ``stop`` (pass
``inf`` to process the whole block). They return the number of steps consumed.
All kernels release the GIL.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def fixed_scan(ring, t0, Z, stop, stats, khat):
    # ring[j % (w+1)] holds the cumulative whitened sum S_j for the last w+1 times
    w1 = ring.shape[0]
    w = w1 - 1
    M = ring.shape[1]
    t = t0
    for j in range(Z.shape[0]):
        prev = ring[t % w1]
        t += 1
        cur = ring[t % w1]
        for m in range(M):
            cur[m] = prev[m] + Z[j, m]
        best = 0.0
        arg = t - 1
        kmin = t - w
        if kmin < 0:
            kmin = 0
        for k in range(t - 1, kmin - 1, -1):
            sk = ring[k % w1]
            acc = 0.0
            for m in range(M):
                d = cur[m] - sk[m]
                acc += d * d
            v = acc / (2.0 * (t - k))
            if v > best:
                best = v
                arg = k
        stats[j] = best
        khat[j] = arg
        if best > stop:
            return j + 1
    return Z.shape[0]


@njit(cache=True, nogil=True)
def missing_scan(obs_idx, obs_val, obs_len, t0, idx, val, lens, sums, cnts, stop, stats, khat):
    # obs_* is a ring of the last w observation sets; time t lives in slot (t-1) % w.
    # sums/cnts are scratch of length N; a zero count means the sum is stale.
    # inv[c] = 1/c turns the per-update divisions into multiplications.
    w = obs_idx.shape[0]
    inv = np.empty(w + 2)
    inv[0] = 0.0
    for c in range(1, w + 2):
        inv[c] = 1.0 / c
    t = t0
    for j in range(idx.shape[0]):
        t += 1
        slot = (t - 1) % w
        L = lens[j]
        obs_len[slot] = L
        for i in range(L):
            obs_idx[slot, i] = idx[j, i]
            obs_val[slot, i] = val[j, i]
        kmin = t - w
        if kmin < 0:
            kmin = 0
        total = 0.0
        best = 0.0
        arg = t - 1
        for k in range(t - 1, kmin - 1, -1):
            s = k % w  # observations at time k+1
            for i in range(obs_len[s]):
                n = obs_idx[s, i]
                x = obs_val[s, i]
                c = cnts[n]
                sn = sums[n] if c > 0 else 0.0
                total += (sn + x) * (sn + x) * inv[c + 1] - sn * sn * inv[c]
                sums[n] = sn + x
                cnts[n] = c + 1
            v = 0.5 * total
            if v > best:
                best = v
                arg = k
        for k in range(t - 1, kmin - 1, -1):
            s = k % w
            for i in range(obs_len[s]):
                cnts[obs_idx[s, i]] = 0
        stats[j] = best
        khat[j] = arg
        if best > stop:
            return j + 1
    return idx.shape[0]


@njit(cache=True, nogil=True)
def cusum_scan(state, ref, Y, stop, stats):
    M = state.shape[0]
    for j in range(Y.shape[0]):
        total = 0.0
        for m in range(M):
            s = state[m] + (Y[j, m] - 0.5 * ref[m]) * ref[m]
            if s < 0.0:
                s = 0.0
            state[m] = s
            total += s
        stats[j] = total
        if total > stop:
            return j + 1
    return Y.shape[0]


def warmup() -> None:
    """Trigger compilation (or cache load) of every kernel."""
    ring = np.zeros((3, 2))
    stats = np.zeros(1)
    khat = np.zeros(1, dtype=np.int64)
    fixed_scan(ring, 0, np.zeros((1, 2)), np.inf, stats, khat)
    missing_scan(
        np.zeros((2, 2), dtype=np.int64), np.zeros((2, 2)), np.zeros(2, dtype=np.int64), 0,
        np.zeros((1, 2), dtype=np.int64), np.zeros((1, 2)), np.zeros(1, dtype=np.int64),
        np.zeros(2), np.zeros(2, dtype=np.int64), np.inf, stats, khat,
    )
    cusum_scan(np.zeros(2), np.ones(2), np.zeros((1, 2)), np.inf, stats)
