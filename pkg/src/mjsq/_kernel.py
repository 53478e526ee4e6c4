"""Compiled event loop for the ranked queue-length chain.

All five policies share one proposal scheme: a single clock of constant rate
``total = n*base + bonus + n*mu`` proposes an arrival (uniform rank, or the
bonus stream to rank 0) or a service (uniform rank).  Proposals that the
current state gates off are self-loops.  Because the gated rate never
exceeds ``total``, the accepted events form exactly the chain whose jump
rates are the active ones (uniformization).
"""
from __future__ import annotations

import numba
import numpy as np

ORIGINAL = 0
PAUSES = 1
RR = 2
JSQ = 3
JSQ_D = 4


@numba.njit(cache=True, inline="always")
def _touch(i, t, U, last, acc, hist, hist_k, hist_bins, batch):
    dt = t - last[i]
    acc[i] += U[i] * dt
    if i < hist_k:
        v = U[i]
        if v >= hist_bins:
            v = hist_bins - 1
        hist[batch, i, v] += dt
    last[i] = t


@numba.njit(cache=True)
def run(
    policy,
    d,
    base,
    bonus,
    mu,
    Y,
    labels,
    horizon,
    rng,
    sample_times,
    snaps,
    batch_edges,
    batch_gap,
    hist,
    audit_every,
    audit,
):
    """Advance ranked state ``Y`` (in place) to ``horizon``.

    ``labels`` (rank -> label) is maintained when nonempty.  ``snaps`` has one
    row per sample time holding the first ``snaps.shape[1]`` ranked lengths.
    ``batch_gap[b, i]`` receives the time average of gap i over batch b and
    ``hist[b, i, v]`` the time gap i spends at value v (last bin is >=).
    Returns (events, proposals, any_tie_time, tied_pair_time, busy_time).
    """
    n = Y.shape[0]
    track = labels.shape[0] == n
    hist_k = hist.shape[1]
    hist_bins = hist.shape[2]
    snap_k = snaps.shape[1]
    n_samples = sample_times.shape[0]
    n_batches = batch_gap.shape[0]

    U = np.empty(n, dtype=np.int64)
    prev = 0
    for i in range(n):
        U[i] = Y[i] - prev
        prev = Y[i]
    last = np.zeros(n)
    acc = np.zeros(n)
    ties = 0
    zeros = 0
    for i in range(n):
        if i > 0 and U[i] == 0:
            ties += 1
        if Y[i] == 0:
            zeros += 1

    lam_total = n * base + bonus
    total = lam_total + n * mu
    perm = np.arange(n)

    t = 0.0
    events = 0
    proposals = 0
    any_tie_time = 0.0
    pair_time = 0.0
    busy_time = 0.0
    next_sample = 0
    batch = 0
    batch_start = 0.0

    while True:
        t_next = t + rng.standard_exponential() / total
        t_stop = t_next if t_next < horizon else horizon
        span = t_stop - t
        if ties > 0:
            any_tie_time += span
        pair_time += ties * span
        busy_time += (n - zeros) * span
        final = t_next >= horizon
        while next_sample < n_samples and (
            sample_times[next_sample] < t_stop or (final and sample_times[next_sample] <= horizon)
        ):
            for j in range(snap_k):
                snaps[next_sample, j] = Y[j]
            next_sample += 1
        while batch < n_batches and batch_edges[batch + 1] <= t_stop:
            edge = batch_edges[batch + 1]
            for i in range(n):
                _touch(i, edge, U, last, acc, hist, hist_k, hist_bins, batch)
                batch_gap[batch, i] = acc[i] / (edge - batch_start)
                acc[i] = 0.0
            batch_start = edge
            batch += 1
        if final:
            break
        t = t_next
        proposals += 1

        # one uniform picks both the event class and its rank
        x = rng.random() * total
        if x < lam_total:
            if policy == ORIGINAL or policy == PAUSES:
                if x < bonus:
                    r = 0
                else:
                    r = int((x - bonus) / base)
            elif policy == RR:
                r = int(x / lam_total * n)
            elif policy == JSQ:
                r = 0
            else:
                # min rank among d distinct uniform draws (partial Fisher-Yates)
                r = n
                for j in range(d):
                    s = j + rng.integers(0, n - j)
                    tmp = perm[j]
                    perm[j] = perm[s]
                    perm[s] = tmp
                    if perm[j] < r:
                        r = perm[j]
            if r >= n:
                r = n - 1
            v = Y[r]
            top = r
            while top + 1 < n and Y[top + 1] == v:
                top += 1
            if policy == PAUSES and top != r:
                continue
            # increment at the top of the tie block
            _touch(top, t, U, last, acc, hist, hist_k, hist_bins, batch)
            if top + 1 < n:
                _touch(top + 1, t, U, last, acc, hist, hist_k, hist_bins, batch)
            if top > 0 and U[top] == 0:
                ties -= 1
            U[top] += 1
            if top + 1 < n:
                U[top + 1] -= 1
                if U[top + 1] == 0:
                    ties += 1
            Y[top] = v + 1
            if v == 0:
                zeros -= 1
            if track:
                lab = labels[r]
                for j in range(r, top):
                    labels[j] = labels[j + 1]
                p = top
                while p + 1 < n and Y[p + 1] == v + 1 and labels[p + 1] < lab:
                    labels[p] = labels[p + 1]
                    p += 1
                labels[p] = lab
        else:
            r = int((x - lam_total) / mu)
            if r >= n:
                r = n - 1
            v = Y[r]
            if v == 0:
                continue
            bottom = r
            while bottom > 0 and Y[bottom - 1] == v:
                bottom -= 1
            if policy == PAUSES and bottom != r:
                continue
            _touch(bottom, t, U, last, acc, hist, hist_k, hist_bins, batch)
            if bottom + 1 < n:
                _touch(bottom + 1, t, U, last, acc, hist, hist_k, hist_bins, batch)
            U[bottom] -= 1
            if bottom > 0 and U[bottom] == 0:
                ties += 1
            if bottom + 1 < n:
                if U[bottom + 1] == 0:
                    ties -= 1
                U[bottom + 1] += 1
            Y[bottom] = v - 1
            if v == 1:
                zeros += 1
            if track:
                lab = labels[r]
                for j in range(r, bottom, -1):
                    labels[j] = labels[j - 1]
                p = bottom
                while p > 0 and Y[p - 1] == v - 1 and labels[p - 1] > lab:
                    labels[p] = labels[p - 1]
                    p -= 1
                labels[p] = lab
        events += 1
        if Y[n - 1] > 4611686018427387904:
            raise OverflowError("queue length overflow")
        if track and audit_every > 0 and events % audit_every == 0:
            audit[1] += 1
            for j in range(1, n):
                if Y[j] < Y[j - 1] or (Y[j] == Y[j - 1] and labels[j] < labels[j - 1]):
                    audit[0] += 1
                    break

    return events, proposals, any_tie_time, pair_time, busy_time
