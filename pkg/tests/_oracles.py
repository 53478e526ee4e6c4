"""Brute-force oracles shared by the tests."""
import math

import numpy as np


def gap_generator(n, a, b, cap):
    """Generator of the pauses gap chain truncated at ``cap`` per coordinate (small n)."""
    s = math.sqrt(n)
    gamma = np.full(n, n - a / s)
    gamma[0] += b * s
    shape = (cap + 1,) * n
    states = list(np.ndindex(*shape))
    index = {st_: j for j, st_ in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for j, z in enumerate(states):
        y = np.cumsum(z)
        for i in range(n):
            above = y[i + 1] if i + 1 < n else np.inf
            below = y[i - 1] if i > 0 else 0
            if y[i] < above:  # arrival at rank i: gap i up, gap i+1 down
                z2 = list(z)
                z2[i] += 1
                if i + 1 < n:
                    z2[i + 1] -= 1
                if max(z2) <= cap:
                    Q[j, index[tuple(z2)]] += gamma[i]
            if y[i] > below:  # service at rank i
                z2 = list(z)
                z2[i] -= 1
                if i + 1 < n:
                    z2[i + 1] += 1
                if max(z2) <= cap:
                    Q[j, index[tuple(z2)]] += n
    Q -= np.diag(Q.sum(axis=1))
    return states, Q


def routing_probs(policy, x, d=None):
    """P(arrival joins labeled queue i) for RR / JSQ / JSQ_D in labeled state x."""
    import itertools

    n = len(x)
    key = lambda i: (x[i], i)  # noqa: E731
    if policy == "rr":
        return np.full(n, 1.0 / n)
    if policy == "jsq":
        p = np.zeros(n)
        p[min(range(n), key=key)] = 1.0
        return p
    subsets = list(itertools.combinations(range(n), d))
    p = np.zeros(n)
    for s in subsets:
        p[min(s, key=key)] += 1.0 / len(subsets)
    return p


def labeled_generator(params, cap):
    """Generator of the labeled queue-length chain truncated at ``cap`` (small n).

    Arrivals that would exceed the cap are dropped; start far enough below it.
    """
    n = params.n
    states = list(np.ndindex(*((cap + 1,) * n)))
    index = {s: j for j, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    pol = params.policy.value
    for j, x in enumerate(states):
        if pol == "mjsq_original":
            arr = np.full(n, params.base_rate)
            arr[min(range(n), key=lambda i: (x[i], i))] += params.bonus_rate
        else:
            arr = params.total_arrival_rate * routing_probs(pol, x, params.d)
        for i in range(n):
            if x[i] < cap and arr[i] > 0:
                y = list(x)
                y[i] += 1
                Q[j, index[tuple(y)]] += arr[i]
            if x[i] > 0:
                y = list(x)
                y[i] -= 1
                Q[j, index[tuple(y)]] += params.service_rate
    Q -= np.diag(Q.sum(axis=1))
    return states, Q


def lump_sorted(states, p):
    """Push a distribution on labeled states forward to sorted (ranked) vectors."""
    out = {}
    for s, v in zip(states, p):
        k = tuple(sorted(s))
        out[k] = out.get(k, 0.0) + v
    return out
