"""Exact continuous-time Markov chain simulation of the n-server system.

The chain is simulated in ranked coordinates.  Under the original dynamics an
arrival to any queue of a tie block lands on the top rank of the block and a
departure leaves from the bottom rank, which reproduces the law of the
labeled system.  Under the dynamics with pauses, the other members of a tie
block are simply switched off.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernel
from .core import GapVector, LabeledState, Policy, RankedState, SystemParams, rank

__all__ = [
    "RecorderConfig",
    "EventLog",
    "RateTable",
    "replication_rng",
    "replication_seed",
    "simulate",
    "simulate_replications",
    "apply_arrival_original",
    "apply_departure_original",
    "rates_pauses",
    "rate_table",
    "route",
    "fraction_time_tied",
    "replay",
    "simulate_labeled_reference",
]

_POLICY_CODE = {
    Policy.MJSQ_ORIGINAL: _kernel.ORIGINAL,
    Policy.MJSQ_PAUSES: _kernel.PAUSES,
    Policy.RR: _kernel.RR,
    Policy.JSQ: _kernel.JSQ,
    Policy.JSQ_D: _kernel.JSQ_D,
}


def replication_seed(seed: int, replication: int) -> np.random.SeedSequence:
    """Independent seed sequence for replication ``replication`` of a run seeded ``seed``."""
    return np.random.SeedSequence([int(seed), int(replication)])


def replication_rng(seed: int, replication: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(replication_seed(seed, replication)))


@dataclass(frozen=True)
class RecorderConfig:
    """What the simulator keeps.

    sample_times: epochs at which the first ``snapshot_k`` ranked lengths are copied
        (``None`` keeps all n).
    batches: number of equal-length time batches for per-gap time averages.
    hist_k, hist_bins: occupation-time histograms for the first ``hist_k`` gaps.
    track_labels: maintain the label permutation (original, RR, JSQ, JSQ_D only).
    audit_every: with labels tracked, check lexicographic consistency every this many events.
    """

    sample_times: tuple[float, ...] = ()
    snapshot_k: int | None = None
    batches: int = 1
    hist_k: int = 0
    hist_bins: int = 0
    track_labels: bool = False
    audit_every: int = 0


@dataclass
class EventLog:
    params: SystemParams
    sample_times: np.ndarray
    snapshots: np.ndarray
    event_count: int
    proposal_count: int
    time_tied: float
    tied_pair_time: float
    busy_time: float
    batch_gap_means: np.ndarray
    occupation: np.ndarray
    final: RankedState
    audit_checks: int = 0
    audit_failures: int = 0

    @property
    def horizon(self) -> float:
        return self.params.horizon

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def gap_means(self) -> np.ndarray:
        """Time-averaged gaps over the whole horizon (batches have equal length)."""
        return self.batch_gap_means.mean(axis=0)

    def ranked_means(self, k: int) -> np.ndarray:
        return np.cumsum(self.gap_means[:k])

    @property
    def average_queue(self) -> float:
        g = self.gap_means
        w = np.arange(self.n, 0, -1)
        return float(w @ g / self.n)

    @property
    def imbalance(self) -> float:
        return float(self.gap_means[1:].sum())

    def occupation_fractions(self) -> np.ndarray:
        """hist[b, i, v] normalised to fractions of each batch."""
        if self.occupation.size == 0:
            return self.occupation
        return self.occupation / self.occupation.sum(axis=2, keepdims=True)


@dataclass(frozen=True)
class RateTable:
    arrival: np.ndarray
    service: np.ndarray
    base_rate: float
    bonus_rate: float
    service_rate: float

    @property
    def total(self) -> float:
        return float(self.arrival.sum() + self.service.sum())


def _as_ranked(params: SystemParams, initial) -> RankedState:
    if initial is None:
        return RankedState(np.zeros(params.n, dtype=np.int64))
    if isinstance(initial, RankedState):
        ranked = initial
    elif isinstance(initial, GapVector):
        ranked = RankedState(np.cumsum(initial.gaps))
    elif isinstance(initial, LabeledState):
        ranked = rank(initial)
    else:
        raise TypeError(f"unsupported initial state {type(initial).__name__}")
    if ranked.n != params.n:
        raise ValueError(f"initial state has {ranked.n} queues, params.n = {params.n}")
    return ranked


def simulate(
    params: SystemParams,
    initial: GapVector | RankedState | LabeledState | None = None,
    recorder: RecorderConfig = RecorderConfig(),
    rng: np.random.Generator | None = None,
) -> EventLog:
    """Run one trajectory on [0, params.horizon]."""
    ranked = _as_ranked(params, initial)
    if rng is None:
        rng = replication_rng(params.seed, 0)
    track = recorder.track_labels
    if track and params.policy is Policy.MJSQ_PAUSES:
        raise ValueError("labels are not defined for the dynamics with pauses")
    n = params.n
    Y = np.array(ranked.lengths, dtype=np.int64)
    labels = np.array(ranked.order, dtype=np.int64) if track else np.empty(0, dtype=np.int64)

    times = np.asarray(sorted(recorder.sample_times), dtype=float)
    if times.size and (times[0] < 0 or times[-1] > params.horizon):
        raise ValueError("sample times must lie in [0, horizon]")
    k = n if recorder.snapshot_k is None else min(recorder.snapshot_k, n)
    snaps = np.zeros((times.size, k), dtype=np.int64)
    if recorder.batches < 1:
        raise ValueError("batches must be >= 1")
    edges = np.linspace(0.0, params.horizon, recorder.batches + 1)
    edges[-1] = params.horizon
    batch_gap = np.zeros((recorder.batches, n))
    hist_k = min(recorder.hist_k, n)
    hist = np.zeros((recorder.batches, hist_k, max(recorder.hist_bins, 1)))
    audit = np.zeros(2, dtype=np.int64)

    events, proposals, tied, pairs, busy = _kernel.run(
        _POLICY_CODE[params.policy],
        int(params.d or 0),
        params.base_rate,
        params.bonus_rate,
        params.service_rate,
        Y,
        labels,
        float(params.horizon),
        rng,
        times,
        snaps,
        edges,
        batch_gap,
        hist,
        int(recorder.audit_every),
        audit,
    )
    if track:
        rank_of = np.empty(n, dtype=np.int64)
        rank_of[labels] = np.arange(n)
        final = RankedState(Y, rank_of)
    else:
        final = RankedState(Y)
    return EventLog(
        params=params,
        sample_times=times,
        snapshots=snaps,
        event_count=int(events),
        proposal_count=int(proposals),
        time_tied=float(tied),
        tied_pair_time=float(pairs),
        busy_time=float(busy),
        batch_gap_means=batch_gap,
        occupation=hist,
        final=final,
        audit_checks=int(audit[1]),
        audit_failures=int(audit[0]),
    )


def _replicate(args):
    params, initial_fn, recorder, r = args
    rng = replication_rng(params.seed, r)
    initial = initial_fn(params, rng) if initial_fn is not None else None
    return simulate(params, initial, recorder, rng)


def simulate_replications(
    params: SystemParams,
    replications: int,
    initial_fn=None,
    recorder: RecorderConfig = RecorderConfig(),
    workers: int = 1,
) -> list[EventLog]:
    """Independent replications; replication r draws its start and path from one stream.

    ``initial_fn(params, rng)`` builds the start state.  Results come back in
    replication order whatever ``workers`` is, so reductions are deterministic.
    """
    jobs = [(params, initial_fn, recorder, r) for r in range(replications)]
    if workers <= 1:
        return [_replicate(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_replicate, jobs))


def _block(lengths: np.ndarray, r: int) -> tuple[int, int]:
    v = lengths[r]
    lo, hi = r, r
    while lo > 0 and lengths[lo - 1] == v:
        lo -= 1
    while hi + 1 < lengths.size and lengths[hi + 1] == v:
        hi += 1
    return lo, hi


def apply_arrival_original(ranked: RankedState, target_rank: int) -> RankedState:
    """Credit an arrival at ``target_rank`` to the highest rank of its tie block."""
    lengths = np.array(ranked.lengths)
    _, hi = _block(lengths, target_rank)
    lengths[hi] += 1
    return RankedState(lengths)


def apply_departure_original(ranked: RankedState, target_rank: int) -> RankedState:
    """Debit a departure at ``target_rank`` from the lowest rank of its tie block."""
    lengths = np.array(ranked.lengths)
    assert lengths[target_rank] > 0, "departure from an empty queue"
    lo, _ = _block(lengths, target_rank)
    lengths[lo] -= 1
    return RankedState(lengths)


def rates_pauses(ranked: RankedState, params: SystemParams) -> RateTable:
    """Active per-rank rates of the dynamics with pauses.

    Rank i receives arrivals only if strictly below rank i+1, and serves only
    if strictly above rank i-1 (with a zero floor below rank 0).
    """
    y = ranked.lengths
    n = y.size
    gamma = np.full(n, params.base_rate)
    gamma[0] += params.bonus_rate
    above = np.append(y[1:], np.iinfo(np.int64).max)
    below = np.insert(y[:-1], 0, 0)
    arrival = np.where(y < above, gamma, 0.0)
    service = np.where(y > below, params.service_rate, 0.0)
    return RateTable(arrival, service, params.base_rate, params.bonus_rate, params.service_rate)


def rate_table(ranked: RankedState, params: SystemParams) -> RateTable:
    """Per-rank event rates of the current state for any policy.

    Entries are attributed to the rank whose length actually changes.
    """
    if params.policy is Policy.MJSQ_PAUSES:
        return rates_pauses(ranked, params)
    y = ranked.lengths
    n = y.size
    lam = params.total_arrival_rate
    if params.policy is Policy.MJSQ_ORIGINAL:
        stream = np.full(n, params.base_rate)
        stream[0] += params.bonus_rate
    elif params.policy is Policy.RR:
        stream = np.full(n, lam / n)
    elif params.policy is Policy.JSQ:
        stream = np.zeros(n)
        stream[0] = lam
    else:
        d = params.d
        # P(min of d distinct uniform ranks == r) = C(n-1-r, d-1) / C(n, d)
        r = np.arange(n)
        stream = np.array([math.comb(n - 1 - i, d - 1) for i in r], dtype=float) / math.comb(n, d) * lam
    arrival = np.zeros(n)
    service = np.zeros(n)
    for r_ in range(n):
        lo, hi = _block(y, r_)
        arrival[hi] += stream[r_]
        if y[r_] > 0:
            service[lo] += params.service_rate
    return RateTable(arrival, service, params.base_rate, params.bonus_rate, params.service_rate)


def route(policy: Policy, ranked: RankedState, rng: np.random.Generator, d: int | None = None) -> int:
    """Target rank of one arrival under RR, JSQ or JSQ(d).

    MJSQ splits its arrivals into a uniform stream and a rank-0 stream, which
    :func:`rate_table` expresses directly.
    """
    policy = Policy(policy)
    n = ranked.n
    if policy is Policy.RR:
        return int(rng.integers(0, n))
    if policy is Policy.JSQ:
        return 0
    if policy is Policy.JSQ_D:
        if d is None or not 1 <= d <= n:
            raise ValueError("JSQ_D needs 1 <= d <= n")
        labels = rng.choice(n, size=d, replace=False)
        return int(ranked.rank_of[labels].min())
    raise ValueError(f"{policy.value} routing is expressed through the rate table")


def fraction_time_tied(log: EventLog, kind: str = "pair") -> float:
    """Fraction of time spent in ties.

    kind="pair": time-averaged fraction of adjacent rank pairs that are tied,
        i.e. how long a given pair of neighbouring queues stays tied.
    kind="any": fraction of time in which at least one tie exists.
    """
    if log.n < 2:
        return 0.0
    if kind == "pair":
        return log.tied_pair_time / ((log.n - 1) * log.horizon)
    if kind == "any":
        return log.time_tied / log.horizon
    raise ValueError(f"unknown kind {kind!r}")


def replay(params: SystemParams, jump_times, states, recorder: RecorderConfig = RecorderConfig()) -> EventLog:
    """Build an EventLog from a scripted piecewise-constant ranked path.

    ``states[j]`` holds on ``[jump_times[j], jump_times[j+1])``; the last one
    holds until the horizon.  Used to check the log accumulators in isolation.
    """
    jump_times = np.asarray(jump_times, dtype=float)
    states = [np.asarray(s, dtype=np.int64) for s in states]
    ends = np.append(jump_times[1:], params.horizon)
    n = params.n
    tied = pairs = busy = 0.0
    gap_int = np.zeros(n)
    for y, t0, t1 in zip(states, jump_times, ends):
        span = t1 - t0
        g = np.diff(y, prepend=0)
        k = int(np.sum(g[1:] == 0))
        tied += span if k else 0.0
        pairs += k * span
        busy += np.count_nonzero(y) * span
        gap_int += g * span
    times = np.asarray(recorder.sample_times, dtype=float)
    snaps = np.array([states[np.searchsorted(jump_times, s, side="right") - 1] for s in times]).reshape(times.size, n)
    return EventLog(
        params=params,
        sample_times=times,
        snapshots=snaps,
        event_count=len(states) - 1,
        proposal_count=len(states) - 1,
        time_tied=tied,
        tied_pair_time=pairs,
        busy_time=busy,
        batch_gap_means=(gap_int / params.horizon)[None, :],
        occupation=np.zeros((1, 0, 1)),
        final=RankedState(states[-1]),
    )


def simulate_labeled_reference(
    params: SystemParams,
    initial: LabeledState,
    sample_times,
    rng: np.random.Generator,
) -> np.ndarray:
    """Plain Gillespie simulation of the labeled original MJSQ system (small n only).

    Queue i gets arrivals at rate n - a/sqrt(n), plus b*sqrt(n) when it is the
    lexicographically first shortest queue, and serves at rate n when nonempty.
    Returns the ranked lengths at each sample time.
    """
    if params.policy is not Policy.MJSQ_ORIGINAL:
        raise ValueError("reference simulator implements the original MJSQ dynamics only")
    if params.n > 16:
        raise ValueError("reference simulator is meant for n <= 16")
    x = np.array(initial.lengths, dtype=np.int64)
    n = x.size
    times = np.sort(np.asarray(sample_times, dtype=float))
    out = np.zeros((times.size, n), dtype=np.int64)
    t = 0.0
    j = 0
    while j < times.size:
        arr = np.full(n, params.base_rate)
        arr[int(np.argmin(x))] += params.bonus_rate
        dep = np.where(x > 0, params.service_rate, 0.0)
        rates = np.concatenate([arr, dep])
        total = rates.sum()
        t_next = t + rng.exponential(1.0 / total)
        while j < times.size and times[j] < t_next:
            out[j] = np.sort(x)
            j += 1
        e = int(rng.choice(2 * n, p=rates / total))
        if e < n:
            x[e] += 1
        else:
            x[e - n] -= 1
        t = t_next
    return out
