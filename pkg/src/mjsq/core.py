"""Shared state types for the n-server system: parameters, ranked queues, gaps.

Ranks and labels are 0-based throughout the Python API.  Rank 0 is the
shortest queue; ties are broken by the smaller label.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Policy",
    "SystemParams",
    "LabeledState",
    "RankedState",
    "GapVector",
    "ScaledVector",
    "InfeasibleParameters",
    "rank",
    "gaps",
    "ranked_from_gaps",
    "diffusion_scale",
    "unscale",
    "tail_mass",
]


class InfeasibleParameters(ValueError):
    """Raised when a parameter combination violates a model constraint."""


class Policy(str, enum.Enum):
    MJSQ_ORIGINAL = "mjsq_original"
    MJSQ_PAUSES = "mjsq_pauses"
    RR = "rr"
    JSQ = "jsq"
    JSQ_D = "jsq_d"

    @property
    def is_mjsq(self) -> bool:
        return self in (Policy.MJSQ_ORIGINAL, Policy.MJSQ_PAUSES)


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SystemParams:
    """One n-server heavy-traffic system.

    Per-queue base arrival rate is ``n - a/sqrt(n)``, the shortest queue gets an
    extra ``b*sqrt(n)``, and every server works at rate ``n``.
    """

    n: int
    a: float
    b: float
    policy: Policy = Policy.MJSQ_ORIGINAL
    seed: int = 0
    horizon: float = 1.0
    d: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if int(self.n) != self.n or self.n < 1:
            raise InfeasibleParameters(f"n must be a positive integer, got {self.n}")
        if not self.a > 0:
            raise InfeasibleParameters(f"a must be positive, got {self.a}")
        if not self.b >= 0:
            raise InfeasibleParameters(f"b must be nonnegative, got {self.b}")
        if not self.horizon > 0:
            raise InfeasibleParameters(f"horizon must be positive, got {self.horizon}")
        if not 0 <= self.seed < 2**64:
            raise InfeasibleParameters("seed must be a 64-bit unsigned integer")
        if self.policy is Policy.JSQ_D:
            if self.d is None or not 1 <= self.d <= self.n:
                raise InfeasibleParameters(f"JSQ_D needs 1 <= d <= n, got d={self.d}, n={self.n}")
        if self.policy.is_mjsq and self.base_rate <= 0:
            raise InfeasibleParameters(
                f"base arrival rate n - a/sqrt(n) = {self.base_rate} must be positive (need a < n^1.5)"
            )
        if self.total_arrival_rate <= 0:
            raise InfeasibleParameters("total arrival rate n^2 - (a-b) sqrt(n) must be positive")

    @property
    def base_rate(self) -> float:
        return self.n - self.a / math.sqrt(self.n)

    @property
    def bonus_rate(self) -> float:
        return self.b * math.sqrt(self.n)

    @property
    def service_rate(self) -> float:
        return float(self.n)

    @property
    def total_arrival_rate(self) -> float:
        return self.n * self.base_rate + self.bonus_rate

    def require_stationary_regime(self) -> None:
        """Validate ``a > b > 0``, needed by the stationary-law statements."""
        if not self.a > self.b > 0:
            raise InfeasibleParameters(f"stationarity requires a > b > 0, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class LabeledState:
    lengths: np.ndarray

    def __post_init__(self):
        lengths = _frozen(self.lengths, np.int64)
        if lengths.ndim != 1 or lengths.size == 0:
            raise ValueError("lengths must be a nonempty 1-d vector")
        if (lengths < 0).any():
            raise ValueError("queue lengths must be nonnegative")
        object.__setattr__(self, "lengths", lengths)

    @property
    def n(self) -> int:
        return self.lengths.size


@dataclass(frozen=True)
class RankedState:
    """Nondecreasing queue lengths plus the label -> rank map.

    ``order[r]`` is the label holding rank ``r``; ``rank_of`` is its inverse.
    """

    lengths: np.ndarray
    rank_of: np.ndarray | None = None
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lengths = _frozen(self.lengths, np.int64)
        if lengths.ndim != 1 or lengths.size == 0:
            raise ValueError("lengths must be a nonempty 1-d vector")
        if (np.diff(lengths) < 0).any():
            raise ValueError("ranked lengths must be nondecreasing")
        if lengths.size and lengths[0] < 0:
            raise ValueError("queue lengths must be nonnegative")
        n = lengths.size
        rank_of = np.arange(n) if self.rank_of is None else np.asarray(self.rank_of)
        if rank_of.shape != (n,) or not np.array_equal(np.sort(rank_of), np.arange(n)):
            raise ValueError("rank_of must be a permutation of range(n)")
        order = np.empty(n, dtype=np.int64)
        order[rank_of] = np.arange(n)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "rank_of", _frozen(rank_of, np.int64))
        object.__setattr__(self, "order", _frozen(order, np.int64))

    @property
    def n(self) -> int:
        return self.lengths.size


@dataclass(frozen=True)
class GapVector:
    """Successive differences of ranked lengths; ``gaps[0]`` is the shortest queue."""

    gaps: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gaps)
        dtype = np.int64 if np.issubdtype(g.dtype, np.integer) else np.float64
        g = _frozen(g, dtype)
        if g.ndim != 1 or g.size == 0:
            raise ValueError("gaps must be a nonempty 1-d vector")
        if (g < 0).any():
            raise ValueError("gaps must be nonnegative")
        object.__setattr__(self, "gaps", g)

    @property
    def n(self) -> int:
        return self.gaps.size


@dataclass(frozen=True)
class ScaledVector:
    values: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))


def rank(state: LabeledState) -> RankedState:
    """Sort queues by (length, label)."""
    lengths = state.lengths
    # stable sort keeps label order inside ties
    order = np.argsort(lengths, kind="stable")
    rank_of = np.empty_like(order)
    rank_of[order] = np.arange(order.size)
    return RankedState(lengths[order], rank_of)


def gaps(ranked: RankedState) -> GapVector:
    return GapVector(np.diff(ranked.lengths, prepend=0))


def ranked_from_gaps(g: GapVector) -> RankedState:
    return RankedState(np.cumsum(g.gaps))


def diffusion_scale(v: GapVector | RankedState | np.ndarray, n: int) -> ScaledVector:
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(v, GapVector):
        raw = v.gaps
    elif isinstance(v, RankedState):
        raw = v.lengths
    else:
        raw = np.asarray(v)
    scale = math.sqrt(n)
    return ScaledVector(raw / scale, scale)


def unscale(v: ScaledVector) -> np.ndarray:
    """Inverse of :func:`diffusion_scale` for integer-valued sources."""
    return np.rint(v.values * v.scale).astype(np.int64)


def tail_mass(scaled_initial: ScaledVector | np.ndarray, c: float, start_index: int) -> float:
    """Sum of exp(-c x_i) over i >= start_index (1-based, as in the admissibility condition).

    Small values for large ``start_index`` indicate the initial configuration
    spreads out fast enough for the diffusion limit to apply.
    """
    x = scaled_initial.values if isinstance(scaled_initial, ScaledVector) else np.asarray(scaled_initial, float)
    if c <= 0:
        raise ValueError("c must be positive")
    if not 1 <= start_index <= x.size:
        raise ValueError(f"start_index must lie in [1, {x.size}]")
    if (np.diff(x) < 0).any():
        raise ValueError("tail_mass needs a nondecreasing vector")
    return float(np.exp(-c * x[start_index - 1:]).sum())
