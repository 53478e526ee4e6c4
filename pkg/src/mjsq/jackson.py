"""Exact stationary analysis of the ranked gap chain as a tandem Jackson network.

Station ``i`` of the network is gap ``i``.  External arrivals enter only at the
last station; a completion at an interior station moves one step down (an
arrival to the rank below) or one step up (a service at that rank).
Everything that multiplies many factors close to one is done in log space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .core import InfeasibleParameters

__all__ = [
    "JacksonSpec",
    "ProductFormLaw",
    "LimitLaw",
    "Moments",
    "NonErgodicError",
    "routing_matrix",
    "external_arrivals",
    "station_service_rates",
    "traffic_residual",
    "solve_traffic",
    "closed_form_theta",
    "traffic_intensities",
    "stationary_law",
    "mjsq_log_rho",
    "mjsq_rho",
    "pi_n",
    "limit_mu",
    "fixed_k_limit",
    "fixed_k_spec",
    "exact_moments",
    "geometric_exp_sup_distance",
]

_CHUNK = 1 << 20


class NonErgodicError(InfeasibleParameters):
    def __init__(self, index: int, rho: float):
        super().__init__(f"traffic intensity at station {index} is {rho:.6g} >= 1; chain is not positive recurrent")
        self.index = index
        self.rho = rho


@dataclass(frozen=True)
class JacksonSpec:
    lam: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float)
        mu = np.array(self.mu, dtype=float)
        if lam.ndim != 1 or lam.shape != mu.shape or lam.size == 0:
            raise ValueError("lam and mu must be 1-d vectors of equal, positive length")
        if not ((lam > 0).all() and (mu > 0).all()):
            raise ValueError("all rates must be positive")
        lam.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)

    @property
    def k(self) -> int:
        return self.lam.size


def routing_matrix(spec: JacksonSpec) -> np.ndarray:
    k = spec.k
    lam, mu = spec.lam, spec.mu
    P = np.zeros((k, k))
    if k == 1:
        return P
    P[0, 1] = 1.0
    for i in range(1, k - 1):
        denom = lam[i - 1] + mu[i]
        P[i, i - 1] = lam[i - 1] / denom
        P[i, i + 1] = mu[i] / denom
    P[k - 1, k - 2] = lam[k - 2] / (lam[k - 2] + mu[k - 1])
    return P


def external_arrivals(spec: JacksonSpec) -> np.ndarray:
    out = np.zeros(spec.k)
    out[-1] = spec.lam[-1]
    return out


def station_service_rates(spec: JacksonSpec) -> np.ndarray:
    out = spec.mu.copy()
    out[1:] += spec.lam[:-1]
    return out


def traffic_residual(spec: JacksonSpec, theta: np.ndarray) -> float:
    """Largest componentwise relative residual of theta = lam_ext + P^T theta."""
    P = routing_matrix(spec)
    rhs = external_arrivals(spec) + P.T @ theta
    return float(np.max(np.abs(theta - rhs) / np.maximum(np.abs(theta), np.abs(rhs))))


def solve_traffic(spec: JacksonSpec) -> np.ndarray:
    """Solve the traffic equations by dense LU.

    The system is first rewritten in cut-balance form: summing equations
    ``1..i`` gives ``theta_i P[i,i+1] = theta_{i+1} P[i+1,i]`` for ``i < k`` and
    ``theta_k P_exit = lam_k``.  Same solution set, but the matrix is upper
    bidiagonal, so elimination involves no cancellation and every component
    keeps full relative accuracy even when theta spans hundreds of decades.
    """
    k = spec.k
    lam, mu = spec.lam, spec.mu
    if k == 1:
        return lam.copy()
    P = routing_matrix(spec)
    A = np.zeros((k, k))
    for i in range(k - 1):
        A[i, i] = P[i, i + 1]
        A[i, i + 1] = -P[i + 1, i]
    A[k - 1, k - 1] = mu[k - 1] / (lam[k - 2] + mu[k - 1])
    rhs = np.zeros(k)
    rhs[k - 1] = lam[k - 1]
    try:
        theta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - valid specs are nonsingular
        raise ArithmeticError("traffic equations are singular") from exc
    return theta


def _log_closed_form_theta(spec: JacksonSpec) -> np.ndarray:
    lam, mu = spec.lam, spec.mu
    k = spec.k
    if k == 1:
        return np.log(lam)
    log_lam, log_mu = np.log(lam), np.log(mu)
    log_t1 = math.fsum(log_lam) - math.fsum(log_mu[1:])
    out = np.empty(k)
    out[0] = log_t1
    # prefix sums: sum_{j=2}^{i-1} log mu_j - sum_{j=1}^{i-1} log lam_j  (1-based)
    mu_prefix = np.concatenate(([0.0], np.cumsum(log_mu[1:])))   # mu_prefix[m] = sum log mu[1:1+m]
    lam_prefix = np.cumsum(log_lam)                               # lam_prefix[m] = sum log lam[:m+1]
    for i in range(1, k):  # 0-based station i is 1-based i+1
        out[i] = mu_prefix[i - 1] - lam_prefix[i - 1] + math.log(lam[i - 1] + mu[i]) + log_t1
    return out


def closed_form_theta(spec: JacksonSpec) -> np.ndarray:
    return np.exp(_log_closed_form_theta(spec))


def _log_tail_product(spec: JacksonSpec) -> np.ndarray:
    terms = np.log(spec.lam) - np.log(spec.mu)
    return np.cumsum(terms[::-1])[::-1]


def traffic_intensities(spec: JacksonSpec, check: bool = True) -> np.ndarray:
    """rho_i = prod_{j>=i} lam_j / mu_j, cross-checked against theta_i / mu_bar_i."""
    rho = np.exp(_log_tail_product(spec))
    if check:
        via_theta = np.exp(_log_closed_form_theta(spec) - np.log(station_service_rates(spec)))
        if not np.allclose(rho, via_theta, rtol=1e-12, atol=0.0):
            worst = np.max(np.abs(rho / via_theta - 1))
            raise ArithmeticError(f"intensity identity violated (relative error {worst:.3g})")
    return rho


@dataclass(frozen=True)
class ProductFormLaw:
    """Independent geometric coordinates on N_0 with P(Q_i >= q) = rho_i^q.

    Built from ``log_rho`` so that intensities within 1e-6 of one keep full
    precision.  ``scale`` is the diffusion scale used by the ``scaled_*``
    views (1 for the raw chain, sqrt(n) for the scaled gaps).
    """

    log_rho: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        lr = np.array(self.log_rho, dtype=float)
        bad = np.flatnonzero(~(lr < 0))
        if bad.size:
            i = int(bad[0])
            raise NonErgodicError(i, float(np.exp(lr[i])))
        lr.setflags(write=False)
        object.__setattr__(self, "log_rho", lr)

    @classmethod
    def from_rho(cls, rho, scale: float = 1.0) -> "ProductFormLaw":
        rho = np.asarray(rho, dtype=float)
        bad = np.flatnonzero(~((rho > 0) & (rho < 1)))
        if bad.size:
            raise NonErgodicError(int(bad[0]), float(rho[bad[0]]))
        return cls(np.log(rho), scale)

    @property
    def k(self) -> int:
        return self.log_rho.size

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.log_rho)

    @property
    def one_minus_rho(self) -> np.ndarray:
        return -np.expm1(self.log_rho)

    def mean(self) -> np.ndarray:
        return np.exp(self.log_rho) / self.one_minus_rho

    def variance(self) -> np.ndarray:
        return np.exp(self.log_rho) / self.one_minus_rho**2

    def log_pmf(self, q) -> float:
        q = np.asarray(q)
        if q.shape != (self.k,):
            raise ValueError("state has wrong dimension")
        if (q < 0).any():
            return -math.inf
        return float(np.sum(q * self.log_rho + np.log(self.one_minus_rho)))

    def pmf(self, q) -> float:
        return math.exp(self.log_pmf(q))

    def tail(self, z) -> float:
        """P(Q >= z) coordinatewise, for integer z."""
        z = np.maximum(np.asarray(z, dtype=float), 0.0)
        return float(np.exp(np.sum(np.ceil(z) * self.log_rho)))

    def scaled_tail(self, z) -> float:
        """P(Q / scale >= z) coordinatewise."""
        return self.tail(np.asarray(z, dtype=float) * self.scale - 1e-9)

    def marginal_cdf(self, i: int, q) -> np.ndarray:
        q = np.floor(np.asarray(q, dtype=float))
        return np.where(q < 0, 0.0, -np.expm1((q + 1) * self.log_rho[i]))

    def scaled_marginal_cdf(self, i: int, x) -> np.ndarray:
        return self.marginal_cdf(i, np.floor(np.asarray(x, dtype=float) * self.scale + 1e-9))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Exact sampler by inversion: floor(log U / log rho)."""
        shape = (self.k,) if size is None else (size, self.k)
        u = 1.0 - rng.random(shape)  # in (0, 1]
        return np.floor(np.log(u) / self.log_rho).astype(np.int64)


def stationary_law(spec: JacksonSpec) -> ProductFormLaw:
    return ProductFormLaw(_log_tail_product(spec))


def _log_factors(n: int, a: float, b: float) -> tuple[float, float]:
    if not 0 < a < n**1.5:
        raise InfeasibleParameters(f"need 0 < a < n^1.5, got a={a}, n={n}")
    if b < 0:
        raise InfeasibleParameters("b must be nonnegative")
    log_base = math.log1p(-a * n**-1.5)
    log_first = math.log1p(-a * n**-1.5 + b / math.sqrt(n))
    return log_base, log_first


def mjsq_log_rho(n: int, a: float, b: float, indices=None) -> np.ndarray:
    """log rho_i for the MJSQ gap chain (0-based indices, default all n).

    rho_i = base^(n-i) for 0-based i >= 1 and rho_0 = first * base^(n-1),
    with base = 1 - a n^{-3/2} and first = base + b n^{-1/2}.
    """
    log_base, log_first = _log_factors(n, a, b)
    idx = np.arange(n) if indices is None else np.asarray(indices)
    out = (n - idx).astype(float) * log_base
    out = np.where(idx == 0, (n - 1) * log_base + log_first, out)
    return out


def mjsq_rho(n: int, a: float, b: float) -> np.ndarray:
    log_rho = mjsq_log_rho(n, a, b)
    bad = np.flatnonzero(log_rho >= 0)
    if bad.size:
        i = int(bad[0])
        raise NonErgodicError(i, float(np.exp(log_rho[i])))
    return np.exp(log_rho)


def pi_n(n: int, a: float, b: float) -> ProductFormLaw:
    """Stationary law of the unscaled gaps of the system with pauses."""
    return ProductFormLaw(mjsq_log_rho(n, a, b), scale=math.sqrt(n))


@dataclass(frozen=True)
class LimitLaw:
    """Independent exponential coordinates with the given rates."""

    rates: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        r = np.array(self.rates, dtype=float)
        if r.ndim != 1 or r.size == 0 or not (r > 0).all():
            raise InfeasibleParameters(f"exponential rates must be positive, got {r}")
        r.setflags(write=False)
        object.__setattr__(self, "rates", r)

    @property
    def m(self) -> int:
        return self.rates.size

    def mean(self) -> np.ndarray:
        return 1.0 / self.rates

    def cdf(self, i: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.where(x < 0, 0.0, -np.expm1(-self.rates[i] * np.maximum(x, 0.0)))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.m,) if size is None else (size, self.m)
        return rng.standard_exponential(shape) / self.rates

    def sample_ranked(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Sample positions whose successive gaps follow this law (the cumulative transform)."""
        return np.cumsum(self.sample(rng, size), axis=-1)

    def ranked_cdf(self, k: int, x) -> np.ndarray:
        """CDF of the k-th position (0-based), a phase-type sum of exponentials."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        rates = self.rates[: k + 1]
        S = np.diag(-rates) + np.diag(rates[:-1], 1)
        out = np.empty_like(x)
        for j, v in enumerate(x):
            out[j] = 0.0 if v <= 0 else 1.0 - linalg.expm(S * v)[0].sum()
        return out

    def ranked_quantile(self, k: int, p: float) -> float:
        key = (k, p)
        if key not in self._cache:
            hi = 50.0 * float(np.sum(1.0 / self.rates[: k + 1]))
            self._cache[key] = optimize.brentq(lambda v: float(self.ranked_cdf(k, v)[0]) - p, 0.0, hi, xtol=1e-12)
        return self._cache[key]


def limit_mu(a: float, b: float, m: int) -> LimitLaw:
    """Exp(a-b) x Exp(a) x ... truncated to m coordinates."""
    if not a > b > 0:
        raise InfeasibleParameters(f"need a > b > 0, got a={a}, b={b}")
    if m < 1:
        raise ValueError("m must be >= 1")
    rates = np.full(m, float(a))
    rates[0] = a - b
    return LimitLaw(rates)


def fixed_k_limit(a_vec) -> LimitLaw:
    a_vec = np.asarray(a_vec, dtype=float)
    tails = np.cumsum(a_vec[::-1])[::-1]
    bad = np.flatnonzero(~(tails > 0))
    if bad.size:
        raise NonErgodicError(int(bad[0]), float("nan"))
    return LimitLaw(tails)


def fixed_k_spec(n: float, a_vec) -> JacksonSpec:
    """Rates lam_i = n - a_i sqrt(n), mu_i = n for the fixed-k network."""
    a_vec = np.asarray(a_vec, dtype=float)
    return JacksonSpec(n - a_vec * math.sqrt(n), np.full(a_vec.size, float(n)))


def geometric_exp_sup_distance(log_rho: float, scale: float, rate: float) -> float:
    """Exact sup |F - G| between Geom(log_rho)/scale and Exp(rate).

    F is a step function jumping at m/scale, so the supremum is attained at a
    jump, from one side or the other.
    """
    decay = min(-log_rho, rate / scale)
    m_max = int(math.ceil(45.0 / decay)) + 2
    m = np.arange(m_max, dtype=float)
    surv_geom = np.exp((m + 1) * log_rho)              # 1 - F on [m/s, (m+1)/s)
    left = np.exp(-rate * m / scale)                    # 1 - G(m/s)
    right = np.exp(-rate * (m + 1) / scale)             # 1 - G((m+1)/s-)
    return float(max(np.max(np.abs(surv_geom - left)), np.max(np.abs(surv_geom - right))))


@dataclass(frozen=True)
class Moments:
    n: int
    ranked: np.ndarray       # E[X_(k)], k = 1..len
    imbalance: float         # E[X_(n) - X_(1)]
    average: float           # E[(1/n) sum_k X_(k)]

    def ranked_k(self, k: int) -> float:
        """1-based k."""
        return float(self.ranked[k - 1])


def exact_moments(n: int, a: float, b: float, k_max: int = 5) -> Moments:
    """Stationary moments of the pauses system, O(n) time and O(1) extra memory per chunk."""
    log_base, log_first = _log_factors(n, a, b)
    lr0 = (n - 1) * log_base + log_first
    if lr0 >= 0:
        raise NonErgodicError(0, math.exp(lr0))

    def gap_mean(log_rho):
        return np.exp(log_rho) / -np.expm1(log_rho)

    k_max = min(k_max, n)
    head = gap_mean(mjsq_log_rho(n, a, b, np.arange(k_max)))
    ranked = np.cumsum(head)
    # gaps 2..n (1-based): m = n - i + 1 runs over 1..n-1
    parts_i, parts_w = [], []
    for start in range(1, n, _CHUNK):
        m = np.arange(start, min(start + _CHUNK, n), dtype=float)
        g = gap_mean(m * log_base)
        parts_i.append(float(np.sum(g)))
        parts_w.append(float(np.sum(m * g)))
    imbalance = math.fsum(parts_i)
    weighted = math.fsum(parts_w)
    average = (n * head[0] + weighted) / n
    return Moments(n=n, ranked=ranked, imbalance=imbalance, average=average)
