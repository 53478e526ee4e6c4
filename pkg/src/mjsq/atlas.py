"""Finite-N reflected Atlas diffusion: unranked Euler scheme and gap Skorohod map.

Particles move as independent Brownian motions with variance 2 per unit time;
the lowest one gets drift ``delta``; all reflect at 0.  The gap vector of the
ranked system is the image of a driving path under the Harrison-Reiman map
with a fixed tridiagonal reflection matrix.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np
from scipy import stats

from .jackson import LimitLaw, limit_mu

__all__ = [
    "AtlasConfig",
    "PathBundle",
    "ReflectionError",
    "skorohod_1d",
    "reflection_matrix",
    "harrison_reiman_map",
    "simulate_unranked",
    "simulate_gaps",
    "StationarityDiagnostic",
    "stationarity_diagnostic",
    "dual_discrepancy",
]


class ReflectionError(RuntimeError):
    """The Harrison-Reiman fixed point did not converge."""


@dataclass(frozen=True)
class AtlasConfig:
    """Simulation settings.

    ``initial_law`` is either a LimitLaw over the N gaps or an explicit gap
    vector of length N.  ``record_times`` selects the grid times kept in the
    returned bundle; ``None`` keeps every step.
    """

    N: int
    delta: float
    dt: float
    T: float
    replications: int = 1
    initial_law: LimitLaw | tuple | np.ndarray | None = None
    record_times: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not (self.dt > 0 and self.T > 0 and self.dt <= self.T):
            raise ValueError("need 0 < dt <= T")
        if not math.isfinite(self.delta):
            raise ValueError("delta must be finite")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if isinstance(self.initial_law, LimitLaw):
            if self.initial_law.m < self.N:
                raise ValueError("initial law has fewer coordinates than N")
        elif self.initial_law is not None:
            g = np.asarray(self.initial_law, dtype=float)
            if g.shape != (self.N,) or (g < 0).any():
                raise ValueError("explicit initial gaps must be a nonnegative vector of length N")
        if self.record_times is not None:
            if any(not 0 <= t <= self.T for t in self.record_times):
                raise ValueError("record times must lie in [0, T]")

    @classmethod
    def for_model(cls, a: float, b: float, N: int, dt: float, T: float, **kw) -> "AtlasConfig":
        """Drift b on the lowest particle, started from the product-exponential law."""
        return cls(N=N, delta=b, dt=dt, T=T, initial_law=limit_mu(a, b, N), **kw)

    @property
    def steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    @property
    def step(self) -> float:
        return self.T / self.steps

    def record_indices(self) -> np.ndarray:
        if self.record_times is None:
            return np.arange(self.steps + 1)
        return np.array([int(round(t / self.step)) for t in self.record_times], dtype=np.int64)

    def sample_initial_gaps(self, rng: np.random.Generator) -> np.ndarray:
        """(replications, N) initial gaps."""
        if self.initial_law is None:
            return np.zeros((self.replications, self.N))
        if isinstance(self.initial_law, LimitLaw):
            return self.initial_law.sample(rng, self.replications)[:, : self.N]
        return np.broadcast_to(np.asarray(self.initial_law, float), (self.replications, self.N)).copy()


@dataclass
class PathBundle:
    """Recorded paths; arrays carry a leading replication axis.

    ranked_paths, gap_paths: (replications, len(times), N).
    local_time_totals: (replications, N) regulators at T (per particle at 0 for
    the unranked scheme, per gap boundary for the gap scheme).
    ranked_increments: optional (replications, steps, N) Brownian increments
    attributed to ranks at the start of each step.
    """

    times: np.ndarray
    ranked_paths: np.ndarray | None
    gap_paths: np.ndarray
    local_time_totals: np.ndarray
    ranked_increments: np.ndarray | None = None
    regulators: np.ndarray | None = None

    def at(self, t: float) -> np.ndarray:
        """Gaps at the recorded time closest to t, (replications, N)."""
        j = int(np.argmin(np.abs(self.times - t)))
        return self.gap_paths[:, j, :]


def skorohod_1d(path) -> np.ndarray:
    """Reflect a discrete path at 0: f - min(0, running min of f)."""
    f = np.asarray(path, dtype=float)
    if f[..., 0].min() < 0:
        raise ValueError("path must start at a nonnegative value")
    return f - np.minimum(np.minimum.accumulate(f, axis=-1), 0.0)


def reflection_matrix(N: int) -> np.ndarray:
    """Reflection matrix of the gap process (unit diagonal, -1 and -1/2 off-diagonals)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    R = np.eye(N)
    for i in range(N - 1):
        R[i, i + 1] = -0.5
        R[i + 1, i] = -0.5
    if N >= 2:
        R[1, 0] = -1.0
    return R


@numba.njit(cache=True)
def _hr_stepwise(R, psi, tol, max_iter):
    M, N = psi.shape
    phi = np.empty_like(psi)
    eta = np.zeros_like(psi)
    w = np.empty(N)
    y = np.zeros(N)
    phi[0] = psi[0]
    worst = 0
    for m in range(1, M):
        neg = False
        for i in range(N):
            w[i] = phi[m - 1, i] + psi[m, i] - psi[m - 1, i]
            if w[i] < 0.0:
                neg = True
        if not neg:
            phi[m] = w
            eta[m] = eta[m - 1]
            continue
        # projected Gauss-Seidel for the one-step linear complementarity problem
        for i in range(N):
            y[i] = 0.0
        it = 0
        while True:
            change = 0.0
            for i in range(N):
                s = w[i]
                for j in range(N):
                    if j != i:
                        s += R[i, j] * y[j]
                new = -s / R[i, i]
                if new < 0.0:
                    new = 0.0
                d = abs(new - y[i])
                if d > change:
                    change = d
                y[i] = new
            it += 1
            if change < tol or it >= max_iter:
                break
        if it > worst:
            worst = it
        for i in range(N):
            s = w[i]
            for j in range(N):
                s += R[i, j] * y[j]
            phi[m, i] = s
            eta[m, i] = eta[m - 1, i] + y[i]
    return phi, eta, worst


def harrison_reiman_map(
    R: np.ndarray,
    psi: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    method: str = "fixed_point",
) -> tuple[np.ndarray, np.ndarray]:
    """Skorohod map for reflection matrix R on a discrete path.

    psi has shape (..., steps+1, N).  Returns (phi, eta) with phi = psi + R eta
    nonnegative and eta nondecreasing, increasing only where phi is at 0.

    method="fixed_point" iterates eta <- running max of (-(psi + (R - I) eta))^+
    over the whole path; "stepwise" solves the one-step complementarity problem
    at each grid point (same discrete solution, faster when I - R contracts slowly).
    """
    R = np.asarray(R, dtype=float)
    psi = np.asarray(psi, dtype=float)
    N = R.shape[0]
    if R.shape != (N, N) or psi.shape[-1] != N:
        raise ValueError("shape mismatch between R and psi")
    if psi[..., 0, :].min() < 0:
        raise ValueError("psi must start in the nonnegative orthant")
    if method == "stepwise":
        flat = psi.reshape(-1, psi.shape[-2], N)
        phi = np.empty_like(flat)
        eta = np.empty_like(flat)
        for r in range(flat.shape[0]):
            p, e, worst = _hr_stepwise(R, np.ascontiguousarray(flat[r]), tol, max_iter)
            if worst >= max_iter:
                raise ReflectionError(f"stepwise complementarity solve hit {max_iter} sweeps")
            phi[r], eta[r] = p, e
        return phi.reshape(psi.shape), eta.reshape(psi.shape)
    if method != "fixed_point":
        raise ValueError(f"unknown method {method!r}")
    off_t = (R - np.eye(N)).T
    eta = np.zeros_like(psi)
    for _ in range(max_iter):
        new = np.maximum.accumulate(np.maximum(-(psi + eta @ off_t), 0.0), axis=-2)
        diff = np.max(np.abs(new - eta)) if new.size else 0.0
        eta = new
        if diff < tol:
            return psi + eta @ R.T, eta
    raise ReflectionError(f"fixed point not reached after {max_iter} iterations")


def simulate_unranked(
    config: AtlasConfig,
    rng: np.random.Generator,
    increments: np.ndarray | None = None,
    return_ranked_increments: bool = False,
    initial_gaps: np.ndarray | None = None,
) -> PathBundle:
    """Euler scheme for the unranked particles with per-step reflection at 0.

    ``increments`` (replications, steps, N), if given, replaces the Gaussian
    noise (per particle, variance 2 dt); otherwise noise is drawn from rng.
    ``initial_gaps`` (replications, N) overrides the configured initial law.
    """
    R_, N, M, h = config.replications, config.N, config.steps, config.step
    # particle i starts at rank i
    g0 = config.sample_initial_gaps(rng) if initial_gaps is None else np.asarray(initial_gaps, float)
    X = np.cumsum(g0, axis=1)
    if increments is not None and increments.shape != (R_, M, N):
        raise ValueError(f"increments must have shape {(R_, M, N)}")
    spread = np.diff(np.sort(X, axis=1), axis=1).mean() if N > 1 else np.inf
    if math.sqrt(2 * h) * math.sqrt(2 / math.pi) > spread:
        warnings.warn("dt is large relative to the mean inter-particle gap", RuntimeWarning, stacklevel=2)
    rec = config.record_indices()
    slot = {int(m): j for j, m in enumerate(rec)}
    out = np.empty((R_, rec.size, N))
    L = np.zeros((R_, N))
    ranked_inc = np.empty((R_, M, N)) if return_ranked_increments else None
    rows = np.arange(R_)
    sd = math.sqrt(2 * h)
    for m in range(M + 1):
        if m in slot:
            out[:, slot[m], :] = np.sort(X, axis=1)
        if m == M:
            break
        dW = increments[:, m, :] if increments is not None else sd * rng.standard_normal((R_, N))
        if ranked_inc is not None:
            order = np.argsort(X, axis=1, kind="stable")
            ranked_inc[:, m, :] = np.take_along_axis(dW, order, axis=1)
        low = np.argmin(X, axis=1)
        X = X + dW
        X[rows, low] += config.delta * h
        push = np.maximum(-X, 0.0)
        L += push
        X += push
    gaps = np.diff(out, axis=2, prepend=0.0)
    return PathBundle(
        times=rec * h,
        ranked_paths=out,
        gap_paths=gaps,
        local_time_totals=L,
        ranked_increments=ranked_inc,
    )


def simulate_gaps(
    config: AtlasConfig,
    rng: np.random.Generator,
    increments: np.ndarray | None = None,
    initial_gaps: np.ndarray | None = None,
    method: str = "auto",
) -> PathBundle:
    """Gap process as the Harrison-Reiman image of the ranked driving path.

    ``increments`` (replications, steps, N) are ranked Brownian increments with
    variance 2 dt (e.g. ``simulate_unranked(..., return_ranked_increments=True)``);
    fresh noise is drawn otherwise.  method="auto" uses the whole-path fixed
    point for N <= 10 and the stepwise solver beyond.
    """
    R_, N, M, h = config.replications, config.N, config.steps, config.step
    if N < 2:
        raise ValueError("gap dynamics need N >= 2")
    g0 = config.sample_initial_gaps(rng) if initial_gaps is None else np.asarray(initial_gaps, float)
    if increments is None:
        increments = math.sqrt(2 * h) * rng.standard_normal((R_, M, N))
    W = np.concatenate([np.zeros((R_, 1, N)), np.cumsum(increments, axis=1)], axis=1)
    t = np.arange(M + 1) * h
    V = np.empty_like(W)
    V[..., 0] = g0[:, None, 0] + W[..., 0] + config.delta * t
    V[..., 1:] = g0[:, None, 1:] + W[..., 1:] - W[..., :-1]
    # the lowest particle's drift enters gap 2 with the opposite sign
    V[..., 1] -= config.delta * t
    if method == "auto":
        method = "fixed_point" if N <= 10 else "stepwise"
    phi, eta = harrison_reiman_map(reflection_matrix(N), V, method=method)
    rec = config.record_indices()
    return PathBundle(
        times=rec * h,
        ranked_paths=np.cumsum(phi[:, rec, :], axis=2),
        gap_paths=phi[:, rec, :],
        local_time_totals=eta[:, -1, :],
        regulators=eta[:, rec, :],
    )


@dataclass
class StationarityDiagnostic:
    """KS distances of the first k gap marginals.

    ks_target[t][i], p_target[t][i]: gap i at time t vs target marginal i.
    ks_between[i], p_between[i]: two-sample KS between gap i at T/2 and at T.
    """

    times: tuple[float, ...]
    ks_target: np.ndarray
    p_target: np.ndarray
    ks_between: np.ndarray
    p_between: np.ndarray
    replications: int

    def passes(self, threshold: float = 0.05) -> bool:
        return bool((self.ks_target < threshold).all() and (self.ks_between < threshold).all())

    @property
    def noise_floor(self) -> float:
        """95% KS critical value for this replication count."""
        return 1.358 / math.sqrt(self.replications)


def stationarity_diagnostic(
    config: AtlasConfig,
    target: LimitLaw,
    k: int = 3,
    rng: np.random.Generator | None = None,
    start: LimitLaw | None = None,
    bundle: PathBundle | None = None,
) -> StationarityDiagnostic:
    """Simulate from ``start`` (default: ``target``) and compare gap marginals at T/2, T.

    A precomputed ``bundle`` recorded at (T/2, T) may be passed instead.
    """
    if bundle is None:
        if config.replications < 500:
            warnings.warn("fewer than 500 replications: KS tolerances are wide", RuntimeWarning, stacklevel=2)
        rng = rng if rng is not None else np.random.default_rng()
        run_cfg = AtlasConfig(
            N=config.N,
            delta=config.delta,
            dt=config.dt,
            T=config.T,
            replications=config.replications,
            initial_law=start if start is not None else target,
            record_times=(config.T / 2, config.T),
        )
        bundle = simulate_unranked(run_cfg, rng)
    times = (config.T / 2, config.T)
    ks = np.empty((2, k))
    pv = np.empty((2, k))
    for a, t in enumerate(times):
        g = bundle.at(t)
        for i in range(k):
            res = stats.kstest(g[:, i], lambda x, i=i: target.cdf(i, x))
            ks[a, i], pv[a, i] = res.statistic, res.pvalue
    kb = np.empty(k)
    pb = np.empty(k)
    for i in range(k):
        res = stats.ks_2samp(bundle.at(times[0])[:, i], bundle.at(times[1])[:, i])
        kb[i], pb[i] = res.statistic, res.pvalue
    return StationarityDiagnostic(times, ks, pv, kb, pb, bundle.gap_paths.shape[0])


def dual_discrepancy(
    N: int,
    a: float,
    b: float,
    T: float,
    dts=(1e-3, 1e-4, 1e-5),
    paths: int = 50,
    rng: np.random.Generator | None = None,
    chunk: int = 10,
) -> np.ndarray:
    """Mean over paths of the sup-norm gap difference between the two representations.

    One Brownian path per replication is drawn on the finest grid and summed
    into blocks for the coarser ones, so every dt sees the same noise and the
    same initial gaps (drawn from the product-exponential law).
    """
    rng = rng if rng is not None else np.random.default_rng()
    dts = sorted(dts, reverse=True)
    fine = dts[-1]
    ratios = [dt / fine for dt in dts]
    if any(abs(r - round(r)) > 1e-9 for r in ratios):
        raise ValueError("dts must be integer multiples of the finest one")
    M = int(round(T / fine))
    law = limit_mu(a, b, N)
    out = np.zeros(len(dts))
    done = 0
    while done < paths:
        c = min(chunk, paths - done)
        g0 = law.sample(rng, c)
        dW = math.sqrt(2 * fine) * rng.standard_normal((c, M, N))
        for j, (dt, r) in enumerate(zip(dts, ratios)):
            r = int(round(r))
            inc = dW.reshape(c, M // r, r, N).sum(axis=2)
            cfg = AtlasConfig(N=N, delta=b, dt=dt, T=T, replications=c)
            u = simulate_unranked(cfg, rng, increments=inc, return_ranked_increments=True, initial_gaps=g0)
            g = simulate_gaps(cfg, rng, increments=u.ranked_increments, initial_gaps=g0)
            out[j] += np.abs(u.gap_paths - g.gap_paths).max(axis=(1, 2)).sum()
        done += c
    return out / paths

