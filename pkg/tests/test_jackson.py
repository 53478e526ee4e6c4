import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from _oracles import gap_generator
from mjsq.jackson import (
    JacksonSpec,
    LimitLaw,
    NonErgodicError,
    ProductFormLaw,
    closed_form_theta,
    exact_moments,
    fixed_k_limit,
    fixed_k_spec,
    geometric_exp_sup_distance,
    limit_mu,
    mjsq_log_rho,
    mjsq_rho,
    pi_n,
    routing_matrix,
    solve_traffic,
    station_service_rates,
    stationary_law,
    traffic_intensities,
    traffic_residual,
)

SPEC = JacksonSpec([1.0, 2.0], [3.0, 4.0])


def test_routing_example():
    P = routing_matrix(SPEC)
    assert P[0, 1] == 1 and P[1, 0] == pytest.approx(1 / 5)
    P3 = routing_matrix(JacksonSpec([1, 1, 1], [1, 1, 1]))
    assert P3[1, 0] == P3[1, 2] == 0.5


def test_routing_row_sums():
    rng = np.random.default_rng(1)
    spec = JacksonSpec(rng.uniform(0.1, 5, 7), rng.uniform(0.1, 5, 7))
    P = routing_matrix(spec)
    np.testing.assert_allclose(P[1:-1].sum(axis=1), 1.0, rtol=1e-15)
    assert P[-1].sum() == pytest.approx(spec.lam[-2] / (spec.lam[-2] + spec.mu[-1]))
    assert routing_matrix(JacksonSpec([1.0], [2.0])).shape == (1, 1)


def test_theta_example():
    np.testing.assert_allclose(solve_traffic(SPEC), [0.5, 2.5], rtol=1e-14)
    np.testing.assert_allclose(closed_form_theta(SPEC), [0.5, 2.5], rtol=1e-14)
    assert solve_traffic(JacksonSpec([0.7], [1.0])).tolist() == [0.7]


def test_theta_symmetric_rates():
    c, k = 1.7, 6
    theta = closed_form_theta(JacksonSpec([c] * k, [c] * k))
    assert theta[0] == pytest.approx(c)
    np.testing.assert_allclose(theta[1:], 2 * c, rtol=1e-13)


def test_theta_wide_rates_no_overflow():
    rng = np.random.default_rng(2)
    lam = rng.uniform(0.999, 1.0, 60) * 1e3
    spec = JacksonSpec(lam, np.full(60, 1e3))
    th = closed_form_theta(spec)
    assert np.isfinite(th).all()
    np.testing.assert_allclose(th, solve_traffic(spec), rtol=1e-10)
    assert traffic_residual(spec, th) < 1e-10


def test_intensities_example():
    np.testing.assert_allclose(traffic_intensities(SPEC), [1 / 6, 1 / 2], rtol=1e-14)
    np.testing.assert_allclose(closed_form_theta(SPEC) / station_service_rates(SPEC), [1 / 6, 1 / 2])
    assert traffic_intensities(JacksonSpec([1.0], [4.0]))[0] == 0.25


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_intensities_monotone_when_stable(k, seed):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(1, 10, k)
    lam = mu * rng.uniform(0.1, 0.99, k)
    rho = traffic_intensities(JacksonSpec(lam, mu))
    assert (np.diff(rho) >= -1e-15).all()


def test_stationary_law_examples():
    law = stationary_law(SPEC)
    assert law.pmf([0, 0]) == pytest.approx(5 / 12)
    assert law.tail([1, 1]) == pytest.approx(1 / 12)
    np.testing.assert_allclose(law.mean(), [0.2, 1.0])


def test_non_ergodic_reports_index():
    with pytest.raises(NonErgodicError) as exc:
        stationary_law(JacksonSpec([1.0, 5.0], [3.0, 4.0]))
    assert exc.value.index == 1 and exc.value.rho == pytest.approx(1.25)


def test_sampler_means():
    law = ProductFormLaw.from_rho([1 / 6, 1 / 2, 0.9])
    s = law.sample(np.random.default_rng(3), 10**6)
    se = np.sqrt(law.variance() / s.shape[0])
    assert (np.abs(s.mean(axis=0) - law.mean()) < 3 * se).all()


def test_pmf_truncation_sums_to_one():
    law = ProductFormLaw.from_rho([0.3])
    q = np.arange(200)
    total = sum(law.pmf([v]) for v in q)
    assert 1 - total == pytest.approx(law.tail([200]), abs=1e-12)


def test_mjsq_rho_examples():
    rho = mjsq_rho(4, 1, 0.5)
    assert rho[3] == pytest.approx(0.875, rel=1e-14)
    assert rho[0] == pytest.approx(1.125 * 0.875**3, rel=1e-14)
    n, a = 50, 2.0
    assert mjsq_rho(n, a, 0)[0] == pytest.approx((1 - a * n**-1.5) ** n, rel=1e-13)
    i = np.arange(2, n + 1)
    np.testing.assert_allclose(mjsq_rho(n, a, 1)[1:], (1 - a * n**-1.5) ** (n - i + 1), rtol=1e-13)


def test_mjsq_rho_matches_generic_tail_product():
    n, a, b = 30, 2.0, 1.0
    s = math.sqrt(n)
    lam = np.full(n, n - a / s)
    lam[0] += b * s
    np.testing.assert_allclose(mjsq_rho(n, a, b), traffic_intensities(JacksonSpec(lam, np.full(n, n))), rtol=1e-12)


def test_mjsq_rho_infeasible():
    with pytest.raises(NonErgodicError):
        mjsq_rho(100, 1, 2)


def test_pi_n_scaled_tail_and_first_gap():
    n = 10**4
    law = pi_n(n, 2, 1)
    z = np.zeros(n)
    z[0] = 1 / math.sqrt(n)
    assert law.scaled_tail(z) == pytest.approx(law.rho[0], rel=1e-12)
    ratio = math.sqrt(n) * law.one_minus_rho[0] / (2 - 1)
    assert abs(ratio - 1) < 2 / math.sqrt(n) * 10


def test_limit_mu():
    law = limit_mu(2, 1, 3)
    assert law.rates.tolist() == [1, 2, 2]
    np.testing.assert_allclose(law.mean(), [1, 0.5, 0.5])
    with pytest.raises(ValueError):
        limit_mu(1, 1, 3)


def test_fixed_k_limit():
    assert fixed_k_limit([1, 1]).rates.tolist() == [2, 1]
    np.testing.assert_allclose(fixed_k_limit([0.5, -0.2, 0.7]).rates, [1.0, 0.5, 0.7])
    with pytest.raises(ValueError):
        fixed_k_limit([1.0, -2.0])


def test_sup_distance_shrinks_like_root_n():
    d = []
    for n in (1e2, 1e4, 1e6):
        law = stationary_law(fixed_k_spec(n, [1, 0.5, 0.5]))
        d.append(geometric_exp_sup_distance(law.log_rho[0], math.sqrt(n), 2.0))
    assert d[0] > d[1] > d[2]
    assert 0.05 < d[2] / d[1] < 0.2


def test_sup_distance_against_brute_force():
    log_rho, scale, rate = math.log(0.9), 5.0, 0.5
    x = np.linspace(0, 40, 400001)
    F = 1 - np.exp((np.floor(x * scale) + 1) * log_rho)
    G = 1 - np.exp(-rate * x)
    assert geometric_exp_sup_distance(log_rho, scale, rate) == pytest.approx(np.abs(F - G).max(), abs=1e-5)


def test_ranked_cdf_phase_type():
    law = LimitLaw([1.0, 2.0, 2.0])
    rng = np.random.default_rng(4)
    s = law.sample_ranked(rng, 200_000)
    for k in range(3):
        q = law.ranked_quantile(k, 0.5)
        assert law.ranked_cdf(k, q)[0] == pytest.approx(0.5, abs=1e-9)
        assert np.mean(s[:, k] <= q) == pytest.approx(0.5, abs=0.005)
    # two distinct rates: hypoexponential closed form
    x = 1.3
    expected = 1 - (2 * math.exp(-x) - math.exp(-2 * x))
    assert law.ranked_cdf(1, x)[0] == pytest.approx(expected, rel=1e-10)


def test_exact_moments_examples():
    m = exact_moments(10**4, 2, 1)
    law = pi_n(10**4, 2, 1)
    assert m.ranked_k(1) == pytest.approx(law.mean()[0], rel=1e-12)
    assert abs(m.ranked_k(1) / 100 - 1) < 0.01
    H = sum(1 / j for j in range(1, 10**4))
    assert abs(m.imbalance / (1e6 / 2 * H) - 1) < 0.01
    means = law.mean()
    assert m.imbalance == pytest.approx(means[1:].sum(), rel=1e-10)
    w = np.arange(10**4, 0, -1)
    assert m.average == pytest.approx(float(w @ means) / 10**4, rel=1e-10)
    m6 = exact_moments(10**6, 2, 1)
    assert abs(m6.average / (1e9 / 2) - 1) < 0.01


def test_mjsq_log_rho_subset():
    full = mjsq_log_rho(20, 2, 1)
    np.testing.assert_allclose(mjsq_log_rho(20, 2, 1, np.array([0, 5, 19])), full[[0, 5, 19]], rtol=1e-14)


@pytest.mark.parametrize("n", [2, 3])
def test_product_form_is_stationary_for_gap_generator(n):
    # pi Q = 0 holds exactly on the untruncated chain; truncation only affects boundary states
    a, b = 2.0, 1.0
    cap = 60 if n == 2 else 14
    states, Q = gap_generator(n, a, b, cap)
    law = pi_n(n, a, b)
    pi = np.array([law.pmf(s) for s in states])
    interior = [j for j, s in enumerate(states) if max(s) < cap - 1]
    resid = (pi @ Q)[interior]
    assert np.abs(resid).max() < 1e-12 * np.abs(Q).max()


def test_transient_law_converges_to_product_form():
    # expm oracle: the n=2 chain from the origin approaches pi_n
    n, a, b, cap = 2, 2.0, 1.0, 30
    states, Q = gap_generator(n, a, b, cap)
    p0 = np.zeros(len(states))
    p0[states.index((0, 0))] = 1
    pt = p0 @ scipy.linalg.expm(Q * 50.0)
    law = pi_n(n, a, b)
    pi = np.array([law.pmf(s) for s in states])
    assert np.abs(pt - pi).sum() < 1e-3
