import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bayes_msa import autodiff as ad
from bayes_msa import variational as V
from bayes_msa.errors import DomainError, InvalidValue, ShapeError

TABLE_PAIRS = [(1, 2), (2, 3), (3, 4), (2, 6), (3, 8), (5, 15)]


def softplus_inv(s):
    return math.log(math.expm1(s))


def layer(mu, sigma, prior=1.0):
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    rho = np.vectorize(softplus_inv)(np.broadcast_to(sigma, mu.shape).astype(float))
    return V.VariationalGaussian(mu, np.atleast_2d(rho), prior)


def posterior_log_joint(vg_set):
    """log_joint equal to the posterior itself, entry by entry."""

    def log_joint(draws):
        out = []
        for d, vg in zip(draws, vg_set):
            mu = ad.constant(vg.mu.value.reshape(1, -1))
            sigma = ad.constant(ad.softplus(vg.rho).value.reshape(1, -1))
            out.append(V.log_q_entries(d, mu, sigma))
        return out

    return log_joint


def ab_quadrature(m_q, s_q, m_p, s_p, a, b):
    """Exact D(q || p) for 1-D Gaussians by numerical integration."""
    q = stats.norm(m_q, s_q).pdf
    p = stats.norm(m_p, s_p).pdf
    lo, hi = min(m_q, m_p) - 12 * max(s_q, s_p), max(m_q, m_p) + 12 * max(s_q, s_p)
    i1 = integrate.quad(lambda x: p(x) ** (a + b), lo, hi, epsabs=0, epsrel=1e-12, limit=200)[0]
    i2 = integrate.quad(lambda x: q(x) ** (a + b), lo, hi, epsabs=0, epsrel=1e-12, limit=200)[0]
    i3 = integrate.quad(lambda x: q(x) ** a * p(x) ** b, lo, hi, epsabs=0, epsrel=1e-12,
                        limit=200)[0]
    return (math.log(i1) / (a * (a + b)) + math.log(i2) / (b * (a + b)) - math.log(i3) / (a * b))


# -- sample_weights --------------------------------------------------------------


def test_sample_weights_zero_noise_is_mean(rng):
    vg = V.VariationalGaussian(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    assert np.array_equal(V.sample_weights(vg, np.zeros((2, 3))).value, vg.mu.value)


def test_sample_weights_unit_example():
    vg = V.VariationalGaussian([[0.0]], [[0.0]])
    assert V.sample_weights(vg, [[1.0]]).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_sample_weights_gradients(rng):
    vg = V.VariationalGaussian(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    noise = rng.normal(size=(2, 2))
    ad.backward(ad.sum(V.sample_weights(vg, noise)))
    assert np.array_equal(vg.mu.adjoint, np.ones((2, 2)))
    sig_prime = 1.0 / (1.0 + np.exp(-vg.rho.value))
    np.testing.assert_allclose(vg.rho.adjoint, noise * sig_prime, rtol=1e-14)


def test_sample_weights_is_pure(rng):
    vg = V.VariationalGaussian(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    noise = rng.normal(size=(3, 3))
    assert np.array_equal(V.sample_weights(vg, noise).value, V.sample_weights(vg, noise).value)


def test_sample_weights_shape_error():
    with pytest.raises(ShapeError):
        V.sample_weights(V.VariationalGaussian([[0.0, 1.0]], [[0.0, 0.0]]), [[1.0]])


# -- KL ----------------------------------------------------------------------------


@pytest.mark.parametrize("mu, sigma, prior, expected", [
    (0.0, 1.0, 1.0, 0.0),
    (1.0, 1.0, 1.0, 0.5),
    (0.0, 0.5, 1.0, math.log(2.0) + 0.125 - 0.5),
])
def test_kl_examples(mu, sigma, prior, expected):
    assert V.kl_gaussian(layer([[mu]], sigma, prior)).item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("mu, sigma, prior", [(0.3, 0.2, 1.0), (-1.2, 1.7, 0.6), (2.0, 0.05, 1.3)])
def test_kl_matches_quadrature(mu, sigma, prior):
    q, p = stats.norm(mu, sigma), stats.norm(0.0, prior)
    exact = integrate.quad(lambda x: q.pdf(x) * (q.logpdf(x) - p.logpdf(x)),
                           mu - 15 * sigma, mu + 15 * sigma, epsabs=1e-13, limit=200)[0]
    assert V.kl_gaussian(layer([[mu]], sigma, prior)).item() == pytest.approx(exact, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_kl_matches_monte_carlo_within_three_se(seed):
    rng = np.random.default_rng(seed)
    mu, sigma, prior = rng.normal(size=(3, 4)), rng.uniform(0.1, 2.0, (3, 4)), rng.uniform(0.5, 2)
    n = 100_000
    w = mu + sigma * rng.standard_normal((n, 3, 4))
    per_draw = np.sum(stats.norm.logpdf(w, mu, sigma) - stats.norm.logpdf(w, 0.0, prior), axis=(1, 2))
    se = per_draw.std(ddof=1) / math.sqrt(n)
    kl = V.kl_gaussian(layer(mu, sigma, prior)).item()
    assert abs(kl - per_draw.mean()) < 3 * se


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 5), st.floats(0.1, 5))
def test_kl_nonnegative(mu, sigma, prior):
    assert V.kl_gaussian(layer([[mu]], sigma, prior)).item() >= -1e-12


def test_kl_zero_only_at_prior():
    assert abs(V.kl_gaussian(layer([[0.0, 0.0]], 0.7, 0.7)).item()) < 1e-12
    assert V.kl_gaussian(layer([[1e-3, 0.0]], 0.7, 0.7)).item() > 0


def test_kl_gradient_matches_finite_differences(rng):
    vg = V.VariationalGaussian(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 0.8)
    assert ad.check_gradients(lambda: V.kl_gaussian(vg), vg.parameters()) < 1e-6


# -- collapsed coefficient -----------------------------------------------------------


@pytest.mark.parametrize("alpha, beta", TABLE_PAIRS)
def test_collapsed_coefficient_exactly_zero_for_reference_pairs(alpha, beta):
    assert V.ab_coefficient_exact(alpha, beta) == 0
    assert abs(V.ab_coefficient(alpha, beta)) < 1e-12


def test_collapsed_coefficient_zero_on_grid():
    grid = np.linspace(0.25, 15.0, 20)
    for a in grid:
        for b in grid:
            assert V.ab_coefficient_exact(Fraction(a), Fraction(b)) == 0
            assert abs(V.ab_coefficient(a, b)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.fractions(-20, 20, max_denominator=50), st.fractions(-20, 20, max_denominator=50))
def test_collapsed_coefficient_zero_for_any_valid_rationals(a, b):
    if a == 0 or b == 0 or a + b == 0:
        with pytest.raises(DomainError):
            V.ab_coefficient_exact(a, b)
    else:
        assert V.ab_coefficient_exact(a, b) == 0


@pytest.mark.parametrize("alpha, beta", [(0, 1), (1, 0), (2, -2)])
def test_collapsed_coefficient_domain_errors(alpha, beta):
    with pytest.raises(DomainError):
        V.ab_coefficient(alpha, beta)
    with pytest.raises(DomainError):
        V.DivergenceSpec(V.DivergenceKind.AB_MONTE_CARLO, alpha, beta)


def test_collapsed_divergence_vanishes(rng):
    vgs = [V.VariationalGaussian(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)) - 2)]
    spec = V.DivergenceSpec("ab_collapsed_eq21", 3.0, 8.0, 64)
    elq = abs(V.expected_log_q(vgs, 64, np.random.default_rng(0)).item())
    assert abs(V.divergence(vgs, None, spec, rng).item()) <= 1e-12 * elq


# -- AB Monte-Carlo -------------------------------------------------------------


def test_ab_weights_sum_to_zero():
    for a, b in TABLE_PAIRS:
        w = [Fraction(1, a * (a + b)), Fraction(1, b * (a + b)), -Fraction(1, a * b)]
        assert sum(w) == 0
        assert V._ab_weights(a, b) == pytest.approx([float(x) for x in w], rel=1e-15)


def test_ab_with_posterior_target_is_zero_within_three_se(rng):
    vgs = [layer(rng.normal(size=(2, 2)), rng.uniform(0.2, 1.0, (2, 2)))]
    spec = V.DivergenceSpec("ab_monte_carlo", 1.0, 2.0, 100_000)
    est, se = V.ab_divergence_mc_with_se(vgs, posterior_log_joint(vgs), spec, rng)
    assert abs(est.item()) < 3 * se


def test_ab_with_posterior_target_shrinks_with_samples():
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        vgs = [layer(rng.normal(size=(1, 3)), rng.uniform(0.2, 1.0, (1, 3)))]
        small = V.ab_divergence_mc(vgs, posterior_log_joint(vgs),
                                   V.DivergenceSpec("ab_monte_carlo", 1, 2, 100), rng)
        large = V.ab_divergence_mc(vgs, posterior_log_joint(vgs),
                                   V.DivergenceSpec("ab_monte_carlo", 1, 2, 100_000), rng)
        wins += abs(large.item()) < abs(small.item())
    assert wins >= 4


@pytest.mark.parametrize("m_q, s_q, m_p, s_p, a, b", [
    (0.0, 1.0, 1.0, 1.0, 1.0, 1.0),
    (0.3, 0.8, 0.0, 1.0, 1.0, 2.0),
    (-0.5, 0.6, 0.0, 1.0, 2.0, 3.0),
    (0.2, 0.5, 0.0, 0.7, 3.0, 4.0),
])
def test_ab_matches_quadrature(m_q, s_q, m_p, s_p, a, b, rng):
    vg = layer([[m_q]], s_q)
    target = lambda draws: [ad.add(ad.scale(ad.square(ad.scale(ad.add(d, ad.constant(-m_p)), 1 / s_p)), -0.5),  # noqa: E731
                                   ad.constant(-0.5 * V.LOG_2PI - math.log(s_p))) for d in draws]
    est, se = V.ab_divergence_mc_with_se([vg], target, V.DivergenceSpec("ab_monte_carlo", a, b, 200_000),
                                         rng)
    exact = ab_quadrature(m_q, s_q, m_p, s_p, a, b)
    assert abs(est.item() - exact) < 4 * se + 1e-9
    if m_q != m_p or s_q != s_p:
        assert exact > 0


def test_ab_positive_for_shifted_target(rng):
    vg = layer([[0.0]], 1.0)
    target = lambda draws: [ad.add(ad.scale(ad.square(ad.add(d, ad.constant(-1.0))), -0.5),  # noqa: E731
                                   ad.constant(-0.5 * V.LOG_2PI)) for d in draws]
    assert V.ab_divergence_mc([vg], target, V.DivergenceSpec("ab_monte_carlo", 1, 1, 100_000),
                              rng).item() > 0


def test_ab_prior_path_matches_general_path_on_same_draws(rng):
    vg = V.VariationalGaussian(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) - 1, 0.8)
    spec = V.DivergenceSpec("ab_monte_carlo", 2.0, 3.0, 64)
    general = V.ab_divergence_mc([vg], V.gaussian_prior_log_joint([0.8]), spec,
                                 np.random.default_rng(7))
    ad.backward(general)
    grads = [p.adjoint.copy() for p in vg.parameters()]
    ad.zero_grad(vg.parameters())
    fast = V.ab_divergence_prior([vg], spec, np.random.default_rng(7))
    ad.backward(fast)
    assert fast.item() == pytest.approx(general.item(), rel=1e-13)
    for g, p in zip(grads, vg.parameters()):
        np.testing.assert_allclose(p.adjoint, g, rtol=1e-12, atol=1e-14)


def test_ab_joint_target_mode(rng):
    vg = layer(rng.normal(size=(1, 2)), 0.5)

    def joint(draws):
        # sum of standard normal log densities over both entries, as one S x 1 node
        per = V.gaussian_prior_log_joint([1.0])(draws)[0]
        return ad.sum(per, axis=1)

    est = V.ab_divergence_mc([vg], joint, V.DivergenceSpec("ab_monte_carlo", 1, 2, 50_000), rng)
    exact = sum(ab_quadrature(m, 0.5, 0.0, 1.0, 1.0, 2.0) for m in vg.mu.value[0])
    assert est.item() == pytest.approx(exact, abs=0.05)


def test_ab_single_sample_is_finite(rng):
    vgs = [V.VariationalGaussian(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))]
    val = V.divergence(vgs, None, V.DivergenceSpec("ab_monte_carlo", 1, 2, 1), rng).item()
    assert math.isfinite(val)


def test_ab_rejects_non_finite_target(rng):
    vg = layer([[0.0]], 1.0)
    bad = lambda draws: [ad.constant(np.full(d.shape, np.inf)) for d in draws]  # noqa: E731
    with pytest.raises(InvalidValue):
        V.ab_divergence_mc([vg], bad, V.DivergenceSpec("ab_monte_carlo", 1, 2, 4), rng)


def test_ab_gradient_matches_finite_differences():
    vgs = [V.VariationalGaussian([[0.2, -0.4]], [[-1.0, 0.3]])]
    spec = V.DivergenceSpec("ab_monte_carlo", 1.0, 2.0, 32)
    err = ad.check_gradients(lambda: V.divergence(vgs, None, spec, np.random.default_rng(3)),
                             vgs[0].parameters())
    assert err < 1e-6


def test_mc_samples_must_be_positive():
    with pytest.raises(InvalidValue):
        V.DivergenceSpec("ab_monte_carlo", 1, 2, 0)


# -- dispatcher -------------------------------------------------------------------


def test_divergence_none_is_zero(rng):
    vgs = [V.VariationalGaussian(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))]
    assert V.divergence(vgs, None, V.DivergenceSpec("none"), rng).item() == 0.0


def test_divergence_kl_dispatch(rng):
    out = V.divergence([layer([[1.0]], 1.0)], None, V.DivergenceSpec("kl_closed_form"), rng)
    assert out.item() == pytest.approx(0.5, abs=1e-12)


def test_divergence_spec_round_trip():
    spec = V.DivergenceSpec("ab_monte_carlo", 3.0, 8.0, 4)
    assert V.DivergenceSpec(**spec.to_dict()) == spec
