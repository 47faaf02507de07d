import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from tcinet.errors import DomainError, ValidationError
from tcinet.likelihood import (ConnectionData, LatentState, ParameterSet, bvn_logpdf, claim_prob,
                               complete_loglik, complete_loglik_score, gap_cdf, gap_density, gap_logpdf,
                               gap_sf, obs_loglik_conditional, obs_loglik_score, obs_loglik_terms,
                               truncated_claim_prob, truncated_gap_density)

MU_GRID = (0.1, 0.4, 1.0, 2.5, 6.0)
PSI_GRID = (0.05, 0.2, 0.5, 1.0, 1.8)
C_GRID = (0.05, 0.3, 1.0, 2.0, 4.5)


def toy_data(rng, n=40, p=3, n_ent=6, n_pol=5, tau=3.0):
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    buyer = rng.integers(0, n_ent, n)
    seller = (buyer + 1 + rng.integers(0, n_ent - 1, n)) % n_ent
    policy = rng.integers(0, n_pol, n)
    window = rng.uniform(0.2, tau, n)
    z_obs = (rng.random(n) < 0.4).astype(float)
    t_obs = np.where(z_obs == 1, rng.uniform(0.01, 1.0, n) * window, np.inf)
    return ConnectionData(X=X, buyer=buyer, seller=seller, policy=policy, z_obs=z_obs, t_obs=t_obs,
                          window=window, entity_ids=np.arange(n_ent), policy_ids=np.arange(n_pol))


def toy_params(rng, p=3):
    return ParameterSet(rng.normal(-0.5, 0.5, p), rng.uniform(0.2, 1.0, 3), rng.normal(-0.3, 0.3, p),
                        rng.uniform(0.1, 0.5, 3), rng.uniform(0.2, 0.8), rng.uniform(-0.6, 0.6))


def toy_latents(rng, data):
    return LatentState(rng.standard_normal(data.n_entities), rng.standard_normal(data.n_entities),
                       rng.standard_normal(data.n_policies))


# -- Gamma parameterisation -------------------------------------------------------

def test_gap_density_matches_scipy_gamma():
    t = np.linspace(0.05, 5, 30)
    for mu, psi in itertools.product(MU_GRID, PSI_GRID):
        ref = stats.gamma(a=1 / psi, scale=psi * mu)
        np.testing.assert_allclose(gap_logpdf(t, mu, psi), ref.logpdf(t), rtol=1e-10)
        np.testing.assert_allclose(gap_cdf(t, mu, psi), ref.cdf(t), rtol=1e-10, atol=1e-300)
        np.testing.assert_allclose(gap_sf(t, mu, psi), ref.sf(t), rtol=1e-10, atol=1e-300)


def test_gap_mean_and_variance():
    mu, psi = 1.7, 0.3
    m = integrate.quad(lambda t: t * gap_density(t, mu, psi), 0, np.inf)[0]
    v = integrate.quad(lambda t: (t - mu) ** 2 * gap_density(t, mu, psi), 0, np.inf)[0]
    assert m == pytest.approx(mu, rel=1e-9)
    assert v == pytest.approx(psi * mu ** 2, rel=1e-8)


def test_cdf_and_sf_sum_to_one():
    t = np.geomspace(1e-4, 50, 40)
    np.testing.assert_allclose(gap_cdf(t, 0.8, 0.4) + gap_sf(t, 0.8, 0.4), 1.0, atol=1e-15)


def test_truncated_density_integrates_to_one():
    worst = 0.0
    for mu, psi, c in itertools.product(MU_GRID, PSI_GRID, C_GRID):
        total, _ = integrate.quad(truncated_gap_density, 0, c, args=(mu, psi, c),
                                  epsabs=1e-13, epsrel=1e-12, limit=200)
        worst = max(worst, abs(total - 1.0))
    assert worst < 1e-8


def test_truncated_identities():
    p = 0.3
    for mu, psi, c in itertools.product(MU_GRID, PSI_GRID, C_GRID):
        p_star = truncated_claim_prob(p, mu, psi, c)
        assert p_star == pytest.approx(p * gap_cdf(c, mu, psi), rel=1e-15)
        t = 0.5 * c
        # reported-claim likelihood: p* f*(t) == p f(t)
        assert p_star * truncated_gap_density(t, mu, psi, c) == pytest.approx(p * gap_density(t, mu, psi),
                                                                            rel=1e-12)


def test_domain_errors():
    with pytest.raises(DomainError):
        gap_logpdf(0.0, 1.0, 0.5)
    with pytest.raises(DomainError):
        gap_cdf(1.0, -1.0, 0.5)
    with pytest.raises(DomainError):
        gap_cdf(1.0, 1.0, 0.0)
    with pytest.raises(DomainError):
        truncated_gap_density(2.0, 1.0, 0.5, 1.0)
    with pytest.raises(DomainError):
        bvn_logpdf(0.0, 0.0, 1.0)


def test_bvn_matches_scipy():
    rho = -0.4
    ref = stats.multivariate_normal([0, 0], [[1, rho], [rho, 1]])
    pts = np.random.default_rng(0).standard_normal((20, 2))
    np.testing.assert_allclose(bvn_logpdf(pts[:, 0], pts[:, 1], rho), ref.logpdf(pts), rtol=1e-12)


def test_parameter_validation():
    th = toy_params(np.random.default_rng(1))
    th.psi = -1.0
    with pytest.raises(ValidationError):
        th.validate()


def test_parameter_dict_roundtrip_ignores_key_order():
    th = toy_params(np.random.default_rng(2))
    cols = ("intercept", "x", "a")
    d = th.as_dict(cols)
    d["alpha"] = dict(sorted(d["alpha"].items()))
    back = ParameterSet.from_dict(d, cols)
    np.testing.assert_array_equal(back.vector(), th.vector())
    with pytest.raises(ValidationError):
        ParameterSet.from_dict(d, ("intercept", "x", "b"))


# -- likelihood terms --------------------------------------------------------

def test_observed_terms_by_hand():
    eta_p = np.array([0.3, -1.0])
    eta_mu = np.array([0.2, -0.4])
    psi, c = 0.6, np.array([1.5, 0.8])
    z = np.array([1.0, 0.0])
    t = np.array([0.7, np.inf])
    got = obs_loglik_terms(z, t, c, eta_p, eta_mu, psi)
    p = 1 / (1 + np.exp(-eta_p))
    mu = np.exp(eta_mu)
    assert got[0] == pytest.approx(np.log(p[0]) + np.log(gap_density(0.7, mu[0], psi)), rel=1e-12)
    assert got[1] == pytest.approx(np.log(1 - p[1] * gap_cdf(0.8, mu[1], psi)), rel=1e-12)


def test_observed_terms_stable_for_extreme_predictors():
    z = np.zeros(3)
    t = np.full(3, np.inf)
    out = obs_loglik_terms(z, t, np.ones(3), np.array([60.0, 0.0, -60.0]), np.array([-50.0, 0.0, 50.0]), 0.5)
    assert np.all(np.isfinite(out))


def _central(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h * max(1.0, abs(x[j]))
        g[j] = (f(x + e) - f(x - e)) / (2 * e[j])
    return g


def test_gamma_score_form_and_finite_differences():
    rng = np.random.default_rng(3)
    worst_form = worst_fd = 0.0
    for _ in range(100):
        data = toy_data(rng, n=12)
        th = toy_params(rng)
        lat = toy_latents(rng, data)
        z = (rng.random(data.n) < 0.5).astype(float)
        t = rng.uniform(0.05, 3.0, data.n)
        _, g_gam = complete_loglik_score(data, th, lat, z, t)
        Xbar = np.hstack([data.X, data.latent_columns(lat)])
        mu = np.exp(Xbar @ np.concatenate([th.gamma, th.nu]))
        form = Xbar.T @ (z * (-1 + t / mu) / th.psi)
        p = data.X.shape[1]

        def f(v):
            q = th.copy()
            q.gamma, q.nu = v[:p], v[p:]
            return complete_loglik(data, q, lat, z, t)

        fd = _central(f, np.concatenate([th.gamma, th.nu]))
        scale = np.maximum(np.abs(form), 1.0)
        worst_form = max(worst_form, np.max(np.abs(g_gam - form) / scale))
        worst_fd = max(worst_fd, np.max(np.abs(g_gam - fd) / scale))
    assert worst_form < 1e-12
    assert worst_fd < 1e-5


def test_observed_score_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        data = toy_data(rng)
        th = toy_params(rng)
        lat = toy_latents(rng, data)
        g_log, g_gam = obs_loglik_score(data, th, lat)
        p = data.X.shape[1]

        def f_log(v):
            q = th.copy()
            q.alpha, q.beta = v[:p], v[p:]
            return obs_loglik_conditional(data, q, lat)

        def f_gam(v):
            q = th.copy()
            q.gamma, q.nu = v[:p], v[p:]
            return obs_loglik_conditional(data, q, lat)

        np.testing.assert_allclose(g_log, _central(f_log, np.concatenate([th.alpha, th.beta])),
                                   rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(g_gam, _central(f_gam, np.concatenate([th.gamma, th.nu])),
                                   rtol=1e-5, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2), st.integers(0, 10_000))
def test_flip_invariance(family, seed):
    rng = np.random.default_rng(seed)
    data = toy_data(rng)
    th = toy_params(rng)
    lat = toy_latents(rng, data)
    flipped = lat.copy()
    (flipped.B, flipped.S, flipped.P)[family][:] *= -1
    a = obs_loglik_conditional(data, th, lat)
    b = obs_loglik_conditional(data, th.flip(family), flipped)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
    z = (rng.random(data.n) < 0.5).astype(float)
    t = rng.uniform(0.1, 2.0, data.n)
    assert complete_loglik(data, th, lat, z, t) == pytest.approx(
        complete_loglik(data, th.flip(family), flipped, z, t), rel=1e-12)


def test_claim_prob_is_logistic():
    x = np.array([1.0, 0.5])
    assert claim_prob(x, [0.2, -1.0], [1.0, 0.0, 0.0], (0.3, 5.0, 5.0)) == pytest.approx(0.5)
