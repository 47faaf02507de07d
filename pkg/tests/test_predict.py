import numpy as np
import pytest

from tcinet.errors import ValidationError
from tcinet.likelihood import ConnectionData, LatentState, ParameterSet, gap_cdf, inv_logit
from tcinet.oracles import oracle_posterior
from tcinet.predict import (PosteriorDraws, adev, draw_latents_for, posterior_claim_prob, reserve,
                            sample_posterior, unreported_claim_prob)
from tcinet.sem import FitConfig, FitResult, SemTrace, parameter_names


def frozen_result(data, params, seed=0):
    cols = tuple(f"x{j}" for j in range(data.X.shape[1]))
    nan = ParameterSet(np.full_like(params.alpha, np.nan), np.full(3, np.nan), np.full_like(params.gamma, np.nan),
                       np.full(3, np.nan), np.nan, np.nan)
    return FitResult(params=params, se=nan, columns=cols, scaling={}, weight_scheme="unit",
                     config=FitConfig(seed=seed), trace=SemTrace(names=parameter_names(cols)),
                     latents=LatentState.zeros(data.n_entities, data.n_policies),
                     entity_ids=data.entity_ids, policy_ids=data.policy_ids)


def tiny_instance():
    # one buyer (entity 0), one seller (entity 1), one policy, four connections
    X = np.column_stack([np.ones(4), [0.5, -0.3, 1.2, 0.0]])
    data = ConnectionData(X=X, buyer=np.zeros(4, int), seller=np.ones(4, int), policy=np.zeros(4, int),
                          z_obs=np.array([1.0, 0.0, 0.0, 1.0]), t_obs=np.array([0.4, np.inf, np.inf, 1.1]),
                          window=np.array([2.0, 1.5, 0.6, 2.5]), entity_ids=np.array([10, 20]),
                          policy_ids=np.array([7]))
    params = ParameterSet([-0.8, 0.4], [0.9, 0.7, 0.5], [-0.2, 0.1], [0.4, -0.3, 0.2], 0.5, 0.4)
    return data, params


def test_posterior_probabilities_match_quadrature():
    data, params = tiny_instance()
    draws = sample_posterior(frozen_result(data, params), data, n_draws=20_000, n_sweeps=40_000)
    orc = oracle_posterior(data, params)
    e_p, e_pf, e_ur = orc.claim_probs()
    L = draw_latents_for(draws, [10] * 4, [20] * 4, [7] * 4)
    p = inv_logit(data.X @ params.alpha + L @ params.beta)
    F = gap_cdf(data.window, np.exp(data.X @ params.gamma + L @ params.nu), params.psi)
    np.testing.assert_allclose(p.mean(axis=0), e_p, atol=0.01)
    np.testing.assert_allclose((p * F).mean(axis=0), e_pf, atol=0.01)
    ur = unreported_claim_prob(data.X[1], data.window[1], 0, L[:, 1], params)
    assert ur == pytest.approx(e_ur[1], abs=0.01)


def test_posterior_draws_are_reproducible():
    data, params = tiny_instance()
    res = frozen_result(data, params, seed=3)
    a = sample_posterior(res, data, n_draws=50, n_sweeps=100)
    b = sample_posterior(res, data, n_draws=50, n_sweeps=100, workers=2)
    np.testing.assert_array_equal(a.B, b.B)
    c = sample_posterior(res, data, n_draws=50, n_sweeps=100, seed=4)
    assert not np.array_equal(a.B, c.B)


def test_fixed_only_model_skips_sampling():
    data, params = tiny_instance()
    params.beta[:] = 0
    params.nu[:] = 0
    draws = sample_posterior(frozen_result(data, params), data, n_draws=10, n_sweeps=10)
    assert draws.fixed_only


def _draws(rho=0.5, M=4):
    # entity 1 is a known buyer; entity 2 has only been a seller
    return PosteriorDraws(B=np.arange(M * 2, dtype=float).reshape(M, 2), S=-np.ones((M, 2)),
                          P=np.full((M, 1), 3.0), entity_ids=np.array([1, 2]), policy_ids=np.array([9]),
                          buyer_known=np.array([True, False]), seller_known=np.array([False, True]),
                          rho=rho, seed=0, n_draws=M)


def test_latents_for_known_parties():
    d = _draws()
    L = draw_latents_for(d, [1], [2], [9])
    np.testing.assert_array_equal(L[:, 0, 0], d.B[:, 0])
    np.testing.assert_array_equal(L[:, 0, 1], d.S[:, 1])
    np.testing.assert_array_equal(L[:, 0, 2], 3.0)


def test_latents_for_cross_role_and_unseen_parties():
    d = _draws()
    L = draw_latents_for(d, [2, 99, 99], [1, 98, 98], [9, 5, 5])
    # entity 2 as buyer: conditional on its seller draws
    eps = (L[:, 0, 0] - d.rho * d.S[:, 1]) / np.sqrt(1 - d.rho ** 2)
    assert np.all(np.isfinite(eps))
    # unseen ids get the same draws wherever they appear, and again on a second call
    np.testing.assert_array_equal(L[:, 1], L[:, 2])
    np.testing.assert_array_equal(draw_latents_for(d, [99], [98], [5])[:, 0], L[:, 1])
    assert not np.array_equal(L[:, 1, 0], L[:, 1, 1])


def test_reserve_and_adev():
    assert reserve([0.1, 0.2, 0.3]) == pytest.approx(0.6)
    assert reserve([]) == 0.0
    assert adev([0.2, 0.9], [0, 1]) == pytest.approx(0.3)


def test_unreported_prob_requires_open_connection():
    data, params = tiny_instance()
    with pytest.raises(ValidationError):
        unreported_claim_prob(data.X[0], 1.0, 1, np.zeros((3, 3)), params)


def test_posterior_claim_prob_without_latents():
    params = ParameterSet([0.3], [1.0, 1.0, 1.0], [0.0], [0.0, 0.0, 0.0], 1.0, 0.0)
    mean, se = posterior_claim_prob([1.0], np.zeros((5, 3)), params)
    assert mean == pytest.approx(inv_logit(0.3)) and se == 0.0
