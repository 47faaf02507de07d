"""End-to-end acceptance checks; a per-criterion verdict is printed at the end of the run."""
import itertools
import time

import numpy as np
import pytest
from scipy import integrate, special, stats

from builders import make_graph, worked_example
from tcinet.centrality import WeightScheme, centrality, fodc, sodc
from tcinet.cli import main
from tcinet.features import featurize_connections
from tcinet.graph import observe
from tcinet.likelihood import (ConnectionData, complete_loglik, complete_loglik_score, gap_cdf, gap_density,
                               inv_logit, truncated_claim_prob, truncated_gap_density)
from tcinet.oracles import oracle_centrality, oracle_posterior
from tcinet.predict import draw_latents_for, sample_posterior, score
from tcinet.sem import (FitConfig, RetainedDraw, e_quantities, fit, initialize, mstep_logistic, rho_cubic,
                        solve_rho_cubic)
from tcinet.synth import GenConfig, default_params, generate, restrict

from test_likelihood import toy_data, toy_latents, toy_params
from test_predict import frozen_result, tiny_instance


RECOVERY_SEED = 1
HOLDOUT_FROM = 4.0


def criterion(n, title):
    return pytest.mark.criterion(f"A{n}", title)


# -- A1 ------------------------------------------------------------------------------

def _random_multigraph(rng):
    n_ent = int(rng.integers(2, 51))
    n_conn = int(rng.integers(1, 201))
    pols, used, pid = [], 0, 0
    while used < n_conn:
        pid += 1
        seller = int(rng.integers(1, n_ent + 1))
        k = min(int(rng.integers(1, 5)), n_conn - used)
        # repeated buyers are allowed: parallel connections make it a multigraph
        buyers = [int(b) for b in rng.choice([e for e in range(1, n_ent + 1) if e != seller], size=k)]
        pols.append((pid, seller, buyers, float(rng.choice([0.0, 0.2, 0.5, 0.9]))))
        used += k
    return make_graph(pols, tau=3.0)


@criterion(1, "centrality exactness against pair enumeration")
def test_a1_centrality_exactness():
    g = worked_example()
    assert fodc(g, 0.5)[2][0] == 3
    assert sodc(g, 0.5)[2][2] == 2
    rng = np.random.default_rng(2024)
    graphs = [_random_multigraph(rng) for _ in range(500)]
    times = [float(t) for t in rng.choice([0.1, 0.6, 1.0, 1.5], size=500)]
    schemes = list(itertools.islice(itertools.cycle(WeightScheme), 500))
    start = time.perf_counter()
    got = [centrality(g, t, s) for g, t, s in zip(graphs, times, schemes)]
    elapsed = time.perf_counter() - start
    for g, t, s, cf in zip(graphs, times, schemes, got):
        ref = oracle_centrality(g, t, s)
        np.testing.assert_array_equal(cf.entity_ids, ref.entity_ids)
        if s is WeightScheme.UNIT:
            np.testing.assert_array_equal(cf.values, ref.values)
        else:
            np.testing.assert_allclose(cf.values, ref.values, rtol=1e-12, atol=1e-12)
    assert elapsed < 5.0, f"{elapsed:.2f}s"


# -- A2 ------------------------------------------------------------------------------

@criterion(2, "truncation arithmetic and truncated-distribution identities")
def test_a2_truncation_arithmetic():
    assert observe(1, 1.9, 0.2, 2.0) == (0, np.inf)
    worst = 0.0
    grid = (0.1, 0.5, 1.0, 2.5, 6.0), (0.05, 0.3, 0.7, 1.2, 2.0), (0.05, 0.4, 1.0, 2.0, 4.5)
    for mu, psi, c in itertools.product(*grid):
        total, _ = integrate.quad(truncated_gap_density, 0, c, args=(mu, psi, c),
                                  epsabs=1e-13, epsrel=1e-12, limit=200)
        worst = max(worst, abs(total - 1.0))
        p = 0.35
        assert truncated_claim_prob(p, mu, psi, c) == pytest.approx(p * gap_cdf(c, mu, psi), rel=1e-14)
        t = 0.3 * c
        assert truncated_claim_prob(p, mu, psi, c) * truncated_gap_density(t, mu, psi, c) == \
            pytest.approx(p * gap_density(t, mu, psi), rel=1e-12)
    assert worst < 1e-8


# -- A3 ------------------------------------------------------------------------------

@criterion(3, "Gamma gradient: closed form and finite differences")
def test_a3_gamma_gradient():
    rng = np.random.default_rng(33)
    worst_form = worst_fd = 0.0
    for _ in range(100):
        data = toy_data(rng, n=10)
        th = toy_params(rng)
        lat = toy_latents(rng, data)
        z = (rng.random(data.n) < 0.6).astype(float)
        t = rng.uniform(0.05, 3.0, data.n)
        _, grad = complete_loglik_score(data, th, lat, z, t)
        Xbar = np.hstack([data.X, data.latent_columns(lat)])
        coef = np.concatenate([th.gamma, th.nu])
        form = Xbar.T @ (z * (-1.0 + t / np.exp(Xbar @ coef)) / th.psi)
        p = data.X.shape[1]

        def f(v):
            q = th.copy()
            q.gamma, q.nu = v[:p], v[p:]
            return complete_loglik(data, q, lat, z, t)

        fd = np.empty_like(coef)
        for j in range(len(coef)):
            e = np.zeros_like(coef)
            e[j] = 1e-5 * max(1.0, abs(coef[j]))
            fd[j] = (f(coef + e) - f(coef - e)) / (2 * e[j])
        scale = np.maximum(np.abs(grad), 1.0)
        worst_form = max(worst_form, np.max(np.abs(grad - form) / scale))
        worst_fd = max(worst_fd, np.max(np.abs(grad - fd) / scale))
    assert worst_form < 1e-5
    assert worst_fd < 1e-5


# -- A4 ------------------------------------------------------------------------------

@criterion(4, "E-step against enumeration over the actual claim indicator")
def test_a4_e_step():
    rng = np.random.default_rng(44)
    p, F = rng.random(1000), rng.random(1000)
    z_obs = (rng.random(1000) < 0.3).astype(float)
    got = e_quantities(p, 1.0 - F, z_obs)
    for k in range(1000):
        # joint weight of each actual outcome with what was observed
        if z_obs[k] == 1:
            w0, w1 = 0.0, p[k] * F[k]
        else:
            w0, w1 = 1.0 - p[k], p[k] * (1.0 - F[k])
        ref = w1 / (w0 + w1)
        assert abs(got[k] - ref) <= 1e-12
    assert np.all(got[z_obs == 1] == 1.0)


# -- A5 ------------------------------------------------------------------------------

@criterion(5, "MH posterior against 3-D quadrature")
def test_a5_mcmc_matches_quadrature():
    data, params = tiny_instance()
    n = 100_000
    start = time.perf_counter()
    draws = sample_posterior(frozen_result(data, params, seed=5), data, n_draws=n, n_sweeps=n + 1000)
    x = np.column_stack([draws.B[:, 0], draws.S[:, 1], draws.P[:, 0]])
    orc = oracle_posterior(data, params)
    batches = x.reshape(100, -1, 3).mean(axis=1)
    mc_se = batches.std(axis=0, ddof=1) / np.sqrt(len(batches))
    z = (x.mean(axis=0) - orc.mean) / mc_se
    ks = stats.kstest(x[:, 0], orc.marginal_cdf(0)).statistic
    elapsed = time.perf_counter() - start
    assert np.all(np.abs(z) <= 3), z
    assert ks < 0.02, ks
    assert elapsed < 60.0, f"{elapsed:.1f}s"
    # sanity: the draws are what the scorer consumes
    assert draw_latents_for(draws, [10], [20], [7]).shape == (n, 1, 3)


# -- A6 ------------------------------------------------------------------------------

def _reference_logistic(X, z):
    b = np.zeros(X.shape[1])
    for _ in range(100):
        p = special.expit(X @ b)
        step = np.linalg.solve((X * (p * (1 - p))[:, None]).T @ X, X.T @ (z - p))
        b += step
        if np.max(np.abs(step)) < 1e-14:
            break
    return b


@criterion(6, "logistic M-step against reference Newton; correlation cubic")
def test_a6_irls_and_rho():
    rng = np.random.default_rng(66)
    n = 2000
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 4))])
    z = (rng.random(n) < special.expit(X @ [-1.0, 0.8, -0.5, 0.3, 0.0])).astype(float)
    theta, info = mstep_logistic(X, [RetainedDraw(L=np.zeros((n, 3)), Z=z, T=np.ones(n))], np.zeros(8), lam=0.0)
    assert info["converged"]
    assert np.max(np.abs(theta[:5] - _reference_logistic(X, z))) < 1e-6
    for s_bs in np.linspace(-0.95, 0.95, 39):
        assert solve_rho_cubic(1.0, 1.0, float(s_bs)) == float(s_bs)
    for _ in range(500):
        s_bb, s_ss = rng.uniform(0.2, 3.0, 2)
        s_bs = rng.uniform(-0.95, 0.95) * np.sqrt(s_bb * s_ss)
        assert abs(rho_cubic(solve_rho_cubic(s_bb, s_ss, s_bs), s_bb, s_ss, s_bs)) < 1e-10


# -- A11 -----------------------------------------------------------------------------

@criterion(11, "fit and predict are byte-identical across runs and worker counts")
def test_a11_determinism(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("n_entities = 150\nn_policies = 300\nn_connections = 900\nclaim_rate = 0.2\n"
                   "truncated_share = 0.35\nseed = 17\n")
    data = tmp_path / "data"
    assert main(["generate", "--config", str(cfg), "--out", str(data)]) == 0
    models, preds = [], []
    for run, threads in enumerate(("1", "8", "1", "8")):
        m = tmp_path / f"m{run}.json"
        pr = tmp_path / f"p{run}.csv"
        assert main(["fit", "--data", str(data), "--iterations", "20", "--seed", "9", "--threads", threads,
                     "--out", str(m)]) == 0
        assert main(["predict", "--data", str(data), "--model", str(m), "--seed", "9", "--threads", threads,
                     "--pred-draws", "200", "--out", str(pr)]) == 0
        models.append(m.read_bytes())
        preds.append(pr.read_bytes())
    assert len(set(models)) == 1
    assert len(set(preds)) == 1


# -- simulation study ----------------------------------------------------------------

# a known truth with clearly non-zero latent structure
STUDY_BETA, STUDY_NU, STUDY_PSI, STUDY_RHO = (1.2, 1.0, 1.0), (0.8, 0.6, 0.6), 0.2, 0.5


def _study_truth():
    th = default_params()
    th.beta[:], th.nu[:], th.psi, th.rho = STUDY_BETA, STUDY_NU, STUDY_PSI, STUDY_RHO
    return th


def _portfolio(seed, n_entities, n_policies, n_connections):
    return generate(GenConfig(n_entities=n_entities, n_policies=n_policies, n_connections=n_connections,
                              params=_study_truth(), claim_rate=0.3, truncated_share=0.35, balanced=True,
                              kappa=0.0, seed=seed))


@pytest.fixture(scope="module")
def recovery():
    g, truth = _portfolio(RECOVERY_SEED, 2000, 5000, 20_000)
    design = featurize_connections(g)
    start = time.perf_counter()
    result = fit(design, FitConfig(iterations=200, mh_steps=20, retain=(15, 20), lam=1e-5, seed=RECOVERY_SEED))
    print(f"\nrecovery fit: {time.perf_counter() - start:.0f}s")
    return g, truth, design, result


@pytest.mark.slow
@criterion(7, "parameter recovery on a 20k-connection portfolio")
def test_a7_parameter_recovery(recovery):
    g, truth, _, result = recovery
    T, E, S = truth.params, result.params, result.se
    err = np.concatenate([E.alpha - T.alpha, E.gamma - T.gamma])
    z = err / np.concatenate([S.alpha, S.gamma])
    rel = np.concatenate([E.beta / T.beta, E.nu / T.nu]) - 1.0
    truncated = truth.unreported(g.conn_claim).sum() / truth.n_claims
    print(f"MAE {np.abs(err).mean():.4f}  max|z| {np.max(np.abs(z)):.2f}  beta/nu rel {np.round(rel, 3)}  "
          f"rho {E.rho:.3f}  psi {E.psi:.3f}  truncated share {truncated:.3f}")
    assert 0.30 <= truncated <= 0.40
    assert np.all(np.isfinite(z))
    failures = []
    if not np.all(np.abs(z) <= 3.0):
        failures.append(f"{int(np.sum(np.abs(z) > 3))} coefficient(s) beyond 3 s.e.")
    if not np.abs(err).mean() <= 0.10:
        failures.append(f"mean absolute error {np.abs(err).mean():.3f}")
    if not np.all(np.abs(rel) <= 0.20):
        failures.append(f"latent coefficients off by {np.round(rel, 3)}")
    if not abs(E.rho - T.rho) <= 0.10:
        failures.append(f"rho {E.rho:.3f}")
    assert not failures, "; ".join(failures)


@pytest.mark.slow
@criterion(8, "truncation bias of the naive GLM versus the SEM")
def test_a8_truncation_bias(recovery):
    g, truth, design, result = recovery
    data = ConnectionData.from_design(design)
    naive, _ = initialize(data, random_effects=False)
    expected_naive = inv_logit(design.X @ naive.alpha).sum()
    actual = truth.n_claims
    share = truth.unreported(g.conn_claim).sum() / actual
    under = 1.0 - expected_naive / actual
    report = score(result, design, sample_posterior(result, data, n_draws=500, n_sweeps=1000))
    expected_sem = report.p_pos.sum()
    print(f"actual {actual}  naive {expected_naive:.0f} ({under:.3f} under, truncated share {share:.3f})  "
          f"sem {expected_sem:.0f}")
    assert under >= share - 0.05
    assert abs(expected_sem / actual - 1.0) <= 0.10


@pytest.fixture(scope="module")
def replicates():
    out = []
    for rep in range(10):
        g, truth = _portfolio(100 + rep, 1000, 2500, 10_000)
        train, keep = restrict(g, truth, HOLDOUT_FROM)
        design = featurize_connections(train)
        data = ConnectionData.from_design(design)
        glmm = fit(design, FitConfig(seed=rep))
        glm = fit(design, FitConfig(seed=rep, random_effects=False))
        held = featurize_connections(g, scaling=design.scaling).subset(~keep)
        row = {}
        for name, model in (("glmm", glmm), ("glm", glm)):
            draws = sample_posterior(model, data, n_draws=500, n_sweeps=1000)
            row[name] = (score(model, design, draws), score(model, held, draws))
        z_train = truth.z[keep]
        row["actual_unreported"] = int(np.sum((z_train == 1) & (design.z_obs == 0)))
        row["z_held"] = truth.z[~keep]
        out.append(row)
    return out


@pytest.mark.slow
@criterion(9, "reserve within 15% of actual unreported claims on 10 replicates")
def test_a9_reserving(replicates):
    ratios = np.array([r["glmm"][0].reserve / r["actual_unreported"] for r in replicates])
    glm = np.array([r["glm"][0].reserve / r["actual_unreported"] for r in replicates])
    print(f"reserve / actual, GLMM: {np.round(ratios, 3)}  GLM: {np.round(glm, 3)}")
    assert np.all(np.abs(ratios - 1.0) <= 0.15)


@pytest.mark.slow
@criterion(10, "GLMM complete-claim ADEV no worse than its GLM reduction on the held-out year")
def test_a10_model_ordering(replicates):
    wins = []
    for r in replicates:
        full = r["glmm"][1].adev(r["z_held"])["complete"]
        reduced = r["glm"][1].adev(r["z_held"])["complete"]
        wins.append(full <= reduced)
        print(f"held-out complete ADEV: GLMM {full:.1f}  GLM {reduced:.1f}")
    assert sum(wins) >= 8
