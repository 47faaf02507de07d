"""Posterior claim probabilities, reserves and absolute-deviance scores.

Latent effects for scoring come from a fresh Metropolis-Hastings run with
the fitted parameters frozen.  A connection outside the training sample
borrows whatever is known about its parties: an in-sample buyer reuses its
buyer draws, an entity seen only as a seller gets a buyer effect drawn
conditionally on its seller draws, and an unseen entity or policy gets
standard-normal draws from a stream keyed by its id.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ValidationError
from .likelihood import ConnectionData, ParameterSet, gap_cdf, inv_logit
from .sem import FitResult, LatentSampler, stream

POSTERIOR_STREAM, NEW_LATENT_STREAM = 4, 5
_CHUNK = 4_000_000


@dataclass(frozen=True)
class PosteriorDraws:
    """Draws of every in-sample latent effect, one row per retained sweep."""

    B: np.ndarray
    S: np.ndarray
    P: np.ndarray
    entity_ids: np.ndarray
    policy_ids: np.ndarray
    buyer_known: np.ndarray
    seller_known: np.ndarray
    rho: float
    seed: int
    n_draws: int

    @property
    def fixed_only(self) -> bool:
        return self.B.shape[0] == 0


def sample_posterior(result: FitResult, data: ConnectionData, n_draws: int = 1000, n_sweeps: int = 2000,
                     seed: int | None = None, workers: int = 1) -> PosteriorDraws:
    """Frozen-parameter MH run over the training connections, thinned to ``n_draws``."""
    if n_draws < 1 or n_sweeps < n_draws:
        raise ValidationError("need 1 <= n_draws <= n_sweeps")
    seed = result.config.seed if seed is None else seed
    th = result.params
    buyer_known = np.zeros(data.n_entities, dtype=bool)
    buyer_known[data.buyer] = True
    seller_known = np.zeros(data.n_entities, dtype=bool)
    seller_known[data.seller] = True
    common = dict(entity_ids=data.entity_ids, policy_ids=data.policy_ids, buyer_known=buyer_known,
                  seller_known=seller_known, rho=th.rho, seed=seed, n_draws=n_draws)
    if not np.any(th.beta) and not np.any(th.nu):
        empty = np.zeros((0, data.n_entities))
        return PosteriorDraws(B=empty, S=empty, P=np.zeros((0, data.n_policies)), **common)
    start = _warm_start(result, data)
    sampler = LatentSampler(data, th, start, workers=workers)
    thin = n_sweeps // n_draws
    keep = set(range(n_sweeps - (n_draws - 1) * thin, n_sweeps + 1, thin))
    B = np.empty((n_draws, data.n_entities))
    S = np.empty_like(B)
    P = np.empty((n_draws, data.n_policies))
    row = iter(range(n_draws))

    def record(m, s):
        r = next(row)
        B[r], S[r], P[r] = s.latents.B, s.latents.S, s.latents.P

    sampler.run(lambda f: stream(seed, POSTERIOR_STREAM, f), n_sweeps, keep, record)
    sampler.pool.close()
    return PosteriorDraws(B=B, S=S, P=P, **common)


def _warm_start(result: FitResult, data: ConnectionData):
    from .likelihood import LatentState

    state = LatentState.zeros(data.n_entities, data.n_policies)
    for src_ids, dst_ids, pairs in ((result.entity_ids, data.entity_ids,
                                     ((result.latents.B, state.B), (result.latents.S, state.S))),
                                    (result.policy_ids, data.policy_ids, ((result.latents.P, state.P),))):
        common, i_src, i_dst = np.intersect1d(src_ids, dst_ids, return_indices=True)
        for src, dst in pairs:
            dst[i_dst] = src[i_src]
    return state


def _new_normals(draws: PosteriorDraws, family: int, ids: np.ndarray) -> np.ndarray:
    M = draws.n_draws
    out = np.empty((M, len(ids)))
    for a, i in enumerate(ids):
        out[:, a] = stream(draws.seed, NEW_LATENT_STREAM, family, int(i)).standard_normal(M)
    return out


def _lookup(ids: np.ndarray, table: np.ndarray):
    pos = np.searchsorted(table, ids)
    pos_c = np.minimum(pos, max(len(table) - 1, 0))
    found = (pos < len(table)) & (table[pos_c] == ids) if len(table) else np.zeros(len(ids), bool)
    return pos_c, found


def draw_latents_for(draws: PosteriorDraws, buyer_ids, seller_ids, policy_ids) -> np.ndarray:
    """Latent draws ``(n_draws, n, 3)`` for connections given by their party ids."""
    buyer_ids, seller_ids, policy_ids = (np.asarray(a, dtype=np.int64) for a in (buyer_ids, seller_ids, policy_ids))
    n, M = len(buyer_ids), draws.n_draws
    out = np.empty((M, n, 3))
    rho = draws.rho
    sd = np.sqrt(1.0 - rho * rho)
    for family, ids, own, other, own_known, other_known in (
            (0, buyer_ids, draws.B, draws.S, draws.buyer_known, draws.seller_known),
            (1, seller_ids, draws.S, draws.B, draws.seller_known, draws.buyer_known)):
        pos, found = _lookup(ids, draws.entity_ids)
        known = found & own_known[pos]
        via_other = found & ~known & other_known[pos]
        out[:, known, family] = own[:, pos[known]]
        rest = ~known
        if np.any(rest):
            uniq, inv = np.unique(ids[rest], return_inverse=True)
            eps = _new_normals(draws, family, uniq)[:, inv]
            cond = via_other[rest]
            vals = eps.copy()
            vals[:, cond] = rho * other[:, pos[rest][cond]] + sd * eps[:, cond]
            out[:, rest, family] = vals
    pos, found = _lookup(policy_ids, draws.policy_ids)
    out[:, found, 2] = draws.P[:, pos[found]]
    if np.any(~found):
        uniq, inv = np.unique(policy_ids[~found], return_inverse=True)
        out[:, ~found, 2] = _new_normals(draws, 2, uniq)[:, inv]
    return out


def unreported_ratio_draws(p, F):
    num = p * (1.0 - F)
    return num / (num + 1.0 - p)


@dataclass
class ScoreReport:
    """Per-connection posterior probabilities with portfolio aggregates."""

    conn_ids: np.ndarray
    z_obs: np.ndarray
    p_pos: np.ndarray
    p_obs: np.ndarray
    p_ur: np.ndarray         # NaN where a claim was already reported
    se_pos: np.ndarray

    @property
    def reserve(self) -> float:
        return reserve(self.p_ur[self.z_obs == 0])

    @property
    def n_open(self) -> int:
        return int(np.sum(self.z_obs == 0))

    def adev(self, z_true=None) -> dict:
        """Absolute deviance of each probability type; truth-based rows need actual claims."""
        out = {"observed": adev(self.p_obs, self.z_obs)}
        if z_true is not None:
            z_true = np.asarray(z_true)
            open_ = self.z_obs == 0
            out["unreported"] = adev(self.p_ur[open_], (z_true[open_] == 1).astype(float))
            out["complete"] = adev(self.p_pos, z_true)
        return out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"connection_id": self.conn_ids, "observed_claim": self.z_obs.astype(int),
                             "p_claim": self.p_pos, "p_observed": self.p_obs, "p_unreported": self.p_ur,
                             "mc_se": self.se_pos})


def posterior_claim_prob(x, latent_draws, params: ParameterSet):
    """MC mean and standard error of the claim probability for one design row."""
    p = inv_logit(np.asarray(x) @ params.alpha + np.asarray(latent_draws) @ params.beta)
    return float(p.mean()), float(p.std(ddof=1) / np.sqrt(len(p))) if len(p) > 1 else 0.0


def unreported_claim_prob(x, window, z_obs, latent_draws, params: ParameterSet) -> float:
    """MC mean of the probability of an unreported claim for one open connection."""
    if z_obs == 1:
        raise ValidationError("unreported-claim probability is only defined for connections without a report")
    L = np.asarray(latent_draws)
    p = inv_logit(np.asarray(x) @ params.alpha + L @ params.beta)
    F = gap_cdf(window, np.exp(np.asarray(x) @ params.gamma + L @ params.nu), params.psi)
    return float(np.mean(unreported_ratio_draws(p, F)))


def score(result: FitResult, design, draws: PosteriorDraws) -> ScoreReport:
    """Score every row of ``design`` (which must share the fit's covariate layout)."""
    if tuple(design.columns) != tuple(result.columns):
        raise ValidationError("design columns do not match the fitted model")
    th = result.params
    n = len(design)
    p_pos = np.empty(n)
    p_obs = np.empty(n)
    p_ur = np.empty(n)
    se = np.empty(n)
    base_p = design.X @ th.alpha
    base_mu = design.X @ th.gamma
    window = np.asarray(design.window, dtype=float)
    if draws.fixed_only:
        p = inv_logit(base_p)
        F = gap_cdf(window, np.exp(base_mu), th.psi)
        p_pos[:], p_obs[:], p_ur[:], se[:] = p, p * F, unreported_ratio_draws(p, F), 0.0
    else:
        step = max(1, _CHUNK // draws.n_draws)
        for a in range(0, n, step):
            sl = slice(a, min(n, a + step))
            L = draw_latents_for(draws, design.buyer_ids[sl], design.seller_ids[sl], design.policy_ids[sl])
            p = inv_logit(base_p[sl] + L @ th.beta)
            F = gap_cdf(window[sl], np.exp(base_mu[sl] + L @ th.nu), th.psi)
            p_pos[sl] = p.mean(axis=0)
            p_obs[sl] = (p * F).mean(axis=0)
            p_ur[sl] = unreported_ratio_draws(p, F).mean(axis=0)
            se[sl] = p.std(axis=0, ddof=1) / np.sqrt(draws.n_draws) if draws.n_draws > 1 else 0.0
    z_obs = np.asarray(design.z_obs).astype(np.int8)
    p_ur[z_obs == 1] = np.nan
    return ScoreReport(conn_ids=np.asarray(design.conn_ids), z_obs=z_obs, p_pos=p_pos, p_obs=p_obs,
                       p_ur=p_ur, se_pos=se)


def reserve(p_ur) -> float:
    """Expected number of unreported claims: the sum of unreported-claim probabilities."""
    p_ur = np.asarray(p_ur, dtype=float)
    return float(np.sum(p_ur)) if p_ur.size else 0.0


def adev(pred, outcome) -> float:
    """Sum of absolute deviations between predicted probabilities and 0/1 outcomes."""
    return float(np.sum(np.abs(np.asarray(outcome, dtype=float) - np.asarray(pred, dtype=float))))
