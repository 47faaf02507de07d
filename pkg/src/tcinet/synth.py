"""Synthetic portfolios simulated from the model with known parameters.

The network grows policy by policy in start-date order.  Each policy's
seller is picked with probability proportional to ``(1 + out-degree)^kappa``
and its buyers are drawn uniformly without replacement from the other
entities.  Times are whole days converted to years so that every value
survives a round trip through calendar dates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date

import numpy as np
import pandas as pd
from scipy import optimize

from .centrality import WeightScheme
from .errors import ValidationError
from .features import COLUMNS, DesignTable, featurize_connections
from .graph import (BUSINESS_TYPES, DAYS_PER_YEAR, INDUSTRIES, POLICY_TYPES, SALES_BUCKETS,
                    NetworkGraph, build_graph, observe)
from .graph import restrict as restrict_graph
from .likelihood import ParameterSet, gap_sf, inv_logit

log = logging.getLogger(__name__)

# category mixes averaged over the seller and buyer sides of the reference portfolio
BUSINESS_TYPE_MIX = (0.691, 0.089, 0.018, 0.161, 0.041)   # llc, sole prop., unspecified, acc, listed
INDUSTRY_MIX = (0.4855, 0.3675, 0.0295, 0.1175)
SALES_MIX = (0.3055, 0.332, 0.283, 0.0795)


@dataclass(frozen=True)
class GenConfig:
    n_entities: int = 2000
    n_policies: int = 8000
    n_connections: int = 20000
    years: int = 5
    tau: float | None = None          # evaluation date in years; defaults to ``years``
    params: ParameterSet | None = None
    claim_rate: float | None = None   # calibrates the logistic intercept when set
    truncated_share: float | None = None  # calibrates the Gamma intercept when set
    multi_buyer_share: float = 0.736
    kappa: float = 0.5
    balanced: bool = False            # uniform category mixes instead of the reference ones
    weight_scheme: str = WeightScheme.UNIT.value
    origin: date = date(2015, 1, 1)
    seed: int = 0

    @property
    def evaluation_date(self) -> float:
        return float(self.years if self.tau is None else self.tau)

    def validate(self) -> "GenConfig":
        if min(self.n_entities, self.n_policies, self.n_connections, self.years) < 1:
            raise ValidationError("counts must be positive")
        if self.n_entities < 2:
            raise ValidationError("need at least two entities")
        if self.n_connections < self.n_policies:
            raise ValidationError("every policy needs at least one connection")
        if self.params is not None:
            self.params.validate()
            if len(self.params.alpha) != len(COLUMNS):
                raise ValidationError(f"params must have {len(COLUMNS)} fixed-effect coefficients")
        if not 0.0 <= self.multi_buyer_share <= 1.0:
            raise ValidationError("multi_buyer_share must lie in [0, 1]")
        if not self.evaluation_date > 0:
            raise ValidationError("tau must be positive")
        return self


def default_params(claim_intercept: float = -3.5, gap_intercept: float = -0.5) -> ParameterSet:
    """A moderate reference truth over the standard covariate layout."""
    p = len(COLUMNS)
    alpha = np.zeros(p)
    gamma = np.zeros(p)
    alpha[0], gamma[0] = claim_intercept, gap_intercept
    for name, a, g in (("b_age", -0.3, 0.0), ("s_age", 0.1, 0.05), ("p_turnover", 0.2, -0.1),
                       ("c_turnover", -0.3, 0.0), ("c_insured", 0.2, -0.1), ("p_total_insured", 0.0, 0.1),
                       ("b_dc_i", 0.1, -0.1), ("b_dc_oo", 0.0, 0.1), ("p_multiple", -0.3, 0.0),
                       ("b_bt_listed", -0.5, 0.0), ("b_ind_professional_services", -0.4, 0.0)):
        j = COLUMNS.index(name)
        alpha[j], gamma[j] = a, g
    return ParameterSet(alpha, [0.6, 0.4, 0.3], gamma, [0.3, 0.2, 0.2], 0.5, 0.3)


@dataclass
class GroundTruth:
    """Actual outcomes and latent effects, aligned with the graph's connection/entity/policy order."""

    params: ParameterSet
    z: np.ndarray
    t: np.ndarray
    B: np.ndarray
    S: np.ndarray
    P: np.ndarray
    design: DesignTable = field(repr=False, default=None)

    @property
    def n_claims(self) -> int:
        return int(self.z.sum())

    def unreported(self, z_obs) -> np.ndarray:
        return (self.z == 1) & (np.asarray(z_obs) == 0)

    def sidecar(self, g: NetworkGraph) -> pd.DataFrame:
        return pd.DataFrame({
            "connection_id": g.conn_ids,
            "actual_claim": self.z.astype(int),
            "actual_gap": self.t,
            "buyer_effect": self.B[g.conn_buyer],
            "seller_effect": self.S[g.conn_seller],
            "policy_effect": self.P[g.conn_policy],
        })


def _days(years: float) -> int:
    return int(np.floor(years * DAYS_PER_YEAR))


def _entity_rows(rng, cfg: GenConfig) -> pd.DataFrame:
    n = cfg.n_entities
    mixes = [BUSINESS_TYPE_MIX, INDUSTRY_MIX, SALES_MIX]
    if cfg.balanced:
        mixes = [np.full(len(m), 1.0 / len(m)) for m in mixes]
    bt = rng.choice(len(BUSINESS_TYPES), n, p=mixes[0])
    ind = rng.choice(len(INDUSTRIES), n, p=mixes[1])
    sales = rng.choice(len(SALES_BUCKETS), n, p=mixes[2])
    age0 = np.minimum(np.floor(rng.exponential(13.0, n)), 110)
    years = np.arange(cfg.origin.year, cfg.origin.year + int(np.ceil(cfg.evaluation_date)) + 1)
    ids = np.arange(1, n + 1)
    return pd.DataFrame({
        "id": np.repeat(ids, len(years)),
        "year": np.tile(years, n),
        "business_type": np.repeat(np.array(BUSINESS_TYPES)[bt], len(years)),
        "industry": np.repeat(np.array(INDUSTRIES)[ind], len(years)),
        "business_age": np.repeat(age0, len(years)) + np.tile(years - years[0], n),
        "annual_sales_bucket": np.repeat(np.array(SALES_BUCKETS)[sales], len(years)),
    })


def _buyer_counts(rng, cfg: GenConfig) -> np.ndarray:
    n_pol = cfg.n_policies
    multi = rng.random(n_pol) < cfg.multi_buyer_share
    if cfg.n_connections == n_pol:
        multi[:] = False
    base = np.where(multi, 2, 1)
    extra = cfg.n_connections - base.sum()
    if extra < 0:
        # too few connections for the drawn mix: demote multiple-buyer policies
        demote = rng.permutation(np.flatnonzero(multi))[:-extra]
        multi[demote] = False
        base = np.where(multi, 2, 1)
        extra = cfg.n_connections - base.sum()
    if extra > 0:
        if not multi.any():
            multi[rng.integers(n_pol)] = True
            base = np.where(multi, 2, 1)
            extra = cfg.n_connections - base.sum()
        idx = np.flatnonzero(multi)
        w = rng.exponential(1.0, len(idx))
        base[idx] += rng.multinomial(extra, w / w.sum())
    if base.max() > cfg.n_entities - 1:
        raise ValidationError("a policy needs more distinct buyers than there are entities")
    return base


def _structure(rng, cfg: GenConfig):
    horizon = _days(cfg.evaluation_date)
    last_day = min(_days(cfg.years), horizon)
    if last_day < 1:
        raise ValidationError("portfolio horizon shorter than one day")
    start_day = np.sort(rng.integers(0, last_day, cfg.n_policies))
    counts = _buyer_counts(rng, cfg)
    n = cfg.n_entities
    outdeg = np.zeros(n)
    sellers = np.empty(cfg.n_policies, dtype=np.int64)
    buyers = []
    for j in range(cfg.n_policies):
        w = (1.0 + outdeg) ** cfg.kappa
        s = rng.choice(n, p=w / w.sum())
        others = rng.choice(n - 1, counts[j], replace=False)
        b = others + (others >= s)
        sellers[j] = s
        buyers.append(b)
        outdeg[s] += counts[j]
    return start_day, sellers, buyers


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def generate(cfg: GenConfig) -> tuple[NetworkGraph, GroundTruth]:
    """Simulate a portfolio and its observed data at ``cfg.tau``."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    params = (cfg.params or default_params()).copy()
    entities = _entity_rows(rng, cfg)
    start_day, sellers, buyers = _structure(rng, cfg)
    n_pol = cfg.n_policies
    ids = np.arange(1, cfg.n_entities + 1)
    counts = np.array([len(b) for b in buyers])
    policies = pd.DataFrame({
        "id": np.arange(1, n_pol + 1),
        "seller_id": ids[sellers],
        "start": start_day / DAYS_PER_YEAR,
        "end": (start_day + 365) / DAYS_PER_YEAR,
        "policy_type": np.where(counts > 1, POLICY_TYPES[1], POLICY_TYPES[0]),
        "total_insured_amount": np.round(_log_uniform(rng, 1, 9800, n_pol), 2),
        "avg_turnover_ratio": np.round(_log_uniform(rng, 2, 80, n_pol), 2),
    })
    n_conn = int(counts.sum())
    connections = pd.DataFrame({
        "id": np.arange(1, n_conn + 1),
        "policy_id": np.repeat(policies["id"].to_numpy(), counts),
        "buyer_id": ids[np.concatenate(buyers)],
        "insured_amount": np.round(_log_uniform(rng, 1, 1000, n_conn), 2),
        "turnover_ratio": np.round(_log_uniform(rng, 2, 189, n_conn), 2),
        "claim_flag": 0,
        "claim_gap": np.inf,
    })
    tau = cfg.evaluation_date
    skeleton = build_graph(entities, policies, connections, tau=tau, origin=cfg.origin)
    design = featurize_connections(skeleton, cfg.weight_scheme)

    # latent effects
    e1 = rng.standard_normal(cfg.n_entities)
    e2 = rng.standard_normal(cfg.n_entities)
    B = e1
    S = params.rho * e1 + np.sqrt(1.0 - params.rho ** 2) * e2
    P = rng.standard_normal(n_pol)
    g = skeleton
    L = np.column_stack([B[g.conn_buyer], S[g.conn_seller], P[g.conn_policy]])
    X = design.X
    params = _calibrate(params, X, L, g.window, cfg)

    p = inv_logit(X @ params.alpha + L @ params.beta)
    mu = np.exp(X @ params.gamma + L @ params.nu)
    z = (rng.random(n_conn) < p).astype(np.int8)
    raw_t = rng.gamma(1.0 / params.psi, params.psi * mu)
    t_days = np.maximum(1, np.round(raw_t * DAYS_PER_YEAR))
    t = np.where(z == 1, t_days / DAYS_PER_YEAR, np.inf)
    z_obs, t_obs = observe(z, t, g.conn_start, tau)

    connections["claim_flag"] = z_obs
    connections["claim_gap"] = t_obs
    graph = build_graph(entities, policies, connections, tau=tau, origin=cfg.origin)
    truth = GroundTruth(params=params, z=z, t=t, B=B, S=S, P=P,
                        design=replace(design, z_obs=z_obs.astype(float), t_obs=t_obs))
    log.info("generated %d connections, %d actual claims, %d observed", n_conn, z.sum(), z_obs.sum())
    return graph, truth


def _calibrate(params: ParameterSet, X, L, window, cfg: GenConfig) -> ParameterSet:
    params = params.copy()
    base_p = X @ params.alpha + L @ params.beta - params.alpha[0]
    if cfg.claim_rate is not None:
        if not 0 < cfg.claim_rate < 1:
            raise ValidationError("claim_rate must lie in (0, 1)")
        params.alpha[0] = optimize.brentq(lambda a: inv_logit(base_p + a).mean() - cfg.claim_rate, -40, 40)
    if cfg.truncated_share is not None:
        if not 0 < cfg.truncated_share < 1:
            raise ValidationError("truncated_share must lie in (0, 1)")
        p = inv_logit(X @ params.alpha + L @ params.beta)
        base_mu = X @ params.gamma + L @ params.nu - params.gamma[0]

        def share(g0):
            return float(np.sum(p * gap_sf(window, np.exp(base_mu + g0), params.psi)) / np.sum(p))

        params.gamma[0] = optimize.brentq(lambda g0: share(g0) - cfg.truncated_share, -20, 20)
    return params


def restrict(graph: NetworkGraph, truth: GroundTruth, cutoff: float) -> tuple[NetworkGraph, np.ndarray]:
    """Portfolio as it would be seen at ``cutoff``, outcomes re-observed from the actual ones."""
    return restrict_graph(graph, cutoff, truth.z, truth.t)
