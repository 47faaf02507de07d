"""Model distributions and likelihoods.

Claim occurrence is logistic in ``X @ alpha + beta . (B, S, P)``; the
reporting gap of a claim is Gamma with mean ``mu = exp(X @ gamma + nu . (B, S, P))``
and dispersion ``psi`` (shape ``1/psi``, scale ``psi * mu``).  ``(B, S)`` of
an entity are standard bivariate normal with correlation ``rho``; ``P`` of a
policy is standard normal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DomainError, NumericalError, ValidationError

ETA_BOUND = 35.0
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class ParameterSet:
    """Full parameterisation ``(alpha, beta, gamma, nu, psi, rho)``."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    nu: np.ndarray
    psi: float
    rho: float

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.nu = np.asarray(self.nu, dtype=float)
        self.psi = float(self.psi)
        self.rho = float(self.rho)

    def validate(self) -> "ParameterSet":
        if self.alpha.shape != self.gamma.shape:
            raise ValidationError("alpha and gamma must have the same layout")
        if self.beta.shape != (3,) or self.nu.shape != (3,):
            raise ValidationError("beta and nu must have length 3")
        if not self.psi > 0:
            raise ValidationError(f"psi must be positive, got {self.psi}")
        if not abs(self.rho) < 1:
            raise ValidationError(f"rho must lie in (-1, 1), got {self.rho}")
        return self

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.alpha.copy(), self.beta.copy(), self.gamma.copy(),
                            self.nu.copy(), self.psi, self.rho)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.gamma, self.nu, [self.psi, self.rho]])

    @classmethod
    def from_vector(cls, v, p: int) -> "ParameterSet":
        v = np.asarray(v, dtype=float)
        return cls(v[:p], v[p:p + 3], v[p + 3:2 * p + 3], v[2 * p + 3:2 * p + 6],
                   v[2 * p + 6], v[2 * p + 7])

    def flip(self, family: int) -> "ParameterSet":
        """Negate latent family ``family`` (0 buyer, 1 seller, 2 policy).

        Together with negating the latent values this leaves every
        likelihood unchanged; flipping a buyer or seller family also flips
        the sign of ``rho``.
        """
        out = self.copy()
        out.beta[family] *= -1
        out.nu[family] *= -1
        if family in (0, 1):
            out.rho = -out.rho
        return out

    def as_dict(self, columns) -> dict:
        return {
            "alpha": dict(zip(columns, map(float, self.alpha))),
            "beta": [float(x) for x in self.beta],
            "gamma": dict(zip(columns, map(float, self.gamma))),
            "nu": [float(x) for x in self.nu],
            "psi": self.psi,
            "rho": self.rho,
        }

    @classmethod
    def from_dict(cls, d: dict, columns) -> "ParameterSet":
        alpha, gamma = d["alpha"], d["gamma"]
        if set(alpha) != set(columns) or set(gamma) != set(columns) or len(alpha) != len(columns):
            raise ValidationError("coefficient names do not match the covariate layout")
        return cls([alpha[c] for c in columns], d["beta"], [gamma[c] for c in columns], d["nu"],
                   d["psi"], d["rho"])


@dataclass
class LatentState:
    """One joint draw of buyer (B), seller (S) and policy (P) effects, by position."""

    B: np.ndarray
    S: np.ndarray
    P: np.ndarray

    @classmethod
    def zeros(cls, n_entities: int, n_policies: int) -> "LatentState":
        return cls(np.zeros(n_entities), np.zeros(n_entities), np.zeros(n_policies))

    def copy(self) -> "LatentState":
        return LatentState(self.B.copy(), self.S.copy(), self.P.copy())


@dataclass(frozen=True)
class ConnectionData:
    """Connection-level arrays with latent references resolved to positions.

    ``entity_ids``/``policy_ids`` list the ids behind latent positions; the
    entity set is every buyer or seller appearing in the rows.
    """

    X: np.ndarray
    buyer: np.ndarray
    seller: np.ndarray
    policy: np.ndarray
    z_obs: np.ndarray
    t_obs: np.ndarray
    window: np.ndarray
    entity_ids: np.ndarray
    policy_ids: np.ndarray
    conn_ids: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return len(self.z_obs)

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def n_policies(self) -> int:
        return len(self.policy_ids)

    @classmethod
    def from_design(cls, design, rows=None) -> "ConnectionData":
        d = design if rows is None else design.subset(rows)
        entity_ids = np.union1d(d.buyer_ids, d.seller_ids)
        policy_ids = np.unique(d.policy_ids)
        return cls(X=d.X, buyer=np.searchsorted(entity_ids, d.buyer_ids),
                   seller=np.searchsorted(entity_ids, d.seller_ids),
                   policy=np.searchsorted(policy_ids, d.policy_ids),
                   z_obs=np.asarray(d.z_obs, dtype=float), t_obs=np.asarray(d.t_obs, dtype=float),
                   window=np.asarray(d.window, dtype=float), entity_ids=entity_ids,
                   policy_ids=policy_ids, conn_ids=d.conn_ids)

    def latent_columns(self, latents: LatentState) -> np.ndarray:
        return np.column_stack([latents.B[self.buyer], latents.S[self.seller], latents.P[self.policy]])


# -- links ---------------------------------------------------------------

def inv_logit(eta):
    return special.expit(np.clip(eta, -ETA_BOUND, ETA_BOUND))


def log_inv_logit(eta):
    """``log p`` and ``log(1 - p)`` for the clamped linear predictor."""
    eta = np.clip(eta, -ETA_BOUND, ETA_BOUND)
    return -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta)


def linear_predictor(x, coef, latent=None, latent_coef=None):
    x = np.asarray(x, dtype=float)
    coef = np.asarray(coef, dtype=float)
    eta = x @ coef
    if latent is not None:
        eta = eta + np.asarray(latent, dtype=float) @ np.asarray(latent_coef, dtype=float)
    if not np.all(np.isfinite(eta)):
        bad = np.flatnonzero(~np.isfinite(coef))
        where = f"coefficient {bad[0]}" if bad.size else "a covariate or latent value"
        raise NumericalError(f"non-finite linear predictor (check {where})")
    return eta


def claim_prob(x, alpha, beta, latent=(0.0, 0.0, 0.0)):
    """Claim probability of design row(s) ``x`` with latent values ``latent``."""
    return inv_logit(linear_predictor(x, alpha, latent, beta))


# -- reporting gap ---------------------------------------------------------

def _check_gamma_args(mu, psi):
    if np.any(~(np.asarray(mu) > 0)) or np.any(~(np.asarray(psi) > 0)):
        raise DomainError("Gamma mean and dispersion must be positive")


def _logpdf(t, mu, psi):
    a = 1.0 / psi
    scale = psi * mu
    return -special.gammaln(a) - a * np.log(scale) + (a - 1.0) * np.log(t) - t / scale


def gap_logpdf(t, mu, psi):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("reporting gap must be positive")
    _check_gamma_args(mu, psi)
    return _logpdf(t, np.asarray(mu, dtype=float), psi)


def gap_density(t, mu, psi):
    return np.exp(gap_logpdf(t, mu, psi))


def gap_cdf(t, mu, psi):
    _check_gamma_args(mu, psi)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("reporting gap must be non-negative")
    return special.gammainc(1.0 / psi, t / (psi * np.asarray(mu, dtype=float)))


def gap_sf(t, mu, psi):
    _check_gamma_args(mu, psi)
    return special.gammaincc(1.0 / psi, np.asarray(t, dtype=float) / (psi * np.asarray(mu, dtype=float)))


def truncated_claim_prob(p, mu, psi, window):
    """Probability that a claim occurs and is reported within ``window``."""
    return np.asarray(p) * gap_cdf(window, mu, psi)


def truncated_gap_density(t, mu, psi, window):
    """Gap density conditional on reporting within ``window``."""
    t = np.asarray(t, dtype=float)
    if np.any(t > np.asarray(window)):
        raise DomainError("gap exceeds the truncation window")
    return gap_density(t, mu, psi) / gap_cdf(window, mu, psi)


# -- latent priors -----------------------------------------------------------

def bvn_logpdf(b, s, rho):
    if not abs(rho) < 1:
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")
    one_m = 1.0 - rho * rho
    b = np.asarray(b, dtype=float)
    s = np.asarray(s, dtype=float)
    return -LOG_2PI - 0.5 * np.log(one_m) - (b * b - 2.0 * rho * b * s + s * s) / (2.0 * one_m)


def norm_logpdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * LOG_2PI - 0.5 * x * x


def latent_log_prior(latents: LatentState, rho: float) -> float:
    return float(np.sum(bvn_logpdf(latents.B, latents.S, rho)) + np.sum(norm_logpdf(latents.P)))


# -- likelihoods ---------------------------------------------------------------

def obs_loglik_terms(z_obs, t_obs, window, eta_p, eta_mu, psi):
    """Per-connection observed-data log-likelihood given the latent effects.

    For a reported claim ``p* f*(T) = p f(T)`` (the window cancels); for a
    connection without a report the term is ``log(1 - p F(window))``,
    evaluated as ``log((1 - p) + p (1 - F))``.
    """
    log_p, log_q = log_inv_logit(eta_p)
    mu = np.exp(np.clip(eta_mu, -ETA_BOUND, ETA_BOUND))
    out = np.empty(len(z_obs))
    rep = z_obs == 1
    # inputs are valid by construction here (mu = exp(.), validated psi and gaps)
    if np.any(rep):
        out[rep] = log_p[rep] + _logpdf(t_obs[rep], mu[rep], psi)
    op = ~rep
    if np.any(op):
        with np.errstate(divide="ignore"):
            log_sf = np.log(special.gammaincc(1.0 / psi, window[op] / (psi * mu[op])))
        out[op] = np.logaddexp(log_q[op], log_p[op] + log_sf)
    return out


def predictors(data: ConnectionData, params: ParameterSet, latents: LatentState):
    L = data.latent_columns(latents)
    eta_p = linear_predictor(data.X, params.alpha, L, params.beta)
    eta_mu = linear_predictor(data.X, params.gamma, L, params.nu)
    return eta_p, eta_mu


def obs_loglik_conditional(data: ConnectionData, params: ParameterSet, latents: LatentState) -> float:
    eta_p, eta_mu = predictors(data, params, latents)
    return float(np.sum(obs_loglik_terms(data.z_obs, data.t_obs, data.window, eta_p, eta_mu, params.psi)))


def complete_loglik(data: ConnectionData, params: ParameterSet, latents: LatentState, z, t) -> float:
    """Complete-data log-likelihood for actual outcomes ``(z, t)`` including the latent priors."""
    if not abs(params.rho) < 1:
        raise DomainError(f"rho must lie in (-1, 1), got {params.rho}")
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    eta_p, eta_mu = predictors(data, params, latents)
    log_p, log_q = log_inv_logit(eta_p)
    total = np.sum(z * log_p + (1.0 - z) * log_q)
    hit = z > 0
    if np.any(hit):
        mu = np.exp(np.clip(eta_mu[hit], -ETA_BOUND, ETA_BOUND))
        total += np.sum(z[hit] * gap_logpdf(t[hit], mu, params.psi))
    return float(total + latent_log_prior(latents, params.rho))


def obs_loglik_score(data: ConnectionData, params: ParameterSet, latents: LatentState):
    """Gradient of :func:`obs_loglik_conditional` w.r.t. ``(alpha, beta)`` and ``(gamma, nu)``."""
    L = data.latent_columns(latents)
    Xbar = np.hstack([data.X, L])
    eta_p, eta_mu = predictors(data, params, latents)
    p = inv_logit(eta_p)
    mu = np.exp(eta_mu)
    psi = params.psi
    rep = data.z_obs == 1
    d_eta_p = np.where(rep, 1.0 - p, 0.0)
    d_eta_mu = np.zeros(data.n)
    d_eta_mu[rep] = (-1.0 + data.t_obs[rep] / mu[rep]) / psi
    op = ~rep
    if np.any(op):
        c = data.window[op]
        F = gap_cdf(c, mu[op], psi)
        surv = 1.0 - p[op] * F
        d_eta_p[op] = -F * p[op] * (1.0 - p[op]) / surv
        # dF/d(log mu) = -c f(c)
        d_eta_mu[op] = p[op] * c * gap_density(c, mu[op], psi) / surv
    return Xbar.T @ d_eta_p, Xbar.T @ d_eta_mu


def complete_loglik_score(data: ConnectionData, params: ParameterSet, latents: LatentState, z, t):
    L = data.latent_columns(latents)
    Xbar = np.hstack([data.X, L])
    eta_p, eta_mu = predictors(data, params, latents)
    z = np.asarray(z, dtype=float)
    g_logit = Xbar.T @ (z - inv_logit(eta_p))
    hit = z > 0
    r = np.zeros(data.n)
    r[hit] = z[hit] * (-1.0 + np.asarray(t, dtype=float)[hit] / np.exp(eta_mu[hit])) / params.psi
    return g_logit, Xbar.T @ r
