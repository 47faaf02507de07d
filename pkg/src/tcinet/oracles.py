"""Slow reference implementations used to verify the production code paths.

``oracle_centrality`` enumerates connection pairs literally;
``oracle_posterior`` integrates the latent posterior of a tiny instance by
tensor-product Gauss-Legendre quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .centrality import CentralityFeatures, WeightScheme, connection_weights
from .errors import ValidationError
from .graph import NetworkGraph, active_subgraph
from .likelihood import (ConnectionData, ParameterSet, gap_cdf, inv_logit, linear_predictor,
                         obs_loglik_terms)


def oracle_centrality(g: NetworkGraph, t: float, scheme=WeightScheme.UNIT) -> CentralityFeatures:
    """All six centrality measures at ``t`` by explicit sums over connection pairs."""
    view = active_subgraph(g, t)
    conns = view.connections
    if len(conns) > 4000:
        raise ValidationError("oracle_centrality is quadratic in memory; at most 4000 active connections")
    w = connection_weights(g, scheme)[conns]
    src = g.conn_seller[conns]
    dst = g.conn_buyer[conns]
    n = len(view.entities)
    values = np.zeros((n, 6))
    # every ordered pair (k, kk) of distinct active connections, weighted w_k w_kk
    ww = np.outer(w, w)
    np.fill_diagonal(ww, 0.0)
    oo_pair = dst[:, None] == src[None, :]      # k = i -> j, kk = j -> l
    ii_pair = src[:, None] == dst[None, :]      # k = j -> i, kk = l -> j
    io_pair = src[:, None] == src[None, :]      # k = j -> i, kk = j -> l
    oi_pair = dst[:, None] == dst[None, :]      # k = i -> j, kk = l -> j
    for a, i in enumerate(view.entities):
        out_k = src == i
        in_k = dst == i
        values[a, 0] = w[out_k].sum()
        values[a, 1] = w[in_k].sum()
        values[a, 2] = ww[out_k][oo_pair[out_k]].sum()
        values[a, 3] = ww[in_k][ii_pair[in_k]].sum()
        values[a, 4] = ww[in_k][io_pair[in_k]].sum()
        values[a, 5] = ww[out_k][oi_pair[out_k]].sum()
    return CentralityFeatures(t=float(t), entity_ids=g.entity_ids[view.entities],
                              entity_pos=view.entities, values=values)


@dataclass
class PosteriorOracle:
    """Latent posterior of a tiny instance on a quadrature grid.

    ``labels`` names each latent dimension (``"B0"`` is the buyer effect of
    entity position 0, ``"S1"`` a seller effect, ``"P0"`` a policy effect);
    ``nodes``/``weights`` hold the normalised posterior on the grid.
    """

    labels: list
    nodes: np.ndarray
    weights: np.ndarray
    data: ConnectionData
    params: ParameterSet
    latent_of: np.ndarray      # (n_conn, 3) grid-column index used by each connection
    error: float               # node-halving estimate of the error in the posterior mean

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.nodes

    def expect(self, fn) -> np.ndarray:
        return np.tensordot(self.weights, fn(self.nodes), axes=(0, 0))

    def connection_latents(self, nodes=None) -> np.ndarray:
        nodes = self.nodes if nodes is None else nodes
        padded = np.hstack([nodes, np.zeros((len(nodes), 1))])
        return padded[:, self.latent_of]          # (G, n_conn, 3)

    def claim_probs(self):
        """Posterior ``(E p, E p F(c), E unreported-ratio)`` for each connection."""
        L = self.connection_latents()
        d, th = self.data, self.params
        eta_p = d.X @ th.alpha + L @ th.beta
        eta_mu = d.X @ th.gamma + L @ th.nu
        p = inv_logit(eta_p)
        F = gap_cdf(np.broadcast_to(d.window, p.shape), np.exp(eta_mu), th.psi)
        ratio = p * (1 - F) / (p * (1 - F) + 1 - p)
        w = self.weights
        return w @ p, w @ (p * F), w @ ratio

    def marginal_cdf(self, dim: int, n_grid: int = 1601, half_width: float = 8.0, n_nodes: int = 61):
        """CDF of latent ``dim`` as a vectorised callable (grid + Simpson integration)."""
        x = np.linspace(-half_width, half_width, n_grid)
        base_nodes, base_w = _gl(n_nodes, half_width)
        others = [j for j in range(len(self.labels)) if j != dim]
        if others:
            grids = np.meshgrid(*([base_nodes] * len(others)), indexing="ij")
            rest = np.column_stack([gg.ravel() for gg in grids])
            rest_w = np.prod(np.meshgrid(*([base_w] * len(others)), indexing="ij"), axis=0).ravel()
        else:
            rest = np.zeros((1, 0))
            rest_w = np.ones(1)
        dens = np.empty(n_grid)
        for a, xv in enumerate(x):
            pts = np.empty((len(rest), len(self.labels)))
            pts[:, dim] = xv
            pts[:, others] = rest
            dens[a] = np.exp(_log_post(self, pts) - self._shift) @ rest_w
        cdf = integrate.cumulative_simpson(dens, x=x, initial=0.0)
        cdf /= cdf[-1]
        return lambda v: np.interp(v, x, cdf, left=0.0, right=1.0)


_N_NODES = 81


def _gl(n: int, half_width: float):
    x, w = np.polynomial.legendre.leggauss(n)
    return x * half_width, w * half_width


def _prior_precision(labels, rho):
    d = len(labels)
    cov = np.eye(d)
    for a, la in enumerate(labels):
        for b, lb in enumerate(labels):
            if la[0] == "B" and lb[0] == "S" and la[1:] == lb[1:]:
                cov[a, b] = cov[b, a] = rho
    return np.linalg.inv(cov), np.linalg.slogdet(cov)[1]


def _log_post(orc: PosteriorOracle, nodes: np.ndarray) -> np.ndarray:
    d, th = orc.data, orc.params
    L = orc.connection_latents(nodes)
    eta_p = linear_predictor(d.X, th.alpha) + L @ th.beta
    eta_mu = linear_predictor(d.X, th.gamma) + L @ th.nu
    G = len(nodes)
    ll = obs_loglik_terms(np.tile(d.z_obs, G), np.tile(d.t_obs, G), np.tile(d.window, G),
                          eta_p.ravel(), eta_mu.ravel(), th.psi).reshape(G, -1).sum(axis=1)
    prec, logdet = orc._prec
    quad = np.einsum("gi,ij,gj->g", nodes, prec, nodes)
    return ll - 0.5 * quad - 0.5 * logdet


def _build(data: ConnectionData, params: ParameterSet, n_nodes: int, half_width: float):
    labels = [f"B{i}" for i in np.unique(data.buyer)]
    labels += [f"S{i}" for i in np.unique(data.seller)]
    labels += [f"P{j}" for j in np.unique(data.policy)]
    if len(labels) > 3:
        raise ValidationError(f"oracle_posterior supports at most 3 latent dimensions, got {len(labels)}")
    index = {lab: a for a, lab in enumerate(labels)}
    latent_of = np.column_stack([
        [index[f"B{i}"] for i in data.buyer],
        [index[f"S{i}"] for i in data.seller],
        [index[f"P{j}"] for j in data.policy],
    ]) if data.n else np.zeros((0, 3), dtype=int)
    x, w = _gl(n_nodes, half_width)
    grids = np.meshgrid(*([x] * len(labels)), indexing="ij")
    nodes = np.column_stack([gg.ravel() for gg in grids])
    qw = np.prod(np.meshgrid(*([w] * len(labels)), indexing="ij"), axis=0).ravel()
    orc = PosteriorOracle(labels=labels, nodes=nodes, weights=qw, data=data, params=params,
                          latent_of=latent_of, error=0.0)
    orc._prec = _prior_precision(labels, params.rho)
    lp = _log_post(orc, nodes)
    orc._shift = lp.max()
    unnorm = qw * np.exp(lp - orc._shift)
    orc.evidence = unnorm.sum()
    orc.weights = unnorm / orc.evidence
    return orc


def oracle_posterior(data: ConnectionData, params: ParameterSet, n_nodes: int = _N_NODES,
                     half_width: float = 8.0) -> PosteriorOracle:
    """Quadrature posterior over the (at most three) latent effects used by ``data``.

    Only latent effects that enter some connection are integrated; an
    entity's unused effect is integrated out analytically through the
    bivariate normal marginal.  ``error`` compares the posterior mean with a
    half-resolution rule.
    """
    orc = _build(data, params, n_nodes, half_width)
    coarse = _build(data, params, (n_nodes + 1) // 2, half_width)
    orc.error = float(np.max(np.abs(orc.mean - coarse.mean), initial=0.0))
    return orc
