"""Weighted first- and second-order degree centrality on the active network.

The production path works on the sparse adjacency matrix ``D(t)``.  Row and
column sums give the first-order measures; the second-order measures are
row/column sums of ``D @ D``, ``D @ D.T`` and ``D.T @ D`` with the ``k == k'``
pairs removed.  Because the graph has no self-loops, no ``k == k'`` pair can
satisfy the outward-outward or inward-inward indicator, so nothing is removed
there.  For the mixed measures the removed mass is the per-node sum of
squared weights, which equals ``diag(D @ D.T)`` only for simple graphs under
unit weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sps

from .graph import NetworkGraph, active_subgraph

DC_NAMES = ("dc_o", "dc_i", "dc_oo", "dc_ii", "dc_io", "dc_oi")


class WeightScheme(str, Enum):
    UNIT = "unit"
    INVERSE_BUYER_COUNT = "inverse-buyer-count"
    INSURED_AMOUNT = "insured-amount"


def connection_weights(g: NetworkGraph, scheme: WeightScheme | str = WeightScheme.UNIT) -> np.ndarray:
    """Positive weight ``w_k`` for every connection of ``g``."""
    scheme = WeightScheme(scheme)
    if scheme is WeightScheme.UNIT:
        return np.ones(g.n_connections)
    if scheme is WeightScheme.INVERSE_BUYER_COUNT:
        counts = np.array([len(g.policy_buyers(j)) for j in range(g.n_policies)], dtype=float)
        return 1.0 / counts[g.conn_policy]
    # proportional to insured amount, normalised to mean one over the dataset
    return g.conn_insured / np.mean(g.conn_insured) if g.n_connections else np.ones(0)


@dataclass(frozen=True)
class AdjacencyMatrix:
    """``matrix[a, b]`` sums ``w_k`` over active connections from ``entity_ids[a]`` to ``entity_ids[b]``."""

    matrix: sps.csr_matrix
    entity_ids: np.ndarray
    entity_pos: np.ndarray  # positions into the parent graph


@dataclass(frozen=True)
class CentralityFeatures:
    """Six centrality measures (columns ordered as ``DC_NAMES``) per active entity."""

    t: float
    entity_ids: np.ndarray
    entity_pos: np.ndarray
    values: np.ndarray

    def as_dict(self) -> dict[int, tuple[float, ...]]:
        return {int(i): tuple(float(v) for v in row) for i, row in zip(self.entity_ids, self.values)}


def _local(g: NetworkGraph, t: float, scheme):
    view = active_subgraph(g, t)
    w = connection_weights(g, scheme)[view.connections]
    local = np.full(g.n_entities, -1, dtype=np.int64)
    local[view.entities] = np.arange(len(view.entities))
    rows = local[g.conn_seller[view.connections]]
    cols = local[g.conn_buyer[view.connections]]
    return view, w, rows, cols


def adjacency(g: NetworkGraph, t: float, scheme=WeightScheme.UNIT) -> AdjacencyMatrix:
    view, w, rows, cols = _local(g, t, scheme)
    n = len(view.entities)
    # coo -> csr sums duplicate (parallel) edges
    mat = sps.coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return AdjacencyMatrix(matrix=mat, entity_ids=g.entity_ids[view.entities], entity_pos=view.entities)


def centrality(g: NetworkGraph, t: float, scheme=WeightScheme.UNIT) -> CentralityFeatures:
    """All six measures at time ``t`` via sparse matrix algebra (memoised per graph)."""
    scheme = WeightScheme(scheme)
    return g.memo(("centrality", float(t), scheme), lambda: _centrality(g, float(t), scheme))


def _centrality(g: NetworkGraph, t: float, scheme: WeightScheme) -> CentralityFeatures:
    view, w, rows, cols = _local(g, t, scheme)
    n = len(view.entities)
    D = sps.coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    W2 = sps.coo_matrix((w * w, (rows, cols)), shape=(n, n)).tocsr()
    ones = np.ones(n)
    out1 = D @ ones
    in1 = D.T @ ones
    sq_out = W2 @ ones
    sq_in = W2.T @ ones
    values = np.column_stack([
        out1,
        in1,
        D @ out1,               # row sums of D @ D
        D.T @ in1,              # column sums of D @ D
        D.T @ out1 - sq_in,     # row sums of D.T @ D, k != k'
        D @ in1 - sq_out,       # row sums of D @ D.T, k != k'
    ]) if n else np.zeros((0, 6))
    return CentralityFeatures(t=t, entity_ids=g.entity_ids[view.entities],
                              entity_pos=view.entities, values=values)


def fodc(g: NetworkGraph, t: float, scheme=WeightScheme.UNIT) -> dict[int, tuple[float, float]]:
    """Map entity id -> (outward, inward) first-order centrality at ``t``."""
    cf = centrality(g, t, scheme)
    return {int(i): (float(r[0]), float(r[1])) for i, r in zip(cf.entity_ids, cf.values)}


def sodc(g: NetworkGraph, t: float, scheme=WeightScheme.UNIT) -> dict[int, tuple[float, float, float, float]]:
    """Map entity id -> (OO, II, IO, OI) second-order centrality at ``t``."""
    cf = centrality(g, t, scheme)
    return {int(i): tuple(float(v) for v in r[2:]) for i, r in zip(cf.entity_ids, cf.values)}


def centrality_for(g: NetworkGraph, t: float, entity_pos: np.ndarray, scheme=WeightScheme.UNIT) -> np.ndarray:
    """Rows of the six measures for graph positions ``entity_pos``; inactive entities get zeros."""
    cf = centrality(g, t, scheme)
    out = np.zeros((len(entity_pos), 6))
    if len(cf.entity_pos):
        idx = np.searchsorted(cf.entity_pos, entity_pos)
        idx_c = np.minimum(idx, len(cf.entity_pos) - 1)
        hit = cf.entity_pos[idx_c] == entity_pos
        out[hit] = cf.values[idx_c[hit]]
    return out
