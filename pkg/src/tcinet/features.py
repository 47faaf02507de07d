"""Per-connection design covariates.

Each connection gets an intercept, buyer-side and seller-side entity
covariates (including the six centrality measures) evaluated at its policy
start date, the policy covariates, and the connection covariates.
Continuous columns are z-scored with training-set statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .centrality import DC_NAMES, WeightScheme, centrality_for
from .errors import ValidationError
from .graph import BUSINESS_TYPES, INDUSTRIES, SALES_BUCKETS, NetworkGraph


def _entity_columns(prefix: str) -> list[str]:
    cols = [f"{prefix}_bt_{c}" for c in BUSINESS_TYPES[1:]]
    cols += [f"{prefix}_ind_{c}" for c in INDUSTRIES[1:]]
    cols += [f"{prefix}_age"]
    cols += [f"{prefix}_sales_{c}" for c in SALES_BUCKETS[1:]]
    cols += [f"{prefix}_{d}" for d in DC_NAMES]
    return cols


COLUMNS: tuple[str, ...] = tuple(
    ["intercept"] + _entity_columns("b") + _entity_columns("s")
    + ["p_total_insured", "p_turnover", "p_multiple", "c_insured", "c_turnover"])

CONTINUOUS: frozenset[str] = frozenset(
    [f"{s}_age" for s in "bs"] + [f"{s}_{d}" for s in "bs" for d in DC_NAMES]
    + ["p_total_insured", "p_turnover", "c_insured", "c_turnover"])


@dataclass(frozen=True)
class DesignTable:
    """Design rows for a set of connections plus their observed outcomes.

    ``X`` is the standardised design (first column the intercept); ``raw``
    holds the same columns before standardisation.  ``scaling`` maps every
    continuous column to its (mean, sd); a zero sd marks a constant column
    that standardises to 0.
    """

    columns: tuple[str, ...]
    X: np.ndarray
    raw: np.ndarray
    conn_ids: np.ndarray
    buyer_ids: np.ndarray
    seller_ids: np.ndarray
    policy_ids: np.ndarray
    start: np.ndarray
    window: np.ndarray
    z_obs: np.ndarray
    t_obs: np.ndarray
    scaling: dict = field(default_factory=dict)
    weight_scheme: str = WeightScheme.UNIT.value

    def __len__(self) -> int:
        return len(self.conn_ids)

    def subset(self, mask) -> "DesignTable":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return replace(self, X=self.X[idx], raw=self.raw[idx], conn_ids=self.conn_ids[idx],
                       buyer_ids=self.buyer_ids[idx], seller_ids=self.seller_ids[idx],
                       policy_ids=self.policy_ids[idx], start=self.start[idx],
                       window=self.window[idx], z_obs=self.z_obs[idx], t_obs=self.t_obs[idx])

    def column(self, name: str, raw: bool = False) -> np.ndarray:
        j = self.columns.index(name)
        return (self.raw if raw else self.X)[:, j]

    def to_frame(self, raw: bool = False) -> pd.DataFrame:
        df = pd.DataFrame(self.raw if raw else self.X, columns=list(self.columns))
        df.insert(0, "connection_id", self.conn_ids)
        return df


def fit_scaling(raw: np.ndarray, columns=COLUMNS) -> dict[str, tuple[float, float]]:
    scaling = {}
    for j, name in enumerate(columns):
        if name in CONTINUOUS:
            col = raw[:, j]
            sd = float(np.std(col)) if len(col) else 0.0
            scaling[name] = (float(np.mean(col)) if len(col) else 0.0, sd)
    return scaling


def apply_scaling(raw: np.ndarray, scaling: dict, columns=COLUMNS) -> np.ndarray:
    X = raw.copy()
    for j, name in enumerate(columns):
        if name in scaling:
            mean, sd = scaling[name]
            X[:, j] = (raw[:, j] - mean) / sd if sd > 0 else 0.0
    return X


def _entity_block(g: NetworkGraph, pos: np.ndarray, year: np.ndarray, t: np.ndarray,
                  scheme: WeightScheme, side: str) -> np.ndarray:
    n = len(pos)
    keys = pd.DataFrame({"id": g.entity_ids[pos], "year": year})
    merged = keys.merge(g.entity_table, on=["id", "year"], how="left", validate="many_to_one")
    missing = merged["business_type"].isna().to_numpy()
    if np.any(missing):
        k = int(np.flatnonzero(missing)[0])
        raise ValidationError(
            f"no {side} features for entity {keys['id'][k]} in year {keys['year'][k]}")
    bt = merged["business_type"].to_numpy()
    ind = merged["industry"].to_numpy()
    sales = merged["annual_sales_bucket"].to_numpy()
    parts = [np.column_stack([bt == c for c in BUSINESS_TYPES[1:]]),
             np.column_stack([ind == c for c in INDUSTRIES[1:]]),
             merged["business_age"].to_numpy(dtype=float)[:, None],
             np.column_stack([sales == c for c in SALES_BUCKETS[1:]])]
    dc = np.zeros((n, 6))
    for tu in np.unique(t):
        rows = np.flatnonzero(t == tu)
        dc[rows] = centrality_for(g, tu, pos[rows], scheme)
    parts.append(dc)
    return np.hstack([p.astype(float) for p in parts])


def featurize_connections(g: NetworkGraph, scheme=WeightScheme.UNIT, scaling: dict | None = None,
                          scaling_rows=None) -> DesignTable:
    """Assemble the design table for every connection of ``g``.

    Entity covariates and centralities are evaluated at the connection's own
    policy start date.  Scaling statistics come from ``scaling`` when given
    (prediction), otherwise from the rows selected by ``scaling_rows``
    (default: all rows).
    """
    scheme = WeightScheme(scheme)
    t = g.conn_start
    year = g.year_of(t) if len(t) else np.zeros(0, dtype=np.int64)
    buyer_block = _entity_block(g, g.conn_buyer, year, t, scheme, "buyer")
    seller_block = _entity_block(g, g.conn_seller, year, t, scheme, "seller")
    pol = g.conn_policy
    raw = np.hstack([
        np.ones((g.n_connections, 1)),
        buyer_block,
        seller_block,
        np.column_stack([g.policy_total_insured[pol], g.policy_turnover[pol],
                         g.policy_multi[pol].astype(float), g.conn_insured, g.conn_turnover])
        if g.n_connections else np.zeros((0, 5)),
    ])
    if scaling is None:
        rows = slice(None) if scaling_rows is None else scaling_rows
        scaling = fit_scaling(raw[rows])
    X = apply_scaling(raw, scaling)
    return DesignTable(
        columns=COLUMNS, X=X, raw=raw, conn_ids=g.conn_ids.copy(),
        buyer_ids=g.entity_ids[g.conn_buyer], seller_ids=g.entity_ids[g.conn_seller],
        policy_ids=g.policy_ids[pol], start=t.copy(), window=g.window.copy(),
        z_obs=g.conn_claim.astype(float), t_obs=g.conn_gap.copy(), scaling=dict(scaling),
        weight_scheme=scheme.value)
