"""Trade credit network data model.

A dataset is a directed multigraph: entities are nodes, each policy is a star
from one seller to one or more buyers, and each insured seller->buyer pair
under a policy is a connection (edge).  All times are fractional years
measured from a dataset-level origin date.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Iterable

import numpy as np
import pandas as pd

from .errors import ValidationError

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.25

BUSINESS_TYPES = ("llc", "sole_proprietorship", "unspecified_corporation", "acc", "listed")
INDUSTRIES = ("manufacturing", "wholesale", "professional_services", "others")
SALES_BUCKETS = ("small", "medium", "large", "not_available")
POLICY_TYPES = ("single-buyer", "multiple-buyer")

ENTITY_COLUMNS = ("id", "year", "business_type", "industry", "business_age", "annual_sales_bucket")
POLICY_COLUMNS = ("id", "seller_id", "start", "end", "policy_type", "total_insured_amount",
                  "avg_turnover_ratio")
CONNECTION_COLUMNS = ("id", "policy_id", "buyer_id", "insured_amount", "turnover_ratio",
                      "claim_flag", "claim_gap")


def to_years(d: date, origin: date) -> float:
    return (d - origin).days / DAYS_PER_YEAR


def to_date(t: float, origin: date) -> date:
    return origin + timedelta(days=int(round(t * DAYS_PER_YEAR)))


def observe(z, t, start, tau):
    """Apply the administrative cut-off at evaluation date ``tau``.

    A claim is observed only if it is reported no later than ``tau``, i.e.
    when its reporting gap is within the window ``tau - start``.  Works on
    scalars and arrays; returns ``(z_obs, t_obs)`` with ``t_obs = inf`` for
    every connection without an observed claim.
    """
    z = np.asarray(z)
    t = np.asarray(t, dtype=float)
    within = t <= np.asarray(tau, dtype=float) - np.asarray(start, dtype=float)
    z_obs = np.where(within, z, 0).astype(int)
    t_obs = np.where(within & (z == 1), t, np.inf)
    if z_obs.ndim == 0:
        return int(z_obs), float(t_obs)
    return z_obs, t_obs


@dataclass(frozen=True)
class ActiveView:
    """Positions (not ids) of the entities, policies and connections active at ``t``."""

    t: float
    entities: np.ndarray
    policies: np.ndarray
    connections: np.ndarray


def _csr_index(keys: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(keys, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(keys, minlength=n), out=indptr[1:])
    return indptr, order


class NetworkGraph:
    """Immutable network of entities, policies and connections.

    Entity, policy and connection records are stored column-wise in arrays
    sorted by id; cross references (seller, buyer, policy) are stored as
    positions into those arrays.  The inverted indexes ``by_buyer``,
    ``by_seller`` and ``by_policy`` are CSR pairs ``(indptr, order)``.
    """

    def __init__(self, *, entity_table: pd.DataFrame, entity_ids: np.ndarray,
                 policy_ids, policy_seller, policy_start, policy_end, policy_multi,
                 policy_total_insured, policy_turnover,
                 conn_ids, conn_policy, conn_buyer, conn_insured, conn_turnover,
                 conn_claim, conn_gap, tau: float, origin: date):
        self.entity_table = entity_table
        self.entity_ids = entity_ids
        self.policy_ids = policy_ids
        self.policy_seller = policy_seller
        self.policy_start = policy_start
        self.policy_end = policy_end
        self.policy_multi = policy_multi
        self.policy_total_insured = policy_total_insured
        self.policy_turnover = policy_turnover
        self.conn_ids = conn_ids
        self.conn_policy = conn_policy
        self.conn_buyer = conn_buyer
        self.conn_seller = policy_seller[conn_policy]
        self.conn_insured = conn_insured
        self.conn_turnover = conn_turnover
        self.conn_claim = conn_claim
        self.conn_gap = conn_gap
        self.tau = float(tau)
        self.origin = origin
        self.by_buyer = _csr_index(self.conn_buyer, self.n_entities)
        self.by_seller = _csr_index(self.conn_seller, self.n_entities)
        self.by_policy = _csr_index(self.conn_policy, self.n_policies)
        for arr in self.__dict__.values():
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)
        self._cache: dict = {}
        self._cache_lock = threading.Lock()

    # sizes -------------------------------------------------------------
    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def n_policies(self) -> int:
        return len(self.policy_ids)

    @property
    def n_connections(self) -> int:
        return len(self.conn_ids)

    @property
    def window(self) -> np.ndarray:
        """Truncation window ``tau - start`` of every connection."""
        return self.tau - self.policy_start[self.conn_policy]

    @property
    def conn_start(self) -> np.ndarray:
        return self.policy_start[self.conn_policy]

    # inverted indexes ----------------------------------------------------
    @staticmethod
    def _lookup(index, pos: int) -> np.ndarray:
        indptr, order = index
        return order[indptr[pos]:indptr[pos + 1]]

    def connections_of_buyer(self, pos: int) -> np.ndarray:
        return self._lookup(self.by_buyer, pos)

    def connections_of_seller(self, pos: int) -> np.ndarray:
        return self._lookup(self.by_seller, pos)

    def connections_of_policy(self, pos: int) -> np.ndarray:
        return self._lookup(self.by_policy, pos)

    def policy_buyers(self, pos: int) -> np.ndarray:
        return np.unique(self.conn_buyer[self.connections_of_policy(pos)])

    def entity_pos(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        pos = np.searchsorted(self.entity_ids, ids)
        pos = np.minimum(pos, max(self.n_entities - 1, 0))
        if self.n_entities == 0 or np.any(self.entity_ids[pos] != ids):
            raise KeyError("unknown entity id")
        return pos

    # time ---------------------------------------------------------------
    def year_of(self, t) -> np.ndarray:
        """Calendar year containing time ``t`` (array-valued)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo = self.origin.year - 1
        hi = self.origin.year + int(np.ceil(np.max(t, initial=0.0))) + 2
        years = np.arange(lo, hi + 1)
        starts = np.array([to_years(date(int(y), 1, 1), self.origin) for y in years])
        return years[np.searchsorted(starts, t, side="right") - 1]

    def memo(self, key, compute):
        """Read-mostly cache for derived quantities keyed by ``key``."""
        try:
            return self._cache[key]
        except KeyError:
            pass
        value = compute()
        with self._cache_lock:
            self._cache.setdefault(key, value)
        return self._cache[key]

    # serialization helpers ----------------------------------------------
    def to_frames(self) -> tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
        policies = pd.DataFrame({
            "id": self.policy_ids,
            "seller_id": self.entity_ids[self.policy_seller],
            "start": self.policy_start,
            "end": self.policy_end,
            "policy_type": np.where(self.policy_multi, POLICY_TYPES[1], POLICY_TYPES[0]),
            "total_insured_amount": self.policy_total_insured,
            "avg_turnover_ratio": self.policy_turnover,
        })
        connections = pd.DataFrame({
            "id": self.conn_ids,
            "policy_id": self.policy_ids[self.conn_policy],
            "buyer_id": self.entity_ids[self.conn_buyer],
            "insured_amount": self.conn_insured,
            "turnover_ratio": self.conn_turnover,
            "claim_flag": self.conn_claim,
            "claim_gap": self.conn_gap,
        })
        return self.entity_table.copy(), policies, connections

    def equals(self, other: "NetworkGraph") -> bool:
        if self.tau != other.tau or self.origin != other.origin:
            return False
        for a, b in zip(self.to_frames(), other.to_frames()):
            if not a.reset_index(drop=True).equals(b.reset_index(drop=True)):
                return False
        return True

    def __repr__(self) -> str:
        return (f"NetworkGraph(entities={self.n_entities}, policies={self.n_policies}, "
                f"connections={self.n_connections}, tau={self.tau:g})")


def _frame(rows, columns: Iterable[str], name: str) -> pd.DataFrame:
    df = rows.copy() if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    if df.empty:
        df = pd.DataFrame({c: pd.Series(dtype=object) for c in columns})
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ValidationError(f"{name}: missing columns {missing}")
    return df.reset_index(drop=True)


def _check_unique(ids: np.ndarray, name: str) -> None:
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise ValidationError(f"{name}: duplicate id {uniq[counts > 1][0]}")


def _check_ids(values, name: str) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: ids must be integers") from exc
    if arr.size and (np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr != np.round(arr))):
        bad = int(np.flatnonzero(~np.isfinite(arr) | (arr < 0) | (arr != np.round(arr)))[0])
        raise ValidationError(f"{name} row {bad}: ids must be non-negative integers")
    return arr.astype(np.int64)


def _positive(values, name: str, column: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    bad = np.flatnonzero(~(arr > 0) | ~np.isfinite(arr))
    if bad.size:
        raise ValidationError(f"{name} row {bad[0]}: {column} must be positive, got {arr[bad[0]]}")
    return arr


def _resolve(ids: np.ndarray, table: np.ndarray, name: str, column: str) -> np.ndarray:
    pos = np.searchsorted(table, ids)
    pos_c = np.minimum(pos, max(len(table) - 1, 0))
    bad = np.flatnonzero((pos >= len(table)) | (table[pos_c] != ids)) if len(table) else \
        np.arange(len(ids))
    if bad.size:
        raise ValidationError(f"{name} row {bad[0]}: unknown {column} {ids[bad[0]]}")
    return pos_c


def _categories(values, allowed, name: str, column: str) -> np.ndarray:
    arr = np.asarray(values, dtype=object)
    ok = np.isin(arr, allowed)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise ValidationError(f"{name} row {bad}: unknown {column} {arr[bad]!r}")
    return arr.astype(str)


def build_graph(entity_rows, policy_rows, connection_rows, tau: float,
                origin: date = date(2015, 1, 1)) -> NetworkGraph:
    """Validate raw records and assemble a :class:`NetworkGraph`.

    Policy ``start``/``end`` and connection ``claim_gap`` are in years (the
    CSV loader converts calendar dates).  ``claim_gap`` is ``inf`` or NaN for
    connections without an observed claim.

    Raises
    ------
    ValidationError
        On dangling references, duplicate ids, self-loops, unknown
        categories, non-positive amounts, inconsistent policy types, or an
        observed claim reported outside its truncation window.
    """
    ent = _frame(entity_rows, ENTITY_COLUMNS, "entities")
    pol = _frame(policy_rows, POLICY_COLUMNS, "policies")
    con = _frame(connection_rows, CONNECTION_COLUMNS, "connections")
    tau = float(tau)

    # entities: one row per (id, year)
    e_id = _check_ids(ent["id"], "entities")
    e_year = _check_ids(ent["year"], "entities") if len(ent) else np.zeros(0, np.int64)
    dup = pd.DataFrame({"id": e_id, "year": e_year}).duplicated()
    if dup.any():
        bad = int(np.flatnonzero(dup.to_numpy())[0])
        raise ValidationError(f"entities row {bad}: duplicate (id, year) ({e_id[bad]}, {e_year[bad]})")
    age = np.asarray(ent["business_age"], dtype=float)
    if np.any(~(age >= 0)):
        bad = int(np.flatnonzero(~(age >= 0))[0])
        raise ValidationError(f"entities row {bad}: business_age must be >= 0")
    entity_table = pd.DataFrame({
        "id": e_id,
        "year": e_year,
        "business_type": _categories(ent["business_type"], BUSINESS_TYPES, "entities", "business_type"),
        "industry": _categories(ent["industry"], INDUSTRIES, "entities", "industry"),
        "business_age": age,
        "annual_sales_bucket": _categories(ent["annual_sales_bucket"], SALES_BUCKETS, "entities",
                                           "annual_sales_bucket"),
    }).sort_values(["id", "year"], kind="stable").reset_index(drop=True)
    entity_ids = np.unique(e_id)

    # policies
    p_id = _check_ids(pol["id"], "policies")
    _check_unique(p_id, "policies")
    p_order = np.argsort(p_id, kind="stable")
    pol = pol.iloc[p_order].reset_index(drop=True)
    p_id = p_id[p_order]
    p_seller = _resolve(_check_ids(pol["seller_id"], "policies"), entity_ids, "policies", "seller_id")
    start = np.asarray(pol["start"], dtype=float)
    end = np.asarray(pol["end"], dtype=float)
    bad = np.flatnonzero(~(start < end))
    if bad.size:
        raise ValidationError(f"policies row {bad[0]}: start must precede end")
    bad = np.flatnonzero(~((start >= 0) & (start < tau)))
    if bad.size:
        raise ValidationError(f"policies row {bad[0]}: start {start[bad[0]]:g} outside [0, tau={tau:g})")
    p_type = _categories(pol["policy_type"], POLICY_TYPES, "policies", "policy_type")
    p_multi = p_type == POLICY_TYPES[1]
    p_total = _positive(pol["total_insured_amount"], "policies", "total_insured_amount")
    p_turn = _positive(pol["avg_turnover_ratio"], "policies", "avg_turnover_ratio")

    # connections
    c_id = _check_ids(con["id"], "connections")
    _check_unique(c_id, "connections")
    c_order = np.argsort(c_id, kind="stable")
    con = con.iloc[c_order].reset_index(drop=True)
    c_id = c_id[c_order]
    c_policy = _resolve(_check_ids(con["policy_id"], "connections"), p_id, "connections", "policy_id")
    c_buyer = _resolve(_check_ids(con["buyer_id"], "connections"), entity_ids, "connections", "buyer_id")
    loops = np.flatnonzero(p_seller[c_policy] == c_buyer)
    if loops.size:
        raise ValidationError(
            f"connections row {loops[0]}: self-loop, buyer {entity_ids[c_buyer[loops[0]]]} "
            "is the policy's seller")
    c_insured = _positive(con["insured_amount"], "connections", "insured_amount")
    c_turn = _positive(con["turnover_ratio"], "connections", "turnover_ratio")
    claim = np.asarray(con["claim_flag"], dtype=float)
    if np.any(~np.isin(claim, (0, 1))):
        bad = int(np.flatnonzero(~np.isin(claim, (0, 1)))[0])
        raise ValidationError(f"connections row {bad}: claim_flag must be 0 or 1")
    claim = claim.astype(np.int8)
    gap = np.asarray(pd.to_numeric(con["claim_gap"], errors="coerce"), dtype=float)
    gap = np.where(np.isnan(gap), np.inf, gap)
    window = tau - start[c_policy]
    bad = np.flatnonzero((claim == 1) & ~((gap > 0) & (gap <= window)))
    if bad.size:
        k = bad[0]
        raise ValidationError(
            f"connections row {k}: observed claim gap {gap[k]:g} outside truncation window "
            f"(0, {window[k]:g}]")
    bad = np.flatnonzero((claim == 0) & np.isfinite(gap))
    if bad.size:
        raise ValidationError(f"connections row {bad[0]}: claim report without claim_flag")

    # policy type must agree with the buyer set
    n_buyers = np.zeros(len(p_id), dtype=np.int64)
    if len(c_id):
        pairs = np.unique(np.stack([c_policy, c_buyer], axis=1), axis=0)
        n_buyers = np.bincount(pairs[:, 0], minlength=len(p_id))
    bad = np.flatnonzero(n_buyers == 0)
    if bad.size:
        raise ValidationError(f"policies row {bad[0]}: policy {p_id[bad[0]]} has no connections")
    bad = np.flatnonzero(p_multi != (n_buyers > 1))
    if bad.size:
        j = bad[0]
        raise ValidationError(
            f"policies row {j}: policy_type {p_type[j]!r} inconsistent with {n_buyers[j]} buyer(s)")

    _warn_repeat_defaults(c_buyer, claim, start[c_policy], entity_ids)

    return NetworkGraph(
        entity_table=entity_table, entity_ids=entity_ids,
        policy_ids=p_id, policy_seller=p_seller, policy_start=start, policy_end=end,
        policy_multi=p_multi, policy_total_insured=p_total, policy_turnover=p_turn,
        conn_ids=c_id, conn_policy=c_policy, conn_buyer=c_buyer, conn_insured=c_insured,
        conn_turnover=c_turn, conn_claim=claim, conn_gap=gap, tau=tau, origin=origin)


def _warn_repeat_defaults(buyer, claim, start, entity_ids) -> None:
    # a buyer defaults at most once; claims spread over several policy years hint otherwise
    hit = claim == 1
    if not np.any(hit):
        return
    pairs = np.unique(np.stack([buyer[hit], np.floor(start[hit])], axis=1), axis=0)
    _, counts = np.unique(pairs[:, 0], return_counts=True)
    n = int(np.sum(counts > 1))
    if n:
        log.warning("%d buyer(s) have claims under policies starting in different years", n)


def active_subgraph(g: NetworkGraph, t: float) -> ActiveView:
    """Entities, policies and connections active at time ``t``.

    A policy is active when ``start < t <= end``; its connections and the
    entities they touch are active with it.
    """
    pol = np.flatnonzero((g.policy_start < t) & (t <= g.policy_end))
    mask = np.zeros(g.n_policies, dtype=bool)
    mask[pol] = True
    conn = np.flatnonzero(mask[g.conn_policy])
    ent = np.union1d(g.policy_seller[pol], g.conn_buyer[conn])
    return ActiveView(t=float(t), entities=ent.astype(np.int64), policies=pol, connections=conn)


def restrict(g: NetworkGraph, cutoff: float, z=None, t=None) -> tuple[NetworkGraph, np.ndarray]:
    """The portfolio as seen at ``cutoff``: policies starting earlier, outcomes re-observed.

    Outcomes default to the observed ones, which is exact because anything
    reported by ``cutoff`` was already reported by ``g.tau``.  Returns the
    restricted graph and the boolean mask of kept connections.
    """
    if cutoff > g.tau:
        raise ValidationError(f"cutoff {cutoff:g} is after the evaluation date {g.tau:g}")
    ent, pol, con = g.to_frames()
    keep_pol = pol["start"].to_numpy() < cutoff
    keep = keep_pol[g.conn_policy]
    z = g.conn_claim if z is None else np.asarray(z)
    t = g.conn_gap if t is None else np.asarray(t, dtype=float)
    z_obs, t_obs = observe(z[keep], t[keep], g.conn_start[keep], cutoff)
    con = con.loc[keep].copy()
    con["claim_flag"] = z_obs
    con["claim_gap"] = t_obs
    return build_graph(ent, pol.loc[keep_pol], con, tau=cutoff, origin=g.origin), keep
