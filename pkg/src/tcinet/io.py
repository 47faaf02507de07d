"""On-disk formats: the three-CSV dataset, truth sidecars, flat configs and model artifacts."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import fields
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ValidationError
from .graph import DAYS_PER_YEAR, NetworkGraph, build_graph
from .likelihood import LatentState, ParameterSet
from .sem import FitConfig, FitResult, SemTrace, parameter_names

SCHEMA_VERSION = 1
ENTITIES, POLICIES, CONNECTIONS = "entities.csv", "policies.csv", "connections.csv"
DATASET_CFG, TRUTH, TRUTH_PARAMS = "dataset.cfg", "truth.csv", "truth_params.json"


# -- flat key=value configs ---------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; keys use ``_`` or ``-`` interchangeably."""
    out = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


# -- dates -----------------------------------------------------------------------

def _iso(origin: date, t: float) -> str:
    return (origin + timedelta(days=int(round(t * DAYS_PER_YEAR)))).isoformat()


def _days(values, origin: date, name: str) -> np.ndarray:
    try:
        d = pd.to_datetime(pd.Series(values), format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{name}: dates must be ISO-8601") from exc
    return (d - pd.Timestamp(origin)).dt.days.to_numpy()


# -- datasets --------------------------------------------------------------------

def dataset_frames(g: NetworkGraph):
    ent, pol, con = g.to_frames()
    pol = pol.assign(start_date=[_iso(g.origin, t) for t in pol["start"]],
                     end_date=[_iso(g.origin, t) for t in pol["end"]])
    pol = pol[["id", "seller_id", "start_date", "end_date", "policy_type", "total_insured_amount",
               "avg_turnover_ratio"]]
    start = g.conn_start
    report = [_iso(g.origin, s + t) if np.isfinite(t) else "" for s, t in zip(start, con["claim_gap"])]
    con = con.assign(claim_report_date=report).drop(columns="claim_gap")
    return ent, pol, con


def write_dataset(g: NetworkGraph, out_dir, truth=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ent, pol, con = dataset_frames(g)
    ent.to_csv(out / ENTITIES, index=False)
    pol.to_csv(out / POLICIES, index=False)
    con.to_csv(out / CONNECTIONS, index=False)
    write_config(out / DATASET_CFG, {"tau": repr(g.tau), "origin": g.origin.isoformat()})
    if truth is not None:
        truth.sidecar(g).to_csv(out / TRUTH, index=False)
        from .features import COLUMNS

        (out / TRUTH_PARAMS).write_text(json.dumps(truth.params.as_dict(COLUMNS), indent=2))
    return out


def read_dataset(data_dir, tau: float | None = None) -> NetworkGraph:
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"no dataset directory {d}")
    cfg = read_config(d / DATASET_CFG) if (d / DATASET_CFG).exists() else {}
    origin = date.fromisoformat(cfg.get("origin", "2015-01-01"))
    if tau is None:
        if "tau" not in cfg:
            raise ValidationError("evaluation date unknown: pass --tau or provide dataset.cfg")
        tau = float(cfg["tau"])
    try:
        ent = pd.read_csv(d / ENTITIES)
        pol = pd.read_csv(d / POLICIES, dtype={"start_date": str, "end_date": str})
        con = pd.read_csv(d / CONNECTIONS, dtype={"claim_report_date": str}, keep_default_na=False,
                          na_values={"insured_amount": [""], "turnover_ratio": [""]})
    except pd.errors.ParserError as exc:
        raise ValidationError(f"malformed CSV in {d}: {exc}") from exc
    for df, cols, name in ((pol, ("start_date", "end_date"), POLICIES),
                           (con, ("claim_report_date", "claim_flag", "policy_id"), CONNECTIONS)):
        missing = [c for c in cols if c not in df.columns]
        if missing:
            raise ValidationError(f"{name}: missing columns {missing}")
    start_days = _days(pol["start_date"], origin, POLICIES)
    pol = pol.assign(start=start_days / DAYS_PER_YEAR, end=_days(pol["end_date"], origin, POLICIES) / DAYS_PER_YEAR)
    start_of = dict(zip(pol["id"], start_days))
    reported = con["claim_report_date"].astype(str).str.strip() != ""
    gap = np.full(len(con), np.inf)
    if reported.any():
        rep_days = _days(con.loc[reported, "claim_report_date"], origin, CONNECTIONS)
        starts = np.array([start_of.get(p, np.nan) for p in con.loc[reported, "policy_id"]], dtype=float)
        # whole-day differences keep gaps identical to the simulated ones
        gap[reported.to_numpy()] = (rep_days - starts) / DAYS_PER_YEAR
    con = con.assign(claim_gap=gap)
    return build_graph(ent, pol, con, tau=tau, origin=origin)


def read_truth(data_dir_or_file) -> pd.DataFrame:
    p = Path(data_dir_or_file)
    if p.is_dir():
        p = p / TRUTH
    df = pd.read_csv(p)
    need = {"connection_id", "actual_claim"}
    if not need <= set(df.columns):
        raise ValidationError(f"{p}: truth sidecar needs columns {sorted(need)}")
    return df


def fingerprint(g: NetworkGraph) -> str:
    h = hashlib.sha256()
    for frame in dataset_frames(g):
        h.update(frame.to_csv(index=False).encode())
    h.update(repr((g.tau, g.origin.isoformat())).encode())
    return h.hexdigest()


# -- model artifacts ----------------------------------------------------------------

def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=float)]


def model_document(result: FitResult, dataset_fingerprint: str) -> dict:
    cols = list(result.columns)
    return {
        "schema_version": SCHEMA_VERSION,
        "columns": cols,
        "parameters": result.params.as_dict(cols),
        "standard_errors": result.se.as_dict(cols),
        "scaling": {k: list(v) for k, v in result.scaling.items()},
        "weight_scheme": result.weight_scheme,
        "config": result.config.echo(),
        "seed": result.config.seed,
        "dataset_fingerprint": dataset_fingerprint,
        "converged": bool(result.converged),
        "latents": {
            "entity_ids": [int(i) for i in result.entity_ids],
            "buyer": _floats(result.latents.B),
            "seller": _floats(result.latents.S),
            "policy_ids": [int(i) for i in result.policy_ids],
            "policy": _floats(result.latents.P),
        },
    }


def dumps_model(result: FitResult, dataset_fingerprint: str) -> str:
    return json.dumps(model_document(result, dataset_fingerprint), indent=1, sort_keys=True) + "\n"


def save_model(result: FitResult, path, dataset_fingerprint: str) -> None:
    Path(path).write_text(dumps_model(result, dataset_fingerprint))


def load_model(path) -> tuple[FitResult, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not a model artifact ({exc})") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"{path}: unsupported schema version {doc.get('schema_version')!r}")
    cols = tuple(doc["columns"])
    cfg_fields = {f.name for f in fields(FitConfig)}
    config = FitConfig(**{k: v for k, v in doc["config"].items() if k in cfg_fields})
    lat = doc["latents"]
    result = FitResult(
        params=ParameterSet.from_dict(doc["parameters"], cols),
        se=ParameterSet.from_dict(_nan_safe(doc["standard_errors"]), cols),
        columns=cols,
        scaling={k: tuple(v) for k, v in doc["scaling"].items()},
        weight_scheme=doc["weight_scheme"],
        config=config,
        trace=SemTrace(names=parameter_names(cols)),
        latents=LatentState(np.array(lat["buyer"], dtype=float), np.array(lat["seller"], dtype=float),
                            np.array(lat["policy"], dtype=float)),
        entity_ids=np.array(lat["entity_ids"], dtype=np.int64),
        policy_ids=np.array(lat["policy_ids"], dtype=np.int64),
        converged=doc.get("converged", True),
    )
    return result, doc


def _nan_safe(d: dict) -> dict:
    # standard errors may be NaN (e.g. fixed latent block); ParameterSet needs psi > 0 only when validated
    return {k: (v if not isinstance(v, float) or not math.isnan(v) else float("nan")) for k, v in d.items()}
