"""Command-line entry point: ``tcinet <command> [options]``.

Exit status: 0 on success, 2 for schema or configuration errors, 3 for
I/O errors, 4 for numerical failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .centrality import WeightScheme
from .errors import NumericalError, TCIError, ValidationError
from .features import featurize_connections
from .graph import NetworkGraph, restrict
from .likelihood import ConnectionData
from .predict import sample_posterior, score
from .sem import FitConfig, FitResult, fit
from .synth import GenConfig, default_params, generate

log = logging.getLogger("tcinet")

EXIT_SCHEMA, EXIT_IO, EXIT_NUMERICAL = 2, 3, 4

# flag name -> (config key, parser)
_FIT_KEYS = {
    "iterations": int, "mh_steps": int, "retain": lambda v: tuple(int(x) for x in str(v).split(",")),
    "lambda": float, "seed": int, "threads": int, "weight_scheme": str, "pred_draws": int,
    "pred_sweeps": int, "tau": float, "holdout_from": float,
}


# -- option handling ---------------------------------------------------------------

def _settings(args) -> dict:
    """Config-file values overridden by explicit flags."""
    values = {}
    if getattr(args, "config", None):
        raw = io.read_config(args.config)
        unknown = set(raw) - set(_FIT_KEYS) - set(_GEN_KEYS)
        if unknown:
            raise ValidationError(f"{args.config}: unknown keys {sorted(unknown)}")
        for k, v in raw.items():
            parse = _FIT_KEYS.get(k) or _GEN_KEYS[k]
            try:
                values[k] = parse(v)
            except ValueError as exc:
                raise ValidationError(f"{args.config}: bad value for {k}: {v!r}") from exc
    for k in _FIT_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    return values


def _fit_config(s: dict, random_effects: bool = True) -> FitConfig:
    base = FitConfig()
    cfg = FitConfig(
        iterations=s.get("iterations", base.iterations),
        mh_steps=s.get("mh_steps", base.mh_steps),
        retain=tuple(s.get("retain", base.retain)),
        lam=s.get("lambda", base.lam),
        seed=s.get("seed", base.seed),
        workers=s.get("threads", 1),
        random_effects=random_effects,
    )
    return cfg.validate()


def _load_data(args, s: dict) -> NetworkGraph:
    if not args.data:
        raise ValidationError("--data is required")
    return io.read_dataset(args.data, s.get("tau"))


def _training_view(g: NetworkGraph, s: dict) -> tuple[NetworkGraph, np.ndarray]:
    cut = s.get("holdout_from")
    if cut is None:
        return g, np.ones(g.n_connections, dtype=bool)
    return restrict(g, cut)


# -- generate ------------------------------------------------------------------------

def _floats(v) -> list[float]:
    return [float(x) for x in str(v).split(",")]


_GEN_KEYS = {
    "n_entities": int, "n_policies": int, "n_connections": int, "years": int, "kappa": float,
    "claim_rate": float, "truncated_share": float, "multi_buyer_share": float,
    "balanced": lambda v: str(v).lower() in ("1", "true", "yes"),
    "beta": _floats, "nu": _floats, "psi": float, "rho": float,
    "claim_intercept": float, "gap_intercept": float,
}


def cmd_generate(args) -> int:
    s = _settings(args)
    params = default_params(s.get("claim_intercept", -3.5), s.get("gap_intercept", -0.5))
    for key in ("beta", "nu"):
        if key in s:
            if len(s[key]) != 3:
                raise ValidationError(f"{key} needs three comma-separated values")
            getattr(params, key)[:] = s[key]
    params = replace(params, psi=s.get("psi", params.psi), rho=s.get("rho", params.rho))
    gen_fields = {k: s[k] for k in ("n_entities", "n_policies", "n_connections", "years", "kappa",
                                    "claim_rate", "truncated_share", "multi_buyer_share", "balanced")
                  if k in s}
    cfg = GenConfig(params=params, seed=s.get("seed", 0), tau=s.get("tau"),
                    weight_scheme=s.get("weight_scheme", WeightScheme.UNIT.value), **gen_fields)
    g, truth = generate(cfg)
    out = io.write_dataset(g, args.out, truth)
    print(f"wrote {g.n_connections} connections ({int(truth.z.sum())} actual claims, "
          f"{int(g.conn_claim.sum())} observed) to {out}")
    return 0


# -- featurize -------------------------------------------------------------------------

def cmd_featurize(args) -> int:
    s = _settings(args)
    g = _load_data(args, s)
    design = featurize_connections(g, s.get("weight_scheme", WeightScheme.UNIT.value))
    df = design.to_frame(raw=not args.standardized)
    df.insert(1, "claim_flag", design.z_obs.astype(int))
    df.insert(2, "window", design.window)
    _write_csv(df, args.out)
    return 0


# -- fit --------------------------------------------------------------------------------

def _fit(g: NetworkGraph, s: dict, random_effects: bool = True) -> FitResult:
    design = featurize_connections(g, s.get("weight_scheme", WeightScheme.UNIT.value))
    return fit(design, _fit_config(s, random_effects))


def cmd_fit(args) -> int:
    s = _settings(args)
    g, _ = _training_view(_load_data(args, s), s)
    result = _fit(g, s, random_effects=not args.glm)
    if not args.out:
        raise ValidationError("--out is required")
    out = Path(args.out)
    io.save_model(result, out, io.fingerprint(g))
    result.trace.to_frame().to_csv(out.with_suffix(".trace.csv"), index=False, float_format="%.17g")
    print(result.coefficient_table().to_string(float_format=lambda v: f"{v: .4f}"))
    return 0


# -- predict / reserve / evaluate ---------------------------------------------------------

def _scored(args, s: dict, model: FitResult, doc: dict, g: NetworkGraph):
    """Posterior draws on the training view and the score report for the requested rows."""
    train, keep = _training_view(g, s)
    if io.fingerprint(train) != doc["dataset_fingerprint"]:
        raise ValidationError("dataset does not match the data the model was fitted on "
                              "(check --data, --tau and --holdout-from)")
    scaling = model.scaling
    design_train = featurize_connections(train, model.weight_scheme, scaling=scaling)
    if tuple(design_train.columns) != tuple(model.columns):
        raise ValidationError("model covariate layout does not match this dataset")
    data = ConnectionData.from_design(design_train)
    n_draws = s.get("pred_draws", 1000)
    draws = sample_posterior(model, data, n_draws=n_draws, n_sweeps=s.get("pred_sweeps", 2 * n_draws),
                             seed=s.get("seed"), workers=s.get("threads", 1))
    if s.get("holdout_from") is None:
        design = design_train
    else:
        design = featurize_connections(g, model.weight_scheme, scaling=scaling).subset(~keep)
    return score(model, design, draws), keep


def _load_model(args):
    if not args.model:
        raise ValidationError("--model is required")
    return io.load_model(args.model)


def cmd_predict(args) -> int:
    s = _settings(args)
    model, doc = _load_model(args)
    report, _ = _scored(args, s, model, doc, _load_data(args, s))
    _write_csv(report.to_frame(), args.out)
    return 0


def cmd_reserve(args) -> int:
    s = _settings(args)
    model, doc = _load_model(args)
    report, _ = _scored(args, s, model, doc, _load_data(args, s))
    print(f"open_connections\t{report.n_open}")
    print(f"reserve\t{report.reserve:.6f}")
    return 0


def _truth_for(args, g: NetworkGraph) -> pd.Series:
    src = args.truth or args.data
    truth = io.read_truth(src)
    z = truth.set_index("connection_id")["actual_claim"]
    missing = np.setdiff1d(g.conn_ids, z.index.to_numpy())
    if missing.size:
        raise ValidationError(f"truth sidecar lacks connection {missing[0]}")
    return z


def cmd_evaluate(args) -> int:
    s = _settings(args)
    model, doc = _load_model(args)
    g = _load_data(args, s)
    z_all = _truth_for(args, g)
    rows = []
    reports = {"glmm": _scored(args, s, model, doc, g)[0]}
    if model.random_effects:
        train, _ = _training_view(g, s)
        glm_s = dict(s, **{"lambda": model.config.lam, "iterations": model.config.iterations,
                           "seed": model.config.seed, "weight_scheme": model.weight_scheme})
        glm = _fit(train, glm_s, random_effects=False)
        reports["glm"] = _scored(args, s, glm, doc, g)[0]
    for name, rep in reports.items():
        z_true = z_all.loc[rep.conn_ids].to_numpy()
        for kind, value in rep.adev(z_true).items():
            rows.append({"model": name, "probability": kind, "adev": value})
        actual = int(np.sum((z_true == 1) & (rep.z_obs == 0)))
        rows.append({"model": name, "probability": "reserve", "adev": np.nan,
                     "estimate": rep.reserve, "actual_unreported": actual})
    table = pd.DataFrame(rows, columns=["model", "probability", "adev", "estimate", "actual_unreported"])
    _write_csv(table, args.out)
    return 0


# -- plumbing ---------------------------------------------------------------------------------

def _write_csv(df: pd.DataFrame, out) -> None:
    text = df.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcinet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads (never changes results)")
        p.add_argument("--weight-scheme", dest="weight_scheme", choices=[w.value for w in WeightScheme])
        p.add_argument("--tau", type=float, help="evaluation date in years from the dataset origin")
        p.add_argument("--out")
        return p

    p = add("generate", cmd_generate, "simulate a synthetic portfolio with ground truth")
    p = add("featurize", cmd_featurize, "write the design table")
    p.add_argument("--data")
    p.add_argument("--standardized", action="store_true", help="write standardised instead of raw values")
    for name, fn, help_ in (("fit", cmd_fit, "fit the model"),
                            ("predict", cmd_predict, "posterior claim probabilities"),
                            ("reserve", cmd_reserve, "expected number of unreported claims"),
                            ("evaluate", cmd_evaluate, "absolute deviance against ground truth")):
        p = add(name, fn, help_)
        p.add_argument("--data")
        p.add_argument("--holdout-from", dest="holdout_from", type=float,
                       help="train on policies starting before this time, score the rest")
        if name == "fit":
            p.add_argument("--iterations", type=int)
            p.add_argument("--mh-steps", dest="mh_steps", type=int)
            p.add_argument("--retain", type=_FIT_KEYS["retain"], help="comma-separated sweep indices")
            p.add_argument("--lambda", dest="lambda", type=float)
            p.add_argument("--glm", action="store_true", help="fit without latent effects")
        else:
            p.add_argument("--model")
            p.add_argument("--pred-draws", dest="pred_draws", type=int)
        if name == "evaluate":
            p.add_argument("--truth", help="truth sidecar (defaults to <data>/truth.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, TCIError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA if isinstance(exc, ValidationError) else exc.exit_code
    except (OSError, pd.errors.EmptyDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, ValueError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
