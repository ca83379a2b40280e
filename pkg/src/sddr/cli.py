"""Command-line interface: fit, predict, partials, evaluate, simulate, families.

Configuration and model files are JSON; row data is CSV. All outputs are
written atomically (temp file then rename) and are byte-identical across
reruns with identical inputs and seeds. Exit codes: 0 success, 1 user
error, 2 numerical failure (divergence), 3 internal error. The
environment variable SDDR_THREADS caps replication parallelism in the
experiment harness.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import jsonschema

from . import distributions as dist
from .design import DataError, Dataset, DesignError, load_dataset
from .engine import (
    DivergenceError,
    FittedModel,
    fit as engine_fit,
    fit_config_from_dicts,
    write_json,
)
from .evalsim import dataset_to_csv, effect_rmse, generate, list_scenarios, load_scenario
from .formula import FormulaError, build_spec
from .smoothing import SmoothingError

_POSITIVE_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "formulas"],
    "properties": {
        "family": {"type": "string"},
        "formulas": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "trunks": {
            "type": "object",
            "additionalProperties": {
                "oneOf": [
                    {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["units"],
                        "properties": {
                            "units": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
                            "activation": {"enum": ["relu", "tanh"]},
                        },
                    },
                ]
            },
        },
        "smoothing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "default_df": {"type": "number", "exclusiveMinimum": 0},
                "n_knots": _POSITIVE_INT,
                "degree": {"type": "integer", "minimum": 0},
                "penalty_order": _POSITIVE_INT,
                "tensor_n_knots": _POSITIVE_INT,
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"oneOf": [_POSITIVE_INT, {"type": "null"}]},
                "seed": {"type": "integer"},
                "early_stopping": {"type": "boolean"},
                "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "patience": _POSITIVE_INT,
            },
        },
        "no_orthogonalization": {"type": "boolean"},
        "data": {"type": "string"},
        "model": {"type": "string"},
        "output_dir": {"type": "string"},
    },
}


class UserError(ValueError):
    """Invalid input from the command line or config files."""


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise UserError(f"cannot read config '{path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"config '{path}' is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "top level"
        raise UserError(f"invalid config at {where}: {exc.message}") from exc
    return config


def _write_text(path: str, text: str):
    directory = os.path.dirname(os.fspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------
def cmd_fit(args) -> int:
    config = _load_config(args.config)
    data_path = args.data or config.get("data")
    if not data_path:
        raise UserError("no data file: pass --data or set 'data' in the config")
    out_dir = args.out or config.get("output_dir") or "."
    model_path = args.model or config.get("model") or os.path.join(out_dir, "model.json")
    diag_path = os.path.join(os.path.dirname(model_path) or ".", "diagnostics.json")

    data = load_dataset(data_path)
    spec = build_spec(config["formulas"], config["family"], config.get("trunks", {}))
    optimizer = dict(config.get("optimizer", {}))
    if args.seed is not None:
        optimizer["seed"] = args.seed
    orthogonalize = not (args.no_orthogonalization or config.get("no_orthogonalization", False))
    fit_config = fit_config_from_dicts(optimizer, config.get("smoothing"), orthogonalize)

    model = engine_fit(spec, data, fit_config)
    os.makedirs(os.path.dirname(model_path) or ".", exist_ok=True)
    model.save(model_path)
    write_json(diag_path, model.diagnostics)
    print(f"wrote {model_path} and {diag_path}")
    return 0


def _parse_quantiles(text: str | None) -> list[float]:
    if not text:
        return []
    try:
        probs = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise UserError(f"bad quantile list '{text}'") from exc
    for p in probs:
        if not (0.0 < p < 1.0):
            raise UserError(f"quantile {p} is outside (0, 1)")
    return probs


def cmd_predict(args) -> int:
    model = FittedModel.load(args.model)
    data = load_dataset(args.data)
    probs = _parse_quantiles(args.quantiles)
    result = model.predict(data)
    if result.unseen_groups:
        print(
            f"warning: {result.unseen_groups} rows with unseen random-effect "
            "groups were mapped to a zero effect",
            file=sys.stderr,
        )
    header = list(result.parameter_names) + [f"q{p}" for p in probs]
    columns = [result.theta[:, k] for k in range(result.theta.shape[1])]
    columns += [result.quantile(p) for p in probs]
    lines = [",".join(header)]
    for i in range(data.n):
        lines.append(",".join(_fmt(col[i]) for col in columns))
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_partials(args) -> int:
    import numpy as np

    model = FittedModel.load(args.model)
    try:
        effect = model.partial_effects(args.term, grid_size=args.grid, parameter=args.param)
    except KeyError as exc:
        raise UserError(str(exc)) from exc
    if effect.kind == "tensor":
        header = ["grid_a", "grid_b", "effect", "exp_effect"]
        rows = zip(effect.grid, effect.grid_b, effect.values, np.exp(effect.values))
    elif effect.kind == "random_effect":
        header = ["level", "effect", "exp_effect"]
        rows = zip(effect.levels, effect.values, np.exp(effect.values))
    elif effect.kind == "intercept":
        header = ["effect", "exp_effect"]
        rows = [(effect.values[0], np.exp(effect.values[0]))]
    else:
        header = ["grid", "effect", "exp_effect"]
        rows = zip(effect.grid, effect.values, np.exp(effect.values))
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else _fmt(v) for v in row))
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model = FittedModel.load(args.model)
    data = load_dataset(args.data)
    metrics = {"log_score": model.log_score(data), "n_rows": data.n}
    if args.truth:
        try:
            with open(args.truth) as fh:
                truth = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UserError(f"cannot read truth sidecar '{args.truth}': {exc}") from exc
        metrics.update(effect_rmse(model, truth))
    if args.out:
        write_json(args.out, metrics)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    data, truth = generate(scenario, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    dataset_to_csv(data, os.path.join(args.out, "data.csv"))
    write_json(os.path.join(args.out, "truth.json"), truth)
    print(f"wrote {args.out}/data.csv and {args.out}/truth.json")
    return 0


def cmd_families(args) -> int:
    for fam in dist.list_families():
        params = ", ".join(
            f"{name} ({link})" for name, link in zip(fam["parameters"], fam["links"])
        )
        print(f"{fam['name']}: {fam['n_parameters']} parameter(s): {params}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sddr",
        description="Semi-structured distributional regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="CSV data file (overrides config)")
    p.add_argument("--model", help="output model path (default <out>/model.json)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the optimizer seed")
    p.add_argument("--no-orthogonalization", action="store_true",
                   help="disable the orthogonalization cell (ablation)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict distribution parameters and quantiles")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quantiles", help="comma-separated probabilities, e.g. 0.1,0.5,0.9")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("partials", help="emit a structured term's effect curve")
    p.add_argument("--model", required=True)
    p.add_argument("--term", required=True, help="e.g. \"s(z1)\" or \"x1\"")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--param", type=int, default=None,
                   help="parameter index to search (default: first match)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partials)

    p = sub.add_parser("evaluate", help="log-score (and RMSEs with a truth sidecar)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--truth", help="truth.json sidecar from simulate")
    p.add_argument("--out", help="write metrics JSON here instead of stdout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="generate a scenario dataset + truth sidecar")
    p.add_argument("--scenario", required=True,
                   help=f"name or path; shipped: {', '.join(list_scenarios())}")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("families", help="list available distribution families")
    p.set_defaults(func=cmd_families)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UserError, FormulaError, DataError, DesignError, SmoothingError,
            dist.SupportError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, dist.NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - internal invariant violations
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
