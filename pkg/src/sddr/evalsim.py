"""Synthetic-data generators, recovery metrics and the experiment harness.

Scenarios draw p features uniformly on (-1, 1) and build an additive
predictor from linear effects, a library of closed-form smooth shapes,
and optionally the product of all features as a high-order interaction.
Each smooth shape is analytically orthogonalized against {1, x} under
the U(-1, 1) design (via fixed Gauss-Legendre quadrature), so the
generator's linear coefficients are exactly the ones a constrained
additive fit should attribute to the linear terms.

`run_experiment` fits a configured model over replications, scores
held-out rows, measures effect recovery against the stored truth, and
aggregates medians and median absolute deviations into a deterministic
report (CSV + JSON). Replications are independent; `workers` (or the
SDDR_THREADS environment variable) runs them in parallel processes with
a deterministic ordered merge.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import special

from . import distributions as dist
from .design import Dataset
from .engine import FittedModel, fit, fit_config_from_dicts, write_json
from .formula import build_spec

TRUTH_GRID_SIZE = 200


# ---------------------------------------------------------------------------
# Smooth-shape library
# ---------------------------------------------------------------------------
SHAPES = {
    "sin_pi": lambda x: np.sin(np.pi * x),
    "square": lambda x: x ** 2,
    "abs": lambda x: np.abs(x),
    "tanh3": lambda x: np.tanh(3.0 * x),
    "cubic": lambda x: x ** 3,
    "cos_pi": lambda x: np.cos(np.pi * x),
    "sigmoid5": lambda x: special.expit(5.0 * x),
    "bump": lambda x: np.exp(-4.0 * x ** 2),
    "wave2": lambda x: np.sin(2.0 * np.pi * x),
    "curve15": lambda x: np.abs(x) ** 1.5,
}

_QUAD_NODES, _QUAD_WEIGHTS = np.polynomial.legendre.leggauss(200)
_ORTHO_CONSTANTS: dict[str, tuple[float, float]] = {}


def _ortho_constants(name: str) -> tuple[float, float]:
    """Intercept and slope of a shape under U(-1, 1), by quadrature."""
    if name not in _ORTHO_CONSTANTS:
        f = SHAPES[name](_QUAD_NODES)
        a = float(np.sum(_QUAD_WEIGHTS * f) / 2.0)
        b = float(np.sum(_QUAD_WEIGHTS * _QUAD_NODES * f) / 2.0 / (1.0 / 3.0))
        _ORTHO_CONSTANTS[name] = (a, b)
    return _ORTHO_CONSTANTS[name]


def centered_shape(name: str, x: np.ndarray) -> np.ndarray:
    """Shape with its U(-1, 1) mean and linear component removed."""
    if name not in SHAPES:
        raise KeyError(f"unknown shape '{name}', choose from {sorted(SHAPES)}")
    a, b = _ortho_constants(name)
    return SHAPES[name](np.asarray(x, dtype=float)) - a - b * np.asarray(x, dtype=float)


def default_shapes(p: int) -> list[str]:
    names = list(SHAPES)
    return [names[j % len(names)] for j in range(p)]


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------
@dataclass
class Scenario:
    """One synthetic design: generator settings plus the model to fit."""

    name: str
    n: int
    p: int
    family: str
    seed: int
    beta: list[float]
    shapes: list[str]
    smooth_amplitude: float = 1.0
    interaction: bool = True
    scale_intercept: float = 0.0  # second predictor's intercept (e.g. log sigma)
    scale_beta: dict[int, float] = field(default_factory=dict)
    scale_shapes: dict[int, list] = field(default_factory=dict)  # j -> [shape, amp]
    noiseless: bool = False  # y is the location parameter itself (normal only)
    test_fraction: float = 0.0
    model: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "p": self.p,
            "family": self.family,
            "seed": self.seed,
            "beta": [float(b) for b in self.beta],
            "shapes": list(self.shapes),
            "smooth_amplitude": self.smooth_amplitude,
            "interaction": self.interaction,
            "scale_intercept": self.scale_intercept,
            "scale_beta": {str(k): float(v) for k, v in self.scale_beta.items()},
            "scale_shapes": {str(k): list(v) for k, v in self.scale_shapes.items()},
            "noiseless": self.noiseless,
            "test_fraction": self.test_fraction,
            "model": self.model,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["scale_beta"] = {int(k): float(v) for k, v in d.get("scale_beta", {}).items()}
        d["scale_shapes"] = {int(k): list(v) for k, v in d.get("scale_shapes", {}).items()}
        return cls(**d)


def list_scenarios() -> list[str]:
    """Names of the scenario definitions shipped with the package."""
    names = []
    for entry in resources.files("sddr").joinpath("scenarios").iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[:-5])
    return sorted(names)


def load_scenario(name_or_path) -> Scenario:
    """Load a shipped scenario by name, or any scenario JSON by path."""
    path = os.fspath(name_or_path)
    if os.path.exists(path):
        with open(path) as fh:
            return Scenario.from_dict(json.load(fh))
    candidate = resources.files("sddr").joinpath("scenarios").joinpath(path + ".json")
    if candidate.is_file():
        return Scenario.from_dict(json.loads(candidate.read_text()))
    raise FileNotFoundError(
        f"no scenario '{name_or_path}'; shipped scenarios: {', '.join(list_scenarios())}"
    )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------
def _predictors(scenario: Scenario, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    eta1 = X @ np.asarray(scenario.beta, dtype=float)
    for j, shape in enumerate(scenario.shapes):
        eta1 = eta1 + scenario.smooth_amplitude * centered_shape(shape, X[:, j])
    if scenario.interaction:
        eta1 = eta1 + np.prod(X, axis=1)
    eta2 = np.full(X.shape[0], float(scenario.scale_intercept))
    for j, coef in scenario.scale_beta.items():
        eta2 = eta2 + coef * X[:, j]
    for j, (shape, amp) in scenario.scale_shapes.items():
        eta2 = eta2 + float(amp) * centered_shape(shape, X[:, j])
    return eta1, eta2


def generate(scenario: Scenario, seed: int | None = None) -> tuple[Dataset, dict]:
    """Draw one dataset plus its ground-truth record.

    The truth holds the linear coefficients, each centered smooth on an
    equispaced grid, and the realized predictor values.
    """
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    X = rng.uniform(-1.0, 1.0, size=(scenario.n, scenario.p))
    eta1, eta2 = _predictors(scenario, X)
    family = dist.get_family(scenario.family)
    theta, _ = family.theta_from_eta(
        [eta1, eta2][: family.n_parameters]
    )
    if scenario.noiseless:
        if scenario.family != "normal":
            raise ValueError("noiseless generation is defined for the normal family only")
        y = eta1.copy()
    else:
        y = family.sample(rng, theta)
    columns = {"y": y}
    for j in range(scenario.p):
        columns[f"x{j + 1}"] = X[:, j]
    data = Dataset.from_columns(columns)
    grid = np.linspace(-1.0, 1.0, TRUTH_GRID_SIZE)
    truth = {
        "scenario": scenario.name,
        "family": scenario.family,
        "beta": {f"x{j + 1}": float(b) for j, b in enumerate(scenario.beta)},
        "grid": grid.tolist(),
        "smooths": {
            f"x{j + 1}": (scenario.smooth_amplitude * centered_shape(shape, grid)).tolist()
            for j, shape in enumerate(scenario.shapes)
        },
        "eta": eta1.tolist(),
    }
    return data, truth


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def effect_rmse(model: FittedModel, truth: dict) -> dict:
    """Recovery error of linear weights and smooth curves vs the truth.

    Linear: ||w_hat - beta|| / sqrt(p). Smooth: RMSE on the truth grid
    after centering both curves (their level is not identified).
    """
    beta = truth["beta"]
    errors = []
    for feat, b in beta.items():
        eff = model.partial_effects(feat, parameter=0)
        if eff.slope is None:
            raise KeyError(f"term '{feat}' is not linear in the fitted model")
        errors.append(eff.slope - float(b))
    linear_rmse = float(np.sqrt(np.mean(np.square(errors)))) if errors else 0.0

    grid = np.asarray(truth.get("grid", []), dtype=float)
    smooth_rmse = {}
    for feat, values in truth.get("smooths", {}).items():
        eff = model.partial_effects(f"s({feat})", grid=grid, parameter=0)
        fitted = eff.values - np.mean(eff.values)
        target = np.asarray(values, dtype=float)
        target = target - np.mean(target)
        smooth_rmse[feat] = float(np.sqrt(np.mean((fitted - target) ** 2)))
    out = {"linear_rmse": linear_rmse, "smooth_rmse": smooth_rmse}
    if smooth_rmse:
        out["smooth_rmse_mean"] = float(np.mean(list(smooth_rmse.values())))
    return out


def _median_mad(values: list[float]) -> tuple[float | None, float | None]:
    vals = np.asarray([v for v in values if v is not None], dtype=float)
    if vals.size == 0:
        return None, None
    med = float(np.median(vals))
    return med, float(np.median(np.abs(vals - med)))


# ---------------------------------------------------------------------------
# Experiment harness
# ---------------------------------------------------------------------------
def _run_replication(scenario: Scenario, rep: int, overrides: dict | None) -> dict:
    row = {"scenario": scenario.name, "replication": rep, "failed": False, "error": None,
           "log_score": None, "linear_rmse": None, "smooth_rmse_mean": None}
    try:
        data, truth = generate(scenario, seed=scenario.seed + 1009 * rep)
        model_cfg = dict(scenario.model)
        if overrides:
            model_cfg.update(overrides)
        spec = build_spec(
            model_cfg["formulas"], scenario.family, model_cfg.get("trunks", {})
        )
        optimizer = dict(model_cfg.get("optimizer", {}))
        optimizer["seed"] = int(optimizer.get("seed", 0)) + rep
        config = fit_config_from_dicts(
            optimizer, model_cfg.get("smoothing"),
            orthogonalize=model_cfg.get("orthogonalize", True),
        )
        if scenario.test_fraction > 0:
            rng = np.random.default_rng(scenario.seed + 7919 * rep)
            perm = rng.permutation(data.n)
            n_test = int(round(scenario.test_fraction * data.n))
            test_rows = np.sort(perm[:n_test])
            train_rows = np.sort(perm[n_test:])
            train, test = data.take(train_rows), data.take(test_rows)
        else:
            train, test = data, None
        model = fit(spec, train, config)
        if test is not None:
            row["log_score"] = model.log_score(test)
        rmse = effect_rmse(model, truth)
        row["linear_rmse"] = rmse["linear_rmse"]
        row["smooth_rmse_mean"] = rmse.get("smooth_rmse_mean")
    except Exception as exc:  # recorded per replication, not fatal
        row["failed"] = True
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SDDR_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(scenarios, replications: int, out_dir=None,
                   workers: int | None = None, overrides: dict | None = None) -> dict:
    """Fit every scenario `replications` times and aggregate a report.

    Returns {"rows": per-replication records, "summary": per-scenario
    medians and MADs}; when `out_dir` is given, writes report.json and
    report.csv there. Identical scenario seeds produce byte-identical
    reports regardless of `workers`.
    """
    scenarios = [load_scenario(s) if not isinstance(s, Scenario) else s for s in scenarios]
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(sc, rep) for sc in scenarios for rep in range(replications)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_replication, [j[0] for j in jobs],
                                 [j[1] for j in jobs], [overrides] * len(jobs)))
    else:
        rows = [_run_replication(sc, rep, overrides) for sc, rep in jobs]

    summary = []
    for sc in scenarios:
        sub = [r for r in rows if r["scenario"] == sc.name]
        ok = [r for r in sub if not r["failed"]]
        ls_med, ls_mad = _median_mad([r["log_score"] for r in ok])
        lr_med, lr_mad = _median_mad([r["linear_rmse"] for r in ok])
        sr_med, sr_mad = _median_mad([r["smooth_rmse_mean"] for r in ok])
        summary.append({
            "scenario": sc.name,
            "replications": len(sub),
            "failures": len(sub) - len(ok),
            "log_score_median": ls_med,
            "log_score_mad": ls_mad,
            "linear_rmse_median": lr_med,
            "linear_rmse_mad": lr_mad,
            "smooth_rmse_median": sr_med,
            "smooth_rmse_mad": sr_mad,
        })
    report = {"rows": rows, "summary": summary}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "report.json"), report)
        with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(summary[0].keys()))
            writer.writeheader()
            writer.writerows(summary)
    return report


def dataset_to_csv(data: Dataset, path):
    """Write a Dataset to CSV with full-precision floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(data.names)
        cols = []
        for name in data.names:
            if name in data._numeric:
                cols.append([repr(float(v)) for v in data._numeric[name]])
            else:
                cols.append(list(data._strings[name]))
        for row in zip(*cols):
            writer.writerow(row)
