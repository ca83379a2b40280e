"""Per-parameter computation graphs and the penalized training loop.

Each distribution parameter gets a graph: structured design blocks with a
weight vector, plus zero or more deep trunks whose latent features pass
through the orthogonalization cell before a linear head adds them to the
predictor. The objective is the mean negative log-likelihood plus the
quadratic penalties (penalty strengths fixed up front by the smoothing
calibration; the penalty is not divided by n).

Training is full-batch adaptive-moment descent by default, with the
contract that the recorded loss trace is non-increasing: a step that
increases the loss is rolled back and the learning rate halved.
Gradients are exact reverse-mode: the projection's backward pass is the
projection itself (a linear, symmetric map), and the penalty contributes
2 * lambda * S w.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import distributions as dist
from .design import (
    Dataset,
    DesignBlock,
    DesignConfig,
    ParameterDesign,
    build_design,
    bspline_design,
    evaluate_block_matrix,
    row_kron,
    CenterTransform,
)
from .formula import (
    Deep,
    Intercept,
    Linear,
    ModelSpec,
    RandomEffect,
    Smooth,
    TensorSmooth,
    TrunkSpec,
    build_spec,
)
from .ortho import (
    OrthoMap,
    Projector,
    apply_orthogonalization,
    build_projector,
    constraint_set,
    fit_ortho_map,
)
from .smoothing import calibrate_designs


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the loss trace."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class FitConfig:
    """Everything the optimizer and design builder need besides the data."""

    learning_rate: float = 0.01
    epochs: int = 2000
    batch_size: int | None = None
    seed: int = 0
    early_stopping: bool = False
    validation_fraction: float = 0.1
    patience: int = 50
    orthogonalize: bool = True
    default_df: float | None = None
    design: DesignConfig = field(default_factory=DesignConfig)


def fit_config_from_dicts(optimizer: dict | None = None, smoothing: dict | None = None,
                          orthogonalize: bool = True) -> FitConfig:
    """Build a FitConfig from optimizer/smoothing dicts (config files, scenarios)."""
    optimizer = dict(optimizer or {})
    smoothing = dict(smoothing or {})
    design = DesignConfig(
        n_knots=int(smoothing.pop("n_knots", 20)),
        degree=int(smoothing.pop("degree", 3)),
        penalty_order=int(smoothing.pop("penalty_order", 2)),
        tensor_n_knots=int(smoothing.pop("tensor_n_knots", 8)),
    )
    default_df = smoothing.pop("default_df", None)
    if smoothing:
        raise ValueError(f"unknown smoothing keys {sorted(smoothing)}")
    cfg = FitConfig(
        learning_rate=float(optimizer.pop("learning_rate", 0.01)),
        epochs=int(optimizer.pop("epochs", 2000)),
        batch_size=optimizer.pop("batch_size", None),
        seed=int(optimizer.pop("seed", 0)),
        early_stopping=bool(optimizer.pop("early_stopping", False)),
        validation_fraction=float(optimizer.pop("validation_fraction", 0.1)),
        patience=int(optimizer.pop("patience", 50)),
        orthogonalize=orthogonalize,
        default_df=None if default_df is None else float(default_df),
        design=design,
    )
    if cfg.batch_size is not None:
        cfg.batch_size = int(cfg.batch_size)
    if optimizer:
        raise ValueError(f"unknown optimizer keys {sorted(optimizer)}")
    return cfg


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class _TrunkRuntime:
    """One deep trunk instance: MLP weights, head, and its projection."""

    def __init__(self, term: Deep, spec: TrunkSpec, U: np.ndarray,
                 rng: np.random.Generator):
        self.term = term
        self.spec = spec
        self.U = U
        widths = [U.shape[1], *spec.units]
        self.W = [_glorot(rng, widths[i], widths[i + 1]) for i in range(len(spec.units))]
        self.b = [np.zeros(w) for w in spec.units]
        limit = np.sqrt(6.0 / (spec.units[-1] + 1))
        self.gamma = rng.uniform(-limit, limit, size=spec.units[-1])
        self.constraint_cols = np.zeros(0, dtype=int)
        self.projector: Projector | None = None
        self.param_base = -1  # index of W[0] in the flat parameter list

    def param_list(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.W, self.b):
            out.extend([W, b])
        out.append(self.gamma)
        return out

    def _activate(self, Z: np.ndarray) -> np.ndarray:
        if self.spec.activation == "relu":
            return np.maximum(Z, 0.0)
        return np.tanh(Z)

    def latent(self, rows: np.ndarray | None = None) -> tuple[np.ndarray, list]:
        """Latent features at the current weights, with layer caches."""
        A = self.U if rows is None else self.U[rows]
        acts = [A]
        for W, b in zip(self.W, self.b):
            A = self._activate(A @ W + b)
            acts.append(A)
        return A, acts

    def forward(self, rows: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
        latent, acts = self.latent(rows)
        if self.projector is not None:
            tilde = apply_orthogonalization(self.projector, latent, rows)
        else:
            tilde = latent
        return tilde @ self.gamma, {"acts": acts, "tilde": tilde}

    def backward(self, d_eta: np.ndarray, cache: dict, grads: list[np.ndarray],
                 rows: np.ndarray | None = None):
        acts, tilde = cache["acts"], cache["tilde"]
        grads[self.param_base + 2 * len(self.W)] += tilde.T @ d_eta
        dU = np.outer(d_eta, self.gamma)
        if self.projector is not None:
            dU = apply_orthogonalization(self.projector, dU, rows)
        dA = dU
        for layer in range(len(self.W) - 1, -1, -1):
            A_out = acts[layer + 1]
            if self.spec.activation == "relu":
                dZ = dA * (A_out > 0.0)
            else:
                dZ = dA * (1.0 - A_out ** 2)
            grads[self.param_base + 2 * layer] += acts[layer].T @ dZ
            grads[self.param_base + 2 * layer + 1] += dZ.sum(axis=0)
            dA = dZ @ self.W[layer].T


class _GraphRuntime:
    """Structured matrix, weights and trunks for one distribution parameter."""

    def __init__(self, design: ParameterDesign):
        self.design = design
        self.X = design.structured_matrix()
        self.slices = design.block_slices()
        self.w = np.zeros(self.X.shape[1])
        self.penalties: list[tuple[float, np.ndarray, slice]] = []
        self.trunks: list[_TrunkRuntime] = []
        self.w_idx = -1

    def forward(self, rows: np.ndarray | None = None) -> tuple[np.ndarray, list[dict]]:
        X = self.X if rows is None else self.X[rows]
        eta = X @ self.w
        caches = []
        for trunk in self.trunks:
            contrib, cache = trunk.forward(rows)
            eta = eta + contrib
            caches.append(cache)
        return eta, caches

    def penalty_value(self) -> float:
        total = 0.0
        for lam, S, sl in self.penalties:
            wj = self.w[sl]
            total += lam * float(wj @ S @ wj)
        return total

    def backward(self, d_eta: np.ndarray, caches: list[dict], grads: list[np.ndarray],
                 rows: np.ndarray | None = None):
        X = self.X if rows is None else self.X[rows]
        gw = grads[self.w_idx]
        gw += X.T @ d_eta
        for lam, S, sl in self.penalties:
            gw[sl] += 2.0 * lam * (S @ self.w[sl])
        for trunk, cache in zip(self.trunks, caches):
            trunk.backward(d_eta, cache, grads, rows)


class AssembledModel:
    """A model wired to its training data, ready for evaluation or fitting.

    Exposes `forward`, `loss` and `loss_and_grads` over optional row
    subsets; `params` is the flat list of weight arrays updated in place
    by the optimizer.
    """

    def __init__(self, spec: ModelSpec, data: Dataset, config: FitConfig):
        self.spec = spec
        self.data = data
        self.config = config
        self.family = dist.get_family(spec.family)
        self.y = data.numeric(spec.response)
        self.family.check_support(self.y)
        self.rng = np.random.default_rng(config.seed)
        self.designs = build_design(spec, data, config.design)
        self.calibrations = calibrate_designs(self.designs, config.default_df)
        self.graphs: list[_GraphRuntime] = []
        for k, design in enumerate(self.designs):
            graph = _GraphRuntime(design)
            for j, sl in enumerate(graph.slices):
                cal = self.calibrations.get((k, j))
                if cal is not None and cal.lam > 0.0:
                    graph.penalties.append((cal.lam, design.blocks[j].penalty, sl))
            self.graphs.append(graph)
        # trunk init draws happen in a fixed order so seeds are reproducible
        for graph in self.graphs:
            for term, U in graph.design.deep_inputs:
                trunk = _TrunkRuntime(term, spec.trunks[term.trunk], U, self.rng)
                if config.orthogonalize:
                    cols = constraint_set(graph.design, term)
                    if cols.size:
                        trunk.constraint_cols = cols
                        trunk.projector = build_projector(graph.X[:, cols])
                graph.trunks.append(trunk)
        self.params: list[np.ndarray] = []
        for graph in self.graphs:
            graph.w_idx = len(self.params)
            self.params.append(graph.w)
        for graph in self.graphs:
            for trunk in graph.trunks:
                trunk.param_base = len(self.params)
                self.params.extend(trunk.param_list())

    # -- evaluation -----------------------------------------------------
    def forward(self, rows: np.ndarray | None = None) -> list[np.ndarray]:
        return [graph.forward(rows)[0] for graph in self.graphs]

    def penalty_value(self) -> float:
        return sum(graph.penalty_value() for graph in self.graphs)

    def nll(self, rows: np.ndarray | None = None) -> float:
        y = self.y if rows is None else self.y[rows]
        etas = self.forward(rows)
        return float(np.mean(self.family.nll_rows(y, etas)))

    def loss(self, rows: np.ndarray | None = None) -> float:
        return self.nll(rows) + self.penalty_value()

    def loss_and_grads(self, rows: np.ndarray | None = None
                       ) -> tuple[float, list[np.ndarray]]:
        y = self.y if rows is None else self.y[rows]
        n = len(y)
        etas, caches = [], []
        for graph in self.graphs:
            eta, cache = graph.forward(rows)
            etas.append(eta)
            caches.append(cache)
        loss = float(np.mean(self.family.nll_rows(y, etas))) + self.penalty_value()
        dnll = self.family.dnll_deta_rows(y, etas)
        grads = [np.zeros_like(p) for p in self.params]
        for graph, d_rows, cache in zip(self.graphs, dnll, caches):
            graph.backward(d_rows / n, cache, grads, rows)
        return loss, grads

    def clamp_count(self) -> int:
        _, clamped = self.family.theta_from_eta(self.forward())
        return clamped

    def ortho_residual(self) -> float | None:
        """Max relative |X_c' U_tilde| over trunks with constraints."""
        worst = None
        for graph in self.graphs:
            for trunk in graph.trunks:
                if trunk.constraint_cols.size == 0:
                    continue
                Xc = graph.X[:, trunk.constraint_cols]
                latent, _ = trunk.latent()
                tilde = (
                    apply_orthogonalization(trunk.projector, latent)
                    if trunk.projector is not None
                    else latent
                )
                denom = np.linalg.norm(Xc) * np.linalg.norm(tilde)
                resid = float(np.max(np.abs(Xc.T @ tilde))) if denom > 0 else 0.0
                rel = resid / denom if denom > 0 else 0.0
                worst = rel if worst is None else max(worst, rel)
        return worst


class _Adam:
    """Adaptive-moment estimation over a flat list of arrays."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def snapshot(self):
        return ([m.copy() for m in self.m], [v.copy() for v in self.v], self.t)

    def restore(self, snap):
        for m, s in zip(self.m, snap[0]):
            m[...] = s
        for v, s in zip(self.v, snap[1]):
            v[...] = s
        self.t = snap[2]


def _copy_params(params):
    return [p.copy() for p in params]


def _restore_params(params, saved):
    for p, s in zip(params, saved):
        p[...] = s


MIN_LEARNING_RATE = 1e-14
# slow exponential recovery after accepted epochs; a rejected epoch still
# halves, so sustained oscillation drives the rate down and the recorded
# loss trace stays non-increasing
LR_RECOVERY = 2.0 ** (1.0 / 50.0)


def _train(am: AssembledModel) -> dict:
    """Run the optimizer on an assembled model; returns diagnostics."""
    config = am.config
    n = am.data.n
    rows_train = rows_val = None
    if config.early_stopping:
        perm = am.rng.permutation(n)
        n_val = max(1, int(round(config.validation_fraction * n)))
        rows_val = np.sort(perm[:n_val])
        rows_train = np.sort(perm[n_val:])
    full_batch = config.batch_size is None

    opt = _Adam(am.params, config.learning_rate)
    halvings = 0
    try:
        loss_prev, grads = am.loss_and_grads(rows_train)
    except dist.NumericalError as exc:
        raise DivergenceError(f"non-finite loss at initialization: {exc}") from exc
    if not np.isfinite(loss_prev):
        raise DivergenceError("non-finite loss at initialization")
    trace = [loss_prev]

    best_val = np.inf
    best_state = None
    best_epoch = None
    bad_epochs = 0
    epochs_run = 0

    base_rows = rows_train if rows_train is not None else np.arange(n)
    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        if full_batch:
            param_snap = _copy_params(am.params)
            opt_snap = opt.snapshot()
            opt.step(am.params, grads)
            loss_new, grads_new = am.loss_and_grads(rows_train)
            if not np.isfinite(loss_new):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch + 1}",
                    {"loss_trace": trace},
                )
            if loss_new > loss_prev:
                _restore_params(am.params, param_snap)
                opt.restore(opt_snap)
                opt.lr /= 2.0
                halvings += 1
                trace.append(loss_prev)
                if opt.lr < MIN_LEARNING_RATE:
                    break
            else:
                loss_prev = loss_new
                grads = grads_new
                trace.append(loss_new)
                opt.lr = min(opt.lr * LR_RECOVERY, config.learning_rate)
        else:
            order = am.rng.permutation(base_rows)
            n_batches = max(1, int(np.ceil(len(order) / config.batch_size)))
            for i in range(n_batches):
                batch = np.sort(order[i * config.batch_size:(i + 1) * config.batch_size])
                if batch.size == 0:
                    continue
                # batch-mean NLL gradient + full penalty gradient is an
                # unbiased gradient of the full objective
                _, batch_grads = am.loss_and_grads(batch)
                opt.step(am.params, batch_grads)
            loss_prev = am.loss(rows_train)
            if not np.isfinite(loss_prev):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch + 1}",
                    {"loss_trace": trace},
                )
            trace.append(loss_prev)

        if config.early_stopping:
            val_nll = am.nll(rows_val)
            if val_nll < best_val:
                best_val = val_nll
                best_state = _copy_params(am.params)
                best_epoch = epoch + 1
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break

    if config.early_stopping and best_state is not None:
        _restore_params(am.params, best_state)

    return {
        "loss_trace": [float(v) for v in trace],
        "epochs_run": epochs_run,
        "early_stop_epoch": best_epoch if config.early_stopping else None,
        "learning_rate_final": opt.lr,
        "learning_rate_halvings": halvings,
        "approx_projection": bool(
            (not full_batch or config.early_stopping)
            and any(t.projector is not None for g in am.graphs for t in g.trunks)
        ),
    }


# ---------------------------------------------------------------------------
# Fitted model
# ---------------------------------------------------------------------------
@dataclass
class FittedBlock:
    block: DesignBlock  # matrix is dropped on serialization
    weights: np.ndarray
    lam: float = 0.0
    df_target: float | None = None
    value_range: tuple[float, float] | None = None


@dataclass
class FittedTrunk:
    term: Deep
    spec: TrunkSpec
    W: list[np.ndarray]
    b: list[np.ndarray]
    gamma: np.ndarray
    constraint_columns: np.ndarray
    ortho_map: OrthoMap | None

    def latent(self, U: np.ndarray) -> np.ndarray:
        A = U
        for W, b in zip(self.W, self.b):
            Z = A @ W + b
            A = np.maximum(Z, 0.0) if self.spec.activation == "relu" else np.tanh(Z)
        return A


@dataclass
class FittedParameter:
    blocks: list[FittedBlock]
    trunks: list[FittedTrunk]


@dataclass
class PredictionResult:
    """Predicted parameters plus handles into the fitted distribution."""

    theta: np.ndarray  # n x K
    eta: list[np.ndarray]
    family: dist.Family
    unseen_groups: int = 0
    clamped: int = 0

    @property
    def parameter_names(self) -> tuple[str, ...]:
        return self.family.parameter_names

    def quantile(self, prob: float) -> np.ndarray:
        return dist.quantile(self.family, prob, self.theta)

    def log_score(self, y) -> float:
        return dist.log_score(self.family, y, self.eta)


@dataclass
class PartialEffect:
    term: str
    kind: str
    values: np.ndarray
    grid: np.ndarray | None = None
    grid_b: np.ndarray | None = None
    slope: float | None = None
    levels: tuple[str, ...] | None = None


class FittedModel:
    """Immutable trained artifact: weights, knots, penalties, ortho maps.

    Prediction always rebuilds design matrices from the stored metadata,
    so a serialization round trip reproduces training-set predictions
    bit for bit.
    """

    SCHEMA_VERSION = 1

    def __init__(self, spec: ModelSpec, design_config: DesignConfig,
                 parameters: list[FittedParameter], orthogonalize: bool,
                 diagnostics: dict, config_echo: dict):
        self.spec = spec
        self.design_config = design_config
        self.parameters = parameters
        self.orthogonalize = orthogonalize
        self.diagnostics = diagnostics
        self.config_echo = config_echo
        self.family = dist.get_family(spec.family)

    # -- prediction -------------------------------------------------------
    def _eta(self, data: Dataset) -> tuple[list[np.ndarray], int]:
        etas = []
        unseen = 0
        for param in self.parameters:
            mats = []
            for fb in param.blocks:
                m, u = evaluate_block_matrix(fb.block, data)
                unseen += u
                mats.append(m)
            X = np.hstack(mats) if mats else np.zeros((data.n, 0))
            w = (
                np.concatenate([fb.weights for fb in param.blocks])
                if param.blocks
                else np.zeros(0)
            )
            eta = X @ w
            for ft in param.trunks:
                U = np.column_stack([data.numeric(f) for f in ft.term.inputs])
                latent = ft.latent(U)
                if ft.ortho_map is not None:
                    latent = ft.ortho_map.apply(X, latent)
                eta = eta + latent @ ft.gamma
            etas.append(eta)
        return etas, unseen

    def predict(self, data: Dataset) -> PredictionResult:
        etas, unseen = self._eta(data)
        theta, clamped = self.family.theta_from_eta(etas)
        return PredictionResult(theta, etas, self.family, unseen, clamped)

    def log_score(self, data: Dataset) -> float:
        etas, _ = self._eta(data)
        return dist.log_score(self.family, data.numeric(self.spec.response), etas)

    # -- partial effects ---------------------------------------------------
    def _find_block(self, term_query: str, parameter: int | None
                    ) -> tuple[int, FittedBlock]:
        from .formula import _Cursor, _parse_term

        try:
            wanted = _parse_term(_Cursor(term_query)).key()
        except Exception:
            wanted = None
        norm = term_query.replace(" ", "")
        for k, param in enumerate(self.parameters):
            if parameter is not None and k != parameter:
                continue
            for fb in param.blocks:
                if fb.block.term.key() == wanted or fb.block.term.render().replace(" ", "") == norm:
                    return k, fb
        raise KeyError(f"no structured term matching '{term_query}'")

    def partial_effects(self, term_query: str, grid=None, grid_size: int = 200,
                        parameter: int | None = None) -> PartialEffect:
        """Isolated contribution of one structured term on its predictor scale."""
        _, fb = self._find_block(term_query, parameter)
        term = fb.block.term
        label = term.render()
        if isinstance(term, Intercept):
            return PartialEffect(label, "intercept", values=fb.weights.copy())
        if isinstance(term, Linear):
            lo, hi = fb.value_range if fb.value_range else (0.0, 1.0)
            g = np.asarray(grid, dtype=float) if grid is not None else np.linspace(lo, hi, grid_size)
            slope = float(fb.weights[0])
            return PartialEffect(label, "linear", values=slope * g, grid=g, slope=slope)
        if isinstance(term, RandomEffect):
            return PartialEffect(
                label, "random_effect", values=fb.weights.copy(),
                levels=fb.block.levels,
            )
        ct = fb.block.center_transform
        if isinstance(term, Smooth):
            knots, degree = fb.block.knots[0], fb.block.degrees[0]
            lo, hi = knots[degree], knots[len(knots) - 1 - degree]
            g = np.asarray(grid, dtype=float) if grid is not None else np.linspace(lo, hi, grid_size)
            raw = bspline_design(g, knots, degree)
            if ct is not None:
                C = np.hstack([np.ones((len(g), 1))] + [g[:, None] for _ in ct.constraint_features])
                raw = (raw - C @ ct.M) @ ct.V
            return PartialEffect(label, "smooth", values=raw @ fb.weights, grid=g)
        if isinstance(term, TensorSmooth):
            ka, kb = fb.block.knots
            da, db = fb.block.degrees
            ga = np.asarray(grid, dtype=float) if grid is not None else np.linspace(
                ka[da], ka[len(ka) - 1 - da], grid_size)
            gb = np.asarray(grid, dtype=float) if grid is not None else np.linspace(
                kb[db], kb[len(kb) - 1 - db], grid_size)
            mesh_a = np.repeat(ga, len(gb))
            mesh_b = np.tile(gb, len(ga))
            raw = row_kron(
                bspline_design(mesh_a, ka, da), bspline_design(mesh_b, kb, db)
            )
            if ct is not None:
                cols = {term.feature_a: mesh_a, term.feature_b: mesh_b}
                C = np.hstack(
                    [np.ones((len(mesh_a), 1))]
                    + [cols[f][:, None] for f in ct.constraint_features]
                )
                raw = (raw - C @ ct.M) @ ct.V
            return PartialEffect(
                label, "tensor", values=raw @ fb.weights, grid=mesh_a, grid_b=mesh_b
            )
        raise KeyError(f"term '{term_query}' is not structured")

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        params_out = []
        for param in self.parameters:
            blocks_out = []
            for fb in param.blocks:
                blk = fb.block
                ct = blk.center_transform
                blocks_out.append({
                    "term": blk.term.render(),
                    "weights": fb.weights.tolist(),
                    "lambda": float(fb.lam),
                    "df_target": None if fb.df_target is None else float(fb.df_target),
                    "n_columns": int(blk.n_columns),
                    "penalty_rank": int(blk.penalty_rank),
                    "knots": None if blk.knots is None else [k.tolist() for k in blk.knots],
                    "degrees": None if blk.degrees is None else list(blk.degrees),
                    "center_transform": None if ct is None else {
                        "features": list(ct.constraint_features),
                        "M": ct.M.tolist(),
                        "V": ct.V.tolist(),
                    },
                    "levels": None if blk.levels is None else list(blk.levels),
                    "column_names": list(blk.column_names),
                    "value_range": None if fb.value_range is None else [
                        float(fb.value_range[0]), float(fb.value_range[1])
                    ],
                })
            trunks_out = []
            for ft in param.trunks:
                trunks_out.append({
                    "term": ft.term.render(),
                    "units": list(ft.spec.units),
                    "activation": ft.spec.activation,
                    "W": [w.tolist() for w in ft.W],
                    "b": [b.tolist() for b in ft.b],
                    "gamma": ft.gamma.tolist(),
                    "constraint_columns": ft.constraint_columns.tolist(),
                    "b_hat": None if ft.ortho_map is None else ft.ortho_map.B_hat.tolist(),
                })
            params_out.append({"blocks": blocks_out, "trunks": trunks_out})
        return {
            "schema_version": self.SCHEMA_VERSION,
            "family": self.spec.family,
            "response": self.spec.response,
            "formulas": self.spec.render(),
            "trunk_config": {
                name: {"units": list(ts.units), "activation": ts.activation}
                for name, ts in self.spec.trunks.items()
            },
            "design_config": {
                "n_knots": self.design_config.n_knots,
                "degree": self.design_config.degree,
                "penalty_order": self.design_config.penalty_order,
                "tensor_n_knots": self.design_config.tensor_n_knots,
            },
            "orthogonalize": self.orthogonalize,
            "parameters": params_out,
            "diagnostics": self.diagnostics,
            "config_echo": self.config_echo,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        if d.get("schema_version") != cls.SCHEMA_VERSION:
            raise ValueError(
                f"unsupported model schema version {d.get('schema_version')!r}"
            )
        spec = build_spec(d["formulas"], d["family"], d["trunk_config"])
        dc = DesignConfig(**d["design_config"])
        parameters = []
        for k, pd_ in enumerate(d["parameters"]):
            blocks = []
            for bd in pd_["blocks"]:
                term = _term_by_render(spec, k, bd["term"])
                ct = bd["center_transform"]
                block = DesignBlock(
                    term=term,
                    matrix=np.zeros((0, bd["n_columns"])),
                    penalty=np.zeros((bd["n_columns"], bd["n_columns"])),
                    penalty_rank=bd["penalty_rank"],
                    knots=None if bd["knots"] is None else tuple(
                        np.asarray(kv, dtype=float) for kv in bd["knots"]
                    ),
                    degrees=None if bd["degrees"] is None else tuple(bd["degrees"]),
                    center_transform=None if ct is None else CenterTransform(
                        tuple(ct["features"]),
                        np.asarray(ct["M"], dtype=float),
                        np.asarray(ct["V"], dtype=float),
                    ),
                    column_names=list(bd["column_names"]),
                    levels=None if bd["levels"] is None else tuple(bd["levels"]),
                )
                blocks.append(FittedBlock(
                    block=block,
                    weights=np.asarray(bd["weights"], dtype=float),
                    lam=bd["lambda"],
                    df_target=bd["df_target"],
                    value_range=None if bd["value_range"] is None else tuple(bd["value_range"]),
                ))
            trunks = []
            for td in pd_["trunks"]:
                term = _term_by_render(spec, k, td["term"])
                cols = np.asarray(td["constraint_columns"], dtype=int)
                trunks.append(FittedTrunk(
                    term=term,
                    spec=TrunkSpec(tuple(td["units"]), td["activation"]),
                    W=[np.asarray(w, dtype=float) for w in td["W"]],
                    b=[np.asarray(b, dtype=float) for b in td["b"]],
                    gamma=np.asarray(td["gamma"], dtype=float),
                    constraint_columns=cols,
                    ortho_map=None if td["b_hat"] is None else OrthoMap(
                        cols, np.asarray(td["b_hat"], dtype=float)
                    ),
                ))
            parameters.append(FittedParameter(blocks, trunks))
        return cls(
            spec=spec,
            design_config=dc,
            parameters=parameters,
            orthogonalize=d["orthogonalize"],
            diagnostics=d["diagnostics"],
            config_echo=d["config_echo"],
        )

    def save(self, path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "FittedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _term_by_render(spec: ModelSpec, k: int, rendered: str):
    for term in spec.parameter_formulas[k]:
        if term.render() == rendered:
            return term
    raise ValueError(f"model file references unknown term '{rendered}'")


def write_json(path, obj: dict):
    """Serialize to JSON atomically (write temp file, then rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Fit / warm start / public entry points
# ---------------------------------------------------------------------------
def warm_start(donor: FittedModel, am: AssembledModel):
    """Copy a donor's structured weights into an assembled model.

    The structured (non-deep) terms of both models must match exactly,
    including df settings and block dimensions; trunk weights keep their
    fresh initialization.
    """
    if donor.spec.family != am.spec.family:
        raise ValueError("warm start requires the same family")
    if donor.spec.n_parameters != am.spec.n_parameters:
        raise ValueError("warm start requires the same number of parameters")
    for k, graph in enumerate(am.graphs):
        donor_blocks = donor.parameters[k].blocks
        new_blocks = graph.design.blocks
        donor_terms = [fb.block.term.render() for fb in donor_blocks]
        new_terms = [b.term.render() for b in new_blocks]
        if donor_terms != new_terms:
            raise ValueError(
                f"structured terms differ for parameter {k}: "
                f"{donor_terms} vs {new_terms}"
            )
        for fb, block, sl in zip(donor_blocks, new_blocks, graph.slices):
            if fb.weights.shape[0] != block.n_columns:
                raise ValueError(
                    f"block {block.term.render()} has {block.n_columns} columns, "
                    f"donor has {fb.weights.shape[0]}"
                )
            graph.w[sl] = fb.weights


def fit(spec: ModelSpec, data: Dataset, config: FitConfig | None = None,
        warm_start_from: FittedModel | None = None) -> FittedModel:
    """Train a model on `data` and return the immutable fitted artifact."""
    config = config or FitConfig()
    am = AssembledModel(spec, data, config)
    if warm_start_from is not None:
        warm_start(warm_start_from, am)
    try:
        train_diag = _train(am)
    except dist.NumericalError as exc:
        raise DivergenceError(str(exc)) from exc

    parameters = []
    lambda_rows = []
    for k, graph in enumerate(am.graphs):
        blocks = []
        for j, (block, sl) in enumerate(zip(graph.design.blocks, graph.slices)):
            cal = am.calibrations.get((k, j))
            value_range = None
            if isinstance(block.term, Linear):
                col = block.matrix[:, 0]
                value_range = (float(col.min()), float(col.max()))
            blocks.append(FittedBlock(
                block=block,
                weights=graph.w[sl].copy(),
                lam=0.0 if cal is None else cal.lam,
                df_target=None if cal is None else cal.df_target,
                value_range=value_range,
            ))
            if cal is not None:
                lambda_rows.append({
                    "parameter": k,
                    "term": block.term.render(),
                    "lambda": float(cal.lam),
                    "df": float(cal.df_target),
                    "df_min": float(cal.df_min),
                    "df_max": float(cal.df_max),
                    "explicit_df": bool(cal.explicit),
                })
        trunks = []
        for trunk in graph.trunks:
            latent, _ = trunk.latent()
            ortho_map = None
            if trunk.constraint_cols.size and am.config.orthogonalize:
                ortho_map = fit_ortho_map(
                    graph.X[:, trunk.constraint_cols], latent, trunk.constraint_cols
                )
            trunks.append(FittedTrunk(
                term=trunk.term,
                spec=trunk.spec,
                W=[w.copy() for w in trunk.W],
                b=[b.copy() for b in trunk.b],
                gamma=trunk.gamma.copy(),
                constraint_columns=trunk.constraint_cols.copy(),
                ortho_map=ortho_map,
            ))
        parameters.append(FittedParameter(blocks, trunks))

    diagnostics = dict(train_diag)
    diagnostics.update({
        "final_train_loss": am.loss(),
        "final_train_nll": am.nll(),
        "eta_clamped": am.clamp_count(),
        "orthogonality_residual": am.ortho_residual(),
        "lambdas": lambda_rows,
        "n_rows": am.data.n,
        "seed": config.seed,
    })
    config_echo = {
        "learning_rate": config.learning_rate,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "early_stopping": config.early_stopping,
        "validation_fraction": config.validation_fraction,
        "patience": config.patience,
        "orthogonalize": config.orthogonalize,
        "default_df": config.default_df,
    }
    return FittedModel(
        spec=am.spec,
        design_config=config.design,
        parameters=parameters,
        orthogonalize=config.orthogonalize,
        diagnostics=diagnostics,
        config_echo=config_echo,
    )
