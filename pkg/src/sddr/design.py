"""Materialize formula terms into design blocks from tabular data.

A DesignBlock is one term's contribution to the structured predictor: an
n x L feature matrix, a matching L x L positive semidefinite penalty, and
(for smooths) the stored knots and constraint transform that make later
evaluation on new data reproduce the training parameterization exactly.

Smooths are cubic B-splines with a second-order difference penalty
(P-splines). Identifiability constraints (sum-to-zero, and orthogonality
to the same feature's linear column when both are in the formula) are
absorbed by projecting the raw basis onto the constraint complement and
reducing to independent columns with an SVD; values outside the training
range are handled by linear extrapolation of the outermost spline
segment.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .formula import (
    Deep,
    Intercept,
    Linear,
    ModelSpec,
    RandomEffect,
    Smooth,
    TensorSmooth,
    TermExpr,
)

# Relative singular-value / eigenvalue cutoff shared by all rank decisions.
RANK_TOL = 1e-10

_MISSING_MARKERS = {"", "na", "nan", "null", "none", "n/a"}


class DataError(ValueError):
    """Problem in tabular input data (load or use)."""


class DesignError(ValueError):
    """Problem materializing a term into a design block."""


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------
@dataclass
class Dataset:
    """Immutable column store with a common row count.

    Columns are float vectors where every cell parses as a number, and
    string vectors otherwise (used for random-effect group labels; using
    one as a numeric feature raises a DataError naming the first
    offending cell). Rows are 1-based in error messages.
    """

    names: list[str]
    _numeric: dict[str, np.ndarray] = field(default_factory=dict)
    _strings: dict[str, np.ndarray] = field(default_factory=dict)
    n: int = 0

    @classmethod
    def from_columns(cls, columns: dict) -> "Dataset":
        names = list(columns)
        numeric, strings = {}, {}
        n = None
        for name, col in columns.items():
            arr = np.asarray(col)
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise DataError(
                    f"column '{name}' has {arr.shape[0]} rows, expected {n}"
                )
            if arr.dtype.kind in "fiub":
                vals = arr.astype(float)
                if not np.all(np.isfinite(vals)):
                    row = int(np.argmin(np.isfinite(vals)))
                    raise DataError(
                        f"non-finite value in column '{name}', row {row + 1}"
                    )
                numeric[name] = vals
            else:
                strings[name] = np.asarray([str(v) for v in arr], dtype=object)
        if n is None or n < 2:
            raise DataError(f"need at least 2 rows, got {0 if n is None else n}")
        return cls(names, numeric, strings, n)

    def __contains__(self, name: str) -> bool:
        return name in self._numeric or name in self._strings

    def numeric(self, name: str) -> np.ndarray:
        """Column as floats; DataError if absent or not numeric."""
        if name in self._numeric:
            return self._numeric[name]
        if name in self._strings:
            col = self._strings[name]
            for i, cell in enumerate(col):
                try:
                    float(cell)
                except ValueError:
                    raise DataError(
                        f"non-numeric cell '{cell}' at row {i + 1}, column '{name}'"
                    ) from None
            raise DataError(f"column '{name}' is not numeric")  # pragma: no cover
        raise DataError(f"column '{name}' not found in data")

    def labels(self, name: str) -> np.ndarray:
        """Column as group labels (strings)."""
        if name in self._strings:
            return self._strings[name]
        if name in self._numeric:
            return np.asarray([repr(v) for v in self._numeric[name]], dtype=object)
        raise DataError(f"column '{name}' not found in data")

    def take(self, rows: np.ndarray) -> "Dataset":
        """Row subset as a new Dataset (used for train/validation splits)."""
        cols: dict = {name: col[rows] for name, col in self._numeric.items()}
        cols.update({name: col[rows] for name, col in self._strings.items()})
        out = Dataset(
            list(self.names),
            {k: v for k, v in cols.items() if k in self._numeric},
            {k: v for k, v in cols.items() if k in self._strings},
            int(len(rows)),
        )
        return out


def load_dataset(path) -> Dataset:
    """Read a CSV file with a header row into a Dataset.

    Cells matching a missing-value marker (empty, NA, NaN, null, ...)
    are rejected with their row and column; ragged rows and empty files
    are rejected outright.
    """
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read '{path}': {exc}") from exc
    if not rows:
        raise DataError(f"'{path}' is empty")
    header = [name.strip() for name in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"duplicate column names in '{path}'")
    body = rows[1:]
    if not body:
        raise DataError(f"'{path}' has a header but no data rows")
    cells = []
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(
                f"ragged row {i + 1}: {len(row)} cells, expected {len(header)}"
            )
        for j, cell in enumerate(row):
            if cell.strip().lower() in _MISSING_MARKERS:
                raise DataError(
                    f"missing value at row {i + 1}, column '{header[j]}'"
                )
        cells.append(row)
    columns: dict = {}
    for j, name in enumerate(header):
        raw = [cells[i][j].strip() for i in range(len(cells))]
        try:
            columns[name] = np.asarray([float(c) for c in raw], dtype=float)
        except ValueError:
            columns[name] = np.asarray(raw, dtype=object)
    return Dataset.from_columns(columns)


# ---------------------------------------------------------------------------
# B-spline basis
# ---------------------------------------------------------------------------
def bspline_knots(values: np.ndarray, n_knots: int, degree: int) -> np.ndarray:
    """Equidistant knots over the value range, boundary knots repeated."""
    if degree < 0:
        raise DesignError(f"degree must be >= 0, got {degree}")
    if n_knots < degree + 2:
        raise DesignError(f"need at least degree + 2 = {degree + 2} knots, got {n_knots}")
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise DesignError("values must be finite")
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        raise DesignError("constant column: zero range for spline basis")
    inner = np.linspace(lo, hi, n_knots)
    return np.concatenate([np.full(degree, lo), inner, np.full(degree, hi)])


def _basis_matrix(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Cox-de Boor evaluation for in-range x; (len(x), len(knots)-degree-1)."""
    x = np.asarray(x, dtype=float)
    m = len(knots)
    idx = np.searchsorted(knots, x, side="right") - 1
    idx = np.clip(idx, degree, m - degree - 2)
    B = np.zeros((len(x), m - 1))
    B[np.arange(len(x)), idx] = 1.0
    for d in range(1, degree + 1):
        nb = m - d - 1
        new = np.zeros((len(x), nb))
        for i in range(nb):
            d1 = knots[i + d] - knots[i]
            d2 = knots[i + d + 1] - knots[i + 1]
            if d1 > 0:
                new[:, i] += (x - knots[i]) / d1 * B[:, i]
            if d2 > 0:
                new[:, i] += (knots[i + d + 1] - x) / d2 * B[:, i + 1]
        B = new
    return B


def _basis_derivative(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """First derivative of each basis function at in-range x."""
    x = np.asarray(x, dtype=float)
    nb = len(knots) - degree - 1
    if degree == 0:
        return np.zeros((len(x), nb))
    lower = _basis_matrix(x, knots, degree - 1)
    out = np.zeros((len(x), nb))
    for i in range(nb):
        d1 = knots[i + degree] - knots[i]
        d2 = knots[i + degree + 1] - knots[i + 1]
        if d1 > 0:
            out[:, i] += degree * lower[:, i] / d1
        if d2 > 0:
            out[:, i] -= degree * lower[:, i + 1] / d2
    return out


def bspline_design(values, knots: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the spline basis at `values` for a stored knot vector.

    Values beyond the boundary knots are mapped by linear extrapolation
    of the basis at the nearest boundary, so prediction is defined (and
    deterministic) outside the training range.
    """
    x = np.asarray(values, dtype=float)
    lo = knots[degree]
    hi = knots[len(knots) - 1 - degree]
    inner = np.clip(x, lo, hi)
    B = _basis_matrix(inner, knots, degree)
    for mask, bound in ((x < lo, lo), (x > hi, hi)):
        if mask.any():
            b0 = _basis_matrix(np.array([bound]), knots, degree)
            d0 = _basis_derivative(np.array([bound]), knots, degree)
            B[mask] = b0 + (x[mask, None] - bound) * d0
    return B


def bspline_basis(values, n_knots: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Build basis matrix and knot vector from the data range.

    Returns an (n, n_knots + degree - 1) matrix whose rows sum to one
    (partition of unity) together with the full padded knot vector.
    """
    knots = bspline_knots(values, n_knots, degree)
    return _basis_matrix(np.asarray(values, dtype=float), knots, degree), knots


def difference_penalty(L: int, order: int) -> np.ndarray:
    """S = D'D for the order-th forward-difference matrix D on L coefficients."""
    if order < 1:
        raise DesignError(f"difference order must be >= 1, got {order}")
    if L <= order:
        raise DesignError(f"need more than {order} coefficients, got {L}")
    D = np.diff(np.eye(L), n=order, axis=0)
    return D.T @ D


# ---------------------------------------------------------------------------
# Design blocks
# ---------------------------------------------------------------------------
@dataclass
class CenterTransform:
    """Linear map absorbing identifiability constraints into a smooth block.

    The absorbed block evaluates as ``(B_raw - C @ M) @ V`` where C is
    the ones column followed by the raw columns of `constraint_features`.
    """

    constraint_features: tuple[str, ...]
    M: np.ndarray  # (1 + len(features)) x L_raw
    V: np.ndarray  # L_raw x L


@dataclass
class DesignBlock:
    """One materialized term: feature matrix, penalty, and rebuild metadata."""

    term: TermExpr
    matrix: np.ndarray
    penalty: np.ndarray
    penalty_rank: int
    knots: tuple[np.ndarray, ...] | None = None
    degrees: tuple[int, ...] | None = None
    center_transform: CenterTransform | None = None
    column_names: list[str] = field(default_factory=list)
    levels: tuple[str, ...] | None = None  # random-effect group levels

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]

    @property
    def penalized(self) -> bool:
        return self.penalty_rank > 0

    def label(self) -> str:
        return self.term.render()


def _check_psd(S: np.ndarray, what: str):
    if S.size == 0:
        return
    if not np.allclose(S, S.T, atol=1e-10, rtol=0.0):
        raise DesignError(f"{what}: penalty is not symmetric")
    eigs = np.linalg.eigvalsh((S + S.T) / 2.0)
    if eigs[-1] > 0 and eigs[0] < -1e-10 * eigs[-1]:
        raise DesignError(f"{what}: penalty is not positive semidefinite")


def _penalty_rank(S: np.ndarray) -> int:
    if S.size == 0 or not np.any(S):
        return 0
    eigs = np.linalg.eigvalsh((S + S.T) / 2.0)
    return int(np.count_nonzero(eigs > RANK_TOL * max(eigs[-1], 0.0)))


def row_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: column a_i*b_j for each pair (i, j)."""
    n = A.shape[0]
    return (A[:, :, None] * B[:, None, :]).reshape(n, A.shape[1] * B.shape[1])


def tensor_basis(block_a: DesignBlock, block_b: DesignBlock, term: TermExpr | None = None) -> DesignBlock:
    """Combine two marginal smooth blocks into a tensor-product block.

    The matrix is the row-wise Kronecker product; the penalty is the
    Kronecker sum S_a (x) I + I (x) S_b, whose eigenvalues are all
    pairwise sums of the marginal penalty eigenvalues.
    """
    if block_a.matrix.shape[0] != block_b.matrix.shape[0]:
        raise DesignError(
            f"marginal row counts differ: {block_a.matrix.shape[0]} vs {block_b.matrix.shape[0]}"
        )
    n = block_a.matrix.shape[0]
    La, Lb = block_a.n_columns, block_b.n_columns
    if La * Lb >= n:
        warnings.warn(
            f"tensor block has {La * Lb} columns for {n} rows; "
            "system is underdetermined before penalization",
            UserWarning,
            stacklevel=2,
        )
    matrix = row_kron(block_a.matrix, block_b.matrix)
    penalty = np.kron(block_a.penalty, np.eye(Lb)) + np.kron(np.eye(La), block_b.penalty)
    _check_psd(penalty, "tensor penalty")
    term = term if term is not None else TensorSmooth("a", "b")
    names = [f"{term.render()}.{i + 1}" for i in range(La * Lb)]
    return DesignBlock(
        term=term,
        matrix=matrix,
        penalty=penalty,
        penalty_rank=_penalty_rank(penalty),
        knots=(block_a.knots[0], block_b.knots[0]) if block_a.knots and block_b.knots else None,
        degrees=(
            (block_a.degrees[0], block_b.degrees[0])
            if block_a.degrees and block_b.degrees
            else None
        ),
        column_names=names,
    )


def random_effect_block(labels, term: TermExpr | None = None) -> DesignBlock:
    """One-hot indicators per group with an identity (ridge) penalty.

    The penalty strength calibrated for this block acts as the inverse
    of the random-effect variance, up to the error-variance scale.
    """
    labels = np.asarray([str(v) for v in np.asarray(labels).ravel()], dtype=object)
    levels = tuple(sorted(set(labels.tolist())))
    if len(levels) < 2:
        raise DesignError(f"random effect needs >= 2 groups, got {len(levels)}")
    index = {g: i for i, g in enumerate(levels)}
    matrix = np.zeros((len(labels), len(levels)))
    matrix[np.arange(len(labels)), [index[g] for g in labels]] = 1.0
    term = term if term is not None else RandomEffect("group")
    return DesignBlock(
        term=term,
        matrix=matrix,
        penalty=np.eye(len(levels)),
        penalty_rank=len(levels),
        column_names=[f"{term.render()}.{g}" for g in levels],
        levels=levels,
    )


def absorb_constraints(block: DesignBlock, linear_overlap: np.ndarray | None = None,
                       overlap_features: tuple[str, ...] = ()) -> DesignBlock:
    """Project a smooth block onto the constraint complement and reduce rank.

    The constraint matrix is the ones column plus `linear_overlap` (the
    raw columns of features that also enter the predictor linearly).
    After absorption the block's columns are orthogonal to the
    constraints, and the penalty is transformed congruently. The fitted
    smooth then reads as the deviation from the constant (and, with
    overlap, linear) effect of its features.
    """
    if not isinstance(block.term, (Smooth, TensorSmooth)):
        raise DesignError(f"cannot absorb constraints into {block.term.render()}")
    n = block.matrix.shape[0]
    parts = [np.ones((n, 1))]
    if linear_overlap is not None:
        overlap = np.asarray(linear_overlap, dtype=float)
        if overlap.ndim == 1:
            overlap = overlap[:, None]
        parts.append(overlap)
    C = np.hstack(parts)
    M, *_ = np.linalg.lstsq(C, block.matrix, rcond=None)
    projected = block.matrix - C @ M
    U, s, Vt = np.linalg.svd(projected, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise DesignError(
            f"constraint absorption annihilated block {block.term.render()}"
        )
    r = int(np.count_nonzero(s > RANK_TOL * s[0]))
    if r == 0:
        raise DesignError(
            f"constraint absorption annihilated block {block.term.render()}"
        )
    V = Vt[:r].T
    matrix = projected @ V
    penalty = V.T @ block.penalty @ V
    penalty = (penalty + penalty.T) / 2.0
    _check_psd(penalty, block.term.render())
    return DesignBlock(
        term=block.term,
        matrix=matrix,
        penalty=penalty,
        penalty_rank=_penalty_rank(penalty),
        knots=block.knots,
        degrees=block.degrees,
        center_transform=CenterTransform(tuple(overlap_features), M, V),
        column_names=[f"{block.term.render()}.{i + 1}" for i in range(r)],
        levels=None,
    )


# ---------------------------------------------------------------------------
# Whole-design assembly
# ---------------------------------------------------------------------------
@dataclass
class DesignConfig:
    """Data-independent basis defaults; all overridable via run config."""

    n_knots: int = 20
    degree: int = 3
    penalty_order: int = 2
    tensor_n_knots: int = 8


@dataclass
class ParameterDesign:
    """All materialized blocks for one distribution parameter."""

    blocks: list[DesignBlock]
    deep_inputs: list[tuple[Deep, np.ndarray]]

    @property
    def n_columns(self) -> int:
        return sum(b.n_columns for b in self.blocks)

    def structured_matrix(self) -> np.ndarray:
        return np.hstack([b.matrix for b in self.blocks])

    def block_slices(self) -> list[slice]:
        offsets = np.cumsum([0] + [b.n_columns for b in self.blocks])
        return [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]


def _raw_smooth_block(term: TermExpr, values: np.ndarray, n_knots: int, degree: int,
                      order: int) -> DesignBlock:
    matrix, knots = bspline_basis(values, n_knots, degree)
    penalty = difference_penalty(matrix.shape[1], order)
    return DesignBlock(
        term=term,
        matrix=matrix,
        penalty=penalty,
        penalty_rank=_penalty_rank(penalty),
        knots=(knots,),
        degrees=(degree,),
        column_names=[f"{term.render()}.raw{i + 1}" for i in range(matrix.shape[1])],
    )


def _linear_columns(terms, data: Dataset) -> dict[str, np.ndarray]:
    return {t.feature: data.numeric(t.feature) for t in terms if isinstance(t, Linear)}


def build_design(spec: ModelSpec, data: Dataset, defaults: DesignConfig | None = None
                 ) -> list[ParameterDesign]:
    """Materialize every term of every parameter formula against `data`.

    Block order per parameter: intercept first (when present), then the
    remaining structured terms in source order; deep terms contribute
    raw feature matrices on the side.
    """
    cfg = defaults or DesignConfig()
    if spec.response not in data:
        raise DataError(f"response column '{spec.response}' not found in data")
    designs = []
    for terms in spec.parameter_formulas:
        for term in terms:
            for feat in term.features():
                if feat not in data:
                    raise DataError(
                        f"feature '{feat}' in term {term.render()} not found in data"
                    )
        linear_cols = _linear_columns(terms, data)
        ordered = [t for t in terms if isinstance(t, Intercept)]
        ordered += [t for t in terms if not isinstance(t, Intercept)]
        blocks: list[DesignBlock] = []
        deep_inputs: list[tuple[Deep, np.ndarray]] = []
        for term in ordered:
            if isinstance(term, Intercept):
                blocks.append(
                    DesignBlock(
                        term=term,
                        matrix=np.ones((data.n, 1)),
                        penalty=np.zeros((1, 1)),
                        penalty_rank=0,
                        column_names=["(intercept)"],
                    )
                )
            elif isinstance(term, Linear):
                blocks.append(
                    DesignBlock(
                        term=term,
                        matrix=data.numeric(term.feature)[:, None],
                        penalty=np.zeros((1, 1)),
                        penalty_rank=0,
                        column_names=[term.feature],
                    )
                )
            elif isinstance(term, Smooth):
                raw = _raw_smooth_block(
                    term, data.numeric(term.feature), cfg.n_knots, cfg.degree,
                    cfg.penalty_order,
                )
                overlap_feats = tuple(f for f in (term.feature,) if f in linear_cols)
                overlap = (
                    np.column_stack([linear_cols[f] for f in overlap_feats])
                    if overlap_feats
                    else None
                )
                blocks.append(absorb_constraints(raw, overlap, overlap_feats))
            elif isinstance(term, TensorSmooth):
                marg_a = _raw_smooth_block(
                    term, data.numeric(term.feature_a), cfg.tensor_n_knots,
                    cfg.degree, cfg.penalty_order,
                )
                marg_b = _raw_smooth_block(
                    term, data.numeric(term.feature_b), cfg.tensor_n_knots,
                    cfg.degree, cfg.penalty_order,
                )
                tensor = tensor_basis(marg_a, marg_b, term)
                overlap_feats = tuple(
                    f for f in (term.feature_a, term.feature_b) if f in linear_cols
                )
                overlap = (
                    np.column_stack([linear_cols[f] for f in overlap_feats])
                    if overlap_feats
                    else None
                )
                blocks.append(absorb_constraints(tensor, overlap, overlap_feats))
            elif isinstance(term, RandomEffect):
                blocks.append(random_effect_block(data.labels(term.feature), term))
            elif isinstance(term, Deep):
                U = np.column_stack([data.numeric(f) for f in term.inputs])
                deep_inputs.append((term, U))
            else:  # pragma: no cover
                raise DesignError(f"unhandled term {term!r}")
        designs.append(ParameterDesign(blocks, deep_inputs))
    return designs


def evaluate_block_matrix(block: DesignBlock, data: Dataset) -> tuple[np.ndarray, int]:
    """Rebuild a block's matrix on new data from its stored metadata.

    Returns the matrix and the number of rows with an unseen
    random-effect group (those rows get a zero effect, the prior mean).
    Evaluating on the training data reproduces the training matrix
    bit-for-bit.
    """
    term = block.term
    if isinstance(term, Intercept):
        return np.ones((data.n, 1)), 0
    if isinstance(term, Linear):
        return data.numeric(term.feature)[:, None], 0
    if isinstance(term, (Smooth, TensorSmooth)):
        if isinstance(term, Smooth):
            raw = bspline_design(data.numeric(term.feature), block.knots[0], block.degrees[0])
        else:
            raw_a = bspline_design(data.numeric(term.feature_a), block.knots[0], block.degrees[0])
            raw_b = bspline_design(data.numeric(term.feature_b), block.knots[1], block.degrees[1])
            raw = row_kron(raw_a, raw_b)
        ct = block.center_transform
        if ct is None:
            return raw, 0
        parts = [np.ones((data.n, 1))]
        for feat in ct.constraint_features:
            parts.append(data.numeric(feat)[:, None])
        C = np.hstack(parts)
        return (raw - C @ ct.M) @ ct.V, 0
    if isinstance(term, RandomEffect):
        labels = data.labels(term.feature)
        index = {g: i for i, g in enumerate(block.levels)}
        matrix = np.zeros((data.n, len(block.levels)))
        unseen = 0
        for row, g in enumerate(labels):
            i = index.get(g)
            if i is None:
                unseen += 1
            else:
                matrix[row, i] = 1.0
        return matrix, unseen
    raise DesignError(f"cannot evaluate block for term {term.render()}")
