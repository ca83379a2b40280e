"""Degrees-of-freedom based calibration of penalty strengths.

Each penalized block's smoother eigenvalues s_1..s_L come from the
orthogonal diagonalization of the penalized least-squares smoother
(factor R of B'B, then eigenvalues of R^-T S R^-1). The effective
degrees of freedom at penalty strength lambda is then

    df(lambda) = sum_i 1 / (1 + lambda * s_i)

which is strictly decreasing in lambda, so a df target is converted to
lambda by bisection on log(lambda). The default target df* is the
largest df that leaves the least flexible block unpenalized: the minimum
over blocks of df(0) = L.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .design import RANK_TOL, DesignBlock, ParameterDesign


class SmoothingError(ValueError):
    """Unattainable df target or a numerically singular block."""


@dataclass
class SmootherCalibration:
    """Calibration result for one penalized block."""

    block_label: str
    eigenvalues: np.ndarray
    lam: float
    df_target: float
    df_max: int
    df_min: float
    explicit: bool  # df came from the formula rather than the default rule


def dro_eigenvalues(block: DesignBlock) -> np.ndarray:
    """Smoother eigenvalues of a block, ascending and clipped at zero.

    Requires the block matrix to have full column rank (guaranteed for
    constraint-absorbed smooths and one-hot random effects); a ridge of
    1e-10 relative to the Gram diagonal is tried once before giving up.
    """
    B, S = block.matrix, block.penalty
    G = B.T @ B
    try:
        R = np.linalg.cholesky(G).T
    except np.linalg.LinAlgError:
        ridge = 1e-10 * max(float(np.max(np.diag(G))), 1.0)
        try:
            R = np.linalg.cholesky(G + ridge * np.eye(G.shape[0])).T
        except np.linalg.LinAlgError as exc:
            raise SmoothingError(
                f"Gram matrix of block {block.label()} is numerically singular"
            ) from exc
    W = solve_triangular(R.T, S, lower=True)  # R^-T S
    A = solve_triangular(R.T, W.T, lower=True).T  # (R^-T S) R^-1
    eigs = np.linalg.eigvalsh((A + A.T) / 2.0)
    return np.clip(eigs, 0.0, None)


def df_at_lambda(eigenvalues: np.ndarray, lam: float) -> float:
    """Effective degrees of freedom at a given penalty strength."""
    return float(np.sum(1.0 / (1.0 + lam * eigenvalues)))


def _df_bounds(eigenvalues: np.ndarray) -> tuple[float, int]:
    cutoff = RANK_TOL * max(float(eigenvalues.max(initial=0.0)), 0.0)
    df_min = int(np.count_nonzero(eigenvalues <= cutoff))
    return float(df_min), len(eigenvalues)


def df_to_lambda(eigenvalues: np.ndarray, df_target: float) -> float:
    """Penalty strength whose effective df matches `df_target` within 1e-6.

    The target must lie in (df_min, df_max] where df_min is the penalty
    nullity (the df reached as lambda grows without bound) and df_max the
    column count; df_target = df_max returns exactly zero.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    df_min, df_max = _df_bounds(eigenvalues)
    if not (df_min < df_target <= df_max + 1e-9):
        raise SmoothingError(
            f"df target {df_target} outside the attainable range "
            f"({df_min}, {df_max}]"
        )
    if df_target >= df_max - 1e-9:
        return 0.0
    lo, hi = -12.0, 12.0
    while df_at_lambda(eigenvalues, 10.0 ** lo) < df_target and lo > -300:
        lo -= 6.0
    while df_at_lambda(eigenvalues, 10.0 ** hi) > df_target and hi < 300:
        hi += 6.0
    for _ in range(200):
        mid = (lo + hi) / 2.0
        if df_at_lambda(eigenvalues, 10.0 ** mid) > df_target:
            lo = mid
        else:
            hi = mid
    lam = 10.0 ** ((lo + hi) / 2.0)
    if abs(df_at_lambda(eigenvalues, lam) - df_target) > 1e-6:
        raise SmoothingError(
            f"bisection failed to reach df {df_target} (got "
            f"{df_at_lambda(eigenvalues, lam):.8f})"
        )
    return lam


def default_df(df_maxima) -> float:
    """Global default df: the minimum of the blocks' maximal df.

    This is the largest value that leaves the least flexible block
    unpenalized while regularizing all others to the same flexibility.
    """
    df_maxima = list(df_maxima)
    if not df_maxima:
        raise SmoothingError("no penalized blocks to derive a default df from")
    return float(min(df_maxima))


def calibrate_designs(designs: list[ParameterDesign],
                      configured_df: float | None = None
                      ) -> dict[tuple[int, int], SmootherCalibration]:
    """Resolve df targets and penalty strengths for every penalized block.

    Blocks with an explicit ``df=`` keep it. All others share the
    configured default, or the min-of-maxima rule computed over the
    smooth blocks (falling back to all penalized blocks when the model
    has only random effects). Defaulted targets are clamped to each
    block's attainable range.
    """
    penalized: dict[tuple[int, int], DesignBlock] = {}
    for k, design in enumerate(designs):
        for j, block in enumerate(design.blocks):
            if block.penalized:
                penalized[(k, j)] = block
    if not penalized:
        return {}
    eigs = {key: dro_eigenvalues(block) for key, block in penalized.items()}
    if configured_df is not None:
        df_star = float(configured_df)
    else:
        smooth_dims = [
            block.n_columns
            for block in penalized.values()
            if block.term.key()[0] in ("smooth", "tensor")
        ]
        df_star = default_df(smooth_dims or [b.n_columns for b in penalized.values()])
    out: dict[tuple[int, int], SmootherCalibration] = {}
    for key, block in penalized.items():
        term_df = getattr(block.term, "df", None)
        explicit = term_df is not None
        target = float(term_df) if explicit else min(df_star, float(block.n_columns))
        df_min, df_max = _df_bounds(eigs[key])
        if not explicit and target <= df_min:
            raise SmoothingError(
                f"default df {target} is not above the penalty nullity "
                f"{df_min} of block {block.label()}; set a larger df"
            )
        lam = df_to_lambda(eigs[key], target)
        out[key] = SmootherCalibration(
            block_label=block.label(),
            eigenvalues=eigs[key],
            lam=lam,
            df_target=target,
            df_max=df_max,
            df_min=df_min,
            explicit=explicit,
        )
    return out
