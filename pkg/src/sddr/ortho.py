"""Orthogonalization cell: keep deep latents out of the structured span.

When a deep trunk shares input features with structured terms, its latent
features U_hat are replaced by U_tilde = U_hat - Q (Q' U_hat), where Q is
an orthonormal basis of the column space of the overlapping structured
columns (intercept included). The projection is linear and symmetric, so
its backward pass is the projection itself. This pins any signal inside
the structured span onto the structured weights, making them
identifiable next to the trunk.

Prediction on new rows cannot use the training projector (an n x n
object), so at the end of training a least-squares map B_hat from the
structured columns to the final latents is stored; the residual
U_new - X_new B_hat coincides with the projection on the training rows
and extends row-wise to single observations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .design import RANK_TOL, ParameterDesign
from .formula import Deep, Linear, Smooth, TensorSmooth


@dataclass
class Projector:
    """Orthonormal basis Q of a structured column span, with its rank."""

    Q: np.ndarray  # n x rank
    rank: int
    tolerance: float

    def complement(self, A: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Project A onto the orthogonal complement of the span.

        With `rows`, the stored Q is sliced to those rows; for a proper
        subset this is an approximation of the full-data projection
        (exact for the full row set).
        """
        Q = self.Q if rows is None else self.Q[rows]
        if A.shape[0] != Q.shape[0]:
            raise ValueError(f"row mismatch: {A.shape[0]} vs {Q.shape[0]}")
        if self.rank == 0:
            return A
        if rows is None and self.rank == self.Q.shape[0]:
            # span covers the whole row space: the complement is exactly zero
            return np.zeros_like(A)
        return A - Q @ (Q.T @ A)

    def project(self, A: np.ndarray) -> np.ndarray:
        if self.rank == 0:
            return np.zeros_like(A)
        return self.Q @ (self.Q.T @ A)


def build_projector(X: np.ndarray, tolerance: float = RANK_TOL) -> Projector:
    """Rank-revealing orthonormal basis of the columns of X.

    Uses QR with column pivoting; columns whose pivoted diagonal falls
    below `tolerance` relative to the largest are dropped, so a
    rank-deficient X is handled (rank 0 yields the identity complement).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a matrix")
    n, p = X.shape
    if p == 0 or not np.any(X):
        return Projector(np.zeros((n, 0)), 0, tolerance)
    Q, R, _ = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.count_nonzero(diag > tolerance * diag[0])) if diag.size else 0
    return Projector(np.ascontiguousarray(Q[:, :rank]), rank, tolerance)


def apply_orthogonalization(projector: Projector, latent: np.ndarray,
                            rows: np.ndarray | None = None) -> np.ndarray:
    """U_tilde = U_hat minus its projection onto the structured span."""
    return projector.complement(latent, rows)


def constraint_set(design: ParameterDesign, term: Deep) -> np.ndarray:
    """Structured column ids a deep term must be orthogonalized against.

    These are the columns of every linear/smooth block whose features
    intersect the trunk's inputs, plus the intercept; an empty result
    means no overlap and no orthogonalization for this trunk.
    """
    deep_feats = set(term.features())
    slices = design.block_slices()
    hit_cols: list[np.ndarray] = []
    intercept_cols: list[np.ndarray] = []
    for block, sl in zip(design.blocks, slices):
        if block.term.key()[0] == "intercept":
            intercept_cols.append(np.arange(sl.start, sl.stop))
            continue
        if not isinstance(block.term, (Linear, Smooth, TensorSmooth)):
            continue
        if deep_feats & set(block.term.features()):
            hit_cols.append(np.arange(sl.start, sl.stop))
    if not hit_cols:
        return np.zeros(0, dtype=int)
    return np.concatenate(intercept_cols + hit_cols).astype(int)


@dataclass
class OrthoMap:
    """Prediction-time linear form of a trained trunk's orthogonalization.

    B_hat solves min ||X B - U_hat||_F over the training rows, so
    U_hat - X B_hat equals the projector residual there and is defined
    row-by-row on new data.
    """

    columns: np.ndarray  # constraint column ids into the structured matrix
    B_hat: np.ndarray  # len(columns) x s

    def apply(self, structured: np.ndarray, latent: np.ndarray) -> np.ndarray:
        return latent - structured[:, self.columns] @ self.B_hat


def fit_ortho_map(X_constraint: np.ndarray, latent: np.ndarray,
                  columns: np.ndarray, tolerance: float = RANK_TOL) -> OrthoMap:
    """Least-squares map from constraint columns to final latent features."""
    B_hat, *_ = np.linalg.lstsq(X_constraint, latent, rcond=tolerance)
    return OrthoMap(np.asarray(columns, dtype=int), B_hat)
