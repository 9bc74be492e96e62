"""Importance scores and the exact losses they approximate.

The propagation-aware ("foresight") score of entry (i, j) in an upstream
weight is

    |W1_eff[i, j]| * ||W2_eff[j, :]||_2 * ||X[:, i]||_2

i.e. local magnitude, amplification by the downstream row, and how hard the
input channel is driven. Wanda scores drop the downstream factor and
magnitude scores drop both. This module also provides the exact quantities
the scores approximate (full masked-composition loss, per-entry prune
deltas, analytic Hessian diagonal), used as oracles throughout the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import (
    ShapeError,
    as_matrix,
    as_vector,
    check_chain,
    check_index,
    check_same_shape,
    frozen,
)

__all__ = [
    "ScoreMatrix",
    "CRITERIA",
    "foresight_loss",
    "local_loss",
    "foresight_scores",
    "foresight_attention_scores",
    "wanda_scores",
    "magnitude_scores",
    "exact_hessian_diag",
    "exact_prune_delta",
]

CRITERIA = ("foresight", "foresight_q", "foresight_k", "wanda", "magnitude")


@dataclass(frozen=True)
class ScoreMatrix:
    """Nonnegative importance scores, same shape as the scored weight."""

    scores: np.ndarray
    criterion: str

    def __post_init__(self) -> None:
        s = as_matrix(self.scores, "scores")
        if np.any(s < 0):
            raise ValueError("scores must be entrywise >= 0")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        object.__setattr__(self, "scores", frozen(s))

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def foresight_loss(mask, w1_eff, w2_eff, x) -> float:
    """Squared Frobenius error of masking w1 as seen after the next layer:
    ``|| X @ (mask * w1 - w1) @ w2 ||_F^2``.
    """
    m = as_matrix(mask, "mask")
    w1 = as_matrix(w1_eff, "w1_eff")
    w2 = as_matrix(w2_eff, "w2_eff")
    xm = as_matrix(x, "x")
    check_same_shape(m, w1, "mask", "w1_eff")
    check_chain(xm, w1, "x", "w1_eff")
    check_chain(w1, w2, "w1_eff", "w2_eff")
    delta = xm @ (m * w1 - w1) @ w2
    return float(np.sum(delta * delta))


def local_loss(mask, w1_eff, x) -> float:
    """Same as foresight_loss without the downstream factor."""
    m = as_matrix(mask, "mask")
    w1 = as_matrix(w1_eff, "w1_eff")
    xm = as_matrix(x, "x")
    check_same_shape(m, w1, "mask", "w1_eff")
    check_chain(xm, w1, "x", "w1_eff")
    delta = xm @ (m * w1 - w1)
    return float(np.sum(delta * delta))


def foresight_scores(w1_eff, w2_eff, input_col_norms) -> ScoreMatrix:
    """Propagation-aware scores for a layer with a chained downstream layer.

    score[i, j] = |w1_eff[i, j]| * ||w2_eff[j, :]|| * input_col_norms[i]
    """
    w1 = as_matrix(w1_eff, "w1_eff")
    w2 = as_matrix(w2_eff, "w2_eff")
    norms = as_vector(input_col_norms, "input_col_norms", nonneg=True)
    check_chain(w1, w2, "w1_eff", "w2_eff")
    if norms.size != w1.shape[0]:
        raise ShapeError(
            f"input_col_norms has length {norms.size} but w1_eff has {w1.shape[0]} rows"
        )
    down = np.linalg.norm(w2, axis=1)
    return ScoreMatrix(np.abs(w1) * down[None, :] * norms[:, None], "foresight")


def foresight_attention_scores(q_eff, k_eff, input_col_norms, side: str) -> ScoreMatrix:
    """Joint Q/K scores for attention projections sharing an input.

    The Q side weighs each entry by the matching ROW norm of K; the K side
    by the matching COLUMN norm of Q. The asymmetry is deliberate and kept
    verbatim (no symmetrization).
    """
    q = as_matrix(q_eff, "q_eff")
    k = as_matrix(k_eff, "k_eff")
    norms = as_vector(input_col_norms, "input_col_norms", nonneg=True)
    check_same_shape(q, k, "q_eff", "k_eff")
    if norms.size != q.shape[0]:
        raise ShapeError(
            f"input_col_norms has length {norms.size} but projections have "
            f"{q.shape[0]} rows"
        )
    if side == "Q":
        down = np.linalg.norm(k, axis=1)
        return ScoreMatrix(np.abs(q) * down[None, :] * norms[:, None], "foresight_q")
    if side == "K":
        down = np.linalg.norm(q, axis=0)
        return ScoreMatrix(np.abs(k) * down[None, :] * norms[:, None], "foresight_k")
    raise ValueError(f"side must be 'Q' or 'K', got {side!r}")


def wanda_scores(w_eff, input_col_norms) -> ScoreMatrix:
    """Local scores: score[i, j] = |w_eff[i, j]| * input_col_norms[i]."""
    w = as_matrix(w_eff, "w_eff")
    norms = as_vector(input_col_norms, "input_col_norms", nonneg=True)
    if norms.size != w.shape[0]:
        raise ShapeError(
            f"input_col_norms has length {norms.size} but w_eff has {w.shape[0]} rows"
        )
    return ScoreMatrix(np.abs(w) * norms[:, None], "wanda")


def magnitude_scores(w_eff) -> ScoreMatrix:
    """Plain |w| scores."""
    return ScoreMatrix(np.abs(as_matrix(w_eff, "w_eff")), "magnitude")


def exact_hessian_diag(x, u2, i: int, j: int) -> float:
    """Analytic d2L/dtheta2 of L(U1) = ||X U1 U2||_F^2 at entry (i, j):
    ``2 * (X^T X)[i, i] * (U2 U2^T)[j, j]``.
    """
    xm = as_matrix(x, "x")
    u2m = as_matrix(u2, "u2")
    check_index(i, xm.shape[1], "i")
    check_index(j, u2m.shape[0], "j")
    col = xm[:, i]
    row = u2m[j, :]
    return float(2.0 * (col @ col) * (row @ row))


def exact_prune_delta(x, u1, u2, i: int, j: int) -> float:
    """Exact loss increase from zeroing the single entry u1[i, j].

    Brute-force evaluation of the masked-composition loss with only (i, j)
    removed; no approximation.
    """
    u1m = as_matrix(u1, "u1")
    check_index(i, u1m.shape[0], "i")
    check_index(j, u1m.shape[1], "j")
    mask = np.ones_like(u1m)
    mask[i, j] = 0.0
    return foresight_loss(mask, u1m, u2, x)
