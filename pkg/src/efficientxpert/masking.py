"""Score smoothing and mask construction.

Masks are {0,1}-valued matrices built per row: the lowest-scoring
floor(s * n) entries of each row are removed. Scores are smoothed across
epochs with an exponential moving average so the mask can evolve stably
while adapters train.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .model import LoraLinear
from .scoring import ScoreMatrix
from .validation import as_matrix, check_binary_mask, check_same_shape

__all__ = [
    "ScoreState",
    "ema_update",
    "rowwise_prune",
    "globalwise_prune",
    "apply_mask",
    "sparsity_of",
    "mask_churn",
]


@dataclass(frozen=True)
class ScoreState:
    """EMA-smoothed scores for one layer. ``epoch`` counts updates applied."""

    smoothed: Optional[ScoreMatrix] = None
    epoch: int = 0
    ema_rate: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.ema_rate <= 1.0:
            raise ValueError(f"ema_rate must be in (0, 1], got {self.ema_rate}")
        if self.epoch < 0:
            raise ValueError("epoch must be >= 0")


def ema_update(state: ScoreState, fresh: ScoreMatrix) -> ScoreState:
    """Fold fresh scores into the state: eta * fresh + (1 - eta) * previous.

    The first update (no prior scores) adopts the fresh scores unchanged.
    """
    if state.smoothed is None:
        return replace(state, smoothed=fresh, epoch=state.epoch + 1)
    prev = state.smoothed
    check_same_shape(fresh.scores, prev.scores, "fresh scores", "smoothed scores")
    if fresh.criterion != prev.criterion:
        raise ValueError(
            f"cannot mix criteria {prev.criterion!r} and {fresh.criterion!r} in "
            "one score state"
        )
    eta = state.ema_rate
    blended = eta * fresh.scores + (1.0 - eta) * prev.scores
    return replace(
        state,
        smoothed=ScoreMatrix(blended, fresh.criterion),
        epoch=state.epoch + 1,
    )


def _scores_array(scores: Union[ScoreMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(scores, ScoreMatrix):
        return scores.scores
    a = as_matrix(scores, "scores")
    if np.any(a < 0):
        raise ValueError("scores must be entrywise >= 0")
    return a


def _check_sparsity(sparsity: float) -> float:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    return float(sparsity)


def rowwise_prune(scores: Union[ScoreMatrix, np.ndarray], sparsity: float) -> np.ndarray:
    """Binary mask keeping the top-(1 - s) fraction of each row by score.

    Exactly floor(s * n) entries per row are removed; ties are broken by
    removing the lowest column index first, so masks are deterministic.
    """
    s = _check_sparsity(sparsity)
    a = _scores_array(scores)
    n = a.shape[1]
    k = int(np.floor(s * n))
    mask = np.ones_like(a)
    if k > 0:
        order = np.argsort(a, axis=1, kind="stable")
        rows = np.arange(a.shape[0])[:, None]
        mask[rows, order[:, :k]] = 0.0
    return mask


def globalwise_prune(scores: Union[ScoreMatrix, np.ndarray], sparsity: float) -> np.ndarray:
    """Mask with a single global budget of floor(s * size) removals.

    Experimental alternative to the row-wise rule; never the default.
    """
    s = _check_sparsity(sparsity)
    a = _scores_array(scores)
    k = int(np.floor(s * a.size))
    mask = np.ones_like(a)
    if k > 0:
        order = np.argsort(a, axis=None, kind="stable")
        mask.flat[order[:k]] = 0.0
    return mask


def apply_mask(layer: LoraLinear, mask) -> LoraLinear:
    """Return the layer with ``mask`` installed; forwards then use
    mask * (W + scale * B @ A)."""
    m = as_matrix(mask, "mask")
    check_same_shape(m, layer.base_w, "mask", "base_w")
    check_binary_mask(m)
    return replace(layer, mask=m)


def sparsity_of(mask) -> float:
    """Fraction of zero entries in a binary mask (exact rational as float)."""
    m = as_matrix(mask, "mask")
    check_binary_mask(m)
    zeros = int(m.size - np.count_nonzero(m))
    return zeros / m.size


def mask_churn(prev_mask, new_mask) -> float:
    """Fraction of entries that flipped between two masks of equal shape."""
    p = as_matrix(prev_mask, "prev_mask")
    q = as_matrix(new_mask, "new_mask")
    check_same_shape(p, q, "prev_mask", "new_mask")
    check_binary_mask(p, "prev_mask")
    check_binary_mask(q, "new_mask")
    return float(np.mean(p != q))
