"""Partial Brain Surgeon: closed-form adapter realignment to a mask.

After pruning, the composed weight W + scale * B @ A still carries mass on
removed coordinates. For each row i with removed column set S_i, the
minimum-disturbance correction to the adapter row b_i is the ridge solution

    delta_b_i = -(W + scale*B@A)[i, S_i] @ A_S^T @ (A_S @ A_S^T + lambda I)^-1

with A_S the (scaled) adapter columns at the removed positions. Stacking
rows gives a full update to B that suppresses the pruned coordinates while
leaving the adapter as close as possible to its trained state.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .model import LoraLinear, compose_effective
from .validation import (
    NonFiniteError,
    as_matrix,
    check_binary_mask,
    check_same_shape,
)

__all__ = [
    "PbsReport",
    "pbs_row_update",
    "pbs_correct",
    "masked_residual_norm",
    "reports_to_text",
    "reports_to_dicts",
]


@dataclass(frozen=True)
class PbsReport:
    """Per-row record of what the correction did.

    ``residual_before``/``residual_after`` are squared l2 norms of the
    composed weight restricted to that row's removed coordinates. Rows with
    more removals than the adapter rank are flagged over-constrained; they
    generally retain nonzero residual.
    """

    row: int
    pruned_count: int
    residual_before: float
    residual_after: float
    update_norm: float
    over_constrained: bool


def pbs_row_update(residual_row, a_cols, ridge_lambda: float) -> np.ndarray:
    """Closed-form ridge minimizer of ||residual + db @ a_cols||^2 + lambda ||db||^2.

    ``a_cols`` is r x |S|; the result has length r. Solved via Cholesky on
    the positive-definite r x r system, with a generic dense solve as
    fallback if the factorization fails numerically.
    """
    if not (np.isfinite(ridge_lambda) and ridge_lambda > 0.0):
        raise ValueError(f"ridge_lambda must be > 0, got {ridge_lambda!r}")
    a = np.atleast_2d(np.asarray(a_cols, dtype=np.float64))
    res = np.asarray(residual_row, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(res)):
        raise NonFiniteError("pbs_row_update inputs must be finite")
    r = a.shape[0]
    if res.size != a.shape[1]:
        raise ValueError(
            f"residual has length {res.size} but a_cols has {a.shape[1]} columns"
        )
    if res.size == 0:
        return np.zeros(r)
    gram = a @ a.T + ridge_lambda * np.eye(r)
    rhs = -(a @ res)
    try:
        delta = cho_solve(cho_factor(gram, lower=True), rhs)
    except LinAlgError:
        delta = np.linalg.solve(gram, rhs)
    return delta


def pbs_correct(
    layer: LoraLinear,
    mask,
    ridge_lambda: float,
    include_scale: bool = True,
    threads: int = 1,
) -> tuple[np.ndarray, list[PbsReport]]:
    """Row-by-row adapter correction for one masked layer.

    Returns the m x r update to the adapter B factor (caller applies
    ``adapter_b + delta``) and one report per row. ``include_scale``
    multiplies the adapter columns by the LoRA scale so the update acts on
    the same composed product the mask sees; disabling it reproduces the
    unscaled convention (exact only when scale == 1).
    """
    m = as_matrix(mask, "mask")
    check_same_shape(m, layer.base_w, "mask", "base_w")
    check_binary_mask(m)
    composed = compose_effective(layer)
    a = layer.adapter_a * layer.scale if include_scale else layer.adapter_a
    rank = layer.rank
    delta = np.zeros((layer.in_dim, rank))
    reports: list[PbsReport] = [None] * layer.in_dim  # type: ignore[list-item]

    def solve_row(i: int) -> None:
        pruned = np.flatnonzero(m[i] == 0.0)
        if pruned.size == 0:
            reports[i] = PbsReport(i, 0, 0.0, 0.0, 0.0, False)
            return
        residual = composed[i, pruned]
        a_cols = a[:, pruned]
        db = pbs_row_update(residual, a_cols, ridge_lambda)
        after = residual + db @ a_cols
        delta[i] = db
        reports[i] = PbsReport(
            row=i,
            pruned_count=int(pruned.size),
            residual_before=float(residual @ residual),
            residual_after=float(after @ after),
            update_norm=float(np.linalg.norm(db)),
            over_constrained=bool(pruned.size > rank),
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(solve_row, range(layer.in_dim)))
    else:
        for i in range(layer.in_dim):
            solve_row(i)
    return delta, reports


def masked_residual_norm(layer: LoraLinear, mask) -> float:
    """Squared Frobenius norm of the composed weight at removed positions."""
    m = as_matrix(mask, "mask")
    check_same_shape(m, layer.base_w, "mask", "base_w")
    composed = compose_effective(layer)
    masked = (1.0 - m) * composed
    return float(np.sum(masked * masked))


def reports_to_dicts(reports: list[PbsReport]) -> list[dict]:
    return [asdict(r) for r in reports]


def reports_to_text(reports: list[PbsReport]) -> str:
    """One record per row, fixed-width columns."""
    lines = ["row  pruned  residual_before  residual_after  update_norm  over_constrained"]
    for r in reports:
        lines.append(
            f"{r.row:<4d} {r.pruned_count:<7d} {r.residual_before:<16.6e} "
            f"{r.residual_after:<15.6e} {r.update_norm:<12.6e} {str(r.over_constrained).lower()}"
        )
    return "\n".join(lines)
