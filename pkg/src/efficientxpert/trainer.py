"""The pruning-while-fine-tuning loop at toy scale.

Each epoch: plain gradient descent on the adapter factors, a calibration
forward pass, fresh importance scores per prunable layer, EMA smoothing,
row-wise pruning, and (optionally) the closed-form adapter correction.
After the last epoch the adapter product is merged into the base weights
and the final mask applied, yielding a sparse model. A static-mask
baseline (prune once from the initial weights, fine-tune, re-apply the
original mask) is provided for paired comparisons.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .masking import (
    ScoreState,
    apply_mask,
    ema_update,
    globalwise_prune,
    mask_churn,
    rowwise_prune,
    sparsity_of,
)
from .model import (
    LoraLinear,
    ToyModel,
    compose_effective,
    forward,
    replace_layer,
)
from .pbs import masked_residual_norm, pbs_correct
from .scoring import (
    ScoreMatrix,
    foresight_attention_scores,
    foresight_scores,
    magnitude_scores,
    wanda_scores,
)
from .tasks import TaskData
from .validation import MaskError, NumericError, as_matrix

__all__ = [
    "PruneConfig",
    "RunRecord",
    "adapter_gradients",
    "train_epoch",
    "epoch_batches",
    "evaluate",
    "score_model_layers",
    "efficientxpert_run",
    "wanda_baseline_run",
    "merge_and_mask",
]

CONFIG_CRITERIA = ("foresight", "wanda", "magnitude")


@dataclass(frozen=True)
class PruneConfig:
    """Everything a run needs besides the model and the data."""

    sparsity: float = 0.5
    ema_rate: float = 0.5
    ridge_lambda: float = 1e-8
    rank: int = 8
    epochs: int = 3
    learning_rate: float = 1e-4
    seed: int = 0
    batch_size: int = 32
    calibration_batches: int = 8
    calibration_seq_len: int = 16
    criterion: str = "foresight"
    pbs_enabled: bool = True
    pbs_post_pass: bool = False
    pbs_include_scale: bool = True
    global_budget: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if not 0.0 < self.ema_rate <= 1.0:
            raise ValueError(f"ema_rate must be in (0, 1], got {self.ema_rate}")
        if not self.ridge_lambda > 0.0:
            raise ValueError(f"ridge_lambda must be > 0, got {self.ridge_lambda}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.calibration_batches < 1 or self.calibration_seq_len < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.criterion not in CONFIG_CRITERIA:
            raise ValueError(f"criterion must be one of {CONFIG_CRITERIA}, got {self.criterion!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class RunRecord:
    """Per-epoch diagnostics and final metrics of one run."""

    method: str
    train_loss: list[float] = field(default_factory=list)
    mask_churn: list[float] = field(default_factory=list)
    mask_sparsity: list[list[float]] = field(default_factory=list)
    mask_violation: list[float] = field(default_factory=list)
    pbs_summaries: list[list[dict]] = field(default_factory=list)
    final_sparsity: list[float] = field(default_factory=list)
    eval_metrics: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# adapter training


def _training_forward(model: ToyModel, x: np.ndarray):
    """Forward pass keeping the intermediates needed for backprop."""
    effs = []
    for layer in model.layers:
        w = compose_effective(layer)
        if layer.mask is not None:
            w = layer.mask * w
        effs.append(w)
    zs = [x]
    preacts = []
    z = x
    for idx, w in enumerate(effs):
        p = z @ w
        preacts.append(p)
        if idx < len(effs) - 1 and model.activations[idx] == "relu":
            z = np.maximum(p, 0.0)
        else:
            z = p
        zs.append(z)
    return zs, preacts, effs


def _loss_and_output_grad(pred: np.ndarray, y: np.ndarray, loss_kind: str):
    n = pred.shape[0]
    if loss_kind == "mse":
        diff = pred - y
        return float(np.sum(diff * diff) / (2 * n)), diff / n
    if loss_kind == "cross_entropy":
        shifted = pred - pred.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=1, keepdims=True)
        loss = float(-np.sum(y * (shifted - np.log(expd.sum(axis=1, keepdims=True)))) / n)
        return loss, (probs - y) / n
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def adapter_gradients(model: ToyModel, x, y, loss_kind: str = "mse"):
    """Loss and analytic gradients wrt every layer's (B, A) adapter pair.

    Base weights are frozen and receive no gradient. Masked layers see
    gradients only through their kept coordinates.
    """
    xm = as_matrix(x, "x")
    ym = as_matrix(y, "y")
    zs, preacts, effs = _training_forward(model, xm)
    loss, g = _loss_and_output_grad(zs[-1], ym, loss_kind)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        if idx < len(model.layers) - 1 and model.activations[idx] == "relu":
            g = g * (preacts[idx] > 0)
        g_w = zs[idx].T @ g
        if layer.mask is not None:
            g_w = layer.mask * g_w
        g_b = layer.scale * (g_w @ layer.adapter_a.T)
        g_a = layer.scale * (layer.adapter_b.T @ g_w)
        grads[idx] = (g_b, g_a)
        if idx > 0:
            g = g @ effs[idx].T
    return loss, grads


def train_epoch(model: ToyModel, batches, learning_rate: float, loss_kind: str = "mse"):
    """One pass of minibatch gradient descent over ``batches``.

    Returns the updated model and the mean pre-step batch loss. Aborts
    with diagnostics if the loss diverges.
    """
    losses = []
    for step, (xb, yb) in enumerate(batches):
        loss, grads = adapter_gradients(model, xb, yb, loss_kind)
        if not np.isfinite(loss):
            raise NumericError(
                f"training loss diverged at step {step} (loss={loss}); "
                f"learning_rate={learning_rate} is likely too large"
            )
        losses.append(loss)
        new_layers = []
        for layer, (g_b, g_a) in zip(model.layers, grads):
            new_layers.append(
                replace(
                    layer,
                    adapter_b=layer.adapter_b - learning_rate * g_b,
                    adapter_a=layer.adapter_a - learning_rate * g_a,
                )
            )
        model = replace(model, layers=tuple(new_layers))
    if not losses:
        raise ValueError("train_epoch received no batches")
    return model, float(np.mean(losses))


def epoch_batches(data: TaskData, batch_size: int, rng: np.random.Generator):
    """Deterministically shuffled minibatches for one epoch."""
    n = data.x_train.shape[0]
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield data.x_train[idx], data.y_train[idx]


def evaluate(model: ToyModel, x, y, loss_kind: str = "mse") -> float:
    """Loss of the model on held-out data."""
    out, _ = forward(model, x)
    loss, _ = _loss_and_output_grad(out, as_matrix(y, "y"), loss_kind)
    return loss


def _accuracy(model: ToyModel, x, y) -> float:
    out, _ = forward(model, x)
    return float(np.mean(np.argmax(out, axis=1) == np.argmax(y, axis=1)))


# ---------------------------------------------------------------------------
# the epoch loop


def _layer_scores(
    model: ToyModel,
    effs: dict[int, np.ndarray],
    idx: int,
    norms: np.ndarray,
    criterion: str,
) -> ScoreMatrix:
    if criterion == "wanda":
        return wanda_scores(effs[idx], norms)
    if criterion == "magnitude":
        return magnitude_scores(effs[idx])
    rule = model.pairing[idx]
    if rule.kind == "downstream":
        return foresight_scores(effs[idx], effs[rule.partner], norms)
    if rule.kind == "attention_q":
        return foresight_attention_scores(effs[idx], effs[rule.partner], norms, "Q")
    if rule.kind == "attention_k":
        return foresight_attention_scores(effs[rule.partner], effs[idx], norms, "K")
    # last layer of a chain: no downstream factor exists, fall back to local
    return wanda_scores(effs[idx], norms)


def score_model_layers(
    model: ToyModel, calibration, criterion: str = "foresight"
) -> dict[int, ScoreMatrix]:
    """Fresh importance scores for every prunable layer at the current weights."""
    if criterion not in CONFIG_CRITERIA:
        raise ValueError(f"criterion must be one of {CONFIG_CRITERIA}, got {criterion!r}")
    cal = as_matrix(calibration, "calibration")
    _, stats = forward(model, cal)
    effs = {i: compose_effective(layer) for i, layer in enumerate(model.layers)}
    return {
        l: _layer_scores(model, effs, l, stats.for_layer(l), criterion)
        for l in model.prunable_indices()
    }


def _pbs_summary(layer_idx: int, reports) -> dict:
    return {
        "layer": layer_idx,
        "rows": len(reports),
        "over_constrained_rows": sum(r.over_constrained for r in reports),
        "residual_before": float(sum(r.residual_before for r in reports)),
        "residual_after": float(sum(r.residual_after for r in reports)),
        "max_update_norm": float(max((r.update_norm for r in reports), default=0.0)),
    }


def _finalize(
    model: ToyModel,
    masks: dict[int, np.ndarray],
    data: TaskData,
    record: RunRecord,
) -> tuple[ToyModel, RunRecord]:
    for l, mask in masks.items():
        model = replace_layer(model, l, apply_mask(model.layers[l], mask))
    sparse = merge_and_mask(model)
    record.final_sparsity = [sparsity_of(masks[l]) for l in sorted(masks)]
    record.eval_metrics = {
        "eval_loss": evaluate(sparse, data.x_eval, data.y_eval, data.loss_kind),
        "train_loss_final": record.train_loss[-1],
    }
    if data.loss_kind == "cross_entropy":
        record.eval_metrics["eval_accuracy"] = _accuracy(sparse, data.x_eval, data.y_eval)
    return sparse, record


def efficientxpert_run(
    model: ToyModel,
    data: TaskData,
    calibration,
    config: PruneConfig,
    threads: int = 1,
) -> tuple[ToyModel, RunRecord]:
    """Full pruning-while-fine-tuning run.

    Per epoch: adapter update, calibration forward at the current weights,
    then per prunable layer fresh scores -> EMA -> row-wise mask -> adapter
    correction. Masks are tracked outside the model during training (kept
    coordinates train densely) and enforced at merge time; the per-epoch
    mass remaining on masked coordinates is recorded as a diagnostic.
    """
    config.validate()
    cal = as_matrix(calibration, "calibration")
    prunable = model.prunable_indices()
    prune_fn = globalwise_prune if config.global_budget else rowwise_prune
    states = {l: ScoreState(None, 0, config.ema_rate) for l in prunable}
    masks: dict[int, np.ndarray] = {}
    batch_rng = np.random.default_rng([config.seed, 11])
    record = RunRecord(
        method="efficientxpert",
        conventions={
            "scale_in_effective": True,
            "pbs_include_scale": config.pbs_include_scale,
            "mask_enforced_during_training": False,
        },
    )

    for _ in range(config.epochs):
        model, loss = train_epoch(
            model,
            epoch_batches(data, config.batch_size, batch_rng),
            config.learning_rate,
            data.loss_kind,
        )
        record.train_loss.append(loss)
        _, stats = forward(model, cal)
        effs = {i: compose_effective(layer) for i, layer in enumerate(model.layers)}

        def handle(l: int):
            fresh = _layer_scores(model, effs, l, stats.for_layer(l), config.criterion)
            state = ema_update(states[l], fresh)
            mask = prune_fn(state.smoothed, config.sparsity)
            layer = model.layers[l]
            reports = []
            if config.pbs_enabled:
                delta, reports = pbs_correct(
                    layer, mask, config.ridge_lambda, config.pbs_include_scale
                )
                layer = replace(layer, adapter_b=layer.adapter_b + delta)
            return state, mask, layer, reports

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = dict(zip(prunable, pool.map(handle, prunable)))
        else:
            results = {l: handle(l) for l in prunable}

        flips = 0
        total = 0
        summaries = []
        for l in prunable:
            state, mask, layer, reports = results[l]
            if l in masks:
                flips += int(np.sum(masks[l] != mask))
                total += mask.size
            states[l] = state
            masks[l] = mask
            model = replace_layer(model, l, layer)
            if reports:
                summaries.append(_pbs_summary(l, reports))
        record.mask_churn.append(flips / total if total else 0.0)
        record.mask_sparsity.append([sparsity_of(masks[l]) for l in prunable])
        record.pbs_summaries.append(summaries)
        record.mask_violation.append(
            float(sum(masked_residual_norm(model.layers[l], masks[l]) for l in prunable))
        )

    if config.pbs_enabled and config.pbs_post_pass:
        summaries = []
        for l in prunable:
            layer = model.layers[l]
            delta, reports = pbs_correct(
                layer, masks[l], config.ridge_lambda, config.pbs_include_scale
            )
            model = replace_layer(
                model, l, replace(layer, adapter_b=layer.adapter_b + delta)
            )
            summaries.append(_pbs_summary(l, reports))
        record.pbs_summaries.append(summaries)

    return _finalize(model, masks, data, record)


def wanda_baseline_run(
    model: ToyModel,
    data: TaskData,
    calibration,
    config: PruneConfig,
    threads: int = 1,
) -> tuple[ToyModel, RunRecord]:
    """Static-mask baseline: one-shot local pruning of the initial weights,
    masked fine-tuning, and the original mask re-applied at merge.
    """
    config.validate()
    cal = as_matrix(calibration, "calibration")
    prunable = model.prunable_indices()
    prune_fn = globalwise_prune if config.global_budget else rowwise_prune
    _, stats = forward(model, cal)
    masks: dict[int, np.ndarray] = {}
    for l in prunable:
        scores = wanda_scores(compose_effective(model.layers[l]), stats.for_layer(l))
        masks[l] = prune_fn(scores, config.sparsity)
        model = replace_layer(model, l, apply_mask(model.layers[l], masks[l]))

    batch_rng = np.random.default_rng([config.seed, 11])
    record = RunRecord(
        method="wanda_baseline",
        conventions={
            "scale_in_effective": True,
            "pbs_include_scale": config.pbs_include_scale,
            "mask_enforced_during_training": True,
        },
    )
    for _ in range(config.epochs):
        model, loss = train_epoch(
            model,
            epoch_batches(data, config.batch_size, batch_rng),
            config.learning_rate,
            data.loss_kind,
        )
        record.train_loss.append(loss)
        record.mask_churn.append(0.0)
        record.mask_sparsity.append([sparsity_of(masks[l]) for l in prunable])
        record.pbs_summaries.append([])
        record.mask_violation.append(
            float(sum(masked_residual_norm(model.layers[l], masks[l]) for l in prunable))
        )
    return _finalize(model, masks, data, record)


def merge_and_mask(model: ToyModel) -> ToyModel:
    """Fold scale * B @ A into the base weights, apply masks, zero adapters.

    Prunable layers must carry a mask. Merging twice is a no-op.
    """
    new_layers: list[LoraLinear] = []
    for idx, layer in enumerate(model.layers):
        merged = compose_effective(layer)
        if layer.mask is not None:
            merged = layer.mask * merged
        elif idx in model.pairing:
            raise MaskError(f"layer {idx} is prunable but has no mask to merge")
        new_layers.append(
            replace(
                layer,
                base_w=merged,
                adapter_b=np.zeros_like(layer.adapter_b),
                adapter_a=np.zeros_like(layer.adapter_a),
            )
        )
    return replace(model, layers=tuple(new_layers))
