"""LoRA-adapted linear layers and toy multilayer models.

A layer carries a frozen base weight W (m x n) plus low-rank adapter
factors B (m x r) and A (r x n); its effective weight is W + scale * B @ A.
A ToyModel chains such layers, declares which layers are prunable and who
their scoring partner is, and captures per-layer input-channel norms
(calibration statistics) during forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .validation import (
    NonFiniteError,
    ShapeError,
    MaskError,
    as_matrix,
    check_binary_mask,
    check_chain,
    check_same_shape,
    frozen,
)

__all__ = [
    "Matrix",
    "LoraLinear",
    "PairingRule",
    "ToyModel",
    "CalibrationStats",
    "compose_effective",
    "forward",
    "replace_layer",
]

# Dense 2-D float64 array, row-major. The universal carrier for weights,
# activations, scores, and {0,1}-valued masks.
Matrix = np.ndarray

PAIRING_KINDS = ("downstream", "attention_q", "attention_k", "local_fallback")
ACTIVATION_KINDS = ("identity", "relu")


@dataclass(frozen=True)
class PairingRule:
    """How a prunable layer finds its scoring partner.

    ``downstream``/``attention_q``/``attention_k`` point at another layer;
    ``local_fallback`` scores the layer on its own (no downstream factor).
    """

    kind: str
    partner: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in PAIRING_KINDS:
            raise ValueError(f"unknown pairing kind {self.kind!r}")
        needs_partner = self.kind != "local_fallback"
        if needs_partner and self.partner is None:
            raise ValueError(f"pairing kind {self.kind!r} requires a partner index")
        if not needs_partner and self.partner is not None:
            raise ValueError("local_fallback takes no partner")


@dataclass(frozen=True)
class LoraLinear:
    """One adapted layer: frozen base plus scaled low-rank adapter product."""

    base_w: Matrix
    adapter_b: Matrix
    adapter_a: Matrix
    scale: float = 2.0
    mask: Optional[Matrix] = None

    def __post_init__(self) -> None:
        w = frozen(as_matrix(self.base_w, "base_w"))
        b = frozen(as_matrix(self.adapter_b, "adapter_b"))
        a = frozen(as_matrix(self.adapter_a, "adapter_a"))
        m, n = w.shape
        if b.shape[0] != m:
            raise ShapeError(f"adapter_b has {b.shape[0]} rows but base_w has {m}")
        if a.shape[1] != n:
            raise ShapeError(f"adapter_a has {a.shape[1]} cols but base_w has {n}")
        if b.shape[1] != a.shape[0]:
            raise ShapeError(
                f"adapter_b has {b.shape[1]} cols but adapter_a has {a.shape[0]} rows"
            )
        r = b.shape[1]
        if not r < min(m, n):
            raise ShapeError(f"rank {r} must be < min{(m, n)}")
        if not (np.isfinite(self.scale) and self.scale >= 0.0):
            raise ValueError(f"scale must be a nonnegative float, got {self.scale!r}")
        mask = self.mask
        if mask is not None:
            mask = as_matrix(mask, "mask")
            check_same_shape(mask, w, "mask", "base_w")
            check_binary_mask(mask)
            mask = frozen(mask)
        object.__setattr__(self, "base_w", w)
        object.__setattr__(self, "adapter_b", b)
        object.__setattr__(self, "adapter_a", a)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rank(self) -> int:
        return self.adapter_b.shape[1]

    @property
    def in_dim(self) -> int:
        return self.base_w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.base_w.shape[1]


@dataclass(frozen=True)
class CalibrationStats:
    """Per-layer Euclidean norms of each input channel seen by a forward pass.

    ``input_col_norms[l][i]`` is the l2 norm of column i of the activations
    entering layer l across the whole batch.
    """

    input_col_norms: tuple[np.ndarray, ...]

    def for_layer(self, index: int) -> np.ndarray:
        return self.input_col_norms[index]


def _is_attention(rule: Optional[PairingRule]) -> bool:
    return rule is not None and rule.kind in ("attention_q", "attention_k")


@dataclass(frozen=True)
class ToyModel:
    """Ordered LoRA layers plus the pairing graph used for scoring.

    ``pairing`` maps layer index -> PairingRule and defines the prunable
    set. ``activations`` has one entry per inter-layer gap. Gaps adjacent
    to attention-paired layers are exempt from the shape-chain check
    (attention partners are parallel branches, not the chained path).
    """

    layers: tuple[LoraLinear, ...]
    pairing: dict[int, PairingRule] = field(default_factory=dict)
    activations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("model needs at least one layer")
        acts = tuple(self.activations)
        if not acts and len(layers) > 1:
            acts = ("identity",) * (len(layers) - 1)
        if len(acts) != len(layers) - 1:
            raise ShapeError(
                f"got {len(acts)} activations for {len(layers) - 1} inter-layer gaps"
            )
        for kind in acts:
            if kind not in ACTIVATION_KINDS:
                raise ValueError(f"unknown activation {kind!r}")
        for idx, rule in self.pairing.items():
            if not 0 <= idx < len(layers):
                raise ShapeError(f"pairing refers to missing layer {idx}")
            if rule.kind == "downstream":
                self._check_partner(layers, idx, rule.partner)
                if layers[rule.partner].in_dim != layers[idx].out_dim:
                    raise ShapeError(
                        f"layer {idx} (out_dim {layers[idx].out_dim}) cannot pair "
                        f"downstream with layer {rule.partner} "
                        f"(in_dim {layers[rule.partner].in_dim})"
                    )
            elif rule.kind in ("attention_q", "attention_k"):
                self._check_partner(layers, idx, rule.partner)
                if layers[rule.partner].base_w.shape != layers[idx].base_w.shape:
                    raise ShapeError(
                        f"attention partners {idx} and {rule.partner} must share a "
                        f"shape, got {layers[idx].base_w.shape} vs "
                        f"{layers[rule.partner].base_w.shape}"
                    )
        for i in range(len(layers) - 1):
            if _is_attention(self.pairing.get(i)) or _is_attention(self.pairing.get(i + 1)):
                continue
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise ShapeError(
                    f"layer {i} out_dim {layers[i].out_dim} != "
                    f"layer {i + 1} in_dim {layers[i + 1].in_dim}"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "pairing", dict(self.pairing))

    @staticmethod
    def _check_partner(layers, idx: int, partner: Optional[int]) -> None:
        if partner is None or not 0 <= partner < len(layers) or partner == idx:
            raise ShapeError(f"layer {idx} pairs with missing layer {partner}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def prunable_indices(self) -> tuple[int, ...]:
        return tuple(sorted(self.pairing))


def compose_effective(layer: LoraLinear) -> Matrix:
    """Effective weight W + scale * B @ A. Never applies the layer's mask."""
    out = layer.base_w + layer.scale * (layer.adapter_b @ layer.adapter_a)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("effective weight contains non-finite entries")
    return out


def _masked_effective(layer: LoraLinear) -> Matrix:
    w = compose_effective(layer)
    if layer.mask is not None:
        w = layer.mask * w
    return w


def forward(model: ToyModel, x) -> tuple[Matrix, CalibrationStats]:
    """Run ``x`` through the model, returning output and calibration stats.

    Each layer applies its masked effective weight, followed by the
    declared activation for that gap. The stats record the column norms of
    the activations actually entering each layer.
    """
    z = as_matrix(x, "input")
    if z.shape[1] != model.in_dim:
        raise ShapeError(
            f"input has {z.shape[1]} cols but first layer expects {model.in_dim}"
        )
    norms: list[np.ndarray] = []
    for idx, layer in enumerate(model.layers):
        if z.shape[1] != layer.in_dim:
            raise ShapeError(
                f"layer {idx} expects in_dim {layer.in_dim}, got {z.shape[1]}"
            )
        norms.append(np.linalg.norm(z, axis=0))
        z = z @ _masked_effective(layer)
        if idx < len(model.layers) - 1 and model.activations[idx] == "relu":
            z = np.maximum(z, 0.0)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite activation after layer {idx}")
    return z, CalibrationStats(tuple(norms))


def replace_layer(model: ToyModel, index: int, layer: LoraLinear) -> ToyModel:
    """Return a model with layer ``index`` swapped out."""
    layers = list(model.layers)
    layers[index] = layer
    return replace(model, layers=tuple(layers))
