"""Synthetic desk-scale tasks: model builders, teachers, and data.

Two task families produce nontrivial adapter gradients without external
data: teacher-student regression (a frozen random teacher with a low-rank
"domain shift" generates targets) and character-frequency sequence
classification. Base weights are drawn with heterogeneous per-row gains so
that downstream amplification differs visibly across channels, the regime
propagation-aware scoring is built for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LoraLinear, PairingRule, ToyModel, forward
from .validation import as_matrix

__all__ = [
    "TaskData",
    "build_toy_mlp",
    "make_teacher",
    "regression_task",
    "char_classification_task",
    "calibration_inputs",
]


@dataclass(frozen=True)
class TaskData:
    """Train/eval split plus the loss the task is scored with."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    loss_kind: str = "mse"

    def __post_init__(self) -> None:
        object.__setattr__(self, "x_train", as_matrix(self.x_train, "x_train"))
        object.__setattr__(self, "y_train", as_matrix(self.y_train, "y_train"))
        object.__setattr__(self, "x_eval", as_matrix(self.x_eval, "x_eval"))
        object.__setattr__(self, "y_eval", as_matrix(self.y_eval, "y_eval"))
        if self.loss_kind not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


def build_toy_mlp(
    widths,
    rank: int = 8,
    scale: float = 2.0,
    seed: int = 0,
    activations=None,
    gain_spread: float = 1.0,
) -> ToyModel:
    """Random MLP of LoRA layers with the standard chain pairing.

    Layer l pairs downstream with layer l+1; the last layer falls back to
    local scoring. Adapter B factors start at zero (the adapter product is
    initially inactive), A factors at N(0, 1/r). ``gain_spread`` sets the
    log-uniform spread of per-row gains on the base weights.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = np.random.default_rng(seed)
    layers = []
    for m, n in zip(widths, widths[1:]):
        w = rng.standard_normal((m, n)) / np.sqrt(m)
        if gain_spread > 0:
            w = w * np.exp(rng.uniform(-gain_spread, gain_spread, size=m))[:, None]
        b = np.zeros((m, rank))
        a = rng.standard_normal((rank, n)) / np.sqrt(rank)
        layers.append(LoraLinear(w, b, a, scale=scale))
    n_layers = len(layers)
    pairing = {i: PairingRule("downstream", i + 1) for i in range(n_layers - 1)}
    pairing[n_layers - 1] = PairingRule("local_fallback")
    acts = tuple(activations) if activations is not None else ("identity",) * (n_layers - 1)
    return ToyModel(tuple(layers), pairing, acts)


def make_teacher(
    model: ToyModel, seed: int = 0, shift_rank: int = 4, shift_scale: float = 0.5
) -> ToyModel:
    """Frozen teacher: the model's bases plus a random low-rank shift.

    The shift of each layer is scaled to ``shift_scale`` times the base
    Frobenius norm, so adapters of comparable rank can learn it.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for layer in model.layers:
        m, n = layer.base_w.shape
        raw = rng.standard_normal((m, shift_rank)) @ rng.standard_normal((shift_rank, n))
        shift = raw * (shift_scale * np.linalg.norm(layer.base_w) / np.linalg.norm(raw))
        layers.append(
            LoraLinear(
                layer.base_w + shift,
                np.zeros((m, 1)),
                np.zeros((1, n)),
                scale=0.0,
            )
        )
    return ToyModel(tuple(layers), {}, model.activations)


def regression_task(
    teacher: ToyModel, n_train: int = 256, n_eval: int = 256, seed: int = 0
) -> TaskData:
    """Gaussian inputs, targets generated by the frozen teacher."""
    rng = np.random.default_rng(seed)
    x_train = rng.standard_normal((n_train, teacher.in_dim))
    x_eval = rng.standard_normal((n_eval, teacher.in_dim))
    y_train, _ = forward(teacher, x_train)
    y_eval, _ = forward(teacher, x_eval)
    return TaskData(x_train, y_train, x_eval, y_eval, "mse")


def char_classification_task(
    n_train: int = 256,
    n_eval: int = 256,
    alphabet_size: int = 12,
    n_classes: int = 3,
    seq_len: int = 24,
    seed: int = 0,
) -> TaskData:
    """Classify character sequences by their class-conditional letter usage.

    Each class draws characters from its own random distribution; a sample
    is the normalized character-count vector of one sequence, the target a
    one-hot class label.
    """
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((n_classes, alphabet_size)) * 1.5
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)

    def sample(n: int) -> tuple[np.ndarray, np.ndarray]:
        x = np.zeros((n, alphabet_size))
        y = np.zeros((n, n_classes))
        classes = rng.integers(0, n_classes, size=n)
        for i, c in enumerate(classes):
            seq = rng.choice(alphabet_size, size=seq_len, p=probs[c])
            counts = np.bincount(seq, minlength=alphabet_size)
            x[i] = counts / seq_len
            y[i, c] = 1.0
        return x, y

    x_train, y_train = sample(n_train)
    x_eval, y_eval = sample(n_eval)
    return TaskData(x_train, y_train, x_eval, y_eval, "cross_entropy")


def calibration_inputs(
    dim: int, n_batches: int = 8, seq_len: int = 16, seed: int = 0
) -> np.ndarray:
    """Synthetic calibration batch: ``n_batches`` sequences of ``seq_len``
    feature rows, stacked. Used only to measure input-channel norms."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_batches * seq_len, dim))
