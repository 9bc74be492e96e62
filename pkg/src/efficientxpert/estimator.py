"""Scikit-learn estimator facade over the pruning pipeline.

``EfficientXpertRegressor.fit(X, y)`` fine-tunes LoRA adapters on (X, y)
while pruning to the target sparsity, then merges to a sparse model;
``predict`` runs the merged model. Parameters follow scikit-learn
conventions (stored verbatim in ``__init__``, validated in ``fit``), so
the estimator composes with pipelines, grid search, and ``clone``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .tasks import TaskData, build_toy_mlp, calibration_inputs
from .trainer import PruneConfig, efficientxpert_run, wanda_baseline_run

__all__ = ["EfficientXpertRegressor"]


class EfficientXpertRegressor(BaseEstimator, RegressorMixin):
    """Prune-while-fine-tune regressor.

    Parameters
    ----------
    model : ToyModel or None
        Base model to sparsify. When None, a fresh random MLP with
        ``hidden_widths`` is built from the data dimensions.
    hidden_widths : tuple of int
        Hidden layer widths for the auto-built model.
    method : {"efficientxpert", "wanda_baseline"}
        Pipeline variant to run.
    Remaining parameters mirror PruneConfig fields.

    Attributes
    ----------
    model_ : ToyModel
        Merged sparse model.
    record_ : RunRecord
        Per-epoch diagnostics of the fit.
    """

    def __init__(
        self,
        model=None,
        hidden_widths=(32, 16),
        method="efficientxpert",
        sparsity=0.5,
        ema_rate=0.5,
        ridge_lambda=1e-8,
        rank=8,
        epochs=3,
        learning_rate=1e-2,
        batch_size=32,
        criterion="foresight",
        pbs_enabled=True,
        calibration_batches=8,
        calibration_seq_len=16,
        seed=0,
    ):
        self.model = model
        self.hidden_widths = hidden_widths
        self.method = method
        self.sparsity = sparsity
        self.ema_rate = ema_rate
        self.ridge_lambda = ridge_lambda
        self.rank = rank
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.criterion = criterion
        self.pbs_enabled = pbs_enabled
        self.calibration_batches = calibration_batches
        self.calibration_seq_len = calibration_seq_len
        self.seed = seed

    def _config(self) -> PruneConfig:
        cfg = PruneConfig(
            sparsity=self.sparsity,
            ema_rate=self.ema_rate,
            ridge_lambda=self.ridge_lambda,
            rank=self.rank,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            seed=self.seed,
            batch_size=self.batch_size,
            calibration_batches=self.calibration_batches,
            calibration_seq_len=self.calibration_seq_len,
            criterion=self.criterion,
            pbs_enabled=self.pbs_enabled,
        )
        cfg.validate()
        return cfg

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        self._y_was_1d_ = y.ndim == 1
        y2 = y.reshape(-1, 1) if self._y_was_1d_ else y
        if y2.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} samples but y has {y2.shape[0]}")
        if self.method not in ("efficientxpert", "wanda_baseline"):
            raise ValueError(f"unknown method {self.method!r}")
        cfg = self._config()
        base = self.model
        if base is None:
            widths = (X.shape[1], *self.hidden_widths, y2.shape[1])
            base = build_toy_mlp(widths, rank=self.rank, seed=self.seed)
        data = TaskData(X, y2, X, y2, "mse")
        cal = calibration_inputs(
            base.in_dim, cfg.calibration_batches, cfg.calibration_seq_len, cfg.seed
        )
        run = efficientxpert_run if self.method == "efficientxpert" else wanda_baseline_run
        self.model_, self.record_ = run(base, data, cal, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        from .model import forward

        out, _ = forward(self.model_, X)
        return out.ravel() if self._y_was_1d_ else out
