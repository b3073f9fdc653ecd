"""Scikit-learn style estimator wrapping the full train/route/predict pipeline.

``NestedExpertsClassifier`` behaves like any sklearn classifier (``fit`` /
``predict`` / ``predict_proba`` / ``score``, ``get_params`` round trips, and
input validation through the usual helpers), so the model drops into
pipelines, grid searches and cross-validation. Internally ``fit`` runs the
two-stage recipe: joint nested pretraining followed by router-active
finetuning at the requested capacity.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .data import Dataset
from .errors import ConfigError
from .model import ModelConfig, ModelParams, NestedSpec, routed_forward
from .routing import solve_capacity
from .train import ADAPTIVE_CAPACITY_SET, TrainConfig, mat_joint_pretrain, mone_finetune

__all__ = ["NestedExpertsClassifier"]


class NestedExpertsClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier with nested weight-sliced experts and token routing.

    Parameters
    ----------
    image_size : (height, width) of the input images.
    channels : color planes per image.
    model_dim : full transformer width; nested experts use exponentially
        spaced slices of it.
    num_experts, num_heads, num_layers : architecture knobs.
    patch_size : square patch edge for tokenization.
    capacity : effective capacity used for finetuning and prediction
        (1.0 trains and runs the full model everywhere).
    adaptive : sample the training capacity per step from the standard set
        instead of holding it fixed.
    pretrain_epochs, finetune_epochs, learning_rate, batch_size : schedule.
    isoflops : extend finetuning so total training compute matches a dense
        run of ``finetune_epochs``.
    random_state : seed for initialization, batching and capacity sampling.

    Attributes
    ----------
    params_ : trained model parameters.
    classes_ : sorted class labels seen in ``fit``.
    n_features_in_ : flattened input width accepted by ``predict``.
    """

    def __init__(
        self,
        image_size=(32, 32),
        channels=1,
        model_dim=64,
        num_experts=4,
        num_heads=4,
        num_layers=4,
        patch_size=8,
        capacity=0.6,
        adaptive=False,
        pretrain_epochs=4,
        finetune_epochs=3,
        learning_rate=0.002,
        batch_size=128,
        isoflops=True,
        optimizer="adam",
        random_state=0,
    ):
        self.image_size = image_size
        self.channels = channels
        self.model_dim = model_dim
        self.num_experts = num_experts
        self.num_heads = num_heads
        self.num_layers = num_layers
        self.patch_size = patch_size
        self.capacity = capacity
        self.adaptive = adaptive
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.isoflops = isoflops
        self.optimizer = optimizer
        self.random_state = random_state

    def _model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            spec=NestedSpec(
                model_dim=self.model_dim,
                num_experts=self.num_experts,
                num_heads=self.num_heads,
                num_layers=self.num_layers,
            ),
            image_size=tuple(self.image_size),
            patch_size=self.patch_size,
            channels=self.channels,
            num_classes=num_classes,
        )

    def _to_images(self, X) -> np.ndarray:
        h, w = self.image_size
        expected = h * w * self.channels
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.ndim == 2:
            if X.shape[1] != expected:
                raise ConfigError(
                    f"flattened inputs need {expected} features for "
                    f"{h}x{w}x{self.channels} images, got {X.shape[1]}"
                )
            return X.reshape(-1, h, w, self.channels)
        if X.ndim == 3 and self.channels == 1:
            if X.shape[1:] != (h, w):
                raise ConfigError(f"expected {h}x{w} images, got {X.shape[1:]}")
            return X[..., None]
        if X.ndim == 4:
            if X.shape[1:] != (h, w, self.channels):
                raise ConfigError(f"expected {h}x{w}x{self.channels} images, got {X.shape[1:]}")
            return X
        raise ConfigError(f"cannot interpret input of shape {X.shape} as images")

    def fit(self, X, y):
        """Pretrain all granularities jointly, then finetune with routing."""
        images = self._to_images(X)
        y = np.asarray(y)
        if len(y) != len(images):
            raise ConfigError("X and y disagree on sample count")
        check_random_state(self.random_state)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = int(np.prod(images.shape[1:]))

        cfg = self._model_config(num_classes=len(self.classes_))
        self.params_ = ModelParams.init(cfg, seed=int(self.random_state))
        data = Dataset(images, encoded, split="train")

        self.pretrain_result_ = mat_joint_pretrain(
            self.params_,
            data,
            TrainConfig(
                learning_rate=self.learning_rate,
                epochs=self.pretrain_epochs,
                batch_size=self.batch_size,
                seed=int(self.random_state),
                optimizer=self.optimizer,
            ),
        )
        if self.finetune_epochs > 0:
            self.finetune_result_ = mone_finetune(
                self.params_,
                data,
                TrainConfig(
                    learning_rate=self.learning_rate,
                    epochs=self.finetune_epochs,
                    batch_size=self.batch_size,
                    seed=int(self.random_state),
                    optimizer=self.optimizer,
                    capacity=None if self.adaptive else self.capacity,
                    capacity_set=ADAPTIVE_CAPACITY_SET if self.adaptive else None,
                    isoflops=self.isoflops,
                ),
            )
        return self

    def decision_function(self, X, capacity: float | None = None) -> np.ndarray:
        """Routed logits at the prediction capacity (default: the fit capacity)."""
        check_is_fitted(self, "params_")
        images = self._to_images(X)
        e_c = self.capacity if capacity is None else capacity
        c = solve_capacity(e_c, self.num_experts)
        out = []
        for start in range(0, len(images), 256):
            logits, _ = routed_forward(images[start : start + 256], self.params_, capacity=c)
            out.append(logits.data)
        return np.concatenate(out, axis=0)

    def predict_proba(self, X, capacity: float | None = None) -> np.ndarray:
        logits = self.decision_function(X, capacity=capacity)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, capacity: float | None = None) -> np.ndarray:
        logits = self.decision_function(X, capacity=capacity)
        return self.classes_[logits.argmax(axis=1)]
