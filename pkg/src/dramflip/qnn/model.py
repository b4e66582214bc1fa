"""Float victim models and their training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import layers
from .data import Dataset

log = logging.getLogger(__name__)


# training recipe for attack victims; decoupled weight decay keeps logits from
# saturating, which is closer to how deployed classifiers are trained
VICTIM_RECIPE = {"epochs": 20, "lr": 1e-2, "weight_decay": 0.1, "batch_size": 64}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class FloatModel:
    spec: list[dict]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_shape: tuple[int, ...]
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        layers.validate_spec(self.spec, self.input_shape)

    @classmethod
    def init(cls, spec: list[dict], input_shape: tuple[int, ...], seed: int = 0) -> "FloatModel":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for layer in spec:
            if layers.is_parametric(layer):
                wshape, bshape = layers.param_shapes(layer)
                fan_in = int(np.prod(wshape[1:]))
                weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=wshape))
                biases.append(np.zeros(bshape))
        return cls(spec, weights, biases, input_shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return layers.forward(self.spec, self.weights, self.biases, x)

    def copy(self) -> "FloatModel":
        return copy.deepcopy(self)


class AccuracyResult(NamedTuple):
    accuracy: float
    random_guess: float


def predict(model, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    return np.concatenate([model.forward(x[i:i + batch_size]).argmax(axis=1)
                           for i in range(0, len(x), batch_size)])


def accuracy(model, dataset: Dataset) -> AccuracyResult:
    """Top-1 accuracy on ``dataset`` and the uniform-guess baseline 1/K."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    hits = predict(model, dataset.inputs) == dataset.labels
    return AccuracyResult(float(hits.mean()), 1.0 / dataset.num_classes)


def train_float(spec: list[dict], dataset: Dataset, epochs: int = 20, lr: float = 1e-2, seed: int = 0,
                batch_size: int = 64, test: Dataset | None = None, weight_decay: float = 0.0) -> FloatModel:
    """Adam on mini-batches; fully determined by ``seed``.

    ``weight_decay`` is decoupled (AdamW-style) and applies to weights only.

    Final train (and test, when given) accuracy is stored in ``model.history``.
    """
    model = FloatModel.init(spec, dataset.inputs.shape[1:], seed)
    rng = np.random.default_rng(seed + 1)
    params = model.weights + model.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits, caches = layers.forward(spec, model.weights, model.biases, dataset.inputs[idx], keep=True)
            loss, grad = layers.cross_entropy(logits, dataset.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {step}; lower the learning rate")
            gws, gbs = layers.backward(spec, model.weights, caches, grad)
            step += 1
            if weight_decay:
                for w in model.weights:
                    w *= 1.0 - lr * weight_decay
            for p, g, mi, vi in zip(params, gws + gbs, m, v):
                mi *= beta1
                mi += (1 - beta1) * g
                vi *= beta2
                vi += (1 - beta2) * g * g
                mhat = mi / (1 - beta1 ** step)
                vhat = vi / (1 - beta2 ** step)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / len(dataset))

    model.history = {"loss": losses, "train_accuracy": accuracy(model, dataset).accuracy}
    if test is not None:
        model.history["test_accuracy"] = accuracy(model, test).accuracy
    log.info("trained %d epochs: %s", epochs, {k: v for k, v in model.history.items() if k != "loss"})
    return model
