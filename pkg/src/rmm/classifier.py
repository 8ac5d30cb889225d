"""Linear softmax classifier trained incrementally, plus herding selection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 12
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    weight_decay: float = 5e-4
    finetune_epochs: int = 4
    finetune_lr_scale: float = 0.1
    # learning rate divided by 10 at these fractions of the run
    milestones: tuple[float, ...] = (0.5, 0.75)


@dataclass(frozen=True)
class ClassifierState:
    weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seen_classes: tuple[int, ...] = ()

    @classmethod
    def empty(cls, dim: int) -> "ClassifierState":
        return cls(np.zeros((0, dim)), np.zeros(0), ())

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def rows(self, class_ids) -> np.ndarray:
        index = {c: r for r, c in enumerate(self.seen_classes)}
        try:
            return np.array([index[c] for c in class_ids], dtype=np.intp)
        except KeyError as exc:
            raise ValueError(f"class {exc.args[0]} is unknown to the classifier") from None

    def logits(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights.T + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not self.seen_classes:
            raise ValueError("classifier has no classes")
        return np.asarray(self.seen_classes)[self.logits(X).argmax(axis=1)]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy_grad(W, b, X, rows):
    """Mean softmax cross-entropy and its gradient for targets ``rows``."""
    logits = X @ W.T + b
    p = softmax(logits)
    n = X.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), rows]))
    p[np.arange(n), rows] -= 1.0
    p /= n
    return loss, p.T @ X, p.sum(axis=0)


def _sgd(model: ClassifierState, X, y, epochs, lr, config: ClassifierConfig, rng) -> ClassifierState:
    if epochs <= 0 or X.shape[0] == 0:
        return model
    rows = model.rows(y)
    W, b = model.weights.copy(), model.bias.copy()
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    n, bs = X.shape[0], config.batch_size
    bounds = [int(round(m * epochs)) for m in config.milestones]
    for epoch in range(epochs):
        step = lr * 0.1 ** sum(epoch >= m for m in bounds)
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, gW, gb = cross_entropy_grad(W, b, X[idx], rows[idx])
            gW += config.weight_decay * W
            vW *= config.momentum
            vW -= step * gW
            vb *= config.momentum
            vb -= step * gb
            W += vW
            b += vb
    return replace(model, weights=W, bias=b)


def train_phase(
    prev: ClassifierState,
    X: np.ndarray,
    y: np.ndarray,
    new_classes: Sequence[int],
    config: ClassifierConfig,
    rng: np.random.Generator,
) -> ClassifierState:
    """Extend the head with zero rows for ``new_classes`` and train by SGD."""
    if X.shape[0] == 0:
        raise ValueError("no training data")
    fresh = [c for c in new_classes if c not in prev.seen_classes]
    model = ClassifierState(
        np.vstack([prev.weights, np.zeros((len(fresh), X.shape[1]))]),
        np.concatenate([prev.bias, np.zeros(len(fresh))]),
        prev.seen_classes + tuple(fresh),
    )
    return _sgd(model, X, y, config.epochs, config.lr, config, rng)


def finetune_exemplars(
    model: ClassifierState,
    X: np.ndarray,
    y: np.ndarray,
    epochs: int,
    config: ClassifierConfig,
    rng: np.random.Generator,
) -> ClassifierState:
    """Class-balanced fine-tuning at a reduced learning rate."""
    if epochs <= 0:
        return model
    missing = set(model.seen_classes) - set(np.unique(y).tolist())
    if missing:
        raise ValueError(f"fine-tuning set lacks classes {sorted(missing)}")
    return _sgd(model, X, y, epochs, config.lr * config.finetune_lr_scale, config, rng)


def evaluate(model: ClassifierState, X: np.ndarray, y: np.ndarray) -> Fraction:
    """Top-1 accuracy as an exact fraction."""
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    return Fraction(int(np.sum(model.predict(X) == y)), len(y))


def entropy_of(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def class_entropy(model: ClassifierState, X: np.ndarray) -> float:
    """Mean predictive entropy (nats) of the model over one class's samples."""
    if X.shape[0] == 0:
        raise ValueError("class has no samples")
    return float(entropy_of(softmax(model.logits(X))).mean())


def herding_select(features: np.ndarray, k: int) -> list[int]:
    """Greedy herding: each pick keeps the running mean closest to the class mean.

    Ties go to the lowest index, so selecting fewer samples always returns a
    prefix of a longer selection.
    """
    F = np.asarray(features, dtype=np.float64)
    n = F.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    mu = F.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    for m in range(k):
        dist = np.linalg.norm(mu - (running + F) / (m + 1), axis=1)
        dist[~available] = np.inf
        j = int(np.argmin(dist))
        chosen.append(j)
        available[j] = False
        running += F[j]
    return chosen
