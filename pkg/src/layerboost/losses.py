"""Twice-differentiable losses with analytic gradients and diagonal Hessians.

All batch functions take scores of shape ``(n, num_classes)`` and labels of
shape ``(n,)``.  Scalar helpers (:func:`loss_value`, :func:`grad_hess`) wrap
them for single examples.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

HESSIAN_FLOOR = 1e-12

KINDS = ("logistic", "least_squares", "multiclass_softmax", "custom")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class GradHess:
    gradient: np.ndarray
    hessian: np.ndarray


@dataclass(frozen=True)
class LossSpec:
    """Loss selection.

    ``custom`` losses supply ``value_fn(scores, labels) -> (n,)`` and
    ``grad_hess_fn(scores, labels) -> (g, h)`` operating on batches.
    """

    kind: str = "least_squares"
    num_classes: int = 1
    value_fn: Optional[Callable] = None
    grad_hess_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LossError(f"unknown loss kind {self.kind!r}")
        if self.num_classes < 1:
            raise LossError("num_classes must be positive")
        if self.kind in ("logistic", "least_squares") and self.num_classes != 1:
            raise LossError(f"{self.kind} requires num_classes == 1")
        if self.kind == "multiclass_softmax" and self.num_classes < 2:
            raise LossError("multiclass_softmax requires num_classes >= 2")
        if self.kind == "custom" and (self.value_fn is None or self.grad_hess_fn is None):
            raise LossError("custom loss needs value_fn and grad_hess_fn")


def _as_batch(scores, labels, num_classes):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores.reshape(-1, num_classes)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != (labels.shape[0], num_classes):
        raise LossError(
            f"scores shape {scores.shape} does not match {labels.shape[0]} labels "
            f"x {num_classes} classes")
    return scores, labels


def _check_labels(spec: LossSpec, labels: np.ndarray) -> None:
    if spec.kind == "logistic":
        if not np.all((labels == 0) | (labels == 1)):
            raise LossError("logistic labels must be 0 or 1")
    elif spec.kind == "multiclass_softmax":
        if not np.all((labels >= 0) & (labels < spec.num_classes) & (labels == np.floor(labels))):
            raise LossError(f"class label outside [0, {spec.num_classes})")
    elif spec.kind == "least_squares":
        if not np.all(np.isfinite(labels)):
            raise LossError("regression labels must be finite")


def batch_loss(spec: LossSpec, scores, labels) -> np.ndarray:
    """Per-example loss values."""
    scores, labels = _as_batch(scores, labels, spec.num_classes)
    if spec.kind == "custom":
        return np.asarray(spec.value_fn(scores, labels), dtype=np.float64)
    _check_labels(spec, labels)
    if spec.kind == "least_squares":
        return 0.5 * (scores[:, 0] - labels) ** 2
    if spec.kind == "logistic":
        margin = (2.0 * labels - 1.0) * scores[:, 0]
        return -log_expit(margin)
    idx = labels.astype(np.int64)
    return logsumexp(scores, axis=1) - scores[np.arange(len(idx)), idx]


def batch_grad_hess(spec: LossSpec, scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-example gradients and diagonal Hessians, each ``(n, num_classes)``."""
    scores, labels = _as_batch(scores, labels, spec.num_classes)
    if spec.kind == "custom":
        g, h = spec.grad_hess_fn(scores, labels)
        return (np.asarray(g, dtype=np.float64).reshape(scores.shape),
                np.asarray(h, dtype=np.float64).reshape(scores.shape))
    _check_labels(spec, labels)
    if spec.kind == "least_squares":
        return (scores - labels[:, None]), np.ones_like(scores)
    if spec.kind == "logistic":
        p = expit(scores)
        return p - labels[:, None], p * (1.0 - p)
    p = softmax(scores, axis=1)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels.astype(np.int64)] = 1.0
    return p - onehot, p * (1.0 - p)


def loss_value(spec: LossSpec, prediction, label) -> float:
    return float(batch_loss(spec, np.atleast_1d(prediction), [label])[0])


def grad_hess(spec: LossSpec, prediction, label) -> GradHess:
    g, h = batch_grad_hess(spec, np.atleast_1d(prediction), [label])
    return GradHess(g[0], h[0])


def one_vs_rest_labels(label, num_classes: int) -> np.ndarray:
    label = int(label)
    if not 0 <= label < num_classes:
        raise LossError(f"label {label} outside [0, {num_classes})")
    out = np.zeros(num_classes)
    out[label] = 1.0
    return out


def verify_derivatives(spec: LossSpec, probe_points, step: float = 1e-5) -> float:
    """Max relative error of analytic derivatives against central differences.

    ``probe_points`` is a sequence of ``(scores, label)``.  The gradient is
    checked against differences of the loss, the diagonal Hessian against
    differences of the analytic gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    worst = 0.0
    for scores, label in probe_points:
        f = np.array(np.atleast_1d(scores), dtype=np.float64)
        gh = grad_hess(spec, f, label)
        for k in range(f.shape[0]):
            up, down = f.copy(), f.copy()
            up[k] += step
            down[k] -= step
            fd_g = (loss_value(spec, up, label) - loss_value(spec, down, label)) / (2 * step)
            fd_h = (grad_hess(spec, up, label).gradient[k]
                    - grad_hess(spec, down, label).gradient[k]) / (2 * step)
            for analytic, numeric in ((gh.gradient[k], fd_g), (gh.hessian[k], fd_h)):
                worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst


def ensemble_derivatives(spec: LossSpec, strategy: str, num_classes: int, scores, labels):
    """Gradients for every ensemble output column.

    Under one-vs-rest a binary loss is applied to each class column against
    the one-hot label; otherwise this is just :func:`batch_grad_hess`.
    """
    if strategy == "one_vs_rest" and spec.kind in ("logistic", "least_squares"):
        scores = np.asarray(scores, dtype=np.float64).reshape(-1, num_classes)
        labels = np.asarray(labels).reshape(-1)
        if np.any((labels < 0) | (labels >= num_classes)):
            raise LossError(f"class label outside [0, {num_classes})")
        onehot = (labels[:, None] == np.arange(num_classes)[None, :]).astype(np.float64)
        g, h = batch_grad_hess(spec, scores.reshape(-1, 1), onehot.reshape(-1))
        return g.reshape(scores.shape), h.reshape(scores.shape)
    return batch_grad_hess(spec, scores, labels)


def ensemble_loss(spec: LossSpec, strategy: str, num_classes: int, scores, labels) -> np.ndarray:
    if strategy == "one_vs_rest" and spec.kind in ("logistic", "least_squares"):
        scores = np.asarray(scores, dtype=np.float64).reshape(-1, num_classes)
        labels = np.asarray(labels).reshape(-1)
        onehot = (labels[:, None] == np.arange(num_classes)[None, :]).astype(np.float64)
        return batch_loss(spec, scores.reshape(-1, 1), onehot.reshape(-1)).reshape(
            scores.shape).sum(axis=1)
    return batch_loss(spec, scores, labels)


def probabilities(spec: LossSpec, strategy: str, scores) -> Optional[np.ndarray]:
    """Class probabilities for classification losses, else ``None``."""
    scores = np.asarray(scores, dtype=np.float64)
    if spec.kind == "multiclass_softmax":
        return softmax(scores, axis=1)
    if spec.kind == "logistic":
        return expit(scores)
    return None
