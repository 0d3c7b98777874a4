"""
losses
cross-entropy and the four label-imbalance countermeasures, with exact
gradients with respect to the logits

every function accepts a single sample (p of shape (C,), scalar y) or a batch
(p of shape (B, C), y of shape (B,)) and returns per-sample values
"""

import dataclasses
from typing import Sequence

import numpy as np

from pipeline_config import N_CLASSES, ConfigError

P_FLOOR = 1e-12
ACCURACY_FLOOR = 0.01
LOSS_KINDS = ("plain", "weighted", "sensitive", "focal", "adaptive")

# classes -1, 0, +1
DEFAULT_CLASS_WEIGHTS = (8.0, 1.0, 8.0)
DEFAULT_FOCAL_LAMBDA = 2.0


@dataclasses.dataclass(frozen=True)
class LossSpec:
    """Which countermeasure to apply plus its parameters."""

    kind: str = "plain"
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    class_counts: tuple[int, ...] | None = None
    focal_lambda: float = DEFAULT_FOCAL_LAMBDA
    accuracies: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (N_CLASSES,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ConfigError(f"class weights must be {N_CLASSES} finite positive values: {w}")
        if self.focal_lambda < 0:
            raise ConfigError(f"focal lambda must be >= 0, got {self.focal_lambda}")
        if self.class_counts is not None:
            counts = np.asarray(self.class_counts)
            if counts.shape != (N_CLASSES,) or np.any(counts < 0) or counts.sum() <= 0:
                raise ConfigError(f"class counts must be {N_CLASSES} non-negative values "
                                  f"with a positive total: {self.class_counts}")

    @classmethod
    def from_counts(cls, labels, kind: str = "sensitive", **kwargs) -> "LossSpec":
        """Spec whose N_c are the class counts of ``labels`` (training split)."""
        return cls(kind=kind, **kwargs).with_counts(labels)

    def with_counts(self, labels) -> "LossSpec":
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=N_CLASSES)
        return dataclasses.replace(self, class_counts=tuple(int(c) for c in counts))

    def with_accuracies(self, accuracies) -> "LossSpec":
        return dataclasses.replace(self, accuracies=tuple(float(a) for a in accuracies))

    def describe(self) -> dict:
        """Parameters that matter for this kind, for manifests."""
        out = {"kind": self.kind}
        if self.kind == "weighted":
            out["class_weights"] = list(self.class_weights)
        elif self.kind == "sensitive":
            out["class_counts"] = None if self.class_counts is None else list(self.class_counts)
        elif self.kind == "focal":
            out["focal_lambda"] = self.focal_lambda
        elif self.kind == "adaptive":
            out["accuracies"] = None if self.accuracies is None else list(self.accuracies)
        return out


def softmax_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _true_class_prob(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if p.ndim == 1:
        return p[y]
    return p[np.arange(len(y)), y]


def _onehot(y, n_classes):
    y = np.asarray(y, dtype=np.int64)
    return np.eye(n_classes)[y]


def cross_entropy(p, y) -> np.ndarray:
    """-log p_y with p_y floored at 1e-12"""
    return -np.log(np.maximum(_true_class_prob(p, y), P_FLOOR))


def weighted_loss(p, y, w: Sequence[float] = DEFAULT_CLASS_WEIGHTS) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w[np.asarray(y, dtype=np.int64)] * cross_entropy(p, y)


def sensitive_coefficients(counts: Sequence[int]) -> np.ndarray:
    """N_{-c} / ((C-1) N) per class; sums to 1."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    c = len(counts)
    return (n - counts) / ((c - 1) * n)


def sensitive_loss(p, y, counts: Sequence[int]) -> np.ndarray:
    """coefficient_y * (1 - p_y)^2 * CE at the true class"""
    k = sensitive_coefficients(counts)[np.asarray(y, dtype=np.int64)]
    py = _true_class_prob(p, y)
    return k * (1.0 - py) ** 2 * cross_entropy(p, y)


def focal_loss(p, y, lam: float = DEFAULT_FOCAL_LAMBDA) -> np.ndarray:
    """-(1 - p_y)^lambda * log p_y"""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    py = _true_class_prob(p, y)
    return (1.0 - py) ** lam * cross_entropy(p, y)


def adaptive_weights(accuracies: Sequence[float]) -> np.ndarray:
    """
    w_c = (1/a_c) / sum_k (1/a_k), accuracies floored at 0.01.
    Undefined accuracies (NaN, e.g. a class absent from validation) count as 1/C.
    """
    a = np.asarray(accuracies, dtype=np.float64)
    a = np.where(np.isnan(a), 1.0 / len(a), a)
    inv = 1.0 / np.maximum(a, ACCURACY_FLOOR)
    return inv / inv.sum()


def per_sample_loss(p, y, spec: LossSpec) -> np.ndarray:
    if spec.kind == "plain":
        return cross_entropy(p, y)
    if spec.kind == "weighted":
        return weighted_loss(p, y, spec.class_weights)
    if spec.kind == "sensitive":
        if spec.class_counts is None:
            raise ConfigError("sensitive loss needs class counts")
        return sensitive_loss(p, y, spec.class_counts)
    if spec.kind == "focal":
        return focal_loss(p, y, spec.focal_lambda)
    return weighted_loss(p, y, spec_adaptive_weights(spec))


def spec_adaptive_weights(spec: LossSpec) -> np.ndarray:
    if spec.accuracies is None:
        return adaptive_weights(np.full(N_CLASSES, 1.0 / N_CLASSES))
    return adaptive_weights(spec.accuracies)


def loss_and_grad(logits, y, spec: LossSpec) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Mean loss over the batch, gradient of the mean wrt logits (B, C) and the
    per-sample losses.

    With q = p - onehot(y) and l = -log p_y:
      plain      q
      weighted   w_y q
      sensitive  k_y q [2 (1-p_y) p_y l + (1-p_y)^2]
      focal      q [lambda (1-p_y)^(lambda-1) p_y l + (1-p_y)^lambda]
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    b, n_classes = z.shape
    p = softmax_probs(z)
    py = p[np.arange(b), y]
    q = p - _onehot(y, n_classes)
    ce = -np.log(np.maximum(py, P_FLOOR))

    if spec.kind == "plain":
        scale = np.ones(b)
        losses = ce
    elif spec.kind in ("weighted", "adaptive"):
        w = (np.asarray(spec.class_weights, dtype=np.float64) if spec.kind == "weighted"
             else spec_adaptive_weights(spec))
        scale = w[y]
        losses = scale * ce
    elif spec.kind == "sensitive":
        if spec.class_counts is None:
            raise ConfigError("sensitive loss needs class counts")
        k = sensitive_coefficients(spec.class_counts)[y]
        one_minus = 1.0 - py
        scale = k * (2.0 * one_minus * py * ce + one_minus ** 2)
        losses = k * one_minus ** 2 * ce
    else:
        lam = spec.focal_lambda
        one_minus = 1.0 - py
        modulator = one_minus ** lam
        if lam == 0:
            slope = np.zeros(b)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                slope = np.where(one_minus > 0, lam * one_minus ** (lam - 1.0) * py * ce, 0.0)
        scale = slope + modulator
        losses = modulator * ce

    grad = scale[:, None] * q / b
    return float(losses.mean()), grad, losses
