"""Softmax cross-entropy, its prior-adjusted variants, and prediction rules.

The adjusted loss adds log P(y) to every class logit before the softmax,
which down-weights frequent classes during training. Classes with zero
prior contribute exp(-inf) = 0 to the adjusted denominator, i.e. they drop
out of the softmax entirely; no epsilon clamping is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass
class LabelDistribution:
    """Probability vector over the classes, optionally with raw counts."""

    probs: Array
    counts: Array | None = None

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or self.probs.size < 1:
            raise ValueError("probs must be a non-empty 1-D vector")
        if not np.all(np.isfinite(self.probs)) or np.any(self.probs < 0):
            raise ValueError("probs must be finite and nonnegative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise ValueError(f"probs sum to {self.probs.sum()}, expected 1")
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != self.probs.shape:
                raise ValueError("counts shape must match probs")

    @property
    def num_classes(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, num_classes: int) -> LabelDistribution:
        return cls(probs=np.full(num_classes, 1.0 / num_classes))

    @classmethod
    def from_counts(cls, counts: Array) -> LabelDistribution:
        counts = np.asarray(counts, dtype=np.int64)
        total = int(counts.sum())
        if total <= 0:
            raise ValueError("counts must contain at least one sample")
        return cls(probs=counts / total, counts=counts)


@dataclass
class LossOutput:
    """Batch-mean loss value and its exact gradient w.r.t. the logits."""

    value: float
    logit_grad: Array


def _check_logits(logits: Array) -> Array:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("logits must be 2-D with at least 2 classes")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    return logits


def _check_labels(labels: Array, num_classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D vector")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def softmax_probs(logits: Array) -> Array:
    """Row-wise softmax with max-subtraction for stability."""
    logits = _check_logits(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_prior(dist: LabelDistribution) -> Array:
    """log P(y) per class; exactly -inf where P(y) = 0."""
    out = np.full(dist.num_classes, -np.inf)
    positive = dist.probs > 0
    out[positive] = np.log(dist.probs[positive])
    return out


def per_sample_ce(
    logits: Array, labels: Array, offsets: Array | None = None
) -> tuple[Array, Array]:
    """Per-row loss values and logit gradients, before any batch reduction.

    offsets, when given, are added to every row of the logits (the
    adjusted-softmax form); entries may be -inf to exclude a class.
    Returns (values, grads) with values shape (B,) and grads shape (B, M).
    """
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits.shape[1])
    if labels.size != logits.shape[0]:
        raise ValueError("labels length must match the batch size")
    if labels.size == 0:
        raise ValueError("batch is empty")
    scores = logits if offsets is None else logits + offsets[None, :]
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    rows = np.arange(labels.size)
    values = np.log(denom[:, 0]) - shifted[rows, labels]
    grads = probs
    grads[rows, labels] -= 1.0
    return values, grads


def cross_entropy(logits: Array, labels: Array) -> LossOutput:
    """Mean softmax cross-entropy; gradient is (probs - onehot) / B."""
    values, grads = per_sample_ce(logits, labels)
    b = values.size
    return LossOutput(value=float(values.mean()), logit_grad=grads / b)


def logit_adjusted_ce(
    logits: Array, labels: Array, prior: LabelDistribution
) -> LossOutput:
    """Mean cross-entropy over prior-adjusted logits (s_y + log P(y)).

    Every label appearing in the batch must have a positive prior; a zero
    prior on a target would make its loss infinite.
    """
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits.shape[1])
    if prior.num_classes != logits.shape[1]:
        raise ValueError("prior size must match the number of classes")
    if labels.size and np.any(prior.probs[labels] <= 0):
        bad = labels[prior.probs[labels] <= 0][0]
        raise ValueError(f"label {bad} has zero prior probability")
    values, grads = per_sample_ce(logits, labels, offsets=log_prior(prior))
    b = values.size
    return LossOutput(value=float(values.mean()), logit_grad=grads / b)


def predict(logits: Array) -> Array:
    """Per-row argmax; ties broken toward the lowest class index."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be 2-D")
    return logits.argmax(axis=1)


def predict_balanced(logits: Array, prior: LabelDistribution) -> Array:
    """Argmax of s_y - log P(y); zero-prior classes are excluded."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be 2-D")
    if logits.shape[1] != prior.num_classes:
        raise ValueError("prior size must match the number of classes")
    positive = prior.probs > 0
    if not positive.any():
        raise ValueError("prior has no positive class")
    scores = np.full_like(logits, -np.inf)
    scores[:, positive] = logits[:, positive] - np.log(prior.probs[positive])[None, :]
    return scores.argmax(axis=1)
