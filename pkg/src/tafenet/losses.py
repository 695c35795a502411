"""Training objectives: softmax-over-tasks cross-entropy, hinged-cosine embedding loss, and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tafenet import tensor as tc
from tafenet.tensor import ShapeError, Tensor

DEFAULT_BETA = 0.1


class LabelError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class LossConfig:
    beta: float = DEFAULT_BETA
    task_scope: str = "minibatch"

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.task_scope not in ("minibatch", "whole-dataset"):
            raise ValueError(f"task_scope must be 'minibatch' or 'whole-dataset', got {self.task_scope!r}")


def label_matrix(sample_tasks: Sequence[int], task_ids: Sequence[int]) -> np.ndarray:
    """One-hot rows placing each sample's task among ``task_ids``."""
    col = {t: j for j, t in enumerate(task_ids)}
    y = np.zeros((len(sample_tasks), len(task_ids)))
    for i, t in enumerate(sample_tasks):
        if t not in col:
            raise LabelError(f"sample {i} has task {t}, which is not in the task set")
        y[i, col[t]] = 1.0
    return y


def check_labels(labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise LabelError("label entries must be 0 or 1")
    sums = labels.sum(axis=1)
    if (sums == 0).any():
        raise LabelError(f"all-zero label row at index {int(np.argmax(sums == 0))}")
    if (sums != 1).any():
        raise LabelError(f"label row {int(np.argmax(sums != 1))} has more than one positive")


def classification_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    check_labels(labels)
    y = Tensor(labels, dtype=logits.dtype)
    n = logits.shape[0]
    return tc.scale(tc.sum(tc.log_softmax_rows(logits) * y), -1.0 / n)


def hinged_cosine(p, q) -> Tensor:
    """``max(cos(p, q), 0)``; the hinge passes zero gradient at and below 0."""
    return tc.relu(tc.cosine_similarity(p, q))


def embedding_loss(tafes: Tensor, embeddings: Tensor, labels) -> Tensor:
    """Mean of ``(hinged_cosine(tafe[i, t], e[t]) - y[i, t])**2`` over all N*T pairs.

    ``tafes`` is (N, T, d) with ``tafes[i, t]`` computed under task t's gains.
    """
    labels = np.asarray(labels)
    if tafes.ndim != 3 or embeddings.ndim != 2:
        raise ShapeError(f"expected tafes (N, T, d) and embeddings (T, d), got {tafes.shape} and {embeddings.shape}")
    n, t, d = tafes.shape
    if embeddings.shape != (t, d):
        raise ShapeError(f"task embeddings {embeddings.shape} do not match tafes {tafes.shape}")
    if labels.shape != (n, t):
        raise ShapeError(f"labels {labels.shape} do not match tafes {tafes.shape}")
    e = tc.broadcast_to(tc.reshape(embeddings, (1, t, d)), (n, t, d))
    gap = hinged_cosine(tafes, e) - Tensor(labels, dtype=tafes.dtype)
    return tc.mean(gap * gap)


def total_loss(cls: Tensor, emb: Tensor, cfg: LossConfig | float = DEFAULT_BETA) -> Tensor:
    beta = cfg.beta if isinstance(cfg, LossConfig) else float(cfg)
    for name, term in (("classification loss", cls), ("embedding loss", emb)):
        value = term.item() if isinstance(term, Tensor) else float(term)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"{name} is {value}")
    cls, emb = tc.as_tensor(cls), tc.as_tensor(emb)
    return cls + tc.scale(emb, beta)
