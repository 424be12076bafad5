"""Prototype construction and plain metric-based classification.

The vanilla few-shot path: average each class's support embeddings into a
prototype, score queries by temperature-scaled cosine similarity, softmax
over classes, and train with negative log likelihood. The uncertainty head
reuses the similarity block produced here as its mean.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .episodes import Episode

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300  # below this, log() would diverge; clamp and warn


def prototypes(support_embeddings: Tensor, episode: Episode) -> Tensor:
    """Per-class mean of support embeddings, one row per local class.

    support_embeddings rows must follow the episode's class-major support
    layout. The mean is expressed as a constant averaging matrix so the
    gradient splits 1/k onto each support row.
    """
    n, k = episode.n, episode.k
    if support_embeddings.shape[0] != n * k:
        raise ValueError(
            f"support embeddings have {support_embeddings.shape[0]} rows, "
            f"episode expects n*k = {n * k}"
        )
    averager = np.zeros((n, n * k))
    for j in range(n):
        averager[j, j * k:(j + 1) * k] = 1.0 / k
    return ad.matmul(Tensor(averager), support_embeddings)


def cosine_similarities(
    query_embeddings: Tensor,
    protos: Tensor,
    temperature: float,
    query_ids=None,
) -> Tensor:
    """Temperature-scaled cosine similarity of every query against every
    prototype; entry (x, j) = tau * cos(query x, prototype j).

    A zero-norm embedding row means the encoder collapsed; the error names
    the node (pass query_ids to get graph node ids in the message).
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if query_embeddings.shape[1] != protos.shape[1]:
        raise ValueError(
            f"embedding width mismatch: queries {query_embeddings.shape} "
            f"vs prototypes {protos.shape}"
        )
    q = ad.l2_row_normalize(query_embeddings, row_ids=query_ids)
    p = ad.l2_row_normalize(protos)
    return ad.scale(ad.matmul(q, ad.transpose(p)), temperature)


def metric_probabilities(block: Tensor) -> Tensor:
    """Row-softmax of a similarity block; rows sum to 1."""
    return ad.row_softmax(block)


def nll_loss(probabilities: Tensor, true_local_labels) -> Tensor:
    """Mean negative log probability of each query's true class.

    Rows must already be normalized (checked to 1e-9). A true-class
    probability under PROB_FLOOR is clamped with a warning; that only
    happens when training has diverged.
    """
    labels = np.asarray(true_local_labels, dtype=np.int64).ravel()
    rows, cols = probabilities.shape
    if labels.size != rows:
        raise ValueError(f"{labels.size} labels for {rows} probability rows")
    if labels.min() < 0 or labels.max() >= cols:
        raise ValueError(f"label {labels.max()} out of range for {cols} classes")
    row_sums = probabilities.values.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-9:
        raise ValueError("probability rows must sum to 1 within 1e-9")

    onehot = np.zeros((rows, cols))
    onehot[np.arange(rows), labels] = 1.0
    p_true = ad.row_sum(ad.multiply(probabilities, Tensor(onehot)))
    if np.any(p_true.values < PROB_FLOOR):
        log.warning(
            "clamping %d true-class probabilities below %.0e; training has likely diverged",
            int((p_true.values < PROB_FLOOR).sum()), PROB_FLOOR,
        )
    return ad.scale(ad.mean_all(ad.log(ad.clamp_min(p_true, PROB_FLOOR))), -1.0)


def accuracy(probabilities: np.ndarray, true_local_labels) -> float:
    """Fraction of rows whose argmax matches the true local label."""
    labels = np.asarray(true_local_labels, dtype=np.int64).ravel()
    return float((probabilities.argmax(axis=1) == labels).mean())
