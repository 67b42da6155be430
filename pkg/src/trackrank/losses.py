"""Batch-hard triplet loss, identity cross-entropy and their sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as tc
from .tensor import Tensor

# Added to masked-out distances before taking max/min; far above any real
# distance yet finite so the non-finite guard stays quiet.
_MASK_OFFSET = 1e12
_DIST_FLOOR = 1e-16


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    reduction: Literal["sum", "mean"] = "mean"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"triplet margin must be >= 0, got {self.margin}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass
class LabeledBatch:
    """P identities x K clips: embeddings (PK, D), labels (PK,), optional logits."""

    embeddings: Tensor
    identities: np.ndarray
    logits: Tensor | None = None

    def __post_init__(self):
        self.identities = np.asarray(self.identities)
        n = self.embeddings.shape[0]
        if self.embeddings.ndim != 2 or self.identities.shape != (n,):
            raise ValueError(f"embeddings {self.embeddings.shape} and identities "
                             f"{self.identities.shape} disagree")
        if self.logits is not None and (self.logits.ndim != 2 or self.logits.shape[0] != n):
            raise ValueError(f"logits shape {self.logits.shape} does not match batch size {n}")

    @property
    def P(self) -> int:
        return len(np.unique(self.identities))

    @property
    def K(self) -> int:
        return len(self.identities) // max(self.P, 1)

    def check_pk(self) -> None:
        _, counts = np.unique(self.identities, return_counts=True)
        if len(counts) and not (counts == counts[0]).all():
            raise ValueError(f"batch is not P x K: per-identity counts {counts.tolist()}")


def pairwise_distances(emb: Tensor) -> Tensor:
    """Euclidean distances sqrt(max(|a - b|^2, 1e-16)) between all rows."""
    diff = emb.reshape((emb.shape[0], 1, emb.shape[1])) - emb.reshape((1,) + emb.shape)
    sq = tc.sum(diff * diff, axis=2)
    return tc.sqrt(tc.clamp_min(sq, _DIST_FLOOR))


def hardest_pairs(dist: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-anchor farthest positive and nearest negative distances."""
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    pos = tc.max(dist * same + (same - 1.0) * _MASK_OFFSET, axis=1)
    diff = 1.0 - same
    neg = tc.min(dist * diff + same * _MASK_OFFSET, axis=1)
    return pos, neg


def batch_hard_triplet(batch: LabeledBatch, config: TripletConfig = TripletConfig()) -> Tensor:
    labels = batch.identities
    batch.check_pk()
    if len(np.unique(labels)) < 2:
        raise ValueError("batch_hard_triplet needs at least 2 identities (no negatives)")
    dist = pairwise_distances(batch.embeddings)
    pos, neg = hardest_pairs(dist, labels)
    hinge = tc.relu((config.margin + pos) - neg)
    if config.reduction == "sum":
        return tc.sum(hinge)
    return tc.mean(hinge)


def softmax_cross_entropy(batch: LabeledBatch) -> Tensor:
    """Mean negative log-probability of each clip's true identity."""
    if batch.logits is None:
        raise ValueError("softmax_cross_entropy requires logits")
    n, c = batch.logits.shape
    labels = batch.identities.astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"identity labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    logp = tc.log_softmax(batch.logits, axis=1)
    return -tc.mean(tc.sum(logp * onehot, axis=1))


def total_loss(batch: LabeledBatch, config: TripletConfig = TripletConfig(),
               return_parts: bool = False):
    """Cross-entropy plus triplet, unweighted.

    With ``return_parts`` the result is ``(total, {"softmax": ..., "triplet": ...})``.
    """
    ce = softmax_cross_entropy(batch)
    tri = batch_hard_triplet(batch, config)
    total = ce + tri
    if return_parts:
        return total, {"softmax": ce, "triplet": tri}
    return total
