"""Training losses: identity classification, batch-all triplet, their
quality-weighted variants, and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import (
    ContractError,
    LabelError,
    ShapeError,
    TrainingDivergenceError,
)


@dataclass
class LossWeights:
    cls_weight: float = 3.0
    triplet_weight: float = 1.0
    transform_weight: float = 0.1
    margin: float = 0.3

    def __post_init__(self):
        if min(self.cls_weight, self.triplet_weight, self.transform_weight) < 0:
            raise ContractError("loss weights must be non-negative")


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample softmax cross-entropy; logits (N, C) or (C,)."""
    if logits.dim() == 1:
        logits, labels = logits.unsqueeze(0), labels.reshape(1)
    n_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels, reduction="none")


def weighted_pair_cls(w_a: torch.Tensor, loss_a: torch.Tensor,
                      w_b: torch.Tensor, loss_b: torch.Tensor) -> torch.Tensor:
    """One term of the weighted classification loss:
    mean over samples of (w_a*loss_a + w_b*loss_b) / (w_a + w_b)."""
    for w in (w_a, w_b):
        if torch.any(w <= 0):
            raise ContractError("quality weights must be strictly positive")
    return ((w_a * loss_a + w_b * loss_b) / (w_a + w_b)).mean()


def swa_cls_loss(w_hr, l_hr, w_slr, l_slr, w_lr, l_lr, w_shr, l_shr) -> torch.Tensor:
    """Quality-weighted classification loss.

    First term pairs each HR sample with its synthetic-LR view, second
    term pairs each LR sample with its transformed synthetic-HR view;
    each term is a weight-normalized convex combination.
    """
    return weighted_pair_cls(w_hr, l_hr, w_slr, l_slr) + weighted_pair_cls(w_lr, l_lr, w_shr, l_shr)


def pairwise_distances(embeddings: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Euclidean distance matrix with a zeroed diagonal, safe to differentiate."""
    dot = embeddings @ embeddings.t()
    sq = dot.diagonal()
    d2 = (sq.unsqueeze(0) - 2.0 * dot + sq.unsqueeze(1)).clamp_min(0.0)
    zero_mask = d2 <= eps
    d = torch.sqrt(d2 + zero_mask.to(d2.dtype) * eps)
    return d * (~zero_mask).to(d.dtype)


def batch_all_triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor,
                           margin: float = 0.3, batch_hard: bool = False) -> tuple:
    """Triplet hinge over every valid (anchor, positive, negative) triple.

    Returns (loss, num_valid_triplets). The loss is the hinge averaged over
    valid triplets; a batch with no valid triplet yields (0, 0). With
    ``batch_hard`` the per-anchor hardest positive/negative are used
    instead (averaged over anchors that have both).
    """
    if embeddings.dim() != 2:
        raise ShapeError(f"expected (N, D) embeddings, got {tuple(embeddings.shape)}")
    labels = labels.reshape(-1)
    if labels.shape[0] != embeddings.shape[0]:
        raise ShapeError("labels and embeddings disagree on batch size")

    dist = pairwise_distances(embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    not_self = ~torch.eye(len(labels), dtype=torch.bool, device=embeddings.device)
    pos_mask = same & not_self
    neg_mask = ~same

    if batch_hard:
        has_both = pos_mask.any(dim=1) & neg_mask.any(dim=1)
        if not bool(has_both.any()):
            return embeddings.new_zeros(()), 0
        inf = torch.tensor(float("inf"), dtype=dist.dtype, device=dist.device)
        hard_pos = torch.where(pos_mask, dist, -inf).max(dim=1).values
        hard_neg = torch.where(neg_mask, dist, inf).min(dim=1).values
        hinge = F.relu(margin + hard_pos - hard_neg)[has_both]
        return hinge.mean(), int(has_both.sum())

    # triplet_mask[a, p, n] = True iff y_a == y_p != y_n and a != p
    triplet_mask = pos_mask.unsqueeze(2) & neg_mask.unsqueeze(1)
    n_valid = int(triplet_mask.sum())
    if n_valid == 0:
        return embeddings.new_zeros(()), 0
    hinge = F.relu(margin + dist.unsqueeze(2) - dist.unsqueeze(1))
    loss = (hinge * triplet_mask.to(hinge.dtype)).sum() / n_valid
    return loss, n_valid


def swa_triplet_loss(w_hr, w_shr, w_lr, w_slr,
                     loss_hr: torch.Tensor, loss_lr: torch.Tensor) -> torch.Tensor:
    """Quality-weighted combination of the HR-side and LR-side triplet losses.

    ``loss_hr`` mines over the union of real-HR and transformed-HR vectors,
    ``loss_lr`` over the union of real-LR and synthetic-LR vectors; the
    batch-level weights are the per-sample evaluator outputs averaged over
    the batch. Invariant under uniform positive rescaling of all weights.
    """
    for w in (w_hr, w_shr, w_lr, w_slr):
        if torch.any(torch.as_tensor(w) <= 0):
            raise ContractError("quality weights must be strictly positive")
    num = w_hr * w_shr * loss_hr + w_lr * w_slr * loss_lr
    den = w_hr * w_shr + w_lr * w_slr
    return num / den


def total_loss(cls_value, triplet_value, transform_value,
               weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the three loss components; rejects non-finite inputs."""
    components = {
        "cls": float(torch.as_tensor(cls_value).detach()),
        "triplet": float(torch.as_tensor(triplet_value).detach()),
        "transform": float(torch.as_tensor(transform_value).detach()),
    }
    if not all(v == v and abs(v) != float("inf") for v in components.values()):
        raise TrainingDivergenceError(components)
    return (weights.cls_weight * cls_value
            + weights.triplet_weight * triplet_value
            + weights.transform_weight * transform_value)
