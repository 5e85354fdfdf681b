"""Soft-target cross-entropy, batch-hard triplet loss and the discriminator game."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .attacks import pairwise_euclidean
from .errors import DegenerateBatch, ShapeMismatch


@dataclass
class LossReport:
    cls: float
    tri: float
    enc_adv: float
    disc: float
    total: float
    enc_scale: float

    def as_row(self) -> dict:
        return asdict(self)


def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-sum_c target_c * log softmax(logits)_c``."""
    if logits.dim() == 1:
        logits, target = logits[None], target[None]
    target = torch.as_tensor(target, dtype=logits.dtype)
    if logits.shape != target.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    return -(target * F.log_softmax(logits, dim=1)).sum(1).mean()


def triplet_hard(features: torch.Tensor, labels, margin: float = 0.3,
                 reduction: str = "mean") -> torch.Tensor:
    """Batch-hard triplet loss: farthest positive and closest negative per anchor.

    The anchor itself counts as a positive at distance 0, so anchors without a
    same-identity partner still get a defined loss.
    """
    labels = torch.as_tensor(labels)
    if labels.unique().numel() < 2:
        raise DegenerateBatch("triplet loss needs at least two identities")
    if labels.unique(return_counts=True)[1].max() < 2:
        raise DegenerateBatch("triplet loss needs an identity with at least two samples")
    dist = pairwise_euclidean(features, features)
    same = labels[:, None] == labels[None, :]
    d_pos = dist.masked_fill(~same, float("-inf")).max(1).values
    d_neg = dist.masked_fill(same, float("inf")).min(1).values
    per = F.relu(d_pos - d_neg + margin)
    return per.mean() if reduction == "mean" else per


def discriminator_loss(p_clean: torch.Tensor, p_adv: torch.Tensor) -> torch.Tensor:
    """Clean features are the positive class: ``-E log D(clean) - E log(1 - D(adv))``."""
    return -torch.log(p_clean).mean() - torch.log1p(-p_adv).mean()


def encoder_confusion_loss(p_clean: torch.Tensor, p_adv: torch.Tensor) -> torch.Tensor:
    """The encoder's side of the game; the exact negation of :func:`discriminator_loss`."""
    return torch.log(p_clean).mean() + torch.log1p(-p_adv).mean()
