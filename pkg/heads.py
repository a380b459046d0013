"""
Task heads and their training losses.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from config_core import HEADS


@dataclass
class Embedding:
    vector: torch.Tensor
    normalized: bool


@dataclass
class LandmarkPrediction:
    """coords (..., L, 2) in normalized [0, 1] image space; vis_logit (..., L)"""
    coords: torch.Tensor
    vis_logit: torch.Tensor


@HEADS.register("AttrHead")
class AttrHead(nn.Module):
    """Single affine layer producing one logit per attribute"""

    def __init__(self, in_features: int, num_attributes: int):
        super().__init__()
        if num_attributes < 1:
            raise ValueError("num_attributes must be positive")
        self.num_attributes = num_attributes
        self.fc = nn.Linear(in_features, num_attributes)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc(pooled)


def attribute_head(pooled: torch.Tensor, head: AttrHead) -> torch.Tensor:
    return head(pooled)


def attribute_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-attribute sigmoid binary cross-entropy"""
    if logits.shape != labels.shape:
        raise ValueError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="mean")


@HEADS.register("RetrievalHead")
class RetrievalHead(nn.Module):
    """Affine projection followed by L2 normalization"""

    def __init__(self, in_features: int, embed_dim: int = 128, normalize: bool = True):
        super().__init__()
        self.fc = nn.Linear(in_features, embed_dim)
        self.normalize = normalize
        self.embed_dim = embed_dim

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        out = self.fc(pooled)
        return F.normalize(out, p=2, dim=-1) if self.normalize else out


def retrieval_embed(pooled: torch.Tensor, head: RetrievalHead) -> Embedding:
    return Embedding(head(pooled), head.normalize)


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
                 margin: float = 0.3) -> torch.Tensor:
    """mean(max(0, |a - p|^2 - |a - n|^2 + margin))"""
    if margin <= 0:
        raise ValueError(f"triplet margin must be positive, got {margin}")
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ValueError("anchor, positive and negative embeddings must share one shape")
    d_pos = (anchor - positive).pow(2).sum(dim=-1)
    d_neg = (anchor - negative).pow(2).sum(dim=-1)
    return F.relu(d_pos - d_neg + margin).mean()


@HEADS.register("LandmarkHead")
class LandmarkHead(nn.Module):
    """Global pool -> affine -> L x (x, y, visibility logit)"""

    def __init__(self, in_features: int, num_landmarks: int):
        super().__init__()
        if num_landmarks < 1:
            raise ValueError("num_landmarks must be positive")
        self.num_landmarks = num_landmarks
        self.fc = nn.Linear(in_features, num_landmarks * 3)

    def forward(self, features: torch.Tensor) -> LandmarkPrediction:
        pooled = features.mean(dim=(-2, -1)) if features.dim() == 4 else features
        out = self.fc(pooled).reshape(-1, self.num_landmarks, 3)
        return LandmarkPrediction(torch.sigmoid(out[..., :2]), out[..., 2])


def landmark_head(features: torch.Tensor, head: LandmarkHead) -> LandmarkPrediction:
    return head(features)


def landmark_loss(pred: LandmarkPrediction, gt_coords: torch.Tensor, gt_visible: torch.Tensor) -> torch.Tensor:
    """Squared coordinate error over visible landmarks plus visibility BCE.

    The coordinate term averages over both coordinates of every visible
    landmark in the batch and is zero when none is visible.
    """
    if pred.coords.shape != gt_coords.shape or pred.vis_logit.shape != gt_visible.shape:
        raise ValueError("landmark prediction and ground truth shapes differ")
    mask = gt_visible.to(pred.coords.dtype)
    squared = (pred.coords - gt_coords.to(pred.coords.dtype)).pow(2).sum(dim=-1)
    count = mask.sum()
    coord_term = (squared * mask).sum() / (2.0 * count.clamp(min=1.0))
    vis_term = F.binary_cross_entropy_with_logits(pred.vis_logit, mask, reduction="mean")
    return coord_term + vis_term
