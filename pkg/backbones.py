"""
Backbones and pooling: image -> feature map -> pooled features.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config_core import BACKBONES


@dataclass
class FeatureMap:
    """(C, H', W') or batched (N, C, H', W') features with their input stride"""
    data: torch.Tensor
    stride: int

    @property
    def channels(self) -> int:
        return int(self.data.shape[-3])


@BACKBONES.register("TinyConv")
class TinyConv(nn.Module):
    """Stacked conv3x3 -> norm -> ReLU -> 2x2 max-pool stages"""

    def __init__(self, stages: int = 4, channels: Sequence[int] = (16, 32, 64, 128), in_channels: int = 3,
                 norm: str = "group", groups: int = 4):
        super().__init__()
        channels = list(channels)
        if stages < 1 or len(channels) != stages:
            raise ValueError(f"TinyConv needs one channel count per stage, got stages={stages}, channels={channels}")
        if norm not in ("group", "none"):
            raise ValueError(f"unknown norm '{norm}', expected 'group' or 'none'")
        layers = []
        previous = in_channels
        for width in channels:
            layers.append(nn.Conv2d(previous, width, kernel_size=3, padding=1))
            if norm == "group":
                if width % groups:
                    raise ValueError(f"{width} channels are not divisible into {groups} groups")
                layers.append(nn.GroupNorm(groups, width))
            layers += [nn.ReLU(inplace=True), nn.MaxPool2d(2, ceil_mode=True)]
            previous = width
        self.features = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.out_channels = channels[-1]
        self.stride = 2 ** stages
        self.min_size = self.stride

    def output_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        return self.out_channels, math.ceil(height / self.stride), math.ceil(width / self.stride)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] < self.min_size or images.shape[3] < self.min_size:
            raise ValueError(f"images must be at least {self.min_size}x{self.min_size}, "
                             f"got {images.shape[2]}x{images.shape[3]}")
        return self.features(images)


def backbone_forward(image: Union[np.ndarray, torch.Tensor], backbone: TinyConv) -> FeatureMap:
    """Run one H x W x 3 image through the backbone"""
    tensor = torch.as_tensor(image, dtype=torch.float32)
    if tensor.dim() != 3 or tensor.shape[-1] != backbone.in_channels:
        raise ValueError(f"expected an H x W x {backbone.in_channels} image, got {tuple(tensor.shape)}")
    data = backbone(tensor.permute(2, 0, 1).unsqueeze(0))
    return FeatureMap(data[0], backbone.stride)


def global_pool(fm: Union[FeatureMap, torch.Tensor]) -> torch.Tensor:
    """Spatial mean per channel"""
    data = fm.data if isinstance(fm, FeatureMap) else fm
    return data.mean(dim=(-2, -1))


def pool_landmarks(features: torch.Tensor, coords: torch.Tensor, visible: torch.Tensor, stride: int,
                   window: int = 3) -> torch.Tensor:
    """Max over a window x window feature patch around each landmark.

    features (N, C, H, W); coords (N, L, 2) input pixels; visible (N, L).
    Returns (N, L * C); invisible landmarks yield zero blocks.
    """
    n, c, h, w = features.shape
    if coords.shape[:2] != visible.shape or coords.shape[0] != n:
        raise ValueError("landmark coordinates and visibility do not match the batch")
    pad = window // 2
    padded = F.pad(features, (pad, pad, pad, pad)).permute(0, 2, 3, 1)
    cols = torch.clamp(torch.floor(coords[..., 0] / stride).long(), 0, w - 1)
    rows = torch.clamp(torch.floor(coords[..., 1] / stride).long(), 0, h - 1)
    offsets = torch.arange(window, device=features.device)
    row_idx = (rows[..., None] + offsets)[..., :, None]
    col_idx = (cols[..., None] + offsets)[..., None, :]
    batch = torch.arange(n, device=features.device)[:, None, None, None]
    patches = padded[batch, row_idx, col_idx]
    pooled = patches.amax(dim=(2, 3)) * visible[..., None].to(features.dtype)
    return pooled.reshape(n, -1)


class LandmarkPooling(nn.Module):
    def __init__(self, num_landmarks: int, stride: int, window: int = 3):
        super().__init__()
        if window < 1 or window % 2 == 0:
            raise ValueError(f"landmark window must be a positive odd number, got {window}")
        self.num_landmarks = num_landmarks
        self.stride = stride
        self.window = window

    def forward(self, features: torch.Tensor, coords: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        if coords.shape[1] != self.num_landmarks:
            raise ValueError(f"model expects {self.num_landmarks} landmarks, got {coords.shape[1]}")
        return pool_landmarks(features, coords, visible, self.stride, self.window)


def landmark_pool(fm: FeatureMap, landmarks, window: int = 3,
                  image_size: Optional[Tuple[int, int]] = None, num_landmarks: Optional[int] = None) -> torch.Tensor:
    """Single-image landmark pooling -> (L * C,) vector.

    ``landmarks`` is a LandmarkRecord (pixel coordinates) or a
    LandmarkPrediction (normalized coordinates, scaled by ``image_size``).
    """
    if hasattr(landmarks, "landmarks"):
        coords = torch.tensor([[lm.x, lm.y] for lm in landmarks.landmarks], dtype=fm.data.dtype)
        visible = torch.tensor([lm.visible for lm in landmarks.landmarks])
    else:
        if image_size is None:
            raise ValueError("image_size is required to pool predicted landmarks")
        scale = torch.tensor(image_size, dtype=fm.data.dtype)
        coords = landmarks.coords.reshape(-1, 2).to(fm.data.dtype) * scale
        visible = landmarks.vis_logit.reshape(-1) > 0
    if num_landmarks is not None and len(coords) != num_landmarks:
        raise ValueError(f"model expects {num_landmarks} landmarks, got {len(coords)}")
    data = fm.data if fm.data.dim() == 4 else fm.data.unsqueeze(0)
    return pool_landmarks(data, coords.unsqueeze(0), visible.unsqueeze(0), fm.stride, window)[0]
