"""Frozen residual backbone with a trainable channel reduction.

Mid-level blocks (layer2 and layer3, the latter dilated to keep stride 8)
are concatenated and reduced to the working channel width by a 1x1
conv + ReLU. The residual trunk itself is frozen: its parameters never
receive gradients and its batch-norm statistics are pinned in eval mode.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from torchvision import models

from ..config import ModelConfig
from .types import FeatureMap

# ImageNet normalization constants used by the pretrained trunks.
_MEAN = (0.485, 0.456, 0.406)
_STD = (0.229, 0.224, 0.225)

_VARIANTS = {
    "resnet50": (models.resnet50, 512 + 1024),
    "resnet34": (models.resnet34, 128 + 256),
    "resnet18": (models.resnet18, 128 + 256),
}


def _force_stride_one(block: nn.Module) -> None:
    for m in block.modules():
        if isinstance(m, nn.Conv2d) and m.stride == (2, 2):
            m.stride = (1, 1)


def normalize_image(image: np.ndarray) -> torch.Tensor:
    """Convert an (H, W, 3) uint8/float image to a normalized (3, H, W) tensor."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("zero-area image")
    arr = np.asarray(image, dtype=np.float32)
    if image.dtype == np.uint8:
        arr = arr / 255.0
    t = torch.from_numpy(arr).permute(2, 0, 1)
    mean = torch.tensor(_MEAN).view(3, 1, 1)
    std = torch.tensor(_STD).view(3, 1, 1)
    return (t - mean) / std


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.backbone_variant not in _VARIANTS:
            raise ValueError(
                f"unknown backbone {cfg.backbone_variant!r}; "
                f"choose from {sorted(_VARIANTS)}"
            )
        ctor, mid_channels = _VARIANTS[cfg.backbone_variant]
        weights = "IMAGENET1K_V1" if cfg.pretrained_backbone else None
        if cfg.backbone_variant == "resnet50":
            net = ctor(weights=weights, replace_stride_with_dilation=[False, True, True])
        else:
            # BasicBlock variants reject dilation; drop layer3's stride instead
            # so its output stays at stride 8.
            net = ctor(weights=weights)
            _force_stride_one(net.layer3[0])
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        for p in self._trunk_parameters():
            p.requires_grad_(False)
        self.reduce = nn.Sequential(
            nn.Conv2d(mid_channels, cfg.feature_channels, kernel_size=1),
            nn.ReLU(inplace=True),
        )
        self.stride = 8
        # Pin the trunk's batch-norm statistics from the very start; the
        # train() override below keeps them pinned thereafter.
        self.stem.eval()
        self.layer1.eval()
        self.layer2.eval()
        self.layer3.eval()

    def _trunk_parameters(self):
        for m in (self.stem, self.layer1, self.layer2, self.layer3):
            yield from m.parameters()

    def trunk_state_bytes(self) -> bytes:
        """Serialized trunk parameters and buffers, for freeze checks."""
        parts = []
        for m in (self.stem, self.layer1, self.layer2, self.layer3):
            for t in list(m.parameters()) + list(m.buffers()):
                parts.append(t.detach().cpu().numpy().tobytes())
        return b"".join(parts)

    def train(self, mode: bool = True):
        # The trunk stays in eval mode so batch-norm statistics never move.
        super().train(mode)
        self.stem.eval()
        self.layer1.eval()
        self.layer2.eval()
        self.layer3.eval()
        return self

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(3, H, W) normalized image -> (C, ceil(H/8), ceil(W/8)) features."""
        x = image.unsqueeze(0)
        with torch.no_grad():
            x = self.stem(x)
            x = self.layer1(x)
            f2 = self.layer2(x)
            f3 = self.layer3(f2)
        mid = torch.cat([f2, f3], dim=1)
        return self.reduce(mid).squeeze(0)

    def extract(self, image: np.ndarray) -> FeatureMap:
        return FeatureMap(data=self.forward(normalize_image(image)), stride=self.stride)
