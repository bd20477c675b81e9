"""Shared tensor containers passed between the network's stages."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class FeatureMap:
    """A (C, H', W') feature tensor plus its stride relative to the input image."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ValueError(f"feature map must be (C, H, W), got {tuple(self.data.shape)}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ValueError("feature map must have positive spatial dims")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return (self.data.shape[1], self.data.shape[2])


@dataclass
class Logits:
    """Two-channel score map: channel 0 background, channel 1 foreground."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 3 or self.data.shape[0] != 2:
            raise ValueError(f"logits must be (2, H, W), got {tuple(self.data.shape)}")

    @property
    def spatial(self) -> tuple[int, int]:
        return (self.data.shape[1], self.data.shape[2])


@dataclass
class SupportBundle:
    """Per-support summary handed to the query path.

    support_vector and click_vector are length-C tensors; attention_mask is
    an (H', W') tensor with values in [0, 1] at feature resolution.
    """

    support_vector: torch.Tensor
    click_vector: torch.Tensor
    attention_mask: torch.Tensor

    def __post_init__(self):
        if self.support_vector.dim() != 1 or self.click_vector.dim() != 1:
            raise ValueError("bundle vectors must be 1-D")
        if self.support_vector.shape != self.click_vector.shape:
            raise ValueError("support and click vectors must have equal length")
        if self.attention_mask.dim() != 2:
            raise ValueError("attention mask must be (H', W')")
