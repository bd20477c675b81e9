"""Model configuration."""

from __future__ import annotations

from dataclasses import dataclass, asdict


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the segmentation network.

    Attributes:
        backbone_variant: torchvision residual backbone ("resnet50",
            "resnet34" or "resnet18"). resnet50 is the full-scale default;
            the smaller variants keep desk-scale tests cheap.
        pretrained_backbone: load ImageNet weights for the backbone. Off by
            default so construction works offline; full-scale training
            should turn it on.
        feature_channels: channel width C of the reduced backbone features.
        num_query_scales: number n of parallel scales in the query path.
        query_scale_fractions: spatial size of each query scale as a
            fraction of the feature resolution, largest first. The defaults
            reproduce 64/32/16/8 cells for a 512 px input at stride 8.
        pooling_depth: halving stages in the support encoder. Fixed at 3 so
            the encoder shrinks the feature map by exactly 8x.
        input_patch: square model input size in pixels.
        click_disk_radius: radius of the binary click disks, in input
            pixels.
    """

    backbone_variant: str = "resnet50"
    pretrained_backbone: bool = False
    feature_channels: int = 256
    num_query_scales: int = 4
    query_scale_fractions: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    pooling_depth: int = 3
    input_patch: int = 512
    click_disk_radius: int = 5

    def __post_init__(self):
        if self.pooling_depth != 3:
            raise ValueError(
                f"pooling_depth must be 3 (8x encoder shrink), got {self.pooling_depth}"
            )
        if self.input_patch % (2 ** self.pooling_depth) != 0:
            raise ValueError(
                f"input_patch {self.input_patch} not divisible by {2 ** self.pooling_depth}"
            )
        if self.num_query_scales < 1:
            raise ValueError("num_query_scales must be >= 1")
        if len(self.query_scale_fractions) != self.num_query_scales:
            raise ValueError(
                f"expected {self.num_query_scales} scale fractions, "
                f"got {len(self.query_scale_fractions)}"
            )
        if any(f <= 0 or f > 1 for f in self.query_scale_fractions):
            raise ValueError("scale fractions must lie in (0, 1]")
        if self.feature_channels < 1:
            raise ValueError("feature_channels must be positive")
        if self.click_disk_radius < 0:
            raise ValueError("click_disk_radius must be >= 0")

    @property
    def feature_stride(self) -> int:
        return 2 ** self.pooling_depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["query_scale_fractions"] = list(self.query_scale_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["query_scale_fractions"] = tuple(d["query_scale_fractions"])
        return cls(**d)
