"""Support path: a U-shaped encoder-decoder over backbone features.

Input is the support feature map augmented with three mask channels (two
click polarities plus the previous prediction, each downsampled to feature
resolution). The contracting half halves the spatial dims three times while
doubling channels; the expanding half mirrors it with transposed convs and
skip connections. A 1x1 two-channel head plus bilinear upsampling yields
full-resolution logits; the deepest encoder output is exposed for the click
vector.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import FeatureMap, Logits


class ConvBlock(nn.Module):
    """Two 3x3 conv + ReLU stages."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


def resize_to(x: torch.Tensor, size: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Resize a (C, H, W) tensor with 4-D interpolation semantics."""
    if x.shape[-2:] == torch.Size(size):
        return x
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(x.unsqueeze(0), size=size, mode=mode, **kwargs).squeeze(0)


class SupportPath(nn.Module):
    def __init__(self, channels: int, depth: int = 3):
        super().__init__()
        if depth != 3:
            raise ValueError("support encoder depth is fixed at 3 (8x shrink)")
        c = channels
        self.depth = depth
        self.enc0 = ConvBlock(c + 3, c)
        self.enc1 = ConvBlock(c, 2 * c)
        self.enc2 = ConvBlock(2 * c, 4 * c)
        self.enc3 = ConvBlock(4 * c, 8 * c)
        self.pool = nn.MaxPool2d(2)
        self.up3 = nn.ConvTranspose2d(8 * c, 4 * c, kernel_size=2, stride=2)
        self.dec2 = ConvBlock(8 * c, 4 * c)
        self.up2 = nn.ConvTranspose2d(4 * c, 2 * c, kernel_size=2, stride=2)
        self.dec1 = ConvBlock(4 * c, 2 * c)
        self.up1 = nn.ConvTranspose2d(2 * c, c, kernel_size=2, stride=2)
        self.dec0 = ConvBlock(2 * c, c)
        self.head = nn.Conv2d(c, 2, kernel_size=1)
        self.vector_reduce = nn.Conv2d(8 * c, c, kernel_size=1)

    def forward(
        self,
        feat: FeatureMap,
        pos_clicks: torch.Tensor,
        neg_clicks: torch.Tensor,
        prev_mask: torch.Tensor,
    ) -> tuple[Logits, FeatureMap]:
        """Run the U over one support image.

        The mask channels arrive at image resolution and are bilinearly
        downsampled to the feature grid. Returns logits at the masks'
        (image) resolution and the bottleneck feature map.
        """
        for name, m in (("pos_clicks", pos_clicks), ("neg_clicks", neg_clicks),
                        ("prev_mask", prev_mask)):
            if m.dim() != 2 or m.shape != pos_clicks.shape:
                raise ValueError(f"{name} shape {tuple(m.shape)} mismatches click masks")
        out_size = (pos_clicks.shape[0], pos_clicks.shape[1])
        fh, fw = feat.spatial
        aux = torch.stack([pos_clicks, neg_clicks, prev_mask]).to(feat.data.dtype)
        aux = resize_to(aux, (fh, fw), mode="bilinear")
        x = torch.cat([feat.data, aux], dim=0).unsqueeze(0)

        # Pad the feature grid to a multiple of 8 so pools and upconvs mirror
        # exactly; crop back afterwards.
        mult = 2 ** self.depth
        pad_h = (-fh) % mult
        pad_w = (-fw) % mult
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h))

        e0 = self.enc0(x)
        e1 = self.enc1(self.pool(e0))
        e2 = self.enc2(self.pool(e1))
        bottleneck = self.enc3(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up3(bottleneck), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up2(d2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up1(d1), e0], dim=1))
        logits = self.head(d0).squeeze(0)[:, :fh, :fw]
        logits = resize_to(logits, out_size, mode="bilinear")
        bn = FeatureMap(data=bottleneck.squeeze(0), stride=feat.stride * mult)
        return Logits(data=logits), bn

    def click_vector(self, bottleneck: FeatureMap) -> torch.Tensor:
        """1x1 channel reduction followed by global average pooling."""
        reduced = self.vector_reduce(bottleneck.data.unsqueeze(0)).squeeze(0)
        return reduced.mean(dim=(1, 2))
