"""
Miniature V-Net style encoder-decoder.

Three resolution levels with strided-convolution downsampling. The decoder exposes taps at
quarter (f2), half (f3) and full (f4) resolution alongside the class logits.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatchError
from ..settings import ModelConfig


@dataclass
class FeaturePyramid:
    f2: torch.Tensor
    """[B, F, H/4, W/4, D/4]"""
    f3: torch.Tensor
    """[B, F3, H/2, W/2, D/2]"""
    f4: torch.Tensor
    """[B, F4, H, W, D]"""
    logits: torch.Tensor
    """[B, C, H, W, D]"""

    @property
    def probabilities(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=1)

    def take(self, index: slice) -> "FeaturePyramid":
        """Sub-batch view."""
        return FeaturePyramid(self.f2[index], self.f3[index], self.f4[index], self.logits[index])


class ConvBlock(nn.Module):
    """3x3x3 convolution, instance norm, PReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        padding = kernel_size // 2 if stride == 1 else 0
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size, stride=stride, padding=padding)
        self.norm = nn.InstanceNorm3d(out_channels, affine=True)
        self.act = nn.PReLU(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class UpBlock(nn.Module):
    """Transposed-convolution upsampling, skip concatenation, then a ConvBlock."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2)
        self.fuse = ConvBlock(out_channels + skip_channels, out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.fuse(torch.cat([self.up(x), skip], dim=1))


class MiniVNet(nn.Module):
    def __init__(self, config: ModelConfig, num_classes: int):
        super().__init__()
        c1 = config.base_channels
        c2, c3 = 2 * c1, 4 * c1
        self.num_classes = num_classes

        self.enc1 = ConvBlock(config.in_channels, c1)
        self.down1 = ConvBlock(c1, c2, kernel_size=2, stride=2)
        self.enc2 = ConvBlock(c2, c2)
        self.down2 = ConvBlock(c2, c3, kernel_size=2, stride=2)
        self.enc3 = ConvBlock(c3, c3)

        self.dec3 = ConvBlock(c3, config.feature_dim)
        self.dec2 = UpBlock(config.feature_dim, c2, config.f3_dim)
        self.dec1 = UpBlock(config.f3_dim, c1, config.f4_dim)
        self.head = nn.Conv3d(config.f4_dim, num_classes, kernel_size=1)

    def zero_init_head(self) -> None:
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        """
        Args:
            x: [B, in_channels, H, W, D] with H, W, D divisible by 4.

        Raises:
            ShapeMismatchError: If a spatial dimension is not divisible by 4.
        """
        if x.ndim != 5 or any(size % 4 for size in x.shape[-3:]):
            raise ShapeMismatchError(f"Backbone input must be [B, C, H, W, D] with H, W, D divisible by 4, got {tuple(x.shape)}")
        e1 = self.enc1(x)
        e2 = self.enc2(self.down1(e1))
        e3 = self.enc3(self.down2(e2))

        f2 = self.dec3(e3)
        f3 = self.dec2(f2, e2)
        f4 = self.dec1(f3, e1)
        return FeaturePyramid(f2=f2, f3=f3, f4=f4, logits=self.head(f4))
