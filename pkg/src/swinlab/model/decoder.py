"""Convolutional decoder: residual blocks, transposed-conv upsampling, skip concatenation."""
from __future__ import annotations

from ..autodiff import Module, Tensor
from ..autodiff import functional as F
from ..autodiff.nn import Conv3d, ConvTranspose3d, Init, InstanceNorm3d

LEAKY_SLOPE = 0.01


class ResidualBlock(Module):
    """(3x3x3 conv -> instance norm -> leaky ReLU) twice, plus a skip path.

    The skip is the identity when widths agree and a 1x1x1 conv otherwise.
    """

    def __init__(self, init: Init, cin: int, cout: int):
        self.conv1 = Conv3d(init, cin, cout, kernel=3, padding=1, bias=False)
        self.norm1 = InstanceNorm3d(init, cout)
        self.conv2 = Conv3d(init, cout, cout, kernel=3, padding=1, bias=False)
        self.norm2 = InstanceNorm3d(init, cout)
        self.skip = Conv3d(init, cin, cout, kernel=1, bias=False) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        res = x if self.skip is None else self.skip(x)
        h = F.leaky_relu(self.norm1(self.conv1(x)), LEAKY_SLOPE)
        del x
        h = F.leaky_relu(self.norm2(self.conv2(h)), LEAKY_SLOPE)
        return h + res


class UpBlock(Module):
    """Double the resolution, concatenate the skip features, refine."""

    def __init__(self, init: Init, cin: int, cout: int, skip_channels: int):
        self.up = ConvTranspose3d(init, cin, cout, kernel=2, stride=2)
        self.block = ResidualBlock(init, cout + skip_channels, cout)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.up(x)
        if up.shape[2:] != skip.shape[2:]:
            raise ValueError(f"upsampled extent {up.shape[2:]} does not match skip {skip.shape[2:]}")
        cat = F.concat([up, skip], axis=1)
        del up, skip
        return self.block(cat)


class Decoder(Module):
    def __init__(self, init: Init, in_channels: int, embed_dim: int, out_channels: int):
        c = embed_dim
        self.enc0 = ResidualBlock(init, in_channels, c)
        self.enc1 = ResidualBlock(init, c, c)
        self.enc2 = ResidualBlock(init, 2 * c, 2 * c)
        self.enc3 = ResidualBlock(init, 4 * c, 4 * c)
        self.bottleneck = ResidualBlock(init, 16 * c, 16 * c)
        self.up4 = UpBlock(init, 16 * c, 8 * c, 8 * c)
        self.up3 = UpBlock(init, 8 * c, 4 * c, 4 * c)
        self.up2 = UpBlock(init, 4 * c, 2 * c, 2 * c)
        self.up1 = UpBlock(init, 2 * c, c, c)
        self.up0 = UpBlock(init, c, c, c)
        self.head = Conv3d(init, c, out_channels, kernel=1, bias=True)

    def forward(self, levels: list) -> Tensor:
        """``levels``: six channels-first tensors, full resolution first.

        The list is consumed so that full-resolution features are released as
        soon as they have been used.
        """
        if len(levels) != 6:
            raise ValueError(f"decoder expects 6 feature levels, got {len(levels)}")
        x0, x1, x2, x3, x4, x5 = levels
        levels.clear()
        d = self.bottleneck(x5)
        del x5
        d = self.up4(d, x4)
        del x4
        d = self.up3(d, self.enc3(x3))
        del x3
        d = self.up2(d, self.enc2(x2))
        del x2
        d = self.up1(d, self.enc1(x1))
        del x1
        d = self.up0(d, self.enc0(x0))
        del x0
        return self.head(d)
