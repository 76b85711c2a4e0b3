"""Residual 3D U-Net.

Encoder levels (down blocks) are a strided conv block followed by a stack of
conv blocks whose output is added back onto the block input. Decoder levels
(up blocks) upsample by 2, concatenate the encoder output of the same level
and run another conv stack. A 1x1x1 convolution with a sigmoid produces the
three region probability maps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class SegModelConfig:
    in_channels: int = 4
    out_channels: int = 3
    patch_size: int = 128
    depth: int = 5
    base_filters: int = 16
    kernel_size: int = 3
    convs_per_block: int = 2
    leaky_slope: float = 0.01
    upsample_factor: int = 2

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be positive")
        if self.patch_size % (2 ** (self.depth - 1)) != 0:
            raise ValueError(
                f"patch_size {self.patch_size} is not divisible by 2**(depth-1) = {2 ** (self.depth - 1)}"
            )

    def filters(self, level: int) -> int:
        return self.base_filters * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


class InstanceNorm3d(nn.Module):
    """Per-sample, per-channel normalization with a learned affine.

    Channels whose variance does not exceed ``eps`` are treated as constant
    and normalize to exactly 0. Plain ``(x - mean) / sqrt(var + eps)`` would
    blow rounding noise of a constant channel up by ``1/sqrt(eps)`` per layer.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        dims = tuple(range(2, x.dim()))
        mean = x.mean(dim=dims, keepdim=True)
        var = x.var(dim=dims, keepdim=True, unbiased=False)
        y = (x - mean) / torch.sqrt(var + self.eps)
        y = torch.where(var > self.eps, y, torch.zeros_like(y))
        shape = (1, -1) + (1,) * len(dims)
        return y * self.weight.view(shape) + self.bias.view(shape)


class ConvBlock(nn.Sequential):
    """Conv3d -> InstanceNorm3d -> LeakyReLU."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, slope: float = 0.01):
        super().__init__(
            nn.Conv3d(cin, cout, kernel, stride=stride, padding=kernel // 2),
            InstanceNorm3d(cout),
            nn.LeakyReLU(slope),
        )


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, cfg: SegModelConfig):
        super().__init__()
        k, a = cfg.kernel_size, cfg.leaky_slope
        self.entry = ConvBlock(cin, cout, k, stride, a)
        self.body = nn.Sequential(*[ConvBlock(cout, cout, k, 1, a) for _ in range(cfg.convs_per_block)])

    def forward(self, x):
        x = self.entry(x)
        return x + self.body(x)


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int, cfg: SegModelConfig):
        super().__init__()
        k, a = cfg.kernel_size, cfg.leaky_slope
        self.up = nn.Upsample(scale_factor=cfg.upsample_factor, mode="nearest")
        self.reduce = ConvBlock(cin, cout, k, 1, a)
        blocks = [ConvBlock(2 * cout, cout, k, 1, a)]
        blocks += [ConvBlock(cout, cout, k, 1, a) for _ in range(cfg.convs_per_block - 1)]
        self.body = nn.Sequential(*blocks)

    def forward(self, x, skip):
        x = self.reduce(self.up(x))
        return self.body(torch.cat([x, skip], dim=1))


class SegModel(nn.Module):
    def __init__(self, cfg: SegModelConfig):
        super().__init__()
        self.cfg = cfg
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for level in range(cfg.depth):
            cout = cfg.filters(level)
            self.down.append(DownBlock(cin, cout, 1 if level == 0 else 2, cfg))
            cin = cout
        self.up = nn.ModuleList(
            UpBlock(cfg.filters(level + 1), cfg.filters(level), cfg) for level in reversed(range(cfg.depth - 1))
        )
        self.head = nn.Conv3d(cfg.filters(0), cfg.out_channels, 1)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = block(x, skips.pop())
        return torch.sigmoid(self.head(x))


def build_model(cfg: SegModelConfig, seed: int = 0) -> SegModel:
    """Fresh network whose initial weights depend only on ``cfg`` and ``seed``."""
    devices = []
    with torch.random.fork_rng(devices=devices):
        torch.manual_seed(seed)
        return SegModel(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
