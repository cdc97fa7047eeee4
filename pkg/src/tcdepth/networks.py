"""Generator and discriminator.

The generator consumes three aligned inputs per time step: the current
image x_n, the previous image x_prev (encoded by the SAME stream, shared
parameters), and the previous full-resolution depth prediction. The three
encodings meet in a middle fusion block; a single decoder trunk with skip
connections from all three streams feeds two output streams, a four-scale
depth head (coarse H/8 up to full resolution, strictly positive values)
and a full-resolution segmentation logit head.

The discriminator is a strided conv-BatchNorm-LeakyReLU stack over the
channel-concatenated (image, depth) pair, emitting the mean of a sigmoid
score map, strictly inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .flow import _seed_conv_init

ENCODER_LEVELS = 4  # full, /2, /4, /8; the /8 bottleneck is the coarsest depth scale
NUM_SCALES = 4


@dataclass
class GeneratorConfig:
    in_channels: int = 3          # 3 = RGB, 4 = RGB + masked depth channel
    base_width: int = 16
    num_classes: int = 8
    image_height: int = 64
    image_width: int = 192
    max_depth: float = 50.0

    def __post_init__(self):
        if self.in_channels not in (3, 4):
            raise ValueError(f"in_channels must be 3 or 4, got {self.in_channels}")
        div = 2 ** (ENCODER_LEVELS - 1)
        if self.image_height % div or self.image_width % div:
            raise ValueError(f"image dims must be divisible by {div}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.base_width < 1 or self.max_depth <= 0:
            raise ValueError("bad width or depth cap")


class DepthPyramid:
    """Four depth rasters, coarse to fine, each scale exactly 2x the last."""

    def __init__(self, scales):
        scales = list(scales)
        if len(scales) != NUM_SCALES:
            raise ValueError(f"expected {NUM_SCALES} scales, got {len(scales)}")
        for prev, cur in zip(scales, scales[1:]):
            ph, pw = prev.shape[-2:]
            if cur.shape[-2:] != (2 * ph, 2 * pw):
                raise ValueError("each pyramid scale must double the previous dims")
        self.scales = scales

    def __iter__(self):
        return iter(self.scales)

    def __len__(self):
        return len(self.scales)

    def __getitem__(self, i):
        return self.scales[i]

    @property
    def full(self):
        return self.scales[-1]


class ConvBlock(nn.Module):
    """Two conv-BN-PReLU units; stride applies to the first conv."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.act1 = nn.PReLU(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.act2 = nn.PReLU(out_ch)

    def forward(self, x):
        x = self.act1(self.bn1(self.conv1(x)))
        return self.act2(self.bn2(self.conv2(x)))


class EncoderStream(nn.Module):
    """Four ConvBlock levels at strides 1,2,2,2; returns all level features."""

    def __init__(self, in_ch: int, w: int):
        super().__init__()
        self.levels = nn.ModuleList([
            ConvBlock(in_ch, w),
            ConvBlock(w, 2 * w, stride=2),
            ConvBlock(2 * w, 4 * w, stride=2),
            ConvBlock(4 * w, 8 * w, stride=2),
        ])

    def forward(self, x):
        feats = []
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


class _UpStage(nn.Module):
    """Upsample 2x, halve channels, then merge skip features."""

    def __init__(self, in_ch: int, out_ch: int, skip_ch: int):
        super().__init__()
        self.reduce = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.PReLU(out_ch),
        )
        self.merge = ConvBlock(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.reduce(x)
        return self.merge(torch.cat([x, skip], dim=1))


def _scale_sigmoid(x, max_depth):
    # (0, max_depth) exclusive; keeps every depth strictly positive
    return torch.sigmoid(x) * max_depth


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        w = config.base_width
        self.image_stream = EncoderStream(config.in_channels, w)   # runs on x_n AND x_prev
        self.depth_stream = EncoderStream(1, w)

        self.fuse = nn.Sequential(
            nn.Conv2d(3 * 8 * w, 8 * w, 1),
            nn.BatchNorm2d(8 * w),
            nn.PReLU(8 * w),
        )
        self.fuse_block = ConvBlock(8 * w, 8 * w)

        # skip channels at each decoder level: three streams at matching width
        self.up1 = _UpStage(8 * w, 4 * w, skip_ch=3 * 4 * w)
        self.up2 = _UpStage(4 * w, 2 * w, skip_ch=3 * 2 * w)
        self.up3 = _UpStage(2 * w, w, skip_ch=3 * w)

        self.depth_head_c1 = nn.Conv2d(8 * w, 1, 3, padding=1)
        self.depth_head_c2 = nn.Conv2d(4 * w, 1, 3, padding=1)
        self.depth_head_c3 = nn.Conv2d(2 * w, 1, 3, padding=1)
        self.depth_out = nn.Sequential(
            nn.Conv2d(w, w, 3, padding=1), nn.BatchNorm2d(w), nn.PReLU(w),
            nn.Conv2d(w, 1, 3, padding=1),
        )
        self.seg_out = nn.Sequential(
            nn.Conv2d(w, w, 3, padding=1), nn.BatchNorm2d(w), nn.PReLU(w),
            nn.Conv2d(w, config.num_classes, 3, padding=1),
        )

        self.skips_enabled = True  # ablation/test hook; False zeroes every skip path
        _seed_conv_init(self, seed)

    def _check_inputs(self, x_n, x_prev, depth_prev):
        b, c, h, w = x_n.shape
        if c != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {c}")
        if x_prev.shape != x_n.shape:
            raise ValueError("x_prev does not match x_n")
        if depth_prev.shape != (b, 1, h, w):
            raise ValueError(f"depth_prev must be (B,1,H,W), got {tuple(depth_prev.shape)}")
        div = 2 ** (ENCODER_LEVELS - 1)
        if h % div or w % div:
            raise ValueError(f"H and W must be divisible by {div}, got {h}x{w}")

    def forward(self, x_n, x_prev, depth_prev):
        self._check_inputs(x_n, x_prev, depth_prev)
        f_n = self.image_stream(x_n)
        f_prev = self.image_stream(x_prev)
        f_d = self.depth_stream(depth_prev)

        fused = self.fuse_block(self.fuse(torch.cat([f_n[3], f_prev[3], f_d[3]], dim=1)))

        def skip(level):
            s = torch.cat([f_n[level], f_prev[level], f_d[level]], dim=1)
            return s if self.skips_enabled else s * 0.0

        max_d = self.config.max_depth
        d1 = _scale_sigmoid(self.depth_head_c1(fused), max_d)
        t = self.up1(fused, skip(2))
        d2 = _scale_sigmoid(self.depth_head_c2(t), max_d)
        t = self.up2(t, skip(1))
        d3 = _scale_sigmoid(self.depth_head_c3(t), max_d)
        t = self.up3(t, skip(0))
        d4 = _scale_sigmoid(self.depth_out(t), max_d)
        seg_logits = self.seg_out(t)
        return DepthPyramid([d1, d2, d3, d4]), seg_logits


class Discriminator(nn.Module):
    """Conditional real/fake scorer for (image, depth) pairs."""

    def __init__(self, in_channels: int = 3, base_width: int = 16, seed: int = 0):
        super().__init__()
        w = base_width
        self.features = nn.Sequential(
            nn.Conv2d(in_channels + 1, w, 4, stride=2, padding=1),   # no BN on the first layer
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.BatchNorm2d(2 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            nn.BatchNorm2d(4 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 8 * w, 4, stride=2, padding=1),
            nn.BatchNorm2d(8 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(8 * w, 1, 3, padding=1),
        )
        _seed_conv_init(self, seed)

    def forward(self, x, depth):
        if x.shape[-2:] != depth.shape[-2:] or x.shape[0] != depth.shape[0]:
            raise ValueError("image and depth dims do not match")
        if depth.shape[1] != 1:
            raise ValueError("depth must be single channel")
        score_map = torch.sigmoid(self.features(torch.cat([x, depth], dim=1)))
        return score_map.mean(dim=(1, 2, 3))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
