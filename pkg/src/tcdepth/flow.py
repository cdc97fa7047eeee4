"""Optical flow: differentiable warping, endpoint error, and a small
coarse-to-fine flow network used to score temporal consistency.

Flow rasters are (B, 2, H, W) in pixel units, channel 0 horizontal and
channel 1 vertical. ``warp(r, f)`` samples r at p - f(p), so warping frame n
by the flow n->n+1 reconstructs frame n+1 wherever the scene is visible in
both frames.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def warp(raster: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of raster at p - flow(p), border clamped.

    Implemented with explicit gathers rather than grid_sample so that zero
    flow reproduces the input bit for bit, which downstream identity checks
    rely on. Differentiable in both raster and flow.
    """
    b, c, h, w = raster.shape
    if flow.shape != (b, 2, h, w):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match raster {(b, 2, h, w)}")
    dt, dev = raster.dtype, raster.device
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=dt, device=dev),
        torch.arange(w, dtype=dt, device=dev),
        indexing="ij",
    )
    x = (gx.unsqueeze(0) - flow[:, 0]).clamp(0, w - 1)
    y = (gy.unsqueeze(0) - flow[:, 1]).clamp(0, h - 1)
    x0 = x.floor()
    y0 = y.floor()
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = raster.reshape(b, c, h * w)

    def take(yy, xx):
        idx = (yy * w + xx).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    return (
        take(y0, x0) * (1 - fx) * (1 - fy)
        + take(y0, x1) * fx * (1 - fy)
        + take(y1, x0) * (1 - fx) * fy
        + take(y1, x1) * fx * fy
    )


def epe(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean endpoint error in pixels; valid (B,H,W) bool restricts the mean.

    Exactly 0 for identical fields; the sqrt-at-zero gradient is guarded by
    evaluating sqrt only where the squared error is positive.
    """
    sq = ((pred - target) ** 2).sum(dim=1)
    positive = sq > 0
    err = torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))),
                      torch.zeros_like(sq))
    if valid is not None:
        if not valid.any():
            return torch.zeros((), dtype=pred.dtype, device=pred.device)
        return err[valid].mean()
    return err.mean()


class _RefineLevel(nn.Module):
    """Predicts a residual flow from (warped a, b, current flow)."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(2 * in_channels + 2, width, 5, padding=2)
        self.conv2 = nn.Conv2d(width, width, 5, padding=2)
        self.conv3 = nn.Conv2d(width, 2, 5, padding=2)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, a_warp, b, flow):
        x = torch.cat([a_warp, b, flow], dim=1)
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        return self.conv3(x)


class FlowNet(nn.Module):
    """Coarse-to-fine residual flow estimator on single-channel rasters.

    Each pyramid level warps a toward b with the upsampled coarser flow and
    predicts a residual correction. ``input_scale`` rescales inputs at entry
    so callers can pass rasters in natural units (e.g. meters).
    """

    def __init__(self, levels: int = 3, width: int = 16, in_channels: int = 1, seed: int = 0):
        super().__init__()
        self.num_levels = levels
        self.in_channels = in_channels
        self.levels = nn.ModuleList(_RefineLevel(in_channels, width) for _ in range(levels))
        self.register_buffer("input_scale", torch.tensor(1.0))
        _seed_conv_init(self, seed)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError("input rasters must share a shape")
        bs, c, h, w = a.shape
        div = 2 ** (self.num_levels - 1)
        if h % div or w % div:
            raise ValueError(f"H and W must be divisible by {div}, got {h}x{w}")
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {c}")

        a = a * self.input_scale
        b = b * self.input_scale
        pyr_a, pyr_b = [a], [b]
        for _ in range(self.num_levels - 1):
            pyr_a.append(F.avg_pool2d(pyr_a[-1], 2))
            pyr_b.append(F.avg_pool2d(pyr_b[-1], 2))

        flow = torch.zeros(bs, 2, *pyr_a[-1].shape[-2:], dtype=a.dtype, device=a.device)
        for lvl in range(self.num_levels - 1, -1, -1):
            if lvl < self.num_levels - 1:
                flow = 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)
            a_warp = warp(pyr_a[lvl], flow)
            flow = flow + self.levels[lvl](a_warp, pyr_b[lvl], flow)
        return flow


def _seed_conv_init(module: nn.Module, seed: int) -> None:
    """He-style init from a private generator; global RNG state untouched."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()


def freeze(net: nn.Module) -> nn.Module:
    """Stop parameter updates; gradients still reach the net's inputs."""
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def is_frozen(net: nn.Module) -> bool:
    return not any(p.requires_grad for p in net.parameters())


def _flow_pairs(sequences) -> list:
    """(a, b, flow, valid) depth training tuples, both temporal directions."""
    from . import scenegen

    pairs = []
    for seq in sequences:
        for fa, fb in zip(seq.frames[:-1], seq.frames[1:]):
            pairs.append((fa.depth, fb.depth, fa.flow_to_next, ~fa.occ_to_next))
            rev_flow, rev_occ = scenegen.ground_truth_flow(fb, fa)
            pairs.append((fb.depth, fa.depth, rev_flow, ~rev_occ))
    return pairs


def pretrain_flow(
    net: FlowNet,
    sequences,
    *,
    steps: int = 200,
    batch_size: int = 4,
    lr: float = 1e-3,
    seed: int = 0,
) -> list:
    """Supervise the net on exact depth-map flow; returns per-step losses.

    Sets ``input_scale`` to 1/max_depth of the data so later callers can feed
    raw depth in meters. The caller decides when to ``freeze`` the result.
    """
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no training sequences given")
    if is_frozen(net):
        raise RuntimeError("flow net is frozen; refusing to update parameters")
    max_depth = max(seq.config.depth_range[1] for seq in sequences)
    with torch.no_grad():
        net.input_scale.fill_(1.0 / max_depth)

    pairs = _flow_pairs(sequences)
    a = torch.from_numpy(np.stack([p[0] for p in pairs])).unsqueeze(1).float()
    b = torch.from_numpy(np.stack([p[1] for p in pairs])).unsqueeze(1).float()
    target = torch.from_numpy(np.stack([p[2] for p in pairs])).permute(0, 3, 1, 2).float()
    valid = torch.from_numpy(np.stack([p[3] for p in pairs]))

    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    losses = []
    net.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(pairs), size=batch_size))
        pred = net(a[idx], b[idx])
        loss = epe(pred, target[idx], valid[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    net.eval()
    return losses
