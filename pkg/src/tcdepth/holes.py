"""Hole machinery for depth completion.

Masks use the convention 1 = depth known, 0 = hole, so that y * M zeroes
exactly the missing input pixels and a (1 - M) factor selects them for
supervision. Synthetic masks imitate real sensor dropout: bands around
depth discontinuities, random featureless blobs, and everything beyond a
far cutoff, with the net hole fraction clamped to a configured range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from scipy import ndimage

from .flow import _seed_conv_init

MASK_DIM_DIVISOR = 32


@dataclass
class HoleConfig:
    edge_threshold: float = 1.0     # meters of depth jump that starts a band
    edge_radius: int = 2            # band half-width in pixels
    blob_budget: float = 0.08       # target fraction from random blobs
    max_blobs: int = 40
    blob_axis_range: tuple = (2, 9)
    far_cutoff: float = 45.0        # depth at or beyond this becomes a hole
    min_fraction: float = 0.05
    max_fraction: float = 0.35
    predictor_width: int = 8        # the appendix leaves sizes open; ours live here
    predictor_levels: int = 4

    def __post_init__(self):
        if not 0.0 <= self.min_fraction < self.max_fraction <= 1.0:
            raise ValueError("need 0 <= min_fraction < max_fraction <= 1")
        if self.edge_radius < 0 or self.blob_budget < 0:
            raise ValueError("negative geometry parameter")


def _ellipse(h, w, rng, axis_range):
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    ay = rng.uniform(*axis_range)
    ax = rng.uniform(*axis_range)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy - cy
    x = xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * x + s * y) / ax
    v = (-s * x + c * y) / ay
    return u * u + v * v <= 1.0


def synthesize_mask(frame, seed: int, config: HoleConfig | None = None) -> np.ndarray:
    """Procedural hole mask for one frame; uint8, 1 = known, 0 = hole."""
    config = config or HoleConfig()
    depth = np.asarray(frame.depth, dtype=np.float64)
    h, w = depth.shape
    rng = np.random.Generator(np.random.PCG64(seed))

    # (a) bands around depth discontinuities
    edge = np.zeros((h, w), dtype=bool)
    edge[:, :-1] |= np.abs(np.diff(depth, axis=1)) > config.edge_threshold
    edge[:-1, :] |= np.abs(np.diff(depth, axis=0)) > config.edge_threshold
    if config.edge_radius > 0 and edge.any():
        edge = ndimage.binary_dilation(edge, iterations=config.edge_radius)

    # (b) random featureless blobs up to the area budget
    blobs = np.zeros((h, w), dtype=bool)
    target = config.blob_budget * h * w
    for _ in range(config.max_blobs):
        if blobs.sum() >= target:
            break
        blobs |= _ellipse(h, w, rng, config.blob_axis_range)

    # (c) far range dropout
    far = depth >= config.far_cutoff

    holes = edge | blobs | far

    max_holes = int(config.max_fraction * h * w)
    excess = int(holes.sum()) - max_holes
    if excess > 0:
        idx = np.flatnonzero(holes.ravel())
        drop = rng.choice(idx, size=excess, replace=False)
        flat = holes.ravel()
        flat[drop] = False
        holes = flat.reshape(h, w)

    min_holes = int(np.ceil(config.min_fraction * h * w))
    for _ in range(200):
        if holes.sum() >= min_holes:
            break
        holes |= _ellipse(h, w, rng, config.blob_axis_range)
    short = min_holes - int(holes.sum())
    if short > 0:
        idx = np.flatnonzero(~holes.ravel())
        add = rng.choice(idx, size=short, replace=False)
        flat = holes.ravel()
        flat[add] = True
        holes = flat.reshape(h, w)

    return (~holes).astype(np.uint8)


def apply_holes(depth, mask):
    """depth with holes zeroed; inputs are left untouched."""
    if np.shape(depth) != np.shape(mask):
        raise ValueError("depth/mask shape mismatch")
    if isinstance(depth, torch.Tensor):
        return depth * torch.as_tensor(mask, dtype=depth.dtype, device=depth.device)
    depth = np.asarray(depth)
    return depth * np.asarray(mask).astype(depth.dtype)


class _DoubleConv(nn.Module):
    """conv-BN-ReLU twice, the appendix's per-layer recipe."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class HolePredictor(nn.Module):
    """Mirrored encoder-decoder with skips at every level; 2-class head.

    Output channel 0 scores "hole", channel 1 scores "known", so the
    soft-max argmax is directly a known-pixel mask.
    """

    def __init__(self, width: int = 8, levels: int = 4, seed: int = 0):
        super().__init__()
        if levels < 2:
            raise ValueError("need at least 2 levels")
        self.levels = levels
        widths = [width * 2**i for i in range(levels)]
        self.down = nn.ModuleList()
        prev = 3
        for ww in widths:
            self.down.append(_DoubleConv(prev, ww))
            prev = ww
        self.up = nn.ModuleList()
        for fine, coarse in zip(widths[-2::-1], widths[:0:-1]):
            self.up.append(_DoubleConv(coarse + fine, fine))
        self.head = nn.Conv2d(widths[0], 2, 1)
        _seed_conv_init(self, seed)

    def forward(self, rgb):
        if rgb.shape[-2] % MASK_DIM_DIVISOR or rgb.shape[-1] % MASK_DIM_DIVISOR:
            raise ValueError(f"dims must be divisible by {MASK_DIM_DIVISOR}")
        if rgb.shape[-3] != 3:
            raise ValueError("expected RGB input")
        skips = []
        x = rgb
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, skips[-2::-1]):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


def _to_batch(rgb) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(rgb), dtype=torch.float32)
    if t.ndim == 3 and t.shape[-1] == 3:   # HWC -> CHW
        t = t.permute(2, 0, 1)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t


def train_hole_predictor(dataset, config: HoleConfig | None = None, *,
                         steps: int = 300, batch_size: int = 2, lr: float = 2e-3,
                         seed: int = 0):
    """Fit the predictor with per-pixel cross-entropy on the two classes.

    Returns (net, per-step loss list).
    """
    config = config or HoleConfig()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training dataset")
    images, masks = [], []
    for rgb, mask in dataset:
        img = _to_batch(rgb)[0]
        m = torch.as_tensor(np.asarray(mask)).long()
        if img.shape[-2:] != m.shape[-2:]:
            raise ValueError("rgb and mask dims differ")
        images.append(img)
        masks.append(m)
    images = torch.stack(images)
    masks = torch.stack(masks)

    net = HolePredictor(width=config.predictor_width,
                        levels=config.predictor_levels, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    losses = []
    net.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(dataset), size=min(batch_size, len(dataset))))
        logits = net(images[idx])
        loss = F.cross_entropy(logits, masks[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    net.eval()
    return net, losses


def predict_hole_mask(rgb, net: HolePredictor) -> np.ndarray:
    """Binary known-pixel mask from the trained predictor (deterministic)."""
    net.eval()
    with torch.no_grad():
        logits = net(_to_batch(rgb))
    return logits.argmax(dim=1)[0].numpy().astype(np.uint8)
