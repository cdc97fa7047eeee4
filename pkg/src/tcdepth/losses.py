"""Training objectives: reconstruction, masked reconstruction, adversarial,
edge-aware smoothness, temporal flow consistency, multi-scale combination,
segmentation cross-entropy, and the joint total.

All pixel losses are means, not sums, so the default weights are independent
of image resolution. Scores from the discriminator are clamped away from
{0, 1} before any log.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from .flow import epe, is_frozen

SCORE_EPS = 1e-6


@dataclass
class LossWeights:
    rec: float = 1000.0
    adv: float = 100.0
    smooth: float = 10.0
    temporal: float = 1.0
    seg: float = 10.0

    def __post_init__(self):
        for name in ("rec", "adv", "smooth", "temporal", "seg"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative loss weight {name}")


@dataclass
class LossBreakdown:
    """Per-component scalars; components are unweighted sums over scales.

    ``total`` is the generator objective: rec*w.rec + adv_g*w.adv +
    smooth*w.smooth + temporal*w.temporal + seg*w.seg. The discriminator's
    own objective adv_d is reported alongside but never folded into total.
    """

    rec: torch.Tensor
    adv_g: torch.Tensor
    adv_d: torch.Tensor
    smooth: torch.Tensor
    temporal: torch.Tensor
    seg: torch.Tensor
    total: torch.Tensor
    per_scale: dict = field(default_factory=dict)

    def floats(self) -> dict:
        return {
            name: float(getattr(self, name).detach())
            for name in ("rec", "adv_g", "adv_d", "smooth", "temporal", "seg", "total")
        }

    def with_seg(self, seg_scalar: torch.Tensor, weights: LossWeights) -> "LossBreakdown":
        return replace(
            self,
            seg=seg_scalar,
            total=self.total + weights.seg * seg_scalar,
        )


def _check_same_shape(a, b, what="tensors"):
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(pred_depth: torch.Tensor, gt_depth: torch.Tensor) -> torch.Tensor:
    """Mean absolute depth error."""
    _check_same_shape(pred_depth, gt_depth, "pred/gt depth")
    return (pred_depth - gt_depth).abs().mean()


def masked_reconstruction_loss(pred_depth, gt_depth, mask) -> torch.Tensor:
    """Mean absolute error over hole pixels only (mask 1 = known, 0 = hole).

    With no holes the loss is exactly 0; with everything a hole it reduces
    to the plain reconstruction loss.
    """
    _check_same_shape(pred_depth, gt_depth, "pred/gt depth")
    _check_same_shape(pred_depth, mask, "depth/mask")
    mask = mask.to(pred_depth.dtype)
    if not torch.logical_or(mask == 0, mask == 1).all():
        raise ValueError("mask must be binary")
    hole = 1.0 - mask
    count = hole.sum()
    if count == 0:
        return torch.zeros((), dtype=pred_depth.dtype, device=pred_depth.device)
    return ((pred_depth - gt_depth).abs() * hole).sum() / count


@contextmanager
def _params_constant(module):
    """Treat a module's parameters as constants inside the block."""
    if not isinstance(module, nn.Module):
        yield
        return
    saved = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, prev in saved:
            p.requires_grad_(prev)


def _neg_log(score):
    return -torch.log(score.clamp(SCORE_EPS, 1.0 - SCORE_EPS))


def adversarial_losses(x, gt_depth, pred_depth, disc) -> tuple:
    """(g_loss, d_loss) for a conditional discriminator.

    d_loss sees the prediction as a constant; g_loss sees the discriminator
    parameters as constants and uses the non-saturating -log D(x, pred).
    """
    score_real = disc(x, gt_depth)
    score_fake = disc(x, pred_depth.detach())
    d_loss = (_neg_log(score_real) + _neg_log(1.0 - score_fake)).mean()
    with _params_constant(disc):
        score_gen = disc(x, pred_depth)
    g_loss = _neg_log(score_gen).mean()
    return g_loss, d_loss


def smoothness_loss(pred_depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Depth-gradient penalty attenuated where the image has strong edges.

    Forward differences per axis; the edge weight is exp(-|image gradient|)
    with the gradient magnitude summed over color channels. The two axis
    means are added.
    """
    if pred_depth.shape[-2:] != image.shape[-2:]:
        raise ValueError(
            f"depth {tuple(pred_depth.shape[-2:])} and image "
            f"{tuple(image.shape[-2:])} dims differ")
    dpx = (pred_depth[..., :, 1:] - pred_depth[..., :, :-1]).abs()
    dpy = (pred_depth[..., 1:, :] - pred_depth[..., :-1, :]).abs()
    wx = torch.exp(-(image[..., :, 1:] - image[..., :, :-1]).abs().sum(-3, keepdim=True))
    wy = torch.exp(-(image[..., 1:, :] - image[..., :-1, :]).abs().sum(-3, keepdim=True))
    zero = torch.zeros((), dtype=pred_depth.dtype, device=pred_depth.device)
    sx = (dpx * wx).mean() if dpx.numel() else zero
    sy = (dpy * wy).mean() if dpy.numel() else zero
    return sx + sy


def temporal_loss(pred_depth_n, pred_depth_prev, gt_depth_n, gt_depth_prev, flow_net) -> torch.Tensor:
    """Endpoint error between predicted-pair flow and ground-truth-pair flow.

    The flow net must be frozen; gradients reach the predictions through it
    but its own parameters never move.
    """
    if not is_frozen(flow_net):
        raise RuntimeError("flow net must be frozen before use in the temporal loss")
    _check_same_shape(pred_depth_n, gt_depth_n, "pred/gt depth")
    with torch.no_grad():
        flow_gt = flow_net(gt_depth_n, gt_depth_prev)
    flow_pred = flow_net(pred_depth_n, pred_depth_prev)
    return epe(flow_pred, flow_gt)


@dataclass
class LossContext:
    """Side inputs for the multi-scale depth loss.

    mask: known-pixel mask for completion mode (None = estimation mode).
    pred_prev/gt_prev: previous-step full-resolution depths for the
    temporal term. disc/flow_net: scoring networks; None disables a term.
    """

    mask: torch.Tensor | None = None
    pred_prev: torch.Tensor | None = None
    gt_prev: torch.Tensor | None = None
    disc: nn.Module | None = None
    flow_net: nn.Module | None = None


def depth_loss_multiscale(pyramid, gt_depth, x, context: LossContext, weights: LossWeights) -> LossBreakdown:
    """Per-scale reconstruction + smoothness at native resolution, adversarial
    + temporal on the bilinearly upsampled output; weighted sum over scales.
    """
    full_h, full_w = gt_depth.shape[-2:]
    if pyramid[-1].shape[-2:] != (full_h, full_w):
        raise ValueError("finest pyramid scale does not match gt resolution")
    if x.shape[-2:] != (full_h, full_w):
        raise ValueError("conditioning image does not match gt resolution")

    use_temporal = (
        context.flow_net is not None
        and context.pred_prev is not None
        and context.gt_prev is not None
        and weights.temporal > 0
    )
    if use_temporal:
        if not is_frozen(context.flow_net):
            raise RuntimeError("flow net must be frozen before use in the temporal loss")
        with torch.no_grad():
            flow_gt = context.flow_net(gt_depth, context.gt_prev)
    use_adv = context.disc is not None and weights.adv > 0
    if use_adv:
        score_real = context.disc(x, gt_depth)  # one real pass shared by all scales

    zero = torch.zeros((), dtype=gt_depth.dtype, device=gt_depth.device)
    parts = {k: [] for k in ("rec", "adv_g", "adv_d", "smooth", "temporal")}
    for pred in pyramid:
        h, w = pred.shape[-2:]
        if (h, w) == (full_h, full_w):
            gt_c, x_c, up = gt_depth, x, pred
            mask_c = context.mask
        else:
            gt_c = F.interpolate(gt_depth, size=(h, w), mode="area")
            x_c = F.interpolate(x, size=(h, w), mode="area")
            mask_c = None if context.mask is None else F.interpolate(
                context.mask.to(gt_depth.dtype), size=(h, w), mode="nearest")
            up = F.interpolate(pred, size=(full_h, full_w), mode="bilinear",
                               align_corners=False)

        if context.mask is not None:
            parts["rec"].append(masked_reconstruction_loss(pred, gt_c, mask_c))
        else:
            parts["rec"].append(reconstruction_loss(pred, gt_c))
        parts["smooth"].append(smoothness_loss(pred, x_c))

        if use_adv:
            score_fake = context.disc(x, up.detach())
            parts["adv_d"].append((_neg_log(score_real) + _neg_log(1.0 - score_fake)).mean())
            with _params_constant(context.disc):
                score_gen = context.disc(x, up)
            parts["adv_g"].append(_neg_log(score_gen).mean())
        else:
            parts["adv_d"].append(zero)
            parts["adv_g"].append(zero)

        if use_temporal:
            flow_pred = context.flow_net(up, context.pred_prev)
            parts["temporal"].append(epe(flow_pred, flow_gt))
        else:
            parts["temporal"].append(zero)

    sums = {k: sum(v) for k, v in parts.items()}
    total = (
        weights.rec * sums["rec"]
        + weights.adv * sums["adv_g"]
        + weights.smooth * sums["smooth"]
        + weights.temporal * sums["temporal"]
    )
    return LossBreakdown(
        rec=sums["rec"],
        adv_g=sums["adv_g"],
        adv_d=sums["adv_d"],
        smooth=sums["smooth"],
        temporal=sums["temporal"],
        seg=zero,
        total=total,
        per_scale={k: [float(t.detach()) for t in v] for k, v in parts.items()},
    )


def segmentation_loss(seg_logits: torch.Tensor, gt_labels: torch.Tensor) -> torch.Tensor:
    """Mean pixel cross-entropy of soft-maxed logits (numerically stable)."""
    if seg_logits.shape[-2:] != gt_labels.shape[-2:]:
        raise ValueError("logit and label dims differ")
    if gt_labels.dtype not in (torch.int64, torch.int32, torch.uint8):
        raise ValueError("labels must be integer class indices")
    labels = gt_labels.long()
    k = seg_logits.shape[-3]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(seg_logits, labels)


def joint_loss(depth_breakdown: LossBreakdown, seg_scalar: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Depth total plus the weighted segmentation term."""
    return depth_breakdown.total + weights.seg * seg_scalar
