"""Quantitative evaluation: depth error/accuracy, segmentation accuracy and
IoU, structural integrity (PSNR/SSIM), temporal flicker, and focal-length
correction. Everything runs in float64 numpy for oracle-grade precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .scenegen import _bilinear_sample

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class MetricsReport:
    """Partial results; each evaluation op fills its own slice of fields."""

    abs_rel: float | None = None
    sq_rel: float | None = None
    rmse: float | None = None
    rmse_log: float | None = None
    delta1: float | None = None
    delta2: float | None = None
    delta3: float | None = None
    pixel_accuracy: float | None = None
    mean_iou: float | None = None
    per_class_iou: list | None = None
    excluded_classes: list | None = None
    psnr: float | None = None
    ssim: float | None = None
    flicker_epe: float | None = None
    n_pixels: int | None = None
    protocol: dict = field(default_factory=dict)

    def to_kv(self) -> dict:
        out = {}
        for name in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2",
                     "delta3", "pixel_accuracy", "mean_iou", "psnr", "ssim",
                     "flicker_epe", "n_pixels"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.per_class_iou is not None:
            for k, v in enumerate(self.per_class_iou):
                if not math.isnan(v):
                    out[f"iou_{k}"] = v
        if self.excluded_classes:
            out["excluded_classes"] = " ".join(str(c) for c in self.excluded_classes)
        for k, v in self.protocol.items():
            out[f"protocol_{k}"] = v
        return out

    def format_table(self) -> str:
        lines = []
        for k, v in self.to_kv().items():
            shown = f"{v:.6f}" if isinstance(v, float) else str(v)
            lines.append(f"{k:<18} {shown}")
        return "\n".join(lines)


def merge_reports(*reports: MetricsReport) -> MetricsReport:
    """Combine partial reports; later non-None fields win."""
    out = MetricsReport()
    for rep in reports:
        for name in vars(rep):
            if name == "protocol":
                out.protocol.update(rep.protocol)
                continue
            value = getattr(rep, name)
            if value is not None:
                setattr(out, name, value)
    return out


def depth_metrics(pred, gt, valid_mask=None, min_cap: float = 1e-3,
                  max_cap: float = 50.0) -> MetricsReport:
    """Error and threshold-accuracy statistics over valid, capped pixels.

    Pixels participate when gt lies in [min_cap, max_cap] (and valid_mask,
    if given); predictions are clamped to the caps before comparison.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred/gt shape mismatch")
    if min_cap <= 0 or max_cap <= min_cap:
        raise ValueError(f"bad caps [{min_cap}, {max_cap}]")

    valid = (gt >= min_cap) & (gt <= max_cap)
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")

    p = np.clip(pred[valid], min_cap, max_cap)
    g = gt[valid]
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_pixels=int(valid.sum()),
        protocol={"min_cap": min_cap, "max_cap": max_cap},
    )


def seg_metrics(pred_labels, gt_labels, num_classes: int) -> MetricsReport:
    """Pixel accuracy plus per-class and mean IoU.

    Classes absent from both prediction and ground truth are excluded from
    the mean and listed in excluded_classes.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError("label shape mismatch")
    if pred.max(initial=0) >= num_classes or gt.max(initial=0) >= num_classes:
        raise ValueError(f"labels must be < {num_classes}")
    if pred.min(initial=0) < 0 or gt.min(initial=0) < 0:
        raise ValueError("labels must be non-negative")

    k = num_classes
    confusion = np.bincount(
        (gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()),
        minlength=k * k).reshape(k, k)
    accuracy = float(np.trace(confusion) / confusion.sum())

    per_class = []
    excluded = []
    for c in range(k):
        inter = confusion[c, c]
        union = confusion[c, :].sum() + confusion[:, c].sum() - inter
        if union == 0:
            per_class.append(float("nan"))
            excluded.append(c)
        else:
            per_class.append(float(inter / union))
    included = [v for v in per_class if not math.isnan(v)]
    return MetricsReport(
        pixel_accuracy=accuracy,
        per_class_iou=per_class,
        excluded_classes=excluded,
        mean_iou=float(np.mean(included)) if included else float("nan"),
        protocol={"num_classes": k, "seg_pixels": int(confusion.sum())},
    )


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def structural_metrics(pred, gt, value_range: float) -> MetricsReport:
    """PSNR (capped at 100 dB near-zero MSE) and Gaussian-windowed SSIM."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred/gt shape mismatch")
    if value_range <= 0:
        raise ValueError("value_range must be positive")

    mse = float(np.mean((pred - gt) ** 2))
    if mse < value_range**2 * 1e-10:
        psnr = PSNR_CAP_DB
    else:
        psnr = 10.0 * math.log10(value_range**2 / mse)

    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (0.01 * value_range) ** 2
    c2 = (0.03 * value_range) ** 2

    def smooth(a):
        return ndimage.correlate(a, kernel, mode="reflect")

    mu_p = smooth(pred)
    mu_g = smooth(gt)
    var_p = smooth(pred * pred) - mu_p**2
    var_g = smooth(gt * gt) - mu_g**2
    cov = smooth(pred * gt) - mu_p * mu_g
    ssim_map = ((2 * mu_p * mu_g + c1) * (2 * cov + c2)) / (
        (mu_p**2 + mu_g**2 + c1) * (var_p + var_g + c2))
    return MetricsReport(
        psnr=psnr,
        ssim=float(ssim_map.mean()),
        protocol={"value_range": value_range},
    )


def _warp_np(raster: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """numpy analog of flow.warp: sample raster at p - flow(p)."""
    h, w = raster.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return _bilinear_sample(raster.astype(np.float64), gx - flow[..., 0], gy - flow[..., 1])


def flicker_metric(pred_depth_seq, gt_flow_seq, occlusion_masks) -> float:
    """Mean temporal inconsistency of a depth sequence.

    For each consecutive pair, the previous prediction is warped forward by
    the exact flow and compared to the current prediction, ignoring pixels
    whose surface is not visible in both frames.
    """
    preds = [np.asarray(p, dtype=np.float64) for p in pred_depth_seq]
    if len(preds) < 2:
        raise ValueError("need at least two frames")
    if len(gt_flow_seq) < len(preds) - 1 or len(occlusion_masks) < len(preds) - 1:
        raise ValueError("need flow and occlusion for every consecutive pair")

    residuals = []
    for n in range(1, len(preds)):
        flow = np.asarray(gt_flow_seq[n - 1], dtype=np.float64)
        occ = np.asarray(occlusion_masks[n - 1]).astype(np.float64)
        warped = _warp_np(preds[n - 1], flow)
        occ_w = _warp_np(occ, flow)
        vis = occ_w < 0.5
        if not vis.any():
            continue
        residuals.append(float(np.abs(preds[n] - warped)[vis].mean()))
    if not residuals:
        raise ValueError("no visible pixels in any pair")
    return float(np.mean(residuals))


def focal_correction(depth, f_source: float, f_target: float):
    """Rescale depth for a focal-length change: depth * f_target / f_source."""
    if f_source <= 0 or f_target <= 0:
        raise ValueError("focal lengths must be positive")
    return np.asarray(depth) * (f_target / f_source)
