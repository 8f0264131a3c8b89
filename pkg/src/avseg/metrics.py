"""Segmentation quality metrics over (T, H, W) mask volumes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLD = 0.5
DEFAULT_BETA2 = 0.3


@dataclass
class MetricReport:
    """Split-level scores plus the per-video breakdown behind them."""
    miou: float
    fscore: float
    per_video: list = field(default_factory=list)  # (video_id, miou, fscore)
    threshold: float = DEFAULT_THRESHOLD
    beta2: float = DEFAULT_BETA2


def binarize(pred: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Strictly-greater thresholding, so exactly-0.5 maps count as background."""
    return pred > threshold


def frame_iou(pred_bin: np.ndarray, gt_bin: np.ndarray) -> float:
    """Intersection over union for one frame; two empty masks score 1."""
    inter = int(np.logical_and(pred_bin, gt_bin).sum())
    union = int(np.logical_or(pred_bin, gt_bin).sum())
    if union == 0:
        return 1.0
    return inter / union


def frame_fscore(pred_bin: np.ndarray, gt_bin: np.ndarray, beta2: float = DEFAULT_BETA2) -> float:
    """Weighted precision/recall mean; empty-vs-empty scores 1, one-sided empty 0."""
    tp = int(np.logical_and(pred_bin, gt_bin).sum())
    p_count = int(pred_bin.sum())
    g_count = int(gt_bin.sum())
    if p_count == 0 and g_count == 0:
        return 1.0
    if p_count == 0 or g_count == 0:
        return 0.0
    precision = tp / p_count
    recall = tp / g_count
    denom = beta2 * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + beta2) * precision * recall / denom


def _check_shapes(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def miou(pred: np.ndarray, gt: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Mean per-frame IoU of the thresholded prediction against binary truth."""
    pred, gt = _check_shapes(pred, gt)
    pb = binarize(pred, threshold)
    gb = gt > 0.5
    return float(np.mean([frame_iou(pb[t], gb[t]) for t in range(pred.shape[0])]))


def f_score(pred: np.ndarray, gt: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
            beta2: float = DEFAULT_BETA2) -> float:
    """Mean per-frame F-measure of the thresholded prediction."""
    pred, gt = _check_shapes(pred, gt)
    pb = binarize(pred, threshold)
    gb = gt > 0.5
    return float(np.mean([frame_fscore(pb[t], gb[t], beta2) for t in range(pred.shape[0])]))
