"""Training objectives: masked binary cross entropy plus the audio-visual
alignment regularizers, all differentiable through the tensor graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12
POOL_EPS = 1e-8
SETTINGS = ("s4", "ms3")
LOSS_VARIANTS = ("none", "av", "vv")


@dataclass
class LossBreakdown:
    """The scalar terms of one training step; total == bce + weight * align."""
    bce: Tensor
    avm: Tensor
    total: Tensor
    weight: float


def bce_loss(pred: Tensor, target, frames) -> Tensor:
    """Mean binary cross entropy over the supervised frames only.

    ``frames`` holds 1-based clip indices; unsupervised clips contribute
    nothing, which is how the single-annotation setting trains.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target,
                        dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ValueError(f"prediction {pred.data.shape} vs target {target.shape}")
    t = pred.data.shape[0]
    frames = sorted(set(int(f) for f in frames))
    if not frames:
        raise ValueError("at least one supervised frame is required")
    if frames[0] < 1 or frames[-1] > t:
        raise ValueError(f"supervised frames {frames} outside 1..{t}")

    weight = np.zeros((t, 1, 1))
    weight[[f - 1 for f in frames]] = 1.0
    p = T.clamp(pred, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = Tensor(target)
    per_pixel = T.neg(T.add(T.mul(y, T.log(p)),
                            T.mul(Tensor(1.0) - y, T.log(Tensor(1.0) - p))))
    count = len(frames) * target.shape[1] * target.shape[2]
    return T.mul(T.tsum(T.mul(per_pixel, Tensor(weight))), Tensor(1.0 / count))


def masked_stage_feature(mask_pred: Tensor, stage_feat: Tensor) -> Tensor:
    """Soft mask-weighted average of a stage's features, one row per clip.

    The full-resolution prediction is average-pooled down to the stage grid
    and used as soft weights, keeping the result differentiable in the mask.
    """
    t, hi, wi, _ = stage_feat.data.shape
    _, h, w = mask_pred.data.shape
    if h % hi or w % wi:
        raise ValueError(f"mask ({h}, {w}) does not pool onto stage grid ({hi}, {wi})")
    pooled = T.avg_pool2d(T.reshape(mask_pred, (t, h, w, 1)), h // hi, w // wi)
    num = T.tsum(T.mul(pooled, stage_feat), axis=(1, 2))           # (T, C)
    den = T.add(T.tsum(pooled, axis=(1, 2)), Tensor(POOL_EPS))     # (T, 1)
    return T.div(num, den)


def _kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL divergence of two (T, C) distributions, averaged over rows."""
    per_row = T.tsum(T.mul(p, T.sub(T.log(p), T.log(q))), axis=1)
    return T.tmean(per_row)


def avm_av_loss(mask_pred: Tensor, stage_feats, audio_feat: Tensor,
                align_projs, stages) -> Tensor:
    """Pull mask-pooled visual channel distributions toward the audio's.

    Per stage, the clip's audio row is projected to the fused width; both it
    and the pooled visual vector are channel-softmaxed and compared with KL
    (visual first). The result averages over clips and stages.
    """
    stages = sorted(set(stages))
    if not stages:
        raise ValueError("alignment loss needs at least one stage")
    total = None
    for stage in stages:
        visual = T.softmax(masked_stage_feature(mask_pred, stage_feats[stage - 1]), axis=1)
        audio = T.softmax(align_projs[stage](audio_feat), axis=1)
        term = _kl_rows(visual, audio)
        total = term if total is None else T.add(total, term)
    return T.mul(total, Tensor(1.0 / len(stages)))


def audio_partners(audio_feat) -> np.ndarray:
    """Index of each clip's nearest other clip by audio distance (ties: lowest)."""
    a = np.asarray(audio_feat.data if isinstance(audio_feat, Tensor) else audio_feat)
    t = a.shape[0]
    if t < 2:
        raise ValueError(f"partner pairing needs at least 2 clips, got {t}")
    diff = a[:, None, :] - a[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    return dist.argmin(axis=1)


def avm_vv_loss(mask_pred: Tensor, stage_feats, audio_feat: Tensor, stages) -> Tensor:
    """Match each clip's masked visual distribution to its audio-nearest clip's.

    The pairing is a discrete lookup on the audio embedding, so gradients flow
    only through the visual features on both sides of the KL.
    """
    stages = sorted(set(stages))
    if not stages:
        raise ValueError("alignment loss needs at least one stage")
    partners = audio_partners(audio_feat)
    total = None
    for stage in stages:
        visual = T.softmax(masked_stage_feature(mask_pred, stage_feats[stage - 1]), axis=1)
        partner = T.take_rows(visual, partners)
        term = _kl_rows(visual, partner)
        total = term if total is None else T.add(total, term)
    return T.mul(total, Tensor(1.0 / len(stages)))


def total_loss(mask_pred: Tensor, target, stage_feats, audio_feat: Tensor,
               setting: str, variant: str, weight: float, align_projs=None,
               stages=None, frames=None) -> LossBreakdown:
    """Compose the supervision and alignment terms for one video.

    The single-source setting supervises clip 1 only and drops the alignment
    term entirely; the multi-source setting supervises every clip. An explicit
    ``frames`` list overrides the setting's default supervision.
    """
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}, got {setting!r}")
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"variant must be one of {LOSS_VARIANTS}, got {variant!r}")
    t = mask_pred.data.shape[0]
    if frames is None:
        frames = [1] if setting == "s4" else list(range(1, t + 1))
    bce = bce_loss(mask_pred, target, frames)

    if setting == "s4" or variant == "none":
        zero = Tensor(0.0)
        return LossBreakdown(bce=bce, avm=zero, total=T.add(bce, zero), weight=0.0)

    if stages is None:
        stages = sorted(range(1, len(stage_feats) + 1))
    if variant == "av":
        avm = avm_av_loss(mask_pred, stage_feats, audio_feat, align_projs, stages)
    else:
        avm = avm_vv_loss(mask_pred, stage_feats, audio_feat, stages)
    total = T.add(bce, T.mul(avm, Tensor(weight)))
    return LossBreakdown(bce=bce, avm=avm, total=total, weight=weight)
