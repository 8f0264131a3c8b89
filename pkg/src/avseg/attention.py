"""Per-frame heatmap export from the deepest attention fusion stage."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import storage
from . import tensor as T
from .synthscene import load_video
from .tensor import Tensor

EXPORT_STAGE = 4


def frame_response_maps(attn: np.ndarray, clips: int, h: int, w: int) -> np.ndarray:
    """Collapse (N, N) attention to one map per clip.

    For clip t, each position's response is its mean attention over that same
    clip's audio columns; rows and columns outside clip t are ignored.
    """
    cell = h * w
    if attn.shape != (clips * cell, clips * cell):
        raise ValueError(f"attention shape {attn.shape} does not match "
                         f"{clips} clips of {h}x{w}")
    maps = np.empty((clips, h, w))
    for t in range(clips):
        block = attn[t * cell:(t + 1) * cell, t * cell:(t + 1) * cell]
        maps[t] = block.mean(axis=1).reshape(h, w)
    return maps


def normalize_map(response: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a zero-range map collapses to all zeros."""
    lo = response.min()
    span = response.max() - lo
    if span <= 0.0:
        return np.zeros_like(response)
    return (response - lo) / span


def export_attention(checkpoint, video_dir, out_dir) -> list:
    """Write one full-resolution PGM heatmap per clip; returns the paths."""
    from .train import model_from_checkpoint  # local import avoids a cycle

    sample = load_video(video_dir)
    clips, height, width = sample.frames.shape[:3]
    model = model_from_checkpoint(checkpoint, height=height, width=width)
    if model.config.fusion_mode != "tpavi" or EXPORT_STAGE not in model.config.tpavi_stages:
        raise ValueError(f"attention export needs attention fusion at stage {EXPORT_STAGE}")

    result = model.forward(sample.frames, sample.mel)
    h = height // 2 ** (EXPORT_STAGE + 1)
    w = width // 2 ** (EXPORT_STAGE + 1)
    maps = frame_response_maps(result.attention[EXPORT_STAGE].data, clips, h, w)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in range(clips):
        flat = normalize_map(maps[t]).reshape(1, h, w, 1)
        big = T.upsample_bilinear(Tensor(flat), height // h).data[0, :, :, 0]
        path = out / f"attn_{t + 1}.pgm"
        storage.write_pgm(path, np.rint(np.clip(big, 0.0, 1.0) * 255).astype(np.uint8))
        written.append(path)
    return written
