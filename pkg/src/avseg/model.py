"""The segmentation network.

A clip of T frames flows through a 4-stage strided encoder, per-stage dilated
pyramid necks that equalize channel width, an optional audio fusion step per
stage, and a top-down decoder that merges skips and emits a sigmoid mask per
frame. Audio arrives as per-clip mel-like rows and is embedded by a small MLP.

All modules are built from one seeded generator, so a config fully determines
every parameter; forward passes are pure functions of (parameters, inputs).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

NUM_STAGES = 4
FUSION_MODES = ("none", "add", "tpavi")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches; defaults are the desk-scale setup."""
    height: int = 64
    width: int = 64
    audio_dim: int = 16
    channels: int = 32
    stage_channels: tuple = (16, 32, 64, 128)
    tpavi_stages: tuple = (1, 2, 3, 4)
    fusion_mode: str = "tpavi"
    aspp_rates: tuple = (1, 2)
    mel_bins: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "tpavi_stages", tuple(sorted(set(self.tpavi_stages))))
        object.__setattr__(self, "aspp_rates", tuple(self.aspp_rates))
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.height % 2 ** (NUM_STAGES + 1) or self.width % 2 ** (NUM_STAGES + 1):
            raise ValueError(f"frame size ({self.height}, {self.width}) must be divisible "
                             f"by {2 ** (NUM_STAGES + 1)}")
        if len(self.stage_channels) != NUM_STAGES:
            raise ValueError(f"need {NUM_STAGES} stage widths, got {self.stage_channels}")
        if self.fusion_mode == "none":
            if self.tpavi_stages:
                raise ValueError("tpavi_stages must be empty when fusion_mode is 'none'")
        else:
            if not self.tpavi_stages:
                raise ValueError(f"fusion_mode {self.fusion_mode!r} needs at least one stage")
            if any(s < 1 or s > NUM_STAGES for s in self.tpavi_stages):
                raise ValueError(f"fusion stages must lie in 1..{NUM_STAGES}, "
                                 f"got {self.tpavi_stages}")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ValueError(f"aspp_rates must be positive, got {self.aspp_rates}")


def _uniform(rng, fan_in, shape, gain: float = 1.0):
    bound = math.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map on the trailing axis of a 2-d input."""

    def __init__(self, rng, n_in: int, n_out: int, zero_bias: bool = False):
        self.w = Tensor(_uniform(rng, n_in, (n_in, n_out)), requires_grad=True)
        bias = np.zeros(n_out) if zero_bias else _uniform(rng, n_in, (n_out,))
        self.b = Tensor(bias, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class Conv:
    # relu-gain uniform init: keeps signal variance near-constant through the
    # deep rectified stacks, which plain 1/fan_in bounds visibly do not
    def __init__(self, rng, k: int, c_in: int, c_out: int,
                 stride: int = 1, dilation: int = 1, padding: int = 0):
        fan_in = k * k * c_in
        self.w = Tensor(_uniform(rng, fan_in, (k, k, c_in, c_out), gain=6.0),
                        requires_grad=True)
        self.b = Tensor(_uniform(rng, fan_in, (c_out,)), requires_grad=True)
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride,
                        dilation=self.dilation, padding=self.padding)

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class AudioEncoder:
    """Two affine layers with a relu between, applied to each clip row."""

    def __init__(self, rng, mel_bins: int, audio_dim: int):
        self.fc1 = Linear(rng, mel_bins, audio_dim)
        self.fc2 = Linear(rng, audio_dim, audio_dim)

    def __call__(self, mel: Tensor) -> Tensor:
        if mel.data.ndim != 2 or mel.data.shape[0] == 0:
            raise ValueError(f"audio input must be (T, mel_bins) with T >= 1, "
                             f"got shape {mel.data.shape}")
        return self.fc2(T.relu(self.fc1(mel)))

    def params(self, prefix):
        yield from self.fc1.params(f"{prefix}.fc1")
        yield from self.fc2.params(f"{prefix}.fc2")


class VisualEncoder:
    """Stem plus four stride-2 blocks producing the feature pyramid.

    Stage i comes out at (H, W) / 2^(i+1): the stem halves once and each block
    halves again, then refines with a stride-1 conv. Frames are treated as a
    batch, so videos never mix.
    """

    def __init__(self, rng, stage_channels):
        c1 = stage_channels[0]
        self.stem = Conv(rng, 3, 3, c1, stride=2, padding=1)
        self.blocks = []
        prev = c1
        for c in stage_channels:
            self.blocks.append((Conv(rng, 3, prev, c, stride=2, padding=1),
                                Conv(rng, 3, c, c, padding=1)))
            prev = c

    def __call__(self, frames: Tensor):
        if frames.data.ndim != 4 or frames.data.shape[3] != 3:
            raise ShapeError(f"frames must be (T, H, W, 3), got {frames.data.shape}")
        _, h, w, _ = frames.data.shape
        if h % 2 ** (NUM_STAGES + 1) or w % 2 ** (NUM_STAGES + 1):
            raise ShapeError(f"frame size ({h}, {w}) must be divisible by "
                             f"{2 ** (NUM_STAGES + 1)}")
        if frames.data.min() < 0.0 or frames.data.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        centered = T.sub(frames, Tensor(0.5))
        x = T.relu(self.stem(centered))
        stages = []
        for down, refine in self.blocks:
            x = T.relu(refine(T.relu(down(x))))
            stages.append(x)
        return stages

    def params(self, prefix):
        yield from self.stem.params(f"{prefix}.stem")
        for i, (down, refine) in enumerate(self.blocks, 1):
            yield from down.params(f"{prefix}.b{i}.down")
            yield from refine.params(f"{prefix}.b{i}.refine")


class AsppNeck:
    """Parallel 1x1 and dilated 3x3 branches, summed and rectified.

    Each branch maps the stage width to the shared fused width, so every
    pyramid level leaves with the same channel count.
    """

    def __init__(self, rng, c_in: int, c_out: int, rates):
        self.rates = tuple(rates)
        self.point = Conv(rng, 1, c_in, c_out)
        self.dilated = [Conv(rng, 3, c_in, c_out, dilation=r, padding=r) for r in self.rates]

    def __call__(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.data.shape
        for r in self.rates:
            if 2 * r + 1 > h + 2 * r or 2 * r + 1 > w + 2 * r:
                raise ShapeError(f"dilation {r} too large for spatial size ({h}, {w})")
        acc = self.point(x)
        for branch in self.dilated:
            acc = T.add(acc, branch(x))
        return T.relu(acc)

    def params(self, prefix):
        yield from self.point.params(f"{prefix}.point")
        for r, branch in zip(self.rates, self.dilated):
            yield from branch.params(f"{prefix}.rate{r}")


class AttentionFusion:
    """Pixel-to-audio dot-product attention over the whole clip ('tpavi' mode).

    The audio row of each clip is projected to the visual width, duplicated
    over that clip's spatial grid, and flattened alongside the visual
    positions. Every visual position attends to every duplicated audio
    position; attention weights are the query/key dot products divided by the
    total position count, with no softmax. The attended values re-enter
    through a residual whose output projection starts with zero bias, so an
    all-zero attention map leaves the visual features untouched.
    """

    def __init__(self, rng, audio_dim: int, channels: int):
        self.audio = Linear(rng, audio_dim, channels)
        self.query = Linear(rng, channels, channels)
        self.key = Linear(rng, channels, channels)
        self.value = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels, zero_bias=True)

    def __call__(self, visual: Tensor, audio_feat: Tensor):
        t, h, w, c = visual.data.shape
        if audio_feat.data.shape[0] != t:
            raise ValueError(f"audio has {audio_feat.data.shape[0]} clips, visual has {t}")
        n = t * h * w
        amap = T.broadcast_to(T.reshape(self.audio(audio_feat), (t, 1, 1, c)), (t, h, w, c))
        vflat = T.reshape(visual, (n, c))
        aflat = T.reshape(amap, (n, c))
        attn = T.mul(T.matmul(self.query(vflat), T.transpose(self.key(aflat))),
                     Tensor(1.0 / n))
        fused = T.add(vflat, self.out(T.matmul(attn, self.value(vflat))))
        return T.reshape(fused, (t, h, w, c)), attn

    def params(self, prefix):
        yield from self.audio.params(f"{prefix}.audio")
        yield from self.query.params(f"{prefix}.query")
        yield from self.key.params(f"{prefix}.key")
        yield from self.value.params(f"{prefix}.value")
        yield from self.out.params(f"{prefix}.out")


class AddFusion:
    """Broadcast-add fusion ('add' mode): projected audio added at every pixel."""

    def __init__(self, rng, audio_dim: int, channels: int):
        self.audio = Linear(rng, audio_dim, channels)

    def __call__(self, visual: Tensor, audio_feat: Tensor):
        t, h, w, c = visual.data.shape
        if audio_feat.data.shape[0] != t:
            raise ValueError(f"audio has {audio_feat.data.shape[0]} clips, visual has {t}")
        amap = T.broadcast_to(T.reshape(self.audio(audio_feat), (t, 1, 1, c)), (t, h, w, c))
        return T.add(visual, amap), None

    def params(self, prefix):
        yield from self.audio.params(f"{prefix}.audio")


class Decoder:
    """Top-down mask head that merges pyramid skips on the way up.

    Starting from the deepest stage: upsample, add the next skip, then a 3x3
    conv with relu. Two final 2x upsamples restore full resolution before a
    single-channel conv produces per-pixel logits.
    """

    def __init__(self, rng, channels: int):
        self.merges = [Conv(rng, 3, channels, channels, padding=1) for _ in range(3)]
        self.head = Conv(rng, 3, channels, 1, padding=1)

    def __call__(self, stages):
        widths = {s.data.shape[3] for s in stages}
        if len(widths) != 1:
            raise ShapeError(f"decoder needs a uniform channel width, got {sorted(widths)}")
        x = stages[-1]
        for merge, skip in zip(self.merges, reversed(stages[:-1])):
            x = T.relu(merge(T.add(T.upsample_bilinear(x, 2), skip)))
        x = T.upsample_bilinear(T.upsample_bilinear(x, 2), 2)
        logits = self.head(x)
        t, h, w, _ = logits.data.shape
        return T.sigmoid(T.reshape(logits, (t, h, w)))

    def params(self, prefix):
        for j, merge in enumerate(self.merges, 2):
            yield from merge.params(f"{prefix}.merge{j}")
        yield from self.head.params(f"{prefix}.head")


@dataclass
class ForwardResult:
    mask: Tensor                      # (T, H, W) in (0, 1)
    stages: list                      # fused per-stage features, width C each
    attention: dict = field(default_factory=dict)  # stage -> (N, N) weights
    audio: Optional[Tensor] = None    # (T, audio_dim)


class AVSModel:
    """Full pipeline: audio embed, visual pyramid, necks, fusion, decode."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.channels
        self.audio_encoder = AudioEncoder(rng, config.mel_bins, config.audio_dim)
        self.visual_encoder = VisualEncoder(rng, config.stage_channels)
        self.necks = [AsppNeck(rng, c_in, c, config.aspp_rates)
                      for c_in in config.stage_channels]
        self.fusions = {}
        for stage in range(1, NUM_STAGES + 1):
            if config.fusion_mode == "none" or stage not in config.tpavi_stages:
                self.fusions[stage] = None
            elif config.fusion_mode == "tpavi":
                self.fusions[stage] = AttentionFusion(rng, config.audio_dim, c)
            else:
                self.fusions[stage] = AddFusion(rng, config.audio_dim, c)
        # audio -> fused-width projections for the alignment loss; always built
        # so checkpoints keep one schema across settings and warm starts
        self.align_projs = {stage: Linear(rng, config.audio_dim, c)
                            for stage in range(1, NUM_STAGES + 1)}
        self.decoder = Decoder(rng, c)

    def forward(self, frames, mel) -> ForwardResult:
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        mel = mel if isinstance(mel, Tensor) else Tensor(mel)
        audio_feat = self.audio_encoder(mel)
        pyramid = self.visual_encoder(frames)
        fused = []
        attention = {}
        for stage, (feat, neck) in enumerate(zip(pyramid, self.necks), 1):
            v = neck(feat)
            fusion = self.fusions[stage]
            if fusion is None:
                fused.append(v)
                continue
            z, attn = fusion(v, audio_feat)
            fused.append(z)
            if attn is not None:
                attention[stage] = attn
        mask = self.decoder(fused)
        return ForwardResult(mask=mask, stages=fused, attention=attention, audio=audio_feat)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, p in self.audio_encoder.params("audio"):
            out[name] = p
        for name, p in self.visual_encoder.params("enc"):
            out[name] = p
        for stage, neck in enumerate(self.necks, 1):
            for name, p in neck.params(f"neck{stage}"):
                out[name] = p
        for stage in range(1, NUM_STAGES + 1):
            fusion = self.fusions[stage]
            if fusion is not None:
                for name, p in fusion.params(f"fuse{stage}"):
                    out[name] = p
        for stage in range(1, NUM_STAGES + 1):
            for name, p in self.align_projs[stage].params(f"align{stage}"):
                out[name] = p
        for name, p in self.decoder.params("dec"):
            out[name] = p
        return out

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters().items())

    def load_state(self, table) -> None:
        params = self.named_parameters()
        missing = set(params) - set(table)
        extra = set(table) - set(params)
        if missing or extra:
            raise CheckpointError(f"parameter table mismatch: missing {sorted(missing)}, "
                                  f"unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(table[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape}, "
                                      f"model {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


class CheckpointError(ValueError):
    """A parameter table does not fit the model it was loaded into."""


def infer_model_config(table, height: int, width: int, seed: int = 0) -> ModelConfig:
    """Reconstruct the architecture switches from a named-parameter table.

    Frame size is not represented in the weights, so the caller supplies it
    (normally read off the data being evaluated).
    """
    try:
        mel_bins, audio_dim = table["audio.fc1.w"].shape
        stage_channels = tuple(table[f"enc.b{i}.down.w"].shape[3] for i in range(1, 5))
        channels = table["dec.head.w"].shape[2]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks required entry: {exc}") from exc
    rates = sorted({int(name.split(".")[1][4:]) for name in table
                    if name.startswith("neck1.rate")})
    fused = sorted({int(name[4]) for name in table if name.startswith("fuse")})
    if not fused:
        mode = "none"
    elif f"fuse{fused[0]}.query.w" in table:
        mode = "tpavi"
    else:
        mode = "add"
    return ModelConfig(height=height, width=width, audio_dim=audio_dim,
                       channels=channels, stage_channels=stage_channels,
                       tpavi_stages=tuple(fused), fusion_mode=mode,
                       aspp_rates=tuple(rates), mel_bins=mel_bins, seed=seed)
