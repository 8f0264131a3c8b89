"""Finite-difference verification of every differentiable component.

Each entry builds a small instance of one pipeline piece from a seed, then
compares analytic gradients against central differences with ``grad_check``.
Inputs are drawn small enough that one pass over all nine components takes a
couple of seconds; the acceptance suite repeats it across seeds.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import avm_av_loss, avm_vv_loss, bce_loss, total_loss
from .model import (AVSModel, AsppNeck, AttentionFusion, AudioEncoder, Decoder,
                    Linear, ModelConfig, VisualEncoder)
from .tensor import Tensor

TOLERANCE = 1e-4
_EPS = 1e-6  # small enough that relu kinks are almost never straddled

COMPONENTS = ("audio_encoder", "visual_encoder", "aspp", "attention_fusion",
              "decoder", "bce", "avm_av", "avm_vv", "end_to_end")


def _weighted_sum(x: Tensor, rng) -> Tensor:
    return T.tsum(T.mul(x, Tensor(rng.normal(size=x.data.shape))))


def _check_audio_encoder(rng):
    enc = AudioEncoder(rng, mel_bins=5, audio_dim=4)
    mel = Tensor(rng.normal(size=(3, 5)))
    r = Tensor(rng.normal(size=(3, 4)))
    tensors = [mel, enc.fc1.w, enc.fc1.b, enc.fc2.w, enc.fc2.b]
    return T.grad_check(lambda *a: T.tsum(T.mul(enc(mel), r)), tensors, epsilon=_EPS)


def _check_visual_encoder(rng):
    enc = VisualEncoder(rng, (2, 2, 3, 3))
    frames = Tensor(rng.random((1, 32, 32, 3)))
    weights = [Tensor(rng.normal(size=(1, 32 >> (i + 2), 32 >> (i + 2), c)))
               for i, c in enumerate((2, 2, 3, 3))]

    def f(*params):
        acc = None
        for s, r in zip(enc(frames), weights):
            term = T.tsum(T.mul(s, r))
            acc = term if acc is None else T.add(acc, term)
        return acc

    return T.grad_check(f, [p for _, p in enc.params("enc")], epsilon=_EPS)


def _check_aspp(rng):
    neck = AsppNeck(rng, c_in=3, c_out=4, rates=(1, 2))
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    r = Tensor(rng.normal(size=(2, 4, 4, 4)))
    tensors = [x] + [p for _, p in neck.params("neck")]
    return T.grad_check(lambda *a: T.tsum(T.mul(neck(x), r)), tensors, epsilon=_EPS)


def _check_attention_fusion(rng):
    fusion = AttentionFusion(rng, audio_dim=3, channels=4)
    visual = Tensor(rng.normal(size=(2, 3, 3, 4)))
    audio = Tensor(rng.normal(size=(2, 3)))
    r = Tensor(rng.normal(size=(2, 3, 3, 4)))
    tensors = [visual, audio] + [p for _, p in fusion.params("fuse")]

    def f(*a):
        fused, _ = fusion(visual, audio)
        return T.tsum(T.mul(fused, r))

    return T.grad_check(f, tensors, epsilon=_EPS)


def _check_decoder(rng):
    dec = Decoder(rng, 3)
    stages = [Tensor(rng.normal(size=(1, 32 >> (i + 2), 32 >> (i + 2), 3)))
              for i in range(4)]
    r = Tensor(rng.normal(size=(1, 32, 32)))
    tensors = [p for _, p in dec.params("dec")]
    return T.grad_check(lambda *a: T.tsum(T.mul(dec(stages), r)), tensors, epsilon=_EPS)


def _check_bce(rng):
    logits = Tensor(rng.normal(size=(2, 5, 5)))
    target = (rng.random((2, 5, 5)) > 0.5).astype(float)
    return T.grad_check(lambda x: bce_loss(T.sigmoid(x), target, frames=[1, 2]),
                        [logits], epsilon=_EPS)


def _check_avm_av(rng):
    feats = [Tensor(rng.normal(size=(2, 2, 2, 4)))]
    audio = Tensor(rng.normal(size=(2, 3)))
    proj = Linear(rng, 3, 4)
    logits = Tensor(rng.normal(size=(2, 4, 4)))
    tensors = [logits, feats[0], audio, proj.w, proj.b]

    def f(*a):
        return avm_av_loss(T.sigmoid(logits), feats, audio, {1: proj}, stages=[1])

    return T.grad_check(f, tensors, epsilon=_EPS)


def _check_avm_vv(rng):
    feats = [Tensor(rng.normal(size=(3, 2, 2, 4)))]
    audio = Tensor(rng.normal(size=(3, 3)))
    logits = Tensor(rng.normal(size=(3, 4, 4)))

    def f(*a):
        return avm_vv_loss(T.sigmoid(logits), feats, audio, stages=[1])

    return T.grad_check(f, [logits, feats[0]], epsilon=_EPS)


def _check_end_to_end(rng):
    cfg = ModelConfig(height=32, width=32, audio_dim=2, channels=2,
                      stage_channels=(2, 2, 3, 3), tpavi_stages=(3, 4),
                      fusion_mode="tpavi", aspp_rates=(1,), mel_bins=3,
                      seed=int(rng.integers(0, 2**31)))
    model = AVSModel(cfg)
    frames = Tensor(rng.random((2, 32, 32, 3)))
    mel = Tensor(rng.normal(size=(2, 3)))
    target = (rng.random((2, 32, 32)) > 0.7).astype(float)

    def f(*params):
        out = model.forward(frames, mel)
        return total_loss(out.mask, target, out.stages, out.audio, "ms3", "av",
                          0.5, model.align_projs, stages=[3, 4]).total

    return T.grad_check(f, list(model.named_parameters().values()), epsilon=_EPS)


_CHECKS = {
    "audio_encoder": _check_audio_encoder,
    "visual_encoder": _check_visual_encoder,
    "aspp": _check_aspp,
    "attention_fusion": _check_attention_fusion,
    "decoder": _check_decoder,
    "bce": _check_bce,
    "avm_av": _check_avm_av,
    "avm_vv": _check_avm_vv,
    "end_to_end": _check_end_to_end,
}


def run_gradient_suite(seed: int) -> "list[tuple[str, float]]":
    """Max relative gradient error for each component, in a fixed order."""
    results = []
    for offset, name in enumerate(COMPONENTS):
        rng = np.random.default_rng(seed * 1009 + offset)
        results.append((name, float(_CHECKS[name](rng))))
    return results


def suite_passes(results, tolerance: float = TOLERANCE) -> bool:
    return all(err <= tolerance for _, err in results)
