"""Objective terms against hand-rolled KL, pairing, and arithmetic oracles."""

import math

import numpy as np
import pytest

import avseg.tensor as T
from avseg.losses import (LossBreakdown, audio_partners, avm_av_loss, avm_vv_loss,
                          bce_loss, masked_stage_feature, total_loss)
from avseg.model import Linear
from avseg.tensor import Tensor


def kl_oracle(p, q):
    """Plain-python KL divergence of two discrete distributions."""
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q) if pi > 0)


def softmax_oracle(v):
    e = np.exp(v - v.max())
    return e / e.sum()


class TestBce:
    def test_half_prediction_is_ln2(self):
        rng = np.random.default_rng(0)
        pred = Tensor(np.full((2, 4, 4), 0.5))
        target = (rng.random((2, 4, 4)) > 0.5).astype(float)
        loss = bce_loss(pred, target, frames=[1, 2]).item()
        assert abs(loss - math.log(2)) <= 1e-12

    def test_perfect_prediction_is_zero(self):
        rng = np.random.default_rng(1)
        target = (rng.random((3, 5, 5)) > 0.5).astype(float)
        loss = bce_loss(Tensor(target), target, frames=[1, 2, 3]).item()
        assert loss <= 1e-11

    def test_single_frame_masking(self):
        rng = np.random.default_rng(2)
        pred = rng.uniform(0.1, 0.9, size=(5, 3, 3))
        target = (rng.random((5, 3, 3)) > 0.5).astype(float)
        masked = bce_loss(Tensor(pred), target, frames=[1]).item()
        alone = bce_loss(Tensor(pred[:1]), target[:1], frames=[1]).item()
        assert abs(masked - alone) <= 1e-12

    def test_pixel_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pred = rng.uniform(0.1, 0.9, size=(1, 4, 4))
        target = (rng.random((1, 4, 4)) > 0.5).astype(float)
        perm = rng.permutation(16)
        pred2 = pred.reshape(1, -1)[:, perm].reshape(1, 4, 4)
        target2 = target.reshape(1, -1)[:, perm].reshape(1, 4, 4)
        a = bce_loss(Tensor(pred), target, [1]).item()
        b = bce_loss(Tensor(pred2), target2, [1]).item()
        assert abs(a - b) <= 1e-12

    def test_positive_unless_perfect(self):
        rng = np.random.default_rng(4)
        target = (rng.random((2, 3, 3)) > 0.5).astype(float)
        pred = np.clip(target, 0.2, 0.8)
        assert bce_loss(Tensor(pred), target, [1, 2]).item() > 0.0

    def test_empty_frames_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(Tensor(np.full((2, 2, 2), 0.5)), np.zeros((2, 2, 2)), frames=[])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(Tensor(np.full((2, 2, 2), 0.5)), np.zeros((2, 3, 3)), frames=[1])

    def test_gradient(self):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.normal(size=(2, 4, 4)))
        target = (rng.random((2, 4, 4)) > 0.5).astype(float)

        def f(x):
            return bce_loss(T.sigmoid(x), target, frames=[1, 2])

        assert T.grad_check(f, [logits]) <= 1e-6


class TestMaskedFeature:
    def test_zero_mask_gives_near_zero_vector(self):
        rng = np.random.default_rng(6)
        feat = Tensor(rng.normal(size=(2, 2, 2, 3)))
        v = masked_stage_feature(Tensor(np.zeros((2, 4, 4))), feat)
        assert np.abs(v.data).max() <= 1e-12

    def test_uniform_mask_is_plain_mean(self):
        rng = np.random.default_rng(7)
        feat = rng.normal(size=(2, 2, 2, 3))
        v = masked_stage_feature(Tensor(np.ones((2, 4, 4))), Tensor(feat))
        want = feat.mean(axis=(1, 2))
        assert np.abs(v.data - want).max() <= 1e-6


class TestAvmAv:
    @staticmethod
    def _setup(seed, t=3, c=4):
        rng = np.random.default_rng(seed)
        mask = Tensor(rng.uniform(0.05, 0.95, size=(t, 8, 8)))
        feats = [Tensor(rng.normal(size=(t, 8 // 2 ** i, 8 // 2 ** i, c))) for i in range(2)]
        audio = Tensor(rng.normal(size=(t, 3)))
        projs = {1: Linear(rng, 3, c), 2: Linear(rng, 3, c)}
        return mask, feats, audio, projs

    def test_identical_distributions_zero(self):
        rng = np.random.default_rng(8)
        t, c = 2, 4
        feats = [Tensor(rng.normal(size=(t, 4, 4, c)))]
        mask = Tensor(np.ones((t, 4, 4)))
        audio = Tensor(np.eye(t, 3))
        projs = {1: Linear(rng, 3, c)}
        # force the audio projection to reproduce the pooled visual vector
        pooled = masked_stage_feature(mask, feats[0]).data
        projs[1].w.data[:] = 0.0
        projs[1].b.data[:] = 0.0
        projs[1].w.data[0] = pooled[0]
        projs[1].w.data[1] = pooled[1]
        loss = avm_av_loss(mask, feats, audio, projs, stages=[1]).item()
        assert abs(loss) <= 1e-12

    def test_zero_mask_matches_uniform_kl_oracle(self):
        mask, feats, audio, projs = self._setup(9)
        zero_mask = Tensor(np.zeros(mask.data.shape))
        got = avm_av_loss(zero_mask, feats, audio, projs, stages=[1, 2]).item()

        t, c = audio.data.shape[0], feats[0].data.shape[3]
        uniform = np.full(c, 1.0 / c)
        acc = 0.0
        for stage in (1, 2):
            proj = audio.data @ projs[stage].w.data + projs[stage].b.data
            acc += np.mean([kl_oracle(uniform, softmax_oracle(proj[i])) for i in range(t)])
        assert abs(got - acc / 2) <= 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_non_negative(self, seed):
        mask, feats, audio, projs = self._setup(100 + seed)
        for _ in range(10):
            assert avm_av_loss(mask, feats, audio, projs, stages=[1, 2]).item() >= 0.0

    def test_empty_stage_set_rejected(self):
        mask, feats, audio, projs = self._setup(10)
        with pytest.raises(ValueError):
            avm_av_loss(mask, feats, audio, projs, stages=[])

    def test_gradient(self):
        mask, feats, audio, projs = self._setup(11, t=2)

        def f(m, a, w, b):
            return avm_av_loss(T.sigmoid(m), feats, a, projs, stages=[1])

        logits = Tensor(np.random.default_rng(12).normal(size=mask.data.shape))
        assert T.grad_check(f, [logits, audio, projs[1].w, projs[1].b]) <= 1e-4


class TestAvmVv:
    def test_two_clips_pair_each_other(self):
        audio = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert audio_partners(audio).tolist() == [1, 0]

    def test_partner_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            a = rng.normal(size=(5, 4))
            got = audio_partners(a)
            for t in range(5):
                best, best_d = None, None
                for u in range(5):
                    if u == t:
                        continue
                    d = float(np.linalg.norm(a[t] - a[u]))
                    if best_d is None or d < best_d:  # strict: ties keep lowest index
                        best, best_d = u, d
                assert got[t] == best

    def test_tie_takes_lowest_index(self):
        audio = np.array([[0.0], [1.0], [-1.0]])  # clips 1 and 2 equidistant from 0
        assert audio_partners(audio)[0] == 1

    def test_identical_features_zero_loss(self):
        rng = np.random.default_rng(14)
        row = rng.normal(size=(1, 4, 4, 3))
        feats = [Tensor(np.repeat(row, 3, axis=0))]
        mask = Tensor(np.ones((3, 8, 8)))
        audio = Tensor(rng.normal(size=(3, 2)))
        assert avm_vv_loss(mask, feats, audio, stages=[1]).item() <= 1e-12

    def test_single_clip_rejected(self):
        with pytest.raises(ValueError):
            audio_partners(np.zeros((1, 4)))

    def test_gradient(self):
        rng = np.random.default_rng(15)
        feats = [Tensor(rng.normal(size=(3, 2, 2, 3)))]
        audio = Tensor(rng.normal(size=(3, 2)))
        logits = Tensor(rng.normal(size=(3, 4, 4)))

        def f(m, z):
            return avm_vv_loss(T.sigmoid(m), [z], audio, stages=[1])

        assert T.grad_check(f, [logits, feats[0]]) <= 1e-4


class TestTotalLoss:
    @staticmethod
    def _inputs(seed, t=3):
        rng = np.random.default_rng(seed)
        mask = Tensor(rng.uniform(0.1, 0.9, size=(t, 8, 8)))
        target = (rng.random((t, 8, 8)) > 0.5).astype(float)
        feats = [Tensor(rng.normal(size=(t, 4, 4, 4)))]
        audio = Tensor(rng.normal(size=(t, 3)))
        projs = {1: Linear(rng, 3, 4)}
        return mask, target, feats, audio, projs

    def test_zero_weight_equals_bce(self):
        mask, target, feats, audio, projs = self._inputs(16)
        out = total_loss(mask, target, feats, audio, "ms3", "av", 0.0, projs, stages=[1])
        assert abs(out.total.item() - out.bce.item()) <= 1e-15

    def test_s4_drops_alignment_term(self):
        mask, target, feats, audio, projs = self._inputs(17)
        out = total_loss(mask, target, feats, audio, "s4", "av", 0.5, projs, stages=[1])
        assert out.avm.item() == 0.0
        assert out.weight == 0.0
        assert abs(out.total.item() - out.bce.item()) <= 1e-15

    def test_composition_arithmetic(self):
        mask, target, feats, audio, projs = self._inputs(18)
        out = total_loss(mask, target, feats, audio, "ms3", "av", 0.5, projs, stages=[1])
        assert isinstance(out, LossBreakdown)
        assert abs(out.total.item() - (out.bce.item() + 0.5 * out.avm.item())) <= 1e-15

    def test_fixed_arithmetic_example(self):
        # bce = 0.7 and avm = 0.2 at weight 0.5 must compose to 0.8
        assert abs(0.7 + 0.5 * 0.2 - 0.8) <= 1e-15

    def test_variant_none_zeroes_avm(self):
        mask, target, feats, audio, projs = self._inputs(19)
        out = total_loss(mask, target, feats, audio, "ms3", "none", 0.5, projs, stages=[1])
        assert out.avm.item() == 0.0

    def test_bad_setting_rejected(self):
        mask, target, feats, audio, projs = self._inputs(20)
        with pytest.raises(ValueError):
            total_loss(mask, target, feats, audio, "weird", "av", 0.5, projs)
