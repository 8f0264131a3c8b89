"""Training loop, optimizer, and evaluation over on-disk datasets."""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from . import tensor as T
from .config import ExperimentConfig
from .losses import total_loss
from .metrics import MetricReport, f_score, miou
from .model import AVSModel, infer_model_config
from .synthscene import VideoSample, list_split, load_video
from .tensor import Tensor


class Adam:
    """Standard first/second-moment optimizer over a named-parameter table."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = OrderedDict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * p.grad ** 2
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class EpochRecord:
    epoch: int
    mean_bce: float
    mean_avm: float
    valid_miou: float
    valid_fscore: float
    wall_clock_s: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(record)

    def write_csv(self, path):
        lines = ["epoch,mean_bce,mean_avm,valid_miou,valid_fscore,wall_clock_s"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.mean_bce:.6f},{r.mean_avm:.6f},"
                         f"{r.valid_miou:.6f},{r.valid_fscore:.6f},{r.wall_clock_s:.3f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _supervised_frames(sample: VideoSample, setting: str):
    if setting == "s4":
        if 1 not in sample.masks:
            raise ValueError(f"{sample.video_id} lacks the first-clip mask")
        return [1]
    missing = [c for c in range(1, sample.frames.shape[0] + 1) if c not in sample.masks]
    if missing:
        raise ValueError(f"{sample.video_id} lacks masks for clips {missing}")
    return list(range(1, sample.frames.shape[0] + 1))


def _target_volume(sample: VideoSample) -> np.ndarray:
    t, h, w = sample.frames.shape[:3]
    target = np.zeros((t, h, w))
    for clip, mask in sample.masks.items():
        target[clip - 1] = mask
    return target


def _video_score(model: AVSModel, sample: VideoSample, threshold: float):
    """(miou, fscore) of one video against whichever clips carry masks."""
    pred = model.forward(sample.frames, sample.mel).mask.data
    clips = sorted(sample.masks)
    idx = [c - 1 for c in clips]
    gt = np.stack([sample.masks[c] for c in clips]).astype(float)
    return miou(pred[idx], gt, threshold), f_score(pred[idx], gt, threshold)


def score_split(model: AVSModel, samples, threshold: float) -> MetricReport:
    per_video = []
    for sample in samples:
        vm, vf = _video_score(model, sample, threshold)
        per_video.append((sample.video_id, vm, vf))
    per_video.sort(key=lambda r: r[0])
    return MetricReport(
        miou=float(np.mean([r[1] for r in per_video])),
        fscore=float(np.mean([r[2] for r in per_video])),
        per_video=per_video, threshold=threshold)


def load_samples(data_dir, split: str):
    return [load_video(d) for d in list_split(data_dir, split)]


def train(config: ExperimentConfig, checkpoint_path=None, log_path=None):
    """Train per the config; returns (best parameter table, per-epoch log).

    Batches are whole videos in a seeded order; the retained checkpoint is the
    one with the best validation mean IoU (the initial state when epochs is 0).
    """
    train_samples = load_samples(config.data_dir, "train")
    valid_samples = load_samples(config.data_dir, "valid")
    if not train_samples:
        raise ValueError(f"no training videos under {config.data_dir}")

    model = AVSModel(config.model)
    if config.init_checkpoint:
        model.load_state(storage.read_checkpoint(config.init_checkpoint))
    optimizer = Adam(model.named_parameters(), lr=config.lr)
    order_rng = np.random.default_rng(config.seed)

    align_stages = sorted(config.model.tpavi_stages) or None
    best_state = model.state_arrays()
    best_miou = -1.0
    log = TrainLog()

    for epoch in range(1, config.resolved_epochs + 1):
        started = time.perf_counter()
        order = order_rng.permutation(len(train_samples))
        bce_values, avm_values = [], []
        for lo in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[lo:lo + config.batch_size]]
            optimizer.zero_grad()
            batch_total = None
            for sample in batch:
                out = model.forward(sample.frames, sample.mel)
                parts = total_loss(
                    out.mask, _target_volume(sample), out.stages, out.audio,
                    config.setting, config.loss_variant, config.loss_weight,
                    model.align_projs, stages=align_stages,
                    frames=_supervised_frames(sample, config.setting))
                bce_values.append(parts.bce.item())
                avm_values.append(parts.avm.item())
                share = T.mul(parts.total, Tensor(1.0 / len(batch)))
                batch_total = share if batch_total is None else T.add(batch_total, share)
            batch_total.backward()
            optimizer.step()

        report = score_split(model, valid_samples, config.threshold)
        log.add(EpochRecord(
            epoch=epoch, mean_bce=float(np.mean(bce_values)),
            mean_avm=float(np.mean(avm_values)), valid_miou=report.miou,
            valid_fscore=report.fscore,
            wall_clock_s=time.perf_counter() - started))
        if report.miou > best_miou:
            best_miou = report.miou
            best_state = model.state_arrays()

    if checkpoint_path is not None:
        storage.write_checkpoint(checkpoint_path, best_state)
    if log_path is not None:
        log.write_csv(log_path)
    return best_state, log


def evaluate(checkpoint, data_dir, split: str, csv_path=None,
             threshold: float = 0.5) -> MetricReport:
    """Score a stored checkpoint over one dataset split.

    The architecture is reconstructed from the parameter table itself, with
    the frame size read off the first video of the split.
    """
    table = (storage.read_checkpoint(checkpoint)
             if not isinstance(checkpoint, (dict, OrderedDict)) else checkpoint)
    samples = load_samples(data_dir, split)
    if not samples:
        raise ValueError(f"no videos under {data_dir}/{split}")
    h, w = samples[0].frames.shape[1:3]
    model = AVSModel(infer_model_config(table, height=h, width=w))
    model.load_state(table)
    report = score_split(model, samples, threshold)
    if csv_path is not None:
        storage.write_metrics_csv(csv_path, report)
    return report


def model_from_checkpoint(path, height: int, width: int) -> AVSModel:
    table = storage.read_checkpoint(path)
    model = AVSModel(infer_model_config(table, height=height, width=width))
    model.load_state(table)
    return model
