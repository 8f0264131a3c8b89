"""Deterministic generator of synthetic audible videos.

Scenes are flat-colored shapes drifting over a textured gray background.
Audio is delivered as mel-like frame vectors: each shape class owns a fixed
unit template, and a clip's vector is the amplitude-weighted sum of the
templates of whatever is sounding, plus optional noise. Ground truth masks
cover exactly the pixels of the sounding objects, so silent objects never
appear in them.

Three modes mirror the supervision settings:

* ``s4``: one object sounds through the whole video; any extra objects are
  silent distractors.
* ``ms3``: several objects with a per-clip schedule; at least one sounds in
  every clip and the set may change over time.
* ``disambig``: exactly two equal-pixel-area, visually distinct objects; one
  of them (chosen per video) sounds in every clip. The frames are identical
  whichever object was chosen, so only the audio reveals the answer.

Positions and velocities are integers, which keeps rasterized pixel areas
constant along a trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .metrics import frame_iou

MODES = ("s4", "ms3", "disambig")
SHAPE_CLASSES = ("circle", "square", "triangle")
SPLIT_NAMES = ("train", "valid", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
MAX_PLACEMENT_TRIES = 100
TEMPLATE_MAX_COSINE = 0.3

# per-class base colors; shape class stays recognizable across videos
CLASS_COLORS = {
    "circle": (0.25, 0.35, 0.85),
    "square": (0.85, 0.30, 0.25),
    "triangle": (0.25, 0.80, 0.35),
}

# square sides paired with circle radii whose rasterized pixel counts match
EQUAL_AREA_PAIRS = ((9, 5.05), (11, 6.2))


class GenerationError(RuntimeError):
    """Object placement failed after the retry budget."""


@dataclass(frozen=True)
class GenParams:
    clip_count: int = 5
    height: int = 64
    width: int = 64
    mel_bins: int = 32
    noise_level: float = 0.02
    max_speed: int = 2
    # inclusive size ranges per shape class; defaults suit 64 px frames
    circle_radius: tuple = (3, 6)
    square_side: tuple = (5, 11)
    triangle_height: tuple = (6, 12)
    # chance an object keeps its sounding state from one clip to the next
    schedule_persistence: float = 0.8

    def __post_init__(self):
        if self.clip_count < 1 or self.height < 16 or self.width < 16:
            raise ValueError(f"invalid generation parameters: {self}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if not 0.0 <= self.schedule_persistence <= 1.0:
            raise ValueError("schedule_persistence must lie in [0, 1]")


@dataclass
class SceneObject:
    shape: str
    size: float
    x: int          # center column at clip 1
    y: int          # center row at clip 1
    vx: int         # columns per clip
    vy: int         # rows per clip
    class_id: int
    color: tuple


@dataclass
class SceneSpec:
    video_id: str
    mode: str
    seed: int
    objects: list
    schedule: np.ndarray              # (T, n_objects) bool
    signature_ids: list = field(default_factory=list)
    noise_level: float = 0.0


# ---------------------------------------------------------------------------
# shape rasterization (integer centers keep areas translation-invariant)
# ---------------------------------------------------------------------------

def shape_offsets(shape: str, size: float):
    """Pixel offsets (dy, dx) of a shape centered at the origin."""
    if shape == "circle":
        n = int(np.ceil(size))
        ys, xs = np.mgrid[-n:n + 1, -n:n + 1]
        keep = xs * xs + ys * ys <= size * size
        return ys[keep], xs[keep]
    if shape == "square":
        side = int(size)
        half = side // 2
        ys, xs = np.mgrid[-half:side - half, -half:side - half]
        return ys.ravel(), xs.ravel()
    if shape == "triangle":
        h = int(size)
        base_half = max(h - 2, 1)
        rows, cols = [], []
        for k in range(h):
            half = int(round(k * base_half / max(h - 1, 1)))
            for dx in range(-half, half + 1):
                rows.append(k - h // 2)
                cols.append(dx)
        return np.array(rows), np.array(cols)
    raise ValueError(f"unknown shape class {shape!r}")


def shape_area(shape: str, size: float) -> int:
    return len(shape_offsets(shape, size)[0])


def object_mask(obj: SceneObject, clip: int, height: int, width: int) -> np.ndarray:
    """Boolean pixel mask of one object at a given 0-based clip index."""
    dy, dx = shape_offsets(obj.shape, obj.size)
    rows = dy + obj.y + obj.vy * clip
    cols = dx + obj.x + obj.vx * clip
    if rows.min() < 0 or rows.max() >= height or cols.min() < 0 or cols.max() >= width:
        raise GenerationError(f"object left the frame at clip {clip}")
    mask = np.zeros((height, width), dtype=bool)
    mask[rows, cols] = True
    return mask


def _fits(obj: SceneObject, clips: int, height: int, width: int) -> bool:
    dy, dx = shape_offsets(obj.shape, obj.size)
    for t in range(clips):
        rows = dy + obj.y + obj.vy * t
        cols = dx + obj.x + obj.vx * t
        if rows.min() < 0 or rows.max() >= height or cols.min() < 0 or cols.max() >= width:
            return False
    return True


def _overlaps(a: SceneObject, b: SceneObject, clips: int, height: int, width: int) -> bool:
    for t in range(clips):
        if (object_mask(a, t, height, width) & object_mask(b, t, height, width)).any():
            return True
    return False


# ---------------------------------------------------------------------------
# audio templates
# ---------------------------------------------------------------------------

def signature_bank(mel_bins: int, seed: int) -> np.ndarray:
    """One unit template per shape class, redrawn until pairwise cosines
    stay at or below the separation bound."""
    rng = np.random.default_rng(seed)
    while True:
        bank = rng.normal(size=(len(SHAPE_CLASSES), mel_bins))
        bank /= np.linalg.norm(bank, axis=1, keepdims=True)
        cos = bank @ bank.T
        off_diag = cos[~np.eye(len(SHAPE_CLASSES), dtype=bool)]
        if np.abs(off_diag).max() <= TEMPLATE_MAX_COSINE:
            return bank


# ---------------------------------------------------------------------------
# scene assembly
# ---------------------------------------------------------------------------

def _box_smooth(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1)), mode="edge")
    acc = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            acc += padded[di:di + img.shape[0], dj:dj + img.shape[1]]
    return acc / 9.0


def _background(rng, height: int, width: int) -> np.ndarray:
    base = rng.uniform(0.42, 0.58)
    texture = _box_smooth(rng.normal(0.0, 0.10, size=(height, width)))
    gray = np.clip(base + texture, 0.0, 1.0)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _object_color(rng, shape: str) -> tuple:
    base = np.array(CLASS_COLORS[shape])
    jitter = rng.uniform(-0.05, 0.05, size=3)
    return tuple(np.clip(base + jitter, 0.05, 0.95))


def _place_object(rng, shape: str, size: float, others, params: GenParams) -> SceneObject:
    for _ in range(MAX_PLACEMENT_TRIES):
        margin = int(np.ceil(size)) + 1
        obj = SceneObject(
            shape=shape, size=size,
            x=int(rng.integers(margin, params.width - margin)),
            y=int(rng.integers(margin, params.height - margin)),
            vx=int(rng.integers(-params.max_speed, params.max_speed + 1)),
            vy=int(rng.integers(-params.max_speed, params.max_speed + 1)),
            class_id=SHAPE_CLASSES.index(shape),
            color=_object_color(rng, shape))
        if not _fits(obj, params.clip_count, params.height, params.width):
            continue
        if any(_overlaps(obj, o, params.clip_count, params.height, params.width)
               for o in others):
            continue
        return obj
    raise GenerationError(f"could not place a {shape} after {MAX_PLACEMENT_TRIES} tries")


def _sample_objects(rng, mode: str, params: GenParams, sounder=None):
    """Objects plus the (T, n) schedule of who sounds when."""
    t = params.clip_count
    if mode == "disambig":
        side, radius = EQUAL_AREA_PAIRS[rng.integers(0, len(EQUAL_AREA_PAIRS))]
        square = _place_object(rng, "square", side, [], params)
        circle = _place_object(rng, "circle", radius, [square], params)
        objects = [square, circle]
        schedule = np.zeros((t, 2), dtype=bool)
        if sounder is None:
            sounder = int(rng.integers(0, 2))
        schedule[:, sounder] = True
        return objects, schedule

    classes = list(SHAPE_CLASSES)
    rng.shuffle(classes)
    if mode == "s4":
        n_objects = 1 + int(rng.integers(0, 2))     # optional silent distractor
    else:
        n_objects = 2 + int(rng.integers(0, 2))
    ranges = {"circle": params.circle_radius, "square": params.square_side,
              "triangle": params.triangle_height}
    objects = []
    for shape in classes[:n_objects]:
        lo, hi = ranges[shape]
        size = float(rng.integers(lo, hi + 1))
        objects.append(_place_object(rng, shape, size, objects, params))

    schedule = np.zeros((t, n_objects), dtype=bool)
    if mode == "s4":
        schedule[:, 0] = True
    else:
        # sticky per-object states: sources mostly persist, sometimes switch
        state = np.zeros(n_objects, dtype=bool)
        while not state.any():
            state = rng.random(n_objects) < 0.6
        schedule[0] = state
        for row in range(1, t):
            while True:
                keep = rng.random(n_objects) < params.schedule_persistence
                candidate = np.where(keep, schedule[row - 1], ~schedule[row - 1])
                if candidate.any():
                    break
            schedule[row] = candidate
    return objects, schedule


def generate_scene(mode: str, seed: int, params: GenParams = GenParams(),
                   video_id: str = "video_00000", sounder=None):
    """Render one audible video: frames, mel rows, masks, and the scene spec.

    ``sounder`` (disambig only) overrides the random choice of which object
    sounds; dataset generation uses it to balance the two answers exactly.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(seed)
    objects, schedule = _sample_objects(rng, mode, params, sounder=sounder)
    bank = signature_bank(params.mel_bins, seed=0)

    if mode == "disambig":
        amplitudes = np.ones(len(objects))          # loudness must not leak identity
    else:
        amplitudes = rng.uniform(0.7, 1.3, size=len(objects))

    t, h, w = params.clip_count, params.height, params.width
    background = _background(rng, h, w)
    frames = np.empty((t, h, w, 3))
    gt = np.zeros((t, h, w), dtype=np.uint8)
    mel = np.zeros((t, params.mel_bins))
    for clip in range(t):
        canvas = background.copy()
        for idx, obj in enumerate(objects):
            mask = object_mask(obj, clip, h, w)
            canvas[mask] = obj.color
            if schedule[clip, idx]:
                gt[clip][mask] = 1
                mel[clip] += amplitudes[idx] * bank[obj.class_id]
        frames[clip] = canvas
    if params.noise_level > 0:
        mel += params.noise_level * rng.normal(size=mel.shape)

    spec = SceneSpec(video_id=video_id, mode=mode, seed=seed, objects=objects,
                     schedule=schedule, signature_ids=[o.class_id for o in objects],
                     noise_level=params.noise_level)
    return frames, mel, gt, spec


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

def split_sizes(n_videos: int):
    n_train = int(n_videos * SPLIT_FRACTIONS[0])
    n_valid = int(n_videos * SPLIT_FRACTIONS[1])
    return n_train, n_valid, n_videos - n_train - n_valid


def _video_seed(dataset_seed: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([dataset_seed, index, attempt]).generate_state(1)[0])


def _generate_with_retries(mode, dataset_seed, index, params, sounder,
                           video_id, attempts: int = 20):
    """Deterministically re-derive the scene seed if placement gets stuck."""
    for attempt in range(attempts):
        try:
            return generate_scene(mode, _video_seed(dataset_seed, index, attempt),
                                  params, video_id=video_id, sounder=sounder)
        except GenerationError:
            if attempt == attempts - 1:
                raise
    raise AssertionError("unreachable")


def _write_video(video_dir: Path, frames, mel, gt, spec: SceneSpec,
                 mask_clips) -> None:
    frames_dir = video_dir / "frames"
    masks_dir = video_dir / "masks"
    frames_dir.mkdir(parents=True)
    masks_dir.mkdir(parents=True)
    for clip in range(frames.shape[0]):
        storage.write_ppm(frames_dir / f"frame_{clip + 1}.ppm", frames[clip])
    for clip in mask_clips:
        storage.write_mask_pgm(masks_dir / f"mask_{clip}.pgm", gt[clip - 1])
    storage.write_tensor(video_dir / "mel.tns", mel)

    meta = {
        "mode": spec.mode,
        "video_id": spec.video_id,
        "seed": str(spec.seed),
        "noise_level": f"{spec.noise_level:g}",
        "objects": str(len(spec.objects)),
    }
    for idx, obj in enumerate(spec.objects):
        color = ",".join(f"{c:.6f}" for c in obj.color)
        meta[f"object_{idx}"] = (f"{obj.shape},{obj.size:g},{obj.x},{obj.y},"
                                 f"{obj.vx},{obj.vy},{obj.class_id},{color}")
    for clip in range(spec.schedule.shape[0]):
        meta[f"schedule_{clip + 1}"] = ",".join(
            "1" if x else "0" for x in spec.schedule[clip])
    storage.write_kv(video_dir / "meta.cfg", meta)


def make_dataset(n_videos: int, mode: str, seed: int, out_dir,
                 params: GenParams = GenParams(), full_masks: bool = False) -> dict:
    """Generate and write a full train/valid/test dataset; returns split sizes.

    Single-source training videos store only the first clip's mask, matching
    the one-shot annotation policy; ``full_masks`` overrides that for
    counterfactual supervision studies. Valid and test always store all clips.
    """
    if n_videos < 10:
        raise ValueError(f"need at least 10 videos, got {n_videos}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    out = Path(out_dir)
    n_train, n_valid, n_test = split_sizes(n_videos)
    bounds = (("train", 0, n_train), ("valid", n_train, n_train + n_valid),
              ("test", n_train + n_valid, n_videos))
    for split, lo, hi in bounds:
        for index in range(lo, hi):
            video_id = f"video_{index:05d}"
            sounder = index % 2 if mode == "disambig" else None
            frames, mel, gt, spec = _generate_with_retries(
                mode, seed, index, params, sounder, video_id)
            all_clips = list(range(1, params.clip_count + 1))
            one_shot = mode == "s4" and split == "train" and not full_masks
            mask_clips = [1] if one_shot else all_clips
            _write_video(out / split / video_id, frames, mel, gt, spec, mask_clips)
    return {"train": n_train, "valid": n_valid, "test": n_test}


@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray            # (T, H, W, 3) in [0, 1]
    mel: np.ndarray               # (T, mel_bins)
    masks: dict                   # 1-based clip -> (H, W) uint8
    meta: dict


def load_video(video_dir) -> VideoSample:
    video_dir = Path(video_dir)
    meta = dict(storage.read_kv(video_dir / "meta.cfg"))
    frame_paths = sorted((video_dir / "frames").glob("frame_*.ppm"),
                         key=lambda p: int(p.stem.split("_")[1]))
    frames = np.stack([storage.read_ppm(p) for p in frame_paths])
    mel = storage.read_tensor(video_dir / "mel.tns").data
    masks = {}
    for p in sorted((video_dir / "masks").glob("mask_*.pgm")):
        masks[int(p.stem.split("_")[1])] = storage.read_mask_pgm(p)
    return VideoSample(video_id=video_dir.name, frames=frames, mel=mel,
                       masks=masks, meta=meta)


def list_split(data_dir, split: str):
    if split not in SPLIT_NAMES:
        raise ValueError(f"split must be one of {SPLIT_NAMES}, got {split!r}")
    split_dir = Path(data_dir) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"missing split directory {split_dir}")
    return sorted(p for p in split_dir.iterdir() if p.is_dir())


def _objects_from_meta(meta: dict):
    objects = []
    for idx in range(int(meta["objects"])):
        parts = meta[f"object_{idx}"].split(",")
        objects.append(SceneObject(
            shape=parts[0], size=float(parts[1]), x=int(parts[2]), y=int(parts[3]),
            vx=int(parts[4]), vy=int(parts[5]), class_id=int(parts[6]),
            color=tuple(float(c) for c in parts[7:10])))
    return objects


def strategy_ious(gt_mask: np.ndarray, masks_by_object):
    """Frame IoU of each audio-blind strategy: each single object, or all."""
    scores = [frame_iou(m, gt_mask > 0) for m in masks_by_object]
    union = np.zeros_like(gt_mask, dtype=bool)
    for m in masks_by_object:
        union |= m
    scores.append(frame_iou(union, gt_mask > 0))
    return scores


def bayes_visual_ceiling(data_dir, split: str = "test") -> float:
    """Best mean IoU any audio-blind predictor can reach on a disambig split.

    The visual stream never identifies the sounding object, so a predictor
    without audio can at best commit to one object class or hedge with both;
    each strategy is scored per frame against the true masks and the best
    dataset-level mean wins.
    """
    totals = None
    count = 0
    for video_dir in list_split(data_dir, split):
        sample = load_video(video_dir)
        if sample.meta.get("mode") != "disambig":
            raise ValueError(f"{video_dir} is not a disambig video")
        objects = _objects_from_meta(sample.meta)
        h, w = sample.frames.shape[1:3]
        for clip, gt_mask in sorted(sample.masks.items()):
            masks = [object_mask(obj, clip - 1, h, w) for obj in objects]
            scores = strategy_ious(gt_mask, masks)
            if totals is None:
                totals = np.zeros(len(scores))
            totals += scores
            count += 1
    if not count:
        raise ValueError(f"no annotated frames found under {data_dir}/{split}")
    return float((totals / count).max())
