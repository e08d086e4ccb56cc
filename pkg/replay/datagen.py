"""
Deterministic synthetic moving-shape videos.

Each class is a (shape, motion, speed) triple derived from its id; each clip
is one bright object moving over a dark background with seeded start
position and additive Gaussian pixel noise. Objects reflect off the borders.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exceptions import DomainError

logger = logging.getLogger(__name__)

SHAPES = ('square', 'disc', 'cross')
MOTIONS = ('linear', 'circular', 'zigzag')

BACKGROUND = 25
FOREGROUND = 230


@dataclass(frozen=True)
class ClassParams:
    class_id: int
    shape: str
    motion: str
    speed: float
    # heading of linear motion, radians
    theta: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    train_per_class: int = 20
    test_per_class: int = 10
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    # std of additive noise as a fraction of the full pixel range
    noise_std: float = 0.05
    radius: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ('num_classes', 'frames', 'height', 'width', 'channels', 'radius'):
            if getattr(self, name) < 1:
                raise DomainError(f"SynthSpec.{name} must be positive, got {getattr(self, name)}")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise DomainError("Clip counts must be non-negative")
        if self.noise_std < 0:
            raise DomainError(f"noise_std must be non-negative, got {self.noise_std}")
        if min(self.height, self.width) <= 2 * self.radius + 2:
            raise DomainError(f"A {self.height}×{self.width} frame cannot hold an object of radius {self.radius}")


@dataclass(frozen=True, eq=False)
class VideoClip:
    """T×C×H×W uint8 frames with their class label."""

    frames: np.ndarray
    label: int
    instance_id: int = 0
    seed: Optional[int] = None

    def __eq__(self, other):
        if not isinstance(other, VideoClip):
            return NotImplemented
        return (
            self.label == other.label
            and self.instance_id == other.instance_id
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )

    __hash__ = None


@dataclass
class VideoDataset:
    spec: SynthSpec
    train: List[VideoClip] = field(default_factory=list)
    test: List[VideoClip] = field(default_factory=list)

    def clips(self, split: str, classes: Optional[Sequence[int]] = None) -> List[VideoClip]:
        pool = self.train if split == 'train' else self.test
        if classes is None:
            return list(pool)
        wanted = set(classes)
        return [clip for clip in pool if clip.label in wanted]

    def by_class(self, split: str, classes: Sequence[int]) -> Dict[int, List[VideoClip]]:
        pool = self.clips(split, classes)
        return {label: [c for c in pool if c.label == label] for label in classes}


def class_params(class_id: int) -> ClassParams:
    """
    Shape cycles fastest, then motion, then speed level, so every class id
    maps to its own (shape, motion, speed) triple and neighbouring classes
    share a shape but differ in motion.
    """
    if class_id < 0:
        raise DomainError(f"class_id must be non-negative, got {class_id}")
    return ClassParams(
        class_id=class_id,
        shape=SHAPES[class_id % len(SHAPES)],
        motion=MOTIONS[(class_id // len(SHAPES)) % len(MOTIONS)],
        speed=float(1 + class_id // (len(SHAPES) * len(MOTIONS))),
        theta=(class_id % 8) * math.pi / 4,
    )


def reflect(value: float, low: float, high: float) -> float:
    """Fold a coordinate into [low, high] as if bouncing off both walls."""
    if high <= low:
        return low
    span = high - low
    folded = (value - low) % (2 * span)
    return low + (folded if folded <= span else 2 * span - folded)


def object_path(
    params: ClassParams,
    start: Sequence[float],
    phase: float,
    frames: int,
    height: int,
    width: int,
    radius: int,
) -> np.ndarray:
    """(y, x) object centres for every frame, reflected into the drawable area."""
    t = np.arange(frames, dtype=np.float64)
    y0, x0 = start
    if params.motion == 'linear':
        ys = y0 + t * params.speed * math.sin(params.theta)
        xs = x0 + t * params.speed * math.cos(params.theta)
    elif params.motion == 'circular':
        orbit = radius
        omega = params.speed / orbit
        ys = y0 + orbit * np.sin(omega * t + phase)
        xs = x0 + orbit * np.cos(omega * t + phase)
    elif params.motion == 'zigzag':
        ys = y0 + 2 * params.speed * (t % 2)
        xs = x0 + params.speed * t
    else:
        raise DomainError(f"Unknown motion {params.motion!r}")

    low, high_y, high_x = radius, height - 1 - radius, width - 1 - radius
    return np.array([[reflect(y, low, high_y), reflect(x, low, high_x)] for y, x in zip(ys, xs)])


def shape_mask(shape: str, centre: Sequence[float], height: int, width: int, radius: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy - centre[0], xx - centre[1]
    if shape == 'square':
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if shape == 'disc':
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == 'cross':
        arm = max(1.0, radius / 3)
        return ((np.abs(dy) <= radius) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= radius) & (np.abs(dy) <= arm))
    raise DomainError(f"Unknown shape {shape!r}")


def render_clip(
    params: ClassParams,
    instance_seed: int,
    spec: SynthSpec = SynthSpec(),
    instance_id: int = 0,
) -> VideoClip:
    """Render one clip; identical (class, seed) pairs give identical bytes."""
    rng = np.random.default_rng(instance_seed)
    margin = spec.radius + 1
    start = (
        rng.uniform(margin, spec.height - 1 - margin),
        rng.uniform(margin, spec.width - 1 - margin),
    )
    phase = rng.uniform(0.0, 2 * math.pi)
    path = object_path(params, start, phase, spec.frames, spec.height, spec.width, spec.radius)

    frames = np.full((spec.frames, spec.channels, spec.height, spec.width), BACKGROUND, dtype=np.float64)
    for t, centre in enumerate(path):
        mask = shape_mask(params.shape, centre, spec.height, spec.width, spec.radius)
        frames[t][:, mask] = FOREGROUND
    if spec.noise_std > 0:
        frames += rng.normal(0.0, spec.noise_std * 255.0, size=frames.shape)
    pixels = np.clip(np.floor(frames + 0.5), 0, 255).astype(np.uint8)
    return VideoClip(frames=pixels, label=params.class_id, instance_id=instance_id, seed=instance_seed)


def instance_seed(dataset_seed: int, class_id: int, instance_id: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, class_id, instance_id]).generate_state(1, dtype=np.uint64)[0])


def generate_dataset(spec: SynthSpec = SynthSpec()) -> VideoDataset:
    """
    Class-balanced train/test clips. Train clips use instance ids
    0..n_train−1 and test clips the ids after them, so their seeds never meet.
    """
    dataset = VideoDataset(spec=spec)
    for class_id in range(spec.num_classes):
        params = class_params(class_id)
        for instance_id in range(spec.train_per_class + spec.test_per_class):
            clip = render_clip(params, instance_seed(spec.seed, class_id, instance_id), spec, instance_id)
            if instance_id < spec.train_per_class:
                dataset.train.append(clip)
            else:
                dataset.test.append(clip)
    logger.info(
        f"Generated {len(dataset.train)} train / {len(dataset.test)} test clips "
        f"over {spec.num_classes} classes"
    )
    return dataset


def dump_clips(clips: Sequence[VideoClip], path):
    """Write clips to an FMEX container as full-clip exemplar sections."""
    from .memory import CondensedExemplar, write_container

    exemplars = [
        CondensedExemplar(pixels=clip.frames, label=clip.label, weights_audit=np.zeros(0, dtype=np.float32))
        for clip in clips
    ]
    write_container(path, exemplars)


def load_clips(path) -> List[VideoClip]:
    from .memory import read_container

    exemplars, _ = read_container(path)
    clips, seen = [], {}
    for exemplar in exemplars:
        instance_id = seen.get(exemplar.label, 0)
        seen[exemplar.label] = instance_id + 1
        clips.append(VideoClip(frames=np.array(exemplar.pixels), label=exemplar.label, instance_id=instance_id))
    return clips
