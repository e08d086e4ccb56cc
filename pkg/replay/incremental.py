"""
Class-incremental training loop.

Each stage trains on the new classes interleaved with replayed memory
exemplars, distilling the previous model's pooled intermediate maps and
embeddings on the replayed samples, then condenses and stores exemplars of
the new classes and evaluates on every class seen so far.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import autodiff as ad
from . import backbone
from .condenser import CondenseConfig, Strategy, condense_stage
from .datagen import VideoClip, VideoDataset
from .exceptions import ContractError, DimensionError, DomainError, OptimizationError
from .memory import MemoryBank, MemoryConfig, class_means, herding_select

logger = logging.getLogger(__name__)

NEW = 'new'
MEM = 'mem'

EVAL_CHUNK = 64


@dataclass
class TaskSplit:
    """Disjoint class sets, one per stage; stage 1 is the base task."""

    stages: List[List[int]]

    def __post_init__(self):
        self.stages = [sorted(int(c) for c in stage) for stage in self.stages]
        if not self.stages or any(not stage for stage in self.stages):
            raise DomainError("TaskSplit needs at least one stage and no empty stages")
        seen = set()
        for index, stage in enumerate(self.stages, start=1):
            overlap = seen.intersection(stage)
            if overlap or len(set(stage)) != len(stage):
                raise DomainError(f"Stage {index} repeats classes {sorted(overlap) or stage}")
            seen.update(stage)

    @classmethod
    def from_counts(cls, base: int, increment: int, num_classes: int) -> 'TaskSplit':
        """``base`` classes first, then stages of ``increment`` classes in id order."""
        if base < 1 or increment < 1:
            raise DomainError("base and increment must be >= 1")
        if base > num_classes or (num_classes - base) % increment:
            raise DomainError(f"{num_classes} classes cannot be split as {base} + k×{increment}")
        stages = [list(range(base))]
        for start in range(base, num_classes, increment):
            stages.append(list(range(start, start + increment)))
        return cls(stages)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def classes(self) -> List[int]:
        return sorted(c for stage in self.stages for c in stage)

    def seen(self, k: int) -> List[int]:
        """Classes of stages 1..k."""
        return sorted(c for stage in self.stages[:k] for c in stage)

    def validate_against(self, num_classes: int):
        if self.classes != list(range(num_classes)):
            raise DomainError(f"TaskSplit must cover classes 0..{num_classes - 1} exactly once, got {self.classes}")


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 16
    lr_base: float = 0.05
    lr_incremental: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    distillation: bool = True
    # false gives the finetuning baseline: the bank is built but never replayed
    replay: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")
        if self.lr_base <= 0 or self.lr_incremental <= 0:
            raise DomainError("Learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class StageReport:
    stage: int
    seen_classes: int
    acc_cnn: float
    acc_nme: float
    memory_mb: float
    losses: List[float] = field(default_factory=list)

    def __post_init__(self):
        for name in ('acc_cnn', 'acc_nme'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {value}")

    def as_row(self) -> dict:
        return {
            'stage': self.stage,
            'seen_classes': self.seen_classes,
            'acc_cnn': self.acc_cnn,
            'acc_nme': self.acc_nme,
            'memory_mb': self.memory_mb,
        }


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _pooled_difference(new: torch.Tensor, old: torch.Tensor, axis: int) -> torch.Tensor:
    diff = new.sum(dim=axis) - old.sum(dim=axis)
    return (diff * diff).sum(dim=(-3, -2, -1))


def distill_spatial(bundle_new: backbone.FeatureBundle, bundle_old: backbone.FeatureBundle) -> torch.Tensor:
    """
    Width- and height-pooled distillation summed over the stage maps.

    For each T×C×H×W map: Σ over (t, c, h) of the squared difference of
    width sums, plus Σ over (t, c, w) of the squared difference of height
    sums. A leading batch axis is averaged.
    """
    if len(bundle_new.stage_maps) != len(bundle_old.stage_maps):
        raise DimensionError(
            "distill_spatial: bundles hold different numbers of stage maps",
            (len(bundle_new.stage_maps),), (len(bundle_old.stage_maps),),
        )
    total = None
    for new, old in zip(bundle_new.stage_maps, bundle_old.stage_maps):
        if new.shape != old.shape:
            raise DimensionError("distill_spatial: stage map shapes differ", new.shape, old.shape)
        if new.dim() not in (4, 5):
            raise DimensionError("distill_spatial: stage maps must be T×C×H×W or B×T×C×H×W", new.shape)
        term = _pooled_difference(new, old, -1) + _pooled_difference(new, old, -2)
        if term.dim():
            term = term.mean()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=ad.DTYPE)
    return total


def distill_flat(embed_new: torch.Tensor, embed_old: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between embeddings (batch-averaged)."""
    if embed_new.shape != embed_old.shape:
        raise DimensionError("distill_flat: embedding shapes differ", embed_new.shape, embed_old.shape)
    return ad.squared_distance(embed_new, embed_old).mean()


def cil_terms(
    new_batch: Optional[Tuple[torch.Tensor, torch.Tensor]],
    mem_batch: Optional[Tuple[torch.Tensor, torch.Tensor]],
    params: backbone.ModelParams,
    old_model: Optional[backbone.ModelSnapshot] = None,
    distillation: bool = True,
) -> Dict[str, torch.Tensor]:
    """The named parts of the stage objective; absent parts are left out."""
    if new_batch is None and mem_batch is None:
        raise ContractError("cil_loss needs a new-class batch or a memory batch")
    terms = {}
    if new_batch is not None:
        clips, labels = new_batch
        _, logits = backbone.forward(clips, params)
        terms['ce_new'] = ad.cross_entropy(logits, labels)
    if mem_batch is not None:
        clips, labels = mem_batch
        bundle, logits = backbone.forward(clips, params)
        terms['ce_mem'] = ad.cross_entropy(logits, labels)
        if distillation and old_model is not None:
            with torch.no_grad():
                old_bundle = backbone.extract_features(clips, old_model.params)
            terms['spatial'] = distill_spatial(bundle, old_bundle)
            terms['flat'] = distill_flat(bundle.embedding, old_bundle.embedding)
    return terms


def cil_loss(new_batch, mem_batch, params, old_model=None, distillation: bool = True) -> torch.Tensor:
    """Cross-entropy on new data and on memory, plus spatial and flat distillation on memory."""
    terms = cil_terms(new_batch, mem_batch, params, old_model, distillation)
    return sum(terms.values())


def interleave(new_count: int, mem_count: int, batch: int) -> List[Tuple[str, int, int]]:
    """
    Deterministic source schedule for one epoch.

    Both pools are cut into consecutive batches; at each step the source whose
    share of emitted batches would stay lowest goes next, ties to new data.
    Returns ``(source, start, stop)`` slices into the respective pool.
    """
    if new_count < 0 or mem_count < 0:
        raise DomainError(f"interleave: counts must be non-negative, got ({new_count}, {mem_count})")
    if new_count == 0 and mem_count == 0:
        raise DomainError("interleave: both pools are empty")
    if batch < 1:
        raise DomainError(f"interleave: batch must be >= 1, got {batch}")

    totals = {NEW: math.ceil(new_count / batch), MEM: math.ceil(mem_count / batch)}
    sizes = {NEW: new_count, MEM: mem_count}
    emitted = {NEW: 0, MEM: 0}
    schedule = []
    for _ in range(totals[NEW] + totals[MEM]):
        candidates = [s for s in (NEW, MEM) if emitted[s] < totals[s]]
        source = min(candidates, key=lambda s: ((emitted[s] + 1) / totals[s], s != NEW))
        start = emitted[source] * batch
        schedule.append((source, start, min(start + batch, sizes[source])))
        emitted[source] += 1
    return schedule


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _stack(clips: Sequence[VideoClip]) -> Tuple[torch.Tensor, torch.Tensor]:
    frames = torch.stack([backbone.to_tensor(c.frames) for c in clips])
    labels = torch.tensor([c.label for c in clips], dtype=torch.long)
    return frames, labels


def _embed(clips: torch.Tensor, params: backbone.ModelParams) -> torch.Tensor:
    with torch.no_grad():
        parts = [backbone.extract_features(clips[i:i + EVAL_CHUNK], params).embedding
                 for i in range(0, clips.shape[0], EVAL_CHUNK)]
    return torch.cat(parts)


def evaluate_cnn(params: backbone.ModelParams, clips: Sequence[VideoClip]) -> float:
    """Accuracy of the argmax of head logits."""
    if not clips:
        raise DomainError("evaluate_cnn: empty test set")
    frames, labels = _stack(clips)
    with torch.no_grad():
        logits = ad.linear(_embed(frames, params), params.head_weight, params.head_bias)
    correct = int((logits.argmax(dim=1) == labels).sum())
    return correct / len(clips)


def nearest_mean(embeddings: torch.Tensor, means: Dict[int, torch.Tensor]) -> List[int]:
    """Class of the closest mean for each row; ties go to the lowest class id."""
    classes = sorted(means)
    prototypes = torch.stack([means[c] for c in classes])
    distances = ((embeddings.unsqueeze(1) - prototypes.unsqueeze(0)) ** 2).sum(dim=-1)
    return [classes[i] for i in distances.argmin(dim=1).tolist()]


def evaluate_nme(
    params: backbone.ModelParams,
    bank: MemoryBank,
    clips: Sequence[VideoClip],
    clip_length: Optional[int] = None,
) -> float:
    """Accuracy of nearest-mean-of-exemplars classification."""
    if not clips:
        raise DomainError("evaluate_nme: empty test set")
    missing = sorted({c.label for c in clips} - set(bank.classes()))
    if missing:
        raise ContractError(f"evaluate_nme: bank has no exemplars for classes {missing}")
    frames, labels = _stack(clips)
    clip_length = clip_length or frames.shape[1]
    means = class_means(bank, params, clip_length)
    predictions = nearest_mean(_embed(frames, params), means)
    correct = sum(int(p == y) for p, y in zip(predictions, labels.tolist()))
    return correct / len(clips)


def average_accuracy(reports, metric: str = 'acc_cnn') -> float:
    """Mean of per-stage accuracies; accepts StageReports or plain numbers."""
    values = [getattr(r, metric) if isinstance(r, StageReport) else float(r) for r in reports]
    if not values:
        raise DomainError("average_accuracy: no stages")
    return sum(values) / len(values)


# ---------------------------------------------------------------------------
# Stage loop
# ---------------------------------------------------------------------------

def _check_stage_order(k: int, params: backbone.ModelParams, split: TaskSplit, bank: MemoryBank):
    if not 1 <= k <= split.num_stages:
        raise ContractError(f"Stage {k} is outside the {split.num_stages}-stage split")
    previous = split.seen(k - 1)
    if params.num_classes != len(previous):
        raise ContractError(
            f"Stage {k} expects a head over {len(previous)} classes, got {params.num_classes}; "
            f"stages must run in order"
        )
    if bank.classes() != previous:
        raise ContractError(f"Stage {k} expects memory for classes {previous}, bank holds {bank.classes()}")


def select_exemplars(
    clips_by_class: Dict[int, List[VideoClip]],
    params: backbone.ModelParams,
    videos_per_class: int,
) -> Dict[int, List[VideoClip]]:
    """Herding over clip embeddings under the current model."""
    selected = {}
    for label, clips in clips_by_class.items():
        frames, _ = _stack(clips)
        order = herding_select(_embed(frames, params).numpy(), videos_per_class)
        selected[label] = [clips[i] for i in order]
    return selected


def run_stage(
    k: int,
    params: backbone.ModelParams,
    split: TaskSplit,
    dataset: VideoDataset,
    bank: MemoryBank,
    cfg: TrainConfig,
    condense_cfg: Optional[CondenseConfig] = None,
    memory_cfg: Optional[MemoryConfig] = None,
) -> Tuple[backbone.ModelParams, StageReport]:
    """
    Train stage ``k`` (1-based), store its exemplars and evaluate.

    The bank is extended in place with the new classes.
    """
    condense_cfg = condense_cfg or CondenseConfig()
    memory_cfg = memory_cfg or MemoryConfig()
    _check_stage_order(k, params, split, bank)
    stage_classes = split.stages[k - 1]
    logger.info(f"Stage {k}/{split.num_stages}: classes {stage_classes}")

    old_model = backbone.snapshot(params, stage=k - 1) if k > 1 else None
    params = backbone.extend_head(params, len(stage_classes), seed=cfg.seed * 1000 + k)

    new_frames, new_labels = _stack(dataset.clips('train', stage_classes))
    clip_length = new_frames.shape[1]
    replayed = bank.all_exemplars() if cfg.replay and k > 1 else []
    lr = cfg.lr_base if k == 1 else cfg.lr_incremental
    optimizer = torch.optim.SGD(params.parameters(), lr=lr, momentum=cfg.momentum)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=[max(1, cfg.epochs // 2)], gamma=0.5)

    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, k, epoch])
        new_order = rng.permutation(new_frames.shape[0])
        mem_order = rng.permutation(len(replayed))
        epoch_losses = []
        for source, start, stop in interleave(len(new_order), len(mem_order), cfg.batch_size):
            if source == NEW:
                index = torch.as_tensor(new_order[start:stop])
                loss = cil_loss((new_frames[index], new_labels[index]), None, params, old_model, cfg.distillation)
            else:
                batch = bank.replay_batch([int(i) for i in mem_order[start:stop]], clip_length)
                loss = cil_loss(None, batch, params, old_model, cfg.distillation)
            if not torch.isfinite(loss):
                raise OptimizationError(f"Stage {k} training loss became non-finite", step)
            ad.backward(loss)
            optimizer.step()
            epoch_losses.append(loss.item())
            step += 1
        scheduler.step()
        losses.append(float(np.mean(epoch_losses)))
        logger.debug(f"Stage {k} epoch {epoch + 1}/{cfg.epochs}: loss={losses[-1]:.6f}")

    selected = select_exemplars(
        dataset.by_class('train', stage_classes), params, memory_cfg.videos_per_class,
    )
    condensed = condense_stage(
        selected, params, condense_cfg, seed=cfg.seed, stage=k,
        stored_frames=memory_cfg.stored_frames(condense_cfg.strategy == Strategy.ALL, clip_length),
    )
    for label in stage_classes:
        bank.insert(label, condensed[label].exemplars, stage=k)

    test_clips = dataset.clips('test', split.seen(k))
    report = StageReport(
        stage=k,
        seen_classes=len(split.seen(k)),
        acc_cnn=evaluate_cnn(params, test_clips),
        acc_nme=evaluate_nme(params, bank, test_clips, clip_length),
        memory_mb=bank.memory_mb(),
        losses=losses,
    )
    logger.info(
        f"Stage {k} done: acc_cnn={report.acc_cnn:.4f} acc_nme={report.acc_nme:.4f} "
        f"memory={report.memory_mb:.6f} MB"
    )
    return params, report


@dataclass
class RunResult:
    reports: List[StageReport]
    params: backbone.ModelParams
    bank: MemoryBank

    def average(self, metric: str = 'acc_cnn') -> float:
        return average_accuracy(self.reports, metric)


class IncrementalRun:
    """
    Drives every stage of a split over one dataset with one seed.
    """

    def __init__(
        self,
        dataset: VideoDataset,
        split: TaskSplit,
        train: TrainConfig,
        condense: Optional[CondenseConfig] = None,
        memory: Optional[MemoryConfig] = None,
        shift_fold: float = backbone.DEFAULT_SHIFT_FOLD,
    ):
        split.validate_against(dataset.spec.num_classes)
        self.dataset = dataset
        self.split = split
        self.train = train
        self.condense = condense or CondenseConfig()
        self.memory = memory or MemoryConfig()
        self.shift_fold = shift_fold

    def run(self) -> RunResult:
        params = backbone.ModelParams.initialize(
            self.dataset.spec.channels, 0, seed=self.train.seed, shift_fold=self.shift_fold,
        )
        bank = MemoryBank(
            videos_per_class=self.memory.videos_per_class,
            frames_per_exemplar=self.memory.stored_frames(
                self.condense.strategy == Strategy.ALL, self.dataset.spec.frames,
            ),
        )
        reports = []
        for k in range(1, self.split.num_stages + 1):
            params, report = run_stage(
                k, params, self.split, self.dataset, bank, self.train, self.condense, self.memory,
            )
            reports.append(report)
        result = RunResult(reports=reports, params=params, bank=bank)
        logger.info(
            f"Seed {self.train.seed}: average accuracy cnn={result.average('acc_cnn'):.4f} "
            f"nme={result.average('acc_nme'):.4f}"
        )
        return result
