"""
Frame condensing with instance-specific prompts.

For each exemplar video the condenser learns softmax weights over its T frames
(the condensed frame is their weighted sum) and a pixel-space prompt added to
that frame, by minimising

    alpha·l_c_f + beta·l_c_ce + gamma·l_p_f + eta·l_p_ce

with the model frozen. The result is baked into one stored frame.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import autodiff as ad
from . import backbone
from .datagen import VideoClip
from .exceptions import DimensionError, DomainError, OptimizationError
from .memory import CondensedExemplar

logger = logging.getLogger(__name__)


class PromptMode(str, Enum):
    INSTANCE = 'instance'
    CLASS = 'class'
    TASK = 'task'
    DISABLED = 'disabled'


class Strategy(str, Enum):
    CONDENSED = 'condensed'
    AVERAGE = 'average'
    RANDOM = 'random'
    ALL = 'all'
    # prompt learned on a blank frame, no condensed frame underneath
    PROMPT_ONLY = 'prompt_only'


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        for name in ('alpha', 'beta', 'gamma', 'eta'):
            if getattr(self, name) < 0:
                raise DomainError(f"Balance weight {name} must be non-negative, got {getattr(self, name)}")

    def scaled(self, factor: float) -> 'LossWeights':
        return LossWeights(self.alpha * factor, self.beta * factor, self.gamma * factor, self.eta * factor)


@dataclass(frozen=True)
class LossBreakdown:
    l_c_f: float
    l_c_ce: float
    l_p_f: float
    l_p_ce: float
    total: float


@dataclass
class CondenseConfig:
    iterations: int = 400
    lr_weights: float = 0.01
    lr_prompt: float = 0.001
    loss_weights: LossWeights = field(default_factory=LossWeights)
    prompt_mode: PromptMode = PromptMode.INSTANCE
    strategy: Strategy = Strategy.CONDENSED
    # frames sampled from each clip before condensing; None keeps every frame
    frames: Optional[int] = None
    store_float: bool = False

    def __post_init__(self):
        self.prompt_mode = PromptMode(self.prompt_mode)
        self.strategy = Strategy(self.strategy)
        if self.iterations < 0:
            raise DomainError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr_weights <= 0 or self.lr_prompt <= 0:
            raise DomainError("Condensing learning rates must be positive")
        if self.frames is not None and self.frames < 1:
            raise DomainError(f"frames must be >= 1, got {self.frames}")
        if self.strategy == Strategy.PROMPT_ONLY and self.prompt_mode == PromptMode.DISABLED:
            raise DomainError("Strategy prompt_only needs an enabled prompt mode")

    @property
    def uses_prompt(self) -> bool:
        return self.prompt_mode != PromptMode.DISABLED and self.strategy != Strategy.ALL

    def effective_weights(self) -> LossWeights:
        """Balance weights with the terms that have nothing to optimise switched off."""
        weights = self.loss_weights
        if not self.uses_prompt:
            weights = replace(weights, gamma=0.0, eta=0.0)
        if self.strategy == Strategy.PROMPT_ONLY:
            weights = replace(weights, alpha=0.0, beta=0.0)
        return weights


@dataclass
class CondenseState:
    """Learnable per-frame condensing logits and pixel prompt for a group of exemplars."""

    weights: torch.Tensor
    prompt: torch.Tensor
    step: int = 0


@dataclass
class CondenseResult:
    exemplars: List[CondensedExemplar]
    # prompt key -> final prompt tensor; shared modes hold a single entry per group
    prompts: Dict[str, torch.Tensor] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def sample_frames(frames: np.ndarray, count: Optional[int]) -> np.ndarray:
    """Pick ``count`` frames at the centres of equal temporal segments."""
    total = frames.shape[0]
    if count is None or count == total:
        return frames
    if count < 1:
        raise DomainError(f"sample_frames: count must be >= 1, got {count}")
    indices = np.floor((np.arange(count) + 0.5) * total / count).astype(int)
    return frames[indices]


def condense_frame(weights: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
    """Σ_t softmax(weights)_t · frame_t for T logits and T×C×H×W frames (batched on leading axes)."""
    if frames.dim() < 4 or frames.shape[-4] == 0 or weights.shape[-1] == 0:
        raise DomainError("condense_frame: need at least one frame")
    return ad.weighted_sum(ad.softmax(weights, axis=-1), frames)


def _per_sample_ce(logits: torch.Tensor, labels) -> torch.Tensor:
    if logits.dim() == 1:
        return ad.cross_entropy(logits, labels)
    labels = torch.as_tensor(labels, dtype=torch.long)
    return torch.stack([ad.cross_entropy(logits[i], labels[i]) for i in range(logits.shape[0])])


def _frame_losses(inputs, clip_embedding, label, params, clip_length):
    bundle, logits = backbone.forward(backbone.replicate(inputs, clip_length), params)
    return ad.squared_distance(bundle.embedding, clip_embedding), _per_sample_ce(logits, label)


def _clip_embedding(clip: torch.Tensor, params: backbone.ModelParams) -> torch.Tensor:
    with torch.no_grad():
        return backbone.extract_features(clip, params).embedding


def condensing_loss(
    frame: torch.Tensor,
    clip: torch.Tensor,
    label,
    params: backbone.ModelParams,
    clip_embedding: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (l_c_f, l_c_ce): squared embedding distance between the replicated frame
    and the clip, and head cross-entropy on the frame.

    Batched inputs (N×C×H×W frames, N clips, N labels) give per-exemplar vectors.
    """
    if frame.dim() + 1 != clip.dim():
        raise DimensionError("condensing_loss: frame and clip ranks disagree", frame.shape, clip.shape)
    if clip_embedding is None:
        clip_embedding = _clip_embedding(clip, params)
    return _frame_losses(frame, clip_embedding, label, params, clip.shape[-4])


def prompt_loss(
    frame: torch.Tensor,
    prompt: torch.Tensor,
    clip: torch.Tensor,
    label,
    params: backbone.ModelParams,
    clip_embedding: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(l_p_f, l_p_ce): the condensing losses evaluated on frame + prompt."""
    if prompt.shape[-3:] != frame.shape[-3:]:
        raise DimensionError("prompt_loss: prompt and frame differ in shape", prompt.shape, frame.shape)
    return condensing_loss(ad.add(frame, prompt), clip, label, params, clip_embedding)


def total_objective(parts, lw: LossWeights) -> torch.Tensor:
    """α·l_c_f + β·l_c_ce + γ·l_p_f + η·l_p_ce."""
    if isinstance(parts, LossBreakdown):
        parts = (parts.l_c_f, parts.l_c_ce, parts.l_p_f, parts.l_p_ce)
    l_c_f, l_c_ce, l_p_f, l_p_ce = (torch.as_tensor(p, dtype=ad.DTYPE) for p in parts)
    for value in (l_c_f, l_c_ce, l_p_f, l_p_ce):
        if not torch.isfinite(value).all():
            raise DomainError("total_objective: loss parts must be finite")
    return lw.alpha * l_c_f + lw.beta * l_c_ce + lw.gamma * l_p_f + lw.eta * l_p_ce


def _terms(state, mix_frames, clip_embedding, labels, params, clip_length, cfg):
    """Per-exemplar loss terms (each an N-vector) for the current state."""
    if cfg.strategy == Strategy.PROMPT_ONLY:
        frame = torch.zeros_like(mix_frames[:, 0])
    else:
        frame = condense_frame(state.weights, mix_frames)
    l_c_f, l_c_ce = _frame_losses(frame, clip_embedding, labels, params, clip_length)
    if not cfg.uses_prompt:
        return frame, (l_c_f, l_c_ce, l_c_f, l_c_ce)
    l_p_f, l_p_ce = _frame_losses(ad.add(frame, state.prompt), clip_embedding, labels, params, clip_length)
    return frame, (l_c_f, l_c_ce, l_p_f, l_p_ce)


def _breakdowns(terms, lw: LossWeights) -> List[LossBreakdown]:
    rows = torch.stack([t.detach() for t in terms], dim=1)
    out = []
    for l_c_f, l_c_ce, l_p_f, l_p_ce in rows.tolist():
        total = lw.alpha * l_c_f + lw.beta * l_c_ce + lw.gamma * l_p_f + lw.eta * l_p_ce
        out.append(LossBreakdown(l_c_f, l_c_ce, l_p_f, l_p_ce, total))
    return out


def quantize(values: torch.Tensor) -> np.ndarray:
    """clamp to [0, 1], scale to 0–255 and round half up."""
    scaled = values.detach().clamp(0.0, 1.0) * 255.0
    return torch.floor(scaled + 0.5).to(torch.uint8).numpy()


def finalize_exemplar(
    state: CondenseState,
    frames: torch.Tensor,
    label: int,
    store_float: bool = False,
    loss_audit: Optional[tuple] = None,
    prompt_key: str = '',
    stage: Optional[int] = None,
) -> CondensedExemplar:
    """
    Bake condensed frame + prompt into the stored pixels of one exemplar.

    ``state`` holds the T logits and the C×H×W prompt of this exemplar.
    """
    with torch.no_grad():
        stored = ad.add(condense_frame(state.weights, frames), state.prompt)
        mix = ad.softmax(state.weights, axis=-1).numpy().astype(np.float32)
    if store_float:
        pixels = stored.clamp(0.0, 1.0).numpy().astype(np.float32)
    else:
        pixels = quantize(stored)
    return CondensedExemplar(
        pixels=pixels,
        label=label,
        weights_audit=mix,
        quantized=not store_float,
        loss_audit=loss_audit,
        prompt_key=prompt_key,
        stage=stage,
    )


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def _initial_logits(cfg: CondenseConfig, count: int, frames: int, seed: int) -> torch.Tensor:
    logits = torch.zeros(count, frames, dtype=ad.DTYPE)
    if cfg.strategy == Strategy.RANDOM:
        gen = torch.Generator().manual_seed(seed)
        picks = torch.randint(frames, (count,), generator=gen)
        logits.fill_(float('-inf'))
        logits[torch.arange(count), picks] = 0.0
    return logits


def _store_all(clips, cfg, stored_frames, stage) -> CondenseResult:
    exemplars = []
    for clip in clips:
        frames = sample_frames(clip.frames, stored_frames)
        if cfg.store_float:
            pixels = frames.astype(np.float32) / np.float32(255.0)
        else:
            pixels = frames.copy()
        exemplars.append(CondensedExemplar(
            pixels=pixels,
            label=clip.label,
            weights_audit=np.zeros(0, dtype=np.float32),
            quantized=not cfg.store_float,
            stage=stage,
        ))
    return CondenseResult(exemplars=exemplars)


def optimize_group(
    clips: Sequence[VideoClip],
    params: backbone.ModelParams,
    cfg: CondenseConfig,
    seed: int = 0,
    shared_prompt_key: Optional[str] = None,
    stored_frames: Optional[int] = None,
    stage: Optional[int] = None,
) -> CondenseResult:
    """
    Condense a group of exemplar videos against a frozen model.

    Each exemplar has its own condensing logits. With ``shared_prompt_key``
    every exemplar in the group is summed with one prompt tensor, otherwise
    each gets its own. The objective is the sum of the per-exemplar objectives, so
    per-exemplar parameters receive exactly their own gradient.

    Strategy ``all`` skips optimisation and stores ``stored_frames`` evenly
    spaced raw frames of each clip, or the whole clip when it is None.
    """
    if not clips:
        return CondenseResult(exemplars=[])
    if cfg.strategy == Strategy.ALL:
        return _store_all(clips, cfg, stored_frames, stage)

    frozen = params.detached()
    originals = torch.stack([backbone.to_tensor(c.frames) for c in clips])
    mix_frames = torch.stack([backbone.to_tensor(sample_frames(c.frames, cfg.frames)) for c in clips])
    labels = torch.tensor([c.label for c in clips], dtype=torch.long)
    clip_embedding = _clip_embedding(originals, frozen)
    clip_length = originals.shape[1]
    count, frames = mix_frames.shape[:2]

    lw = cfg.effective_weights()
    learn_weights = cfg.strategy == Strategy.CONDENSED
    learn_prompt = cfg.uses_prompt
    prompt_shape = (1 if shared_prompt_key else count, *mix_frames.shape[2:])
    state = CondenseState(
        weights=_initial_logits(cfg, count, frames, seed).requires_grad_(learn_weights),
        prompt=torch.zeros(prompt_shape, dtype=ad.DTYPE, requires_grad=learn_prompt),
    )

    groups = []
    if learn_weights:
        groups.append({'params': [state.weights], 'lr': cfg.lr_weights})
    if learn_prompt:
        groups.append({'params': [state.prompt], 'lr': cfg.lr_prompt})
    iterations = cfg.iterations if groups else 0

    _, terms = _terms(state, mix_frames, clip_embedding, labels, frozen, clip_length, cfg)
    initial = _breakdowns(terms, lw)

    if iterations:
        optimizer = torch.optim.SGD(groups)
        stride = max(1, iterations // 10)
        for step in range(iterations):
            if step:
                _, terms = _terms(state, mix_frames, clip_embedding, labels, frozen, clip_length, cfg)
            if not all(torch.isfinite(t).all() for t in terms):
                raise OptimizationError("Condensing objective became non-finite", step)
            objective = total_objective(tuple(t.sum() for t in terms), lw)
            ad.backward(objective)
            optimizer.step()
            state.step = step + 1
            if step % stride == 0:
                logger.debug(f"Condensing step {step}: objective={objective.item():.6f}")

    with torch.no_grad():
        _, terms = _terms(state, mix_frames, clip_embedding, labels, frozen, clip_length, cfg)
    if not all(torch.isfinite(t).all() for t in terms):
        raise OptimizationError("Condensing objective became non-finite", state.step)
    final = _breakdowns(terms, lw)

    initial_total = sum(b.total for b in initial)
    final_total = sum(b.total for b in final)
    if final_total > initial_total:
        logger.warning(
            f"Condensing objective rose from {initial_total:.6f} to {final_total:.6f} "
            f"over {iterations} iterations"
        )

    base = torch.zeros_like(mix_frames) if cfg.strategy == Strategy.PROMPT_ONLY else mix_frames
    exemplars, prompts = [], {}
    for i, clip in enumerate(clips):
        prompt = state.prompt[0 if shared_prompt_key else i].detach()
        if not cfg.uses_prompt:
            key = ''
        elif shared_prompt_key:
            key = shared_prompt_key
        else:
            key = f"instance:{clip.label}:{clip.instance_id}"
        if key:
            prompts.setdefault(key, prompt)
        exemplars.append(finalize_exemplar(
            CondenseState(weights=state.weights[i].detach(), prompt=prompt, step=state.step),
            base[i],
            clip.label,
            store_float=cfg.store_float,
            loss_audit=(initial[i], final[i]),
            prompt_key=key,
            stage=stage,
        ))
    return CondenseResult(exemplars=exemplars, prompts=prompts)


def optimize_exemplar(
    clip: VideoClip,
    label: int,
    params: backbone.ModelParams,
    cfg: CondenseConfig,
    seed: int = 0,
    stored_frames: Optional[int] = None,
) -> CondensedExemplar:
    """Condense a single exemplar video with its own prompt."""
    if clip.label != label:
        clip = replace(clip, label=label)
    return optimize_group([clip], params, cfg, seed=seed, stored_frames=stored_frames).exemplars[0]


def condense_stage(
    clips_by_class: Dict[int, Sequence[VideoClip]],
    params: backbone.ModelParams,
    cfg: CondenseConfig,
    seed: int = 0,
    stage: Optional[int] = None,
    stored_frames: Optional[int] = None,
) -> Dict[int, CondenseResult]:
    """
    Condense the selected exemplars of one stage.

    Prompt sharing follows ``cfg.prompt_mode``: one prompt per class, one for
    the whole task, or one per exemplar.
    """
    results = {}
    if cfg.prompt_mode == PromptMode.TASK and cfg.uses_prompt:
        ordered = [(label, clip) for label in sorted(clips_by_class) for clip in clips_by_class[label]]
        joint = optimize_group(
            [clip for _, clip in ordered], params, cfg, seed=seed,
            shared_prompt_key=f"task:{stage}", stored_frames=stored_frames, stage=stage,
        )
        for label in sorted(clips_by_class):
            picked = [e for e in joint.exemplars if e.label == label]
            results[label] = CondenseResult(exemplars=picked, prompts=dict(joint.prompts))
    else:
        for label in sorted(clips_by_class):
            key = f"class:{label}" if cfg.prompt_mode == PromptMode.CLASS else None
            results[label] = optimize_group(
                clips_by_class[label], params, cfg, seed=seed + label,
                shared_prompt_key=key, stored_frames=stored_frames, stage=stage,
            )

    for label, result in results.items():
        audits = [e.loss_audit for e in result.exemplars if e.loss_audit]
        if audits:
            before = np.mean([a[0].l_p_f for a in audits])
            after = np.mean([a[1].l_p_f for a in audits])
            logger.info(f"Class {label}: condensed {len(audits)} exemplars, l_p_f {before:.5f} -> {after:.5f}")
    return results
