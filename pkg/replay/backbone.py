"""
Tiny temporal-shift CNN used as the feature extractor, plus the classification
head that grows by one block of rows per stage.

Architecture (per frame, frames folded into the batch axis):
    conv1 3×3 (C→8) → ReLU → temporal shift        → stage map 0
    conv2 3×3 stride 2 (8→16) → ReLU               → stage map 1
    spatial global average pool → temporal mean    → 16-dim embedding
    head: linear 16 → num_classes
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from . import autodiff as ad
from .exceptions import ContractError, DimensionError, DomainError

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 16
CONV1_CHANNELS = 8
DEFAULT_SHIFT_FOLD = 1 / 8
HEAD_INIT_STD = 0.01


@dataclass
class ModelParams:
    """Conv-stage and classifier-head parameters of the replay model."""

    conv1_weight: torch.Tensor
    conv1_bias: torch.Tensor
    conv2_weight: torch.Tensor
    conv2_bias: torch.Tensor
    head_weight: torch.Tensor
    head_bias: torch.Tensor
    shift_fold: float = DEFAULT_SHIFT_FOLD

    TENSOR_NAMES = (
        'conv1_weight', 'conv1_bias', 'conv2_weight', 'conv2_bias', 'head_weight', 'head_bias',
    )

    def __post_init__(self):
        if not 0.0 <= self.shift_fold <= 0.5:
            raise DomainError(f"shift_fold must lie in [0, 0.5], got {self.shift_fold}")
        if self.head_weight.shape[0] != self.head_bias.shape[0]:
            raise DimensionError("head weight and bias disagree on width", self.head_weight.shape, self.head_bias.shape)

    @classmethod
    def initialize(
        cls,
        channels: int,
        num_classes: int = 0,
        seed: int = 0,
        shift_fold: float = DEFAULT_SHIFT_FOLD,
    ) -> 'ModelParams':
        """He-normal conv filters, zero biases, σ=0.01 head rows."""
        gen = torch.Generator().manual_seed(seed)

        def he(*shape):
            fan_in = shape[1] * shape[2] * shape[3]
            return torch.randn(*shape, generator=gen, dtype=ad.DTYPE) * math.sqrt(2.0 / fan_in)

        params = cls(
            conv1_weight=he(CONV1_CHANNELS, channels, 3, 3),
            conv1_bias=torch.zeros(CONV1_CHANNELS, dtype=ad.DTYPE),
            conv2_weight=he(EMBEDDING_DIM, CONV1_CHANNELS, 3, 3),
            conv2_bias=torch.zeros(EMBEDDING_DIM, dtype=ad.DTYPE),
            head_weight=torch.randn(num_classes, EMBEDDING_DIM, generator=gen, dtype=ad.DTYPE) * HEAD_INIT_STD,
            head_bias=torch.zeros(num_classes, dtype=ad.DTYPE),
            shift_fold=shift_fold,
        )
        return params.requires_grad_(True)

    @property
    def channels(self) -> int:
        return self.conv1_weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in self.TENSOR_NAMES}

    def parameters(self) -> List[torch.Tensor]:
        return list(self.tensors().values())

    def requires_grad_(self, flag: bool = True) -> 'ModelParams':
        for tensor in self.parameters():
            tensor.requires_grad_(flag)
        return self

    def detached(self) -> 'ModelParams':
        """Independent copy with no gradient tracking."""
        copies = {name: t.detach().clone() for name, t in self.tensors().items()}
        return ModelParams(shift_fold=self.shift_fold, **copies)

    def equals(self, other: 'ModelParams') -> bool:
        return self.shift_fold == other.shift_fold and all(
            a.shape == b.shape and torch.equal(a, b)
            for a, b in zip(self.parameters(), other.parameters())
        )


@dataclass(frozen=True)
class ModelSnapshot:
    """Frozen copy of the model at the end of the previous stage."""

    params: ModelParams
    stage: Optional[int] = None


@dataclass
class FeatureBundle:
    embedding: torch.Tensor
    stage_maps: List[torch.Tensor] = field(default_factory=list)


def to_tensor(pixels) -> torch.Tensor:
    """Pixels as float64: uint8 is mapped to [0, 1], floats pass through."""
    array = np.asarray(pixels)
    if array.dtype == np.uint8:
        return torch.from_numpy(array.astype(np.float64) / 255.0)
    return torch.from_numpy(array.astype(np.float64))


def replicate(frame: torch.Tensor, frames: int) -> torch.Tensor:
    """Repeat a C×H×W frame (or batch of frames) along a new temporal axis."""
    if frame.dim() < 3:
        raise DimensionError("replicate: frame must be C×H×W", frame.shape)
    if frames < 1:
        raise DomainError(f"replicate: need at least one frame, got {frames}")
    expanded = frame.unsqueeze(-4)
    return expanded.expand(*frame.shape[:-3], frames, *frame.shape[-3:])


def temporal_shift(x: torch.Tensor, fold: float) -> torch.Tensor:
    """
    Shift channels along time on a (…)×T×C×H×W block.

    The first floor(fold·C) channels take the previous frame's values, the
    next floor(fold·C) take the following frame's values; vacated slots are
    zero and the remaining channels pass through.
    """
    if x.dim() < 4:
        raise DimensionError("temporal_shift: input must be T×C×H×W", x.shape)
    n = int(math.floor(fold * x.shape[-3]))
    if n == 0:
        return x
    zeros = torch.zeros_like(x[..., :1, :n, :, :])
    forward = torch.cat([zeros, x[..., :-1, :n, :, :]], dim=-4)
    backward = torch.cat([x[..., 1:, n:2 * n, :, :], zeros], dim=-4)
    return torch.cat([forward, backward, x[..., 2 * n:, :, :]], dim=-3)


def extract_features(clip: torch.Tensor, params: ModelParams) -> FeatureBundle:
    """
    Clip embedding and intermediate maps for a T×C×H×W clip or a B×T×C×H×W batch.

    The embedding is the temporal mean of spatially pooled conv2 outputs.
    """
    if clip.dim() not in (4, 5):
        raise DimensionError("extract_features: clip must be T×C×H×W or B×T×C×H×W", clip.shape)
    if clip.shape[-3] != params.channels:
        raise DimensionError("extract_features: channel count differs from conv1", clip.shape, params.conv1_weight.shape)

    batched = clip.dim() == 5
    x = clip if batched else clip.unsqueeze(0)
    batch, frames = x.shape[:2]

    h = ad.relu(ad.conv2d(x.reshape(batch * frames, *x.shape[2:]), params.conv1_weight, params.conv1_bias, 1, 1))
    stage0 = temporal_shift(h.reshape(batch, frames, *h.shape[1:]), params.shift_fold)
    h = ad.relu(ad.conv2d(stage0.reshape(batch * frames, *stage0.shape[2:]), params.conv2_weight, params.conv2_bias, 2, 1))
    stage1 = h.reshape(batch, frames, *h.shape[1:])
    embedding = ad.global_avg_pool(stage1).mean(dim=1)

    if not batched:
        return FeatureBundle(embedding=embedding[0], stage_maps=[stage0[0], stage1[0]])
    return FeatureBundle(embedding=embedding, stage_maps=[stage0, stage1])


def classify(bundle: FeatureBundle, params: ModelParams) -> torch.Tensor:
    if params.num_classes < 1:
        raise ContractError("classify: the head has no classes yet")
    return ad.linear(bundle.embedding, params.head_weight, params.head_bias)


def forward(clip: torch.Tensor, params: ModelParams):
    """Features and logits in one pass."""
    bundle = extract_features(clip, params)
    return bundle, classify(bundle, params)


def extend_head(params: ModelParams, n_new: int, seed: int = 0) -> ModelParams:
    """
    Grow the head by ``n_new`` classes.

    Existing rows are copied bit-for-bit; new weight rows are drawn from a
    seeded N(0, 0.01²) and new biases start at zero. Returns a new parameter set
    sharing the conv tensors of ``params``.
    """
    if n_new < 1:
        raise DomainError(f"extend_head: n_new must be >= 1, got {n_new}")
    gen = torch.Generator().manual_seed(seed)
    new_rows = torch.randn(n_new, EMBEDDING_DIM, generator=gen, dtype=ad.DTYPE) * HEAD_INIT_STD
    head_weight = torch.cat([params.head_weight.detach(), new_rows]).requires_grad_(True)
    head_bias = torch.cat([params.head_bias.detach(), torch.zeros(n_new, dtype=ad.DTYPE)]).requires_grad_(True)
    logger.debug(f"Head extended {params.num_classes} -> {params.num_classes + n_new}")
    return ModelParams(
        conv1_weight=params.conv1_weight,
        conv1_bias=params.conv1_bias,
        conv2_weight=params.conv2_weight,
        conv2_bias=params.conv2_bias,
        head_weight=head_weight,
        head_bias=head_bias,
        shift_fold=params.shift_fold,
    )


def snapshot(params: ModelParams, stage: Optional[int] = None) -> ModelSnapshot:
    return ModelSnapshot(params=params.detached(), stage=stage)
