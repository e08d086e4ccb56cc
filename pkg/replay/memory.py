"""
Exemplar memory bank.

Herding selection of representative videos, storage of condensed exemplars,
memory-budget accounting and the versioned ``FMEX`` binary container.

FMEX layout (little-endian):
    magic b'FMEX' | version u16 | section count u16
    per section: kind u8 (1=exemplar, 2=params) | payload length u64 | payload

    exemplar payload:
        class id u32 | C u8 | H u16 | W u16 | quantized u8 | T u16
        | T × f32 weights_audit | pixels (uint8, or f32 when not quantized)
    The number of stored frames follows from the payload length.

    params payload:
        shift_fold f64 | tensor count u8
        per tensor: name length u8 | name utf-8 | ndim u8 | ndim × u32 dims | f64 data
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import backbone
from .exceptions import ContractError, DomainError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b'FMEX'
VERSION = 1
KIND_EXEMPLAR = 1
KIND_PARAMS = 2

_HEADER = struct.Struct('<4sHH')
_SECTION = struct.Struct('<BQ')
_EXEMPLAR = struct.Struct('<IBHHBH')

# Standard budget grid as (frames per video, videos per class)
DEFAULT_BUDGET_GRID = [(1, 1), (1, 2), (1, 5), (1, 8), (1, 16), (1, 40), (8, 1), (8, 2), (8, 5)]


@dataclass
class MemoryConfig:
    # None: one frame when condensing, the whole clip under strategy "all"
    frames_per_exemplar: Optional[int] = None
    videos_per_class: int = 5
    store_float: bool = False
    budget_grid: List[Tuple[int, int]] = field(default_factory=lambda: list(DEFAULT_BUDGET_GRID))

    def __post_init__(self):
        if (self.frames_per_exemplar is not None and self.frames_per_exemplar < 1) or self.videos_per_class < 1:
            raise DomainError("frames_per_exemplar and videos_per_class must be >= 1")
        self.budget_grid = [tuple(row) for row in self.budget_grid]

    def stored_frames(self, store_all: bool, clip_length: int) -> int:
        """Frames kept per exemplar video."""
        if self.frames_per_exemplar is not None:
            return self.frames_per_exemplar
        return clip_length if store_all else 1


# ---------------------------------------------------------------------------
# Exemplars and the bank
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CondensedExemplar:
    """
    One stored exemplar: a condensed frame with its prompt baked in (C×H×W),
    or a full clip (F×C×H×W) for the store-everything baseline.
    """

    pixels: np.ndarray
    label: int
    weights_audit: np.ndarray
    quantized: bool = True
    loss_audit: Optional[tuple] = None
    prompt_key: str = ''
    stage: Optional[int] = None

    def __post_init__(self):
        if self.label < 0:
            raise DomainError(f"Exemplar label must be non-negative, got {self.label}")
        if self.pixels.ndim not in (3, 4):
            raise DomainError(f"Exemplar pixels must be C×H×W or F×C×H×W, got {self.pixels.shape}")
        expected = np.uint8 if self.quantized else np.float32
        if self.pixels.dtype != expected:
            raise DomainError(f"Exemplar pixels must be {np.dtype(expected).name}, got {self.pixels.dtype}")
        pixels = np.ascontiguousarray(self.pixels)
        pixels.setflags(write=False)
        weights = np.ascontiguousarray(self.weights_audit, dtype=np.float32)
        weights.setflags(write=False)
        object.__setattr__(self, 'pixels', pixels)
        object.__setattr__(self, 'weights_audit', weights)

    def __eq__(self, other):
        if not isinstance(other, CondensedExemplar):
            return NotImplemented
        return (
            self.label == other.label
            and self.quantized == other.quantized
            and self.pixels.shape == other.pixels.shape
            and self.pixels.dtype == other.pixels.dtype
            and self.pixels.tobytes() == other.pixels.tobytes()
            and self.weights_audit.tobytes() == other.weights_audit.tobytes()
        )

    __hash__ = None

    @property
    def frames(self) -> int:
        return 1 if self.pixels.ndim == 3 else self.pixels.shape[0]

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape[-3:])

    @property
    def budget_bytes(self) -> int:
        """Bytes this exemplar costs under the one-byte-per-value accounting."""
        channels, height, width = self.frame_shape
        return memory_bytes(self.frames, height, width, channels)[0]

    def digest(self) -> str:
        return hashlib.sha256(self.pixels.tobytes()).hexdigest()

    def as_clip(self, frames: int) -> torch.Tensor:
        """Model input: a single frame is replicated ``frames`` times."""
        pixels = backbone.to_tensor(self.pixels)
        if pixels.dim() == 3:
            return backbone.replicate(pixels, frames)
        return pixels


@dataclass
class MemoryBank:
    """
    Per-class exemplar lists; append-only per stage.

    Equality compares stored classes and exemplars only, not the cap or
    provenance, so a bank equals itself after an FMEX round trip.
    """

    videos_per_class: Optional[int] = None
    frames_per_exemplar: int = 1
    exemplars: Dict[int, List[CondensedExemplar]] = field(default_factory=dict)
    provenance: Dict[int, int] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return self.classes() == other.classes() and all(
            self.exemplars[c] == other.exemplars[c] for c in self.classes()
        )

    def __len__(self):
        return sum(len(items) for items in self.exemplars.values())

    def classes(self) -> List[int]:
        return sorted(self.exemplars)

    def insert(self, label: int, exemplars: Sequence[CondensedExemplar], stage: Optional[int] = None):
        """Store the exemplars of one class; a stored class is frozen."""
        if label in self.exemplars:
            raise ContractError(f"Class {label} is already stored; exemplars are frozen")
        if self.videos_per_class is not None and len(exemplars) > self.videos_per_class:
            raise DomainError(
                f"Class {label}: {len(exemplars)} exemplars exceed the cap of {self.videos_per_class}"
            )
        for exemplar in exemplars:
            if exemplar.label != label:
                raise DomainError(f"Exemplar labelled {exemplar.label} inserted under class {label}")
        self.exemplars[label] = list(exemplars)
        if stage is not None:
            self.provenance[label] = stage
        logger.debug(f"Stored {len(exemplars)} exemplars for class {label}")

    def exemplars_for(self, label: int) -> List[CondensedExemplar]:
        return list(self.exemplars.get(label, []))

    def all_exemplars(self) -> List[CondensedExemplar]:
        return [e for c in self.classes() for e in self.exemplars[c]]

    def total_bytes(self) -> int:
        return sum(e.budget_bytes for e in self.all_exemplars())

    def memory_mb(self) -> float:
        return self.total_bytes() / 1e6

    def digests(self) -> Dict[int, List[str]]:
        return {c: [e.digest() for e in self.exemplars[c]] for c in self.classes()}

    def replay_batch(self, indices: Sequence[int], frames: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Clips and labels for the given positions of ``all_exemplars()``."""
        items = self.all_exemplars()
        clips = torch.stack([items[i].as_clip(frames) for i in indices])
        labels = torch.tensor([items[i].label for i in indices], dtype=torch.long)
        return clips, labels


# ---------------------------------------------------------------------------
# Selection and accounting
# ---------------------------------------------------------------------------

def herding_select(clip_features, m: int) -> List[int]:
    """
    Greedy herding: at step j pick the unchosen embedding x_i minimising
    ‖μ − (S + x_i)/j‖, where S is the sum of chosen embeddings and μ the mean
    of all. Ties go to the lowest index. Returns indices in selection order.
    """
    features = np.asarray(clip_features, dtype=np.float64)
    if features.ndim != 2:
        raise DomainError(f"herding_select expects an n×d array, got shape {features.shape}")
    n = features.shape[0]
    if m > n:
        raise DomainError(f"herding_select: cannot choose {m} of {n} embeddings")
    if m < 0:
        raise DomainError(f"herding_select: m must be non-negative, got {m}")
    if not np.isfinite(features).all():
        raise DomainError("herding_select: embeddings must be finite")

    mu = features.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    order = []
    for j in range(1, m + 1):
        distances = np.linalg.norm(mu - (running + features) / j, axis=1)
        distances[~available] = np.inf
        choice = int(np.argmin(distances))
        order.append(choice)
        available[choice] = False
        running += features[choice]
    return order


def format_megabytes(megabytes: float) -> float:
    """Two significant figures below 10 MB, two decimals from 10 MB up."""
    if megabytes < 10:
        return float(f"{megabytes:.2g}")
    return round(megabytes, 2)


def memory_bytes(frames: int, height: int, width: int, channels: int) -> Tuple[int, float]:
    """
    Raw frame storage: one byte per channel value.

    Returns:
        (bytes, megabytes) with megabytes = bytes / 10^6 as ``format_megabytes`` prints it
    """
    for name, value in (('frames', frames), ('height', height), ('width', width), ('channels', channels)):
        if value < 1:
            raise DomainError(f"memory_bytes: {name} must be positive, got {value}")
    total = frames * channels * height * width
    return total, format_megabytes(total / 1e6)


def budget_table(
    grid: Iterable[Tuple[int, int]],
    height: int,
    width: int,
    channels: int,
) -> List[Dict]:
    """Per-class budget rows ``frames,videos,bytes,mb`` for (frames per video, videos) pairs."""
    rows = []
    for frames_per_video, videos in grid:
        total_frames = frames_per_video * videos
        size, mb = memory_bytes(total_frames, height, width, channels)
        rows.append({'frames': total_frames, 'videos': videos, 'bytes': size, 'mb': mb})
    return rows


def class_means(
    bank: MemoryBank,
    params: backbone.ModelParams,
    clip_length: int,
    classes: Optional[Sequence[int]] = None,
) -> Dict[int, torch.Tensor]:
    """Mean exemplar embedding per class, the prototypes of NME classification."""
    classes = bank.classes() if classes is None else list(classes)
    means = {}
    with torch.no_grad():
        for label in classes:
            items = bank.exemplars.get(label)
            if not items:
                raise DomainError(f"class_means: class {label} has no exemplars")
            clips = torch.stack([e.as_clip(clip_length) for e in items])
            embeddings = backbone.extract_features(clips, params).embedding
            means[label] = embeddings.mean(dim=0)
    return means


# ---------------------------------------------------------------------------
# FMEX container
# ---------------------------------------------------------------------------

def _encode_exemplar(exemplar: CondensedExemplar) -> bytes:
    channels, height, width = exemplar.frame_shape
    weights = exemplar.weights_audit.astype('<f4')
    pixels = exemplar.pixels if exemplar.quantized else exemplar.pixels.astype('<f4')
    head = _EXEMPLAR.pack(exemplar.label, channels, height, width, int(exemplar.quantized), weights.size)
    return head + weights.tobytes() + pixels.tobytes()


def _encode_params(params: backbone.ModelParams) -> bytes:
    tensors = params.tensors()
    out = [struct.pack('<dB', params.shift_fold, len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode('utf-8')
        data = value.detach().cpu().numpy().astype('<f8')
        out.append(struct.pack('<B', len(encoded)) + encoded)
        out.append(struct.pack(f'<B{data.ndim}I', data.ndim, *data.shape))
        out.append(data.tobytes())
    return b''.join(out)


def write_container(path, exemplars: Sequence[CondensedExemplar] = (), params: Optional[backbone.ModelParams] = None):
    sections = [(KIND_EXEMPLAR, _encode_exemplar(e)) for e in exemplars]
    if params is not None:
        sections.append((KIND_PARAMS, _encode_params(params)))
    if len(sections) > 0xFFFF:
        raise DomainError(f"FMEX holds at most 65535 sections, got {len(sections)}")

    blob = [_HEADER.pack(MAGIC, VERSION, len(sections))]
    for kind, payload in sections:
        blob.append(_SECTION.pack(kind, len(payload)))
        blob.append(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b''.join(blob))
    logger.info(f"Wrote {len(sections)} sections to {path}")


class _Reader:
    def __init__(self, data: bytes, offset: int = 0, end: Optional[int] = None):
        self.data = data
        self.offset = offset
        self.end = len(data) if end is None else end

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > self.end:
            raise FormatError(f"Truncated {what}: need {size} bytes, {self.end - self.offset} left", self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


def _decode_exemplar(reader: _Reader) -> CondensedExemplar:
    start = reader.offset
    label, channels, height, width, quantized, steps = reader.unpack(_EXEMPLAR, 'exemplar header')
    if quantized not in (0, 1):
        raise FormatError(f"Quantized flag must be 0 or 1, got {quantized}", start + 9)
    if min(channels, height, width) == 0:
        raise FormatError("Exemplar frame shape has a zero extent", start + 4)
    weights = np.frombuffer(reader.take(4 * steps, 'weights audit'), dtype='<f4').astype(np.float32)

    value_size = 1 if quantized else 4
    frame_size = channels * height * width * value_size
    remaining = reader.end - reader.offset
    if remaining == 0 or remaining % frame_size:
        raise FormatError(f"Pixel block of {remaining} bytes is not a whole number of frames", reader.offset)
    frames = remaining // frame_size
    raw = reader.take(remaining, 'pixels')
    if quantized:
        pixels = np.frombuffer(raw, dtype=np.uint8)
    else:
        pixels = np.frombuffer(raw, dtype='<f4').astype(np.float32)
    shape = (channels, height, width) if frames == 1 and steps else (frames, channels, height, width)
    return CondensedExemplar(
        pixels=pixels.reshape(shape).copy(),
        label=label,
        weights_audit=weights,
        quantized=bool(quantized),
    )


def _decode_params(reader: _Reader) -> backbone.ModelParams:
    shift_fold, count = reader.unpack(struct.Struct('<dB'), 'params header')
    tensors = {}
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack(struct.Struct('<B'), 'tensor name length')
        name = reader.take(name_len, 'tensor name').decode('utf-8', errors='replace')
        if name not in backbone.ModelParams.TENSOR_NAMES:
            raise FormatError(f"Unknown parameter tensor {name!r}", start)
        (ndim,) = reader.unpack(struct.Struct('<B'), 'tensor rank')
        dims = reader.unpack(struct.Struct(f'<{ndim}I'), 'tensor dims')
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(reader.take(8 * size, 'tensor data'), dtype='<f8').reshape(dims)
        tensors[name] = torch.from_numpy(data.astype(np.float64))
    missing = set(backbone.ModelParams.TENSOR_NAMES) - set(tensors)
    if missing:
        raise FormatError(f"Parameter section lacks {sorted(missing)}", reader.offset)
    if reader.offset != reader.end:
        raise FormatError("Trailing bytes in parameter section", reader.offset)
    return backbone.ModelParams(shift_fold=shift_fold, **tensors)


def read_container(path) -> Tuple[List[CondensedExemplar], Optional[backbone.ModelParams]]:
    data = Path(path).read_bytes()
    reader = _Reader(data)
    magic, version, count = reader.unpack(_HEADER, 'header')
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"Unsupported version {version}", 4)

    exemplars, params = [], None
    for _ in range(count):
        kind_offset = reader.offset
        kind, length = reader.unpack(_SECTION, 'section header')
        if reader.offset + length > len(data):
            raise FormatError(f"Section payload of {length} bytes runs past end of file", reader.offset)
        section = _Reader(data, reader.offset, reader.offset + length)
        if kind == KIND_EXEMPLAR:
            exemplars.append(_decode_exemplar(section))
        elif kind == KIND_PARAMS:
            params = _decode_params(section)
        else:
            raise FormatError(f"Unknown section kind {kind}", kind_offset)
        reader.offset += length
    if reader.offset != len(data):
        raise FormatError("Trailing bytes after last section", reader.offset)
    return exemplars, params


def store(bank: MemoryBank, path, params: Optional[backbone.ModelParams] = None):
    """
    Write the bank's exemplars (and optionally the model) as an FMEX file.

    The layout has no field for the bank's ``videos_per_class`` cap, its
    per-class ``provenance`` or the exemplars' ``stage``/``prompt_key``/
    ``loss_audit``; those do not survive a round trip.
    """
    write_container(path, bank.all_exemplars(), params)


def load(
    path,
    videos_per_class: Optional[int] = None,
    provenance: Optional[Dict[int, int]] = None,
) -> MemoryBank:
    """
    Rebuild a bank from an FMEX file. Pixels, labels, quantization and the
    weight audit come from the file; the cap and provenance are not stored
    and are taken from the arguments.
    """
    exemplars, _ = read_container(path)
    grouped: Dict[int, List[CondensedExemplar]] = {}
    for exemplar in exemplars:
        grouped.setdefault(exemplar.label, []).append(exemplar)
    provenance = provenance or {}
    frames = max((e.frames for e in exemplars), default=1)
    bank = MemoryBank(videos_per_class=videos_per_class, frames_per_exemplar=frames)
    for label in sorted(grouped):
        bank.insert(label, grouped[label], stage=provenance.get(label))
    return bank


def store_params(params: backbone.ModelParams, path):
    write_container(path, (), params)


def load_params(path) -> backbone.ModelParams:
    _, params = read_container(path)
    if params is None:
        raise FormatError("Container has no parameter section", 8)
    return params
