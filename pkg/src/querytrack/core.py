"""Domain data model, sequence serialization, and run configuration.

A sequence lives on disk as::

    <seq_dir>/
        frames/00000.png ... frames/NNNNN.png     (RGB, lossless)
        masks/<object_id>/00000.png ...           (1-bit, lossless)
        instructions.json                         (list of instruction records)

Pixels are real-valued in [0, 1] in memory and 8-bit on disk, so a frame
round-trips exactly iff its values sit on the 1/255 grid (the synthetic
generator guarantees this). Masks are boolean and always round-trip.
Object ids are 1-based; 0 is reserved for background.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image


class CorruptSequenceError(ValueError):
    """A sequence directory violates the documented layout."""


class InstructionFormatError(ValueError):
    """instructions.json is unreadable or malformed."""


class ConfigError(ValueError):
    """A run-config file contains unknown keys or invalid values."""


@dataclass(frozen=True)
class Frame:
    """One video frame: H x W x 3 pixels in [0, 1] plus its index."""

    pixels: np.ndarray
    index: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame pixels must be HxWx3, got {px.shape}")
        if px.shape[0] < 16 or px.shape[1] < 16:
            raise ValueError(f"frame must be at least 16x16, got {px.shape[:2]}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.index < 0:
            raise ValueError("frame index must be non-negative")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and self.index == other.index
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class BinaryMask:
    """Boolean H x W grid aligned with one frame."""

    grid: np.ndarray
    frame_index: int

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.dtype != np.bool_:
            g = g.astype(bool)
        if g.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {g.shape}")
        object.__setattr__(self, "grid", g)

    @property
    def area(self) -> int:
        return int(self.grid.sum())

    def __eq__(self, other):
        return (
            isinstance(other, BinaryMask)
            and self.frame_index == other.frame_index
            and np.array_equal(self.grid, other.grid)
        )


INSTRUCTION_KINDS = ("explicit", "implicit")


@dataclass(frozen=True)
class InstructionRecord:
    """One seed instruction plus its five rephrasings, all naming one target."""

    seed_text: str
    rephrasings: tuple[str, ...]
    kind: str
    target_object_id: int

    def __post_init__(self):
        object.__setattr__(self, "rephrasings", tuple(self.rephrasings))
        if len(self.rephrasings) != 5:
            raise ValueError(f"expected exactly 5 rephrasings, got {len(self.rephrasings)}")
        if self.kind not in INSTRUCTION_KINDS:
            raise ValueError(f"kind must be one of {INSTRUCTION_KINDS}, got {self.kind!r}")
        if self.target_object_id < 1:
            raise ValueError("target_object_id must be a positive (1-based) object id")

    @property
    def all_texts(self) -> tuple[str, ...]:
        return (self.seed_text, *self.rephrasings)


@dataclass(frozen=True)
class AnnotatedSequence:
    """Frames plus per-object ground-truth masks plus instruction records."""

    frames: tuple[Frame, ...]
    gt_masks: dict[int, tuple[BinaryMask, ...]]
    instructions: tuple[InstructionRecord, ...]
    sequence_id: str

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "instructions", tuple(self.instructions))
        object.__setattr__(self, "gt_masks", {k: tuple(v) for k, v in self.gt_masks.items()})
        if len(self.frames) < 2:
            raise ValueError("a sequence needs at least 2 frames")
        for oid, masks in self.gt_masks.items():
            if oid < 1:
                raise ValueError(f"object id must be >= 1, got {oid}")
            if len(masks) != len(self.frames):
                raise ValueError(
                    f"object {oid} has {len(masks)} masks for {len(self.frames)} frames"
                )
        for rec in self.instructions:
            if rec.target_object_id not in self.gt_masks:
                raise ValueError(
                    f"instruction targets unknown object {rec.target_object_id}"
                )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames[0].pixels.shape[:2]

    def __eq__(self, other):
        return (
            isinstance(other, AnnotatedSequence)
            and self.sequence_id == other.sequence_id
            and self.frames == other.frames
            and self.instructions == other.instructions
            and set(self.gt_masks) == set(other.gt_masks)
            and all(self.gt_masks[k] == other.gt_masks[k] for k in self.gt_masks)
        )


# -- run configuration ---------------------------------------------------------

_UPSCALE_STAGES = {1: (1, 1), 2: (2, 1), 4: (2, 2), 8: (4, 2)}


@dataclass
class RunConfig:
    """Every knob of the system, with desk-scale defaults.

    Loss weights and the rethink factor follow the reference protocol
    (text/mask/purport coefficients 1/1/1, BCE 2.0, DICE 0.5, rethink
    threshold at 0.5x the initial purport score).
    """

    brain_dim: int = 128
    brain_blocks: int = 2
    brain_heads: int = 4
    decoder_dim: int = 64
    decoder_blocks: int = 2
    decoder_heads: int = 4
    encoder_blocks: int = 2
    encoder_heads: int = 4
    patch_size: int = 8
    image_token_count: int = 16
    max_seq_len: int = 96
    max_answer_len: int = 16
    lora_rank: int = 4
    lora_alpha: float = 8.0
    rethink_factor: float = 0.5
    rethink_cooldown: int = 2
    rethink_reanchor: bool = False
    lambda_text: float = 1.0
    lambda_mask: float = 1.0
    lambda_po: float = 1.0
    bce_weight: float = 2.0
    dice_weight: float = 0.5
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    brain_pretrain_steps: int = 1200
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive_ints = (
            "brain_dim", "brain_blocks", "brain_heads", "decoder_dim",
            "decoder_blocks", "decoder_heads", "encoder_blocks", "encoder_heads",
            "patch_size", "image_token_count", "max_seq_len", "max_answer_len",
            "lora_rank", "batch_size",
        )
        for key in positive_ints:
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        if not 0.0 < self.rethink_factor <= 1.0:
            raise ConfigError(f"rethink_factor must lie in (0, 1], got {self.rethink_factor}")
        if self.rethink_cooldown < 0:
            raise ConfigError(f"rethink_cooldown must be >= 0, got {self.rethink_cooldown}")
        if not isinstance(self.brain_pretrain_steps, int) \
                or isinstance(self.brain_pretrain_steps, bool) \
                or self.brain_pretrain_steps < 0:
            raise ConfigError("brain_pretrain_steps must be a non-negative integer, "
                              f"got {self.brain_pretrain_steps!r}")
        for key in ("lora_alpha", "lambda_text", "lambda_mask", "lambda_po",
                    "bce_weight", "dice_weight", "weight_decay"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.brain_dim % self.brain_heads:
            raise ConfigError("brain_heads must divide brain_dim")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_heads must divide decoder_dim")
        if self.decoder_dim % self.encoder_heads:
            raise ConfigError("encoder_heads must divide decoder_dim")
        if self.patch_size not in _UPSCALE_STAGES:
            raise ConfigError(f"patch_size must be one of {sorted(_UPSCALE_STAGES)}")
        root = int(round(self.image_token_count ** 0.5))
        if root * root != self.image_token_count:
            raise ConfigError("image_token_count must be a perfect square")

    @property
    def upscale_stages(self) -> tuple[int, int]:
        """Two pixel-shuffle factors whose product equals patch_size."""
        return _UPSCALE_STAGES[self.patch_size]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config(path) -> RunConfig:
    """Read a JSON config; missing keys take defaults, unknown keys are rejected."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: top level must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {unknown}")
    try:
        return RunConfig(**raw)
    except ConfigError:
        raise
    except TypeError as e:
        raise ConfigError(f"config {path}: {e}") from e


# -- sequence I/O ----------------------------------------------------------------

_FRAME_RE = re.compile(r"^(\d{5})\.png$")


def _write_png_rgb(path: Path, pixels: np.ndarray) -> None:
    arr = np.round(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _read_png_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _write_png_mask(path: Path, grid: np.ndarray) -> None:
    Image.fromarray(np.asarray(grid, dtype=bool)).save(path, format="PNG", bits=1)


def _read_png_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


def save_sequence(seq: AnnotatedSequence, path) -> None:
    """Write the documented directory layout; byte-deterministic per input."""
    root = Path(path)
    try:
        (root / "frames").mkdir(parents=True, exist_ok=True)
        for fr in seq.frames:
            _write_png_rgb(root / "frames" / f"{fr.index:05d}.png", fr.pixels)
        for oid in sorted(seq.gt_masks):
            mdir = root / "masks" / str(oid)
            mdir.mkdir(parents=True, exist_ok=True)
            for m in seq.gt_masks[oid]:
                _write_png_mask(mdir / f"{m.frame_index:05d}.png", m.grid)
        records = [
            {
                "seed": r.seed_text,
                "rephrasings": list(r.rephrasings),
                "kind": r.kind,
                "target_object_id": r.target_object_id,
            }
            for r in seq.instructions
        ]
        text = json.dumps(records, indent=2, sort_keys=True) + "\n"
        (root / "instructions.json").write_text(text)
    except OSError as e:
        raise OSError(f"failed writing sequence to {root}: {e}") from e


def _load_instructions(path: Path) -> tuple[InstructionRecord, ...]:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InstructionFormatError(
            f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(raw, list):
        raise InstructionFormatError(f"{path}: expected a JSON list of records")
    records = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise InstructionFormatError(f"{path}: record {i} is not an object")
        missing = {"seed", "rephrasings", "kind", "target_object_id"} - set(item)
        if missing:
            raise InstructionFormatError(f"{path}: record {i} missing keys {sorted(missing)}")
        try:
            records.append(
                InstructionRecord(
                    seed_text=item["seed"],
                    rephrasings=tuple(item["rephrasings"]),
                    kind=item["kind"],
                    target_object_id=item["target_object_id"],
                )
            )
        except (ValueError, TypeError) as e:
            raise InstructionFormatError(f"{path}: record {i}: {e}") from e
    return tuple(records)


def load_sequence(path) -> AnnotatedSequence:
    """Load and fully validate one sequence directory."""
    root = Path(path)
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise CorruptSequenceError(f"{root}: missing frames/ directory")

    indexed = {}
    for p in frames_dir.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indexed[int(m.group(1))] = p
    if not indexed:
        raise CorruptSequenceError(f"{root}: frames/ contains no %05d.png files")
    n = max(indexed) + 1
    for i in range(n):
        if i not in indexed:
            raise CorruptSequenceError(f"{root}: missing frame index {i}")
    frames = tuple(Frame(pixels=_read_png_rgb(indexed[i]), index=i) for i in range(n))

    masks_dir = root / "masks"
    if not masks_dir.is_dir():
        raise CorruptSequenceError(f"{root}: missing masks/ directory")
    gt_masks: dict[int, tuple[BinaryMask, ...]] = {}
    for od in sorted(masks_dir.iterdir(), key=lambda p: p.name):
        if not od.is_dir() or not od.name.isdigit():
            raise CorruptSequenceError(f"{root}: unexpected entry {od.name} in masks/")
        oid = int(od.name)
        seq_masks = []
        for i in range(n):
            mp = od / f"{i:05d}.png"
            if not mp.is_file():
                raise CorruptSequenceError(
                    f"{root}: object {oid} is missing the mask for frame index {i}"
                )
            grid = _read_png_mask(mp)
            if grid.shape != frames[i].pixels.shape[:2]:
                raise CorruptSequenceError(
                    f"{root}: object {oid} frame {i}: mask shape {grid.shape} "
                    f"!= frame shape {frames[i].pixels.shape[:2]}"
                )
            seq_masks.append(BinaryMask(grid=grid, frame_index=i))
        extra = sorted(p.name for p in od.iterdir())
        if len(extra) != n:
            raise CorruptSequenceError(
                f"{root}: object {oid} has {len(extra)} mask files for {n} frames"
            )
        gt_masks[oid] = tuple(seq_masks)
    if not gt_masks:
        raise CorruptSequenceError(f"{root}: masks/ contains no object directories")

    instr_path = root / "instructions.json"
    if not instr_path.is_file():
        raise CorruptSequenceError(f"{root}: missing instructions.json")
    instructions = _load_instructions(instr_path)

    try:
        return AnnotatedSequence(
            frames=frames,
            gt_masks=gt_masks,
            instructions=instructions,
            sequence_id=root.name,
        )
    except ValueError as e:
        raise CorruptSequenceError(f"{root}: {e}") from e
