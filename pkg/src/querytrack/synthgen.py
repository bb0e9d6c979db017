"""Deterministic benchmark generator: moving shapes with tracking instructions.

A scene is a handful of colored shapes bouncing inside the canvas. Every
quantity that feeds motion (initial positions, velocities) is quantized to
1/8 px, and canvas bounds are integers, so the reflected walk stays exact
in binary floating point: positions are reproducible bit-for-bit from a
closed form, and rasterized masks are exact boolean grids.

Masks record each shape's full extent (occlusion affects pixel colors only,
via a later-listed-shape-wins depth order), so a mask never depends on the
other shapes in the scene.

Instructions come in two kinds. Explicit ones name the target by appearance
("the blue triangle"); implicit ones name it by a superlative that must be
reasoned out ("the object moving the fastest"). Superlatives are evaluated
over whole-sequence attributes (speed is constant per shape, size is the
frame-0 mask area) so the answer never depends on the frame index.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    AnnotatedSequence,
    BinaryMask,
    CorruptSequenceError,
    Frame,
    InstructionRecord,
    load_sequence,
    save_sequence,
)


class GenerationError(ValueError):
    """A scene or benchmark request violates a generation invariant."""


class AmbiguousInstructionError(GenerationError):
    """The requested instruction would not identify a unique object."""


SHAPE_CLASSES = ("circle", "square", "triangle")

SUPERLATIVES = ("fastest", "slowest", "largest", "smallest")

# All values sit on the 1/255 grid so rendered frames survive 8-bit PNG I/O.
PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 170, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
    "orange": (255, 128, 0),
    "purple": (128, 0, 128),
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
}
PALETTE = {name: tuple(v / 255.0 for v in rgb) for name, rgb in PALETTE.items()}
_COLOR_NAMES = {rgb: name for name, rgb in PALETTE.items()}

_MOTION_GRID = 8.0  # positions and velocities are multiples of 1/8 px


def _on_pixel_grid(color) -> bool:
    return all(0.0 <= c <= 1.0 and float(c) * 255.0 == round(c * 255.0) for c in color)


@dataclass(frozen=True)
class ShapeSpec:
    """One shape: geometry, appearance, and constant-velocity bounce motion.

    `size` is a radius in pixels: circumradius-ish for circle/triangle and
    half-side for square. `position` is the frame-0 center (x, y).
    """

    shape: str
    color: tuple[float, float, float]
    size: int
    velocity: tuple[float, float]
    position: tuple[float, float]
    object_id: int

    def __post_init__(self):
        if self.shape not in SHAPE_CLASSES:
            raise GenerationError(f"unknown shape class {self.shape!r}")
        if not isinstance(self.size, int) or self.size < 2:
            raise GenerationError(f"shape size must be an integer >= 2, got {self.size!r}")
        if self.object_id < 1:
            raise GenerationError(f"object_id must be >= 1, got {self.object_id}")
        if len(self.color) != 3 or not _on_pixel_grid(self.color):
            raise GenerationError(
                f"color must be an RGB triple on the 1/255 grid in [0, 1], got {self.color!r}"
            )
        for name in ("velocity", "position"):
            pair = getattr(self, name)
            if len(pair) != 2 or any(v * _MOTION_GRID != round(v * _MOTION_GRID) for v in pair):
                raise GenerationError(
                    f"{name} must be a pair of multiples of 1/{int(_MOTION_GRID)} px, got {pair!r}"
                )
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass(frozen=True)
class ChangeEvent:
    """From `frame_index` on, object `object_id` is drawn in `new_color`."""

    frame_index: int
    object_id: int
    new_color: tuple[float, float, float]

    def __post_init__(self):
        if self.frame_index < 0:
            raise GenerationError("event frame_index must be >= 0")
        if len(self.new_color) != 3 or not _on_pixel_grid(self.new_color):
            raise GenerationError(f"event color must sit on the 1/255 grid, got {self.new_color!r}")
        object.__setattr__(self, "new_color", tuple(float(c) for c in self.new_color))


@dataclass(frozen=True)
class SceneSpec:
    """Canvas, shapes (draw order = depth order), frame count, and events."""

    height: int
    width: int
    shapes: tuple[ShapeSpec, ...]
    n_frames: int
    events: tuple[ChangeEvent, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "events", tuple(self.events))
        if self.height < 16 or self.width < 16:
            raise GenerationError(f"canvas must be at least 16x16, got {self.height}x{self.width}")
        if self.n_frames < 2:
            raise GenerationError("a scene needs at least 2 frames")
        if not 1 <= len(self.shapes) <= 6:
            raise GenerationError(f"a scene holds 1 to 6 shapes, got {len(self.shapes)}")
        ids = [s.object_id for s in self.shapes]
        if len(set(ids)) != len(ids):
            raise GenerationError(f"object ids must be distinct, got {ids}")
        for ev in self.events:
            if ev.object_id not in set(ids):
                raise GenerationError(f"event targets unknown object {ev.object_id}")
            if ev.frame_index >= self.n_frames:
                raise GenerationError(
                    f"event at frame {ev.frame_index} outside 0..{self.n_frames - 1}"
                )

    def shape_by_id(self, object_id: int) -> ShapeSpec:
        for s in self.shapes:
            if s.object_id == object_id:
                return s
        raise GenerationError(f"no shape with object_id {object_id}")


# -- motion and rasterization ---------------------------------------------------


def _reflect(u: float, du: float, hi: float) -> tuple[float, float]:
    # fold back into [0, hi]; exact because all operands are binary fractions
    while u < 0.0 or u > hi:
        if u < 0.0:
            u, du = -u, -du
        else:
            u, du = 2.0 * hi - u, -du
    return u, du


def shape_track(shape: ShapeSpec, scene: SceneSpec) -> tuple[tuple[float, float], ...]:
    """Per-frame (x, y) centers; velocity reflects where the center hits the rim."""
    hi_x, hi_y = float(scene.width - 1), float(scene.height - 1)
    (cx, cy), (dx, dy) = shape.position, shape.velocity
    cx, dx = _reflect(cx, dx, hi_x)
    cy, dy = _reflect(cy, dy, hi_y)
    out = [(cx, cy)]
    for _ in range(scene.n_frames - 1):
        cx, dx = _reflect(cx + dx, dx, hi_x)
        cy, dy = _reflect(cy + dy, dy, hi_y)
        out.append((cx, cy))
    return tuple(out)


def rasterize_shape(shape_class: str, center: tuple[float, float], size: float,
                    height: int, width: int) -> np.ndarray:
    """Exact boolean rasterization over pixel centers (no anti-aliasing)."""
    cx, cy = center
    jj, ii = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    if shape_class == "circle":
        return (jj - cx) ** 2 + (ii - cy) ** 2 <= size * size
    if shape_class == "square":
        return np.maximum(np.abs(jj - cx), np.abs(ii - cy)) <= size
    if shape_class == "triangle":
        ax, ay = cx, cy - size
        bx, by = cx - size, cy + size
        qx, qy = cx + size, cy + size
        d1 = (jj - ax) * (by - ay) - (ii - ay) * (bx - ax)
        d2 = (jj - bx) * (qy - by) - (ii - by) * (qx - bx)
        d3 = (jj - qx) * (ay - qy) - (ii - qy) * (ax - qx)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    raise GenerationError(f"unknown shape class {shape_class!r}")


def _color_at(scene: SceneSpec, shape: ShapeSpec, frame_index: int) -> tuple[float, ...]:
    color = shape.color
    for ev in scene.events:
        if ev.object_id == shape.object_id and ev.frame_index <= frame_index:
            color = ev.new_color
    return color


def render_sequence(scene: SceneSpec, sequence_id: str | None = None) -> AnnotatedSequence:
    """Render frames and exact per-shape masks; no instructions attached yet."""
    if sequence_id is None:
        sequence_id = f"scene_{scene.seed}"
    tracks = {s.object_id: shape_track(s, scene) for s in scene.shapes}
    frames = []
    gt_masks: dict[int, list[BinaryMask]] = {s.object_id: [] for s in scene.shapes}
    for t in range(scene.n_frames):
        pixels = np.zeros((scene.height, scene.width, 3), dtype=np.float64)
        for s in scene.shapes:  # listed order: later shapes paint over earlier
            grid = rasterize_shape(s.shape, tracks[s.object_id][t], s.size,
                                   scene.height, scene.width)
            pixels[grid] = _color_at(scene, s, t)
            gt_masks[s.object_id].append(BinaryMask(grid=grid, frame_index=t))
        frames.append(Frame(pixels=pixels, index=t))
    return AnnotatedSequence(
        frames=tuple(frames),
        gt_masks={k: tuple(v) for k, v in gt_masks.items()},
        instructions=(),
        sequence_id=sequence_id,
    )


# -- superlatives and instructions ------------------------------------------------


def shape_area(shape: ShapeSpec, scene: SceneSpec) -> int:
    """Frame-0 mask pixel count; the 'size' a superlative compares."""
    track0 = shape_track(shape, scene)[0]
    return int(rasterize_shape(shape.shape, track0, shape.size,
                               scene.height, scene.width).sum())


def resolve_superlative(scene: SceneSpec, superlative: str) -> int:
    """Object id of the unique holder, or an ambiguity error on a tie."""
    if superlative not in SUPERLATIVES:
        raise GenerationError(f"unknown superlative {superlative!r}")
    if superlative in ("fastest", "slowest"):
        values = {s.object_id: s.speed for s in scene.shapes}
    else:
        values = {s.object_id: shape_area(s, scene) for s in scene.shapes}
    pick = max if superlative in ("fastest", "largest") else min
    best = pick(values.values())
    holders = [oid for oid, v in values.items() if v == best]
    if len(holders) != 1:
        raise AmbiguousInstructionError(
            f"{len(holders)} objects tie for {superlative}: {sorted(holders)}"
        )
    return holders[0]


_EXPLICIT_SEED = "the {color} {shape}"
_EXPLICIT_TEMPLATES = (
    "track the {color} {shape}",
    "follow the {color} {shape} in the video",
    "the {shape} colored {color}",
    "keep following the {color} {shape}",
    "find the {color} {shape} and track it",
)

_IMPLICIT_SEEDS = {
    "fastest": "the object moving the fastest",
    "slowest": "the object moving the slowest",
    "largest": "the largest shape",
    "smallest": "the smallest shape",
}
_IMPLICIT_TEMPLATES = {
    "fastest": (
        "the fastest object",
        "track the fastest shape",
        "follow the object with the highest speed",
        "keep following the fastest of the objects",
        "find the fastest object and track it",
    ),
    "slowest": (
        "the slowest object",
        "track the slowest shape",
        "follow the object with the lowest speed",
        "keep following the slowest of the objects",
        "find the slowest object and track it",
    ),
    "largest": (
        "the biggest object",
        "track the largest object",
        "follow the shape with the largest area",
        "keep following the biggest of the objects",
        "find the largest shape and track it",
    ),
    "smallest": (
        "the smallest object",
        "track the smallest object",
        "follow the shape with the smallest area",
        "keep following the smallest of the objects",
        "find the smallest shape and track it",
    ),
}
_SEED_TO_SUPERLATIVE = {seed: sup for sup, seed in _IMPLICIT_SEEDS.items()}


def instruction_inventory() -> tuple[str, ...]:
    """Every instruction text any benchmark can contain, sorted and deduped."""
    texts = list(_IMPLICIT_SEEDS.values())
    for phrasings in _IMPLICIT_TEMPLATES.values():
        texts.extend(phrasings)
    for template in (_EXPLICIT_SEED, *_EXPLICIT_TEMPLATES):
        for color in PALETTE:
            for shape in SHAPE_CLASSES:
                texts.append(template.format(color=color, shape=shape))
    return tuple(sorted(set(texts)))


def instruction_lexicon() -> frozenset[str]:
    """Every word any generated instruction can contain."""
    return frozenset(word for t in instruction_inventory() for word in t.split())


def superlative_of(record: InstructionRecord) -> str:
    """Recover which superlative an implicit record's seed text names."""
    if record.kind != "implicit":
        raise GenerationError("record is not implicit")
    try:
        return _SEED_TO_SUPERLATIVE[record.seed_text]
    except KeyError:
        raise GenerationError(f"unrecognized implicit seed text {record.seed_text!r}") from None


def make_instructions(scene: SceneSpec, target_object_id: int, kind: str,
                      superlative: str | None = None) -> InstructionRecord:
    """One seed instruction plus 5 rephrasings naming `target_object_id`.

    Explicit instructions describe color and shape class, and require that
    no other shape matches the description. Implicit ones use a superlative
    the target must hold uniquely; without an explicit choice, the first
    match in SUPERLATIVES order is used.
    """
    target = scene.shape_by_id(target_object_id)
    if kind == "explicit":
        if superlative is not None:
            raise GenerationError("explicit instructions take no superlative")
        if target.color not in _COLOR_NAMES:
            raise GenerationError(f"color {target.color!r} has no palette name")
        color = _COLOR_NAMES[target.color]
        twins = [
            s.object_id for s in scene.shapes
            if s.object_id != target_object_id
            and s.shape == target.shape and s.color == target.color
        ]
        if twins:
            raise AmbiguousInstructionError(
                f"objects {sorted([target_object_id, *twins])} all match "
                f"'the {color} {target.shape}'"
            )
        fill = {"color": color, "shape": target.shape}
        return InstructionRecord(
            seed_text=_EXPLICIT_SEED.format(**fill),
            rephrasings=tuple(t.format(**fill) for t in _EXPLICIT_TEMPLATES),
            kind="explicit",
            target_object_id=target_object_id,
        )
    if kind == "implicit":
        if superlative is None:
            for cand in SUPERLATIVES:
                try:
                    if resolve_superlative(scene, cand) == target_object_id:
                        superlative = cand
                        break
                except AmbiguousInstructionError:
                    continue
            if superlative is None:
                raise AmbiguousInstructionError(
                    f"object {target_object_id} holds no unique superlative"
                )
        elif resolve_superlative(scene, superlative) != target_object_id:
            raise AmbiguousInstructionError(
                f"object {target_object_id} is not the unique {superlative}"
            )
        return InstructionRecord(
            seed_text=_IMPLICIT_SEEDS[superlative],
            rephrasings=_IMPLICIT_TEMPLATES[superlative],
            kind="implicit",
            target_object_id=target_object_id,
        )
    raise GenerationError(f"unknown instruction kind {kind!r}")


# -- benchmark sampling ------------------------------------------------------------


@dataclass(frozen=True)
class Benchmark:
    """Train/eval splits plus the ids of eval sequences carrying a change event.

    `scenes` maps sequence id to the SceneSpec it was rendered from; it is
    populated by generate_benchmark but not stored on disk, so benchmarks
    loaded back from a directory carry scenes=None.
    """

    train: tuple[AnnotatedSequence, ...]
    eval: tuple[AnnotatedSequence, ...]
    change_suite: frozenset[str]
    seed: int
    scenes: dict[str, SceneSpec] | None = None

    def manifest(self) -> dict:
        return {
            "train": [s.sequence_id for s in self.train],
            "eval": [s.sequence_id for s in self.eval],
            "change_suite": sorted(self.change_suite),
            "seed": self.seed,
        }


def _eighths(rng, lo: float, hi: float) -> float:
    v = round(rng.uniform(lo, hi) * _MOTION_GRID) / _MOTION_GRID
    return min(max(v, lo), hi)


def _sample_velocity(rng, taken_speeds: list[float]) -> tuple[float, float]:
    for _ in range(200):
        dx, dy = (int(v) / _MOTION_GRID for v in rng.integers(-18, 19, size=2))
        speed = math.hypot(dx, dy)
        if 0.25 <= speed <= 2.75 and speed not in taken_speeds:
            return dx, dy
    raise GenerationError("could not sample a distinct velocity")


def _sample_scene(rng, height: int, width: int, n_frames: int, seed: int,
                  min_shapes: int, max_shapes: int) -> SceneSpec:
    combos = [(c, s) for c in sorted(PALETTE) for s in SHAPE_CLASSES]
    for _ in range(200):
        n = int(rng.integers(min_shapes, max_shapes + 1))
        picks = [combos[int(i)] for i in rng.choice(len(combos), size=n, replace=False)]
        shapes = []
        speeds: list[float] = []
        for oid, (color, shape_class) in enumerate(picks, start=1):
            r = int(rng.integers(3, 8))
            dx, dy = _sample_velocity(rng, speeds)
            speeds.append(math.hypot(dx, dy))
            shapes.append(ShapeSpec(
                shape=shape_class,
                color=PALETTE[color],
                size=r,
                velocity=(dx, dy),
                position=(_eighths(rng, r, width - 1 - r), _eighths(rng, r, height - 1 - r)),
                object_id=oid,
            ))
        scene = SceneSpec(height=height, width=width, shapes=tuple(shapes),
                          n_frames=n_frames, seed=seed)
        areas = [shape_area(s, scene) for s in shapes]
        if len(set(areas)) == len(areas):
            return scene
    raise GenerationError("could not sample a scene with distinct speeds and areas")


def _attach_change_event(rng, scene: SceneSpec, target_id: int) -> SceneSpec:
    used = {s.color for s in scene.shapes}
    free = [PALETTE[name] for name in sorted(PALETTE) if PALETTE[name] not in used]
    if not free:
        raise GenerationError("no unused palette color for a change event")
    k = int(rng.integers(scene.n_frames // 3, 2 * scene.n_frames // 3 + 1))
    event = ChangeEvent(frame_index=max(1, k), object_id=target_id,
                        new_color=free[int(rng.integers(len(free)))])
    return dataclasses.replace(scene, events=(event,))


def _build_sequence(base_seed: int, index: int, split: str, height: int, width: int,
                    n_frames: int, min_shapes: int, max_shapes: int,
                    with_change: bool) -> tuple[AnnotatedSequence, SceneSpec]:
    rng = np.random.default_rng([base_seed, index])
    scene = _sample_scene(rng, height, width, n_frames, seed=index,
                          min_shapes=min_shapes, max_shapes=max_shapes)

    if with_change:
        # the changed object is the implicit target, named by a superlative
        # that stays decidable after the appearance change
        implicit_sup = ("largest", "smallest")[int(rng.integers(2))]
    else:
        implicit_sup = SUPERLATIVES[int(rng.integers(len(SUPERLATIVES)))]
    implicit_target = resolve_superlative(scene, implicit_sup)

    others = [s.object_id for s in scene.shapes if s.object_id != implicit_target]
    explicit_pool = others if with_change and others else [s.object_id for s in scene.shapes]
    explicit_target = explicit_pool[int(rng.integers(len(explicit_pool)))]

    if with_change:
        scene = _attach_change_event(rng, scene, implicit_target)

    seq = render_sequence(scene, sequence_id=f"{split}_{index:04d}")
    records = (
        make_instructions(scene, explicit_target, "explicit"),
        make_instructions(scene, implicit_target, "implicit", superlative=implicit_sup),
    )
    return dataclasses.replace(seq, instructions=records), scene


def generate_benchmark(n_train: int, n_eval: int, seed: int, *,
                       n_frames: int = 12, canvas: tuple[int, int] = (64, 64),
                       change_fraction: float = 0.25,
                       min_shapes: int = 2, max_shapes: int = 4) -> Benchmark:
    """Sample train/eval splits; a change-suite slice of eval gets color events."""
    if n_train < 1 or n_eval < 1:
        raise GenerationError(f"n_train and n_eval must be >= 1, got {n_train}, {n_eval}")
    if not 0.0 <= change_fraction <= 1.0:
        raise GenerationError(f"change_fraction must lie in [0, 1], got {change_fraction}")
    if not 1 <= min_shapes <= max_shapes <= 6:
        raise GenerationError(f"need 1 <= min_shapes <= max_shapes <= 6, "
                              f"got {min_shapes}, {max_shapes}")
    height, width = canvas
    n_change = round(change_fraction * n_eval)
    if change_fraction > 0.0:
        n_change = max(1, n_change)

    scenes: dict[str, SceneSpec] = {}
    train = []
    for i in range(n_train):
        seq, scene = _build_sequence(seed, i, "train", height, width, n_frames,
                                     min_shapes, max_shapes, with_change=False)
        train.append(seq)
        scenes[seq.sequence_id] = scene
    eval_seqs = []
    change_ids = []
    for j in range(n_eval):
        with_change = j < n_change
        seq, scene = _build_sequence(seed, n_train + j, "eval", height, width, n_frames,
                                     min_shapes, max_shapes, with_change=with_change)
        eval_seqs.append(seq)
        scenes[seq.sequence_id] = scene
        if with_change:
            change_ids.append(seq.sequence_id)
    return Benchmark(
        train=tuple(train),
        eval=tuple(eval_seqs),
        change_suite=frozenset(change_ids),
        seed=seed,
        scenes=scenes,
    )


# -- benchmark I/O -----------------------------------------------------------------


def write_benchmark(bench: Benchmark, path) -> None:
    """train/<id>/, eval/<id>/, manifest.json under `path`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for split, seqs in (("train", bench.train), ("eval", bench.eval)):
        for seq in seqs:
            save_sequence(seq, root / split / seq.sequence_id)
    text = json.dumps(bench.manifest(), indent=2, sort_keys=True) + "\n"
    (root / "manifest.json").write_text(text)


def load_benchmark(path) -> Benchmark:
    """Rebuild a Benchmark from write_benchmark's layout (scenes are not stored)."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise CorruptSequenceError(f"{root}: missing manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CorruptSequenceError(f"{mpath}: invalid JSON at line {e.lineno}: {e.msg}") from e
    missing = {"train", "eval", "change_suite", "seed"} - set(manifest)
    if missing:
        raise CorruptSequenceError(f"{mpath}: missing keys {sorted(missing)}")
    train = tuple(load_sequence(root / "train" / sid) for sid in manifest["train"])
    eval_seqs = tuple(load_sequence(root / "eval" / sid) for sid in manifest["eval"])
    unknown = set(manifest["change_suite"]) - {s.sequence_id for s in eval_seqs}
    if unknown:
        raise CorruptSequenceError(f"{mpath}: change_suite ids not in eval: {sorted(unknown)}")
    return Benchmark(
        train=train,
        eval=eval_seqs,
        change_suite=frozenset(manifest["change_suite"]),
        seed=manifest["seed"],
        scenes=None,
    )
