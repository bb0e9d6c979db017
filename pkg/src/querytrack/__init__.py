"""Instruction-conditioned video object tracking on synthetic scenes.

A reasoning brain reads one frame plus an instruction and emits referring
and purport queries; a two-way mask decoder segments every frame, carrying
an online query between frames; a purport-gated loop re-runs the reasoning
pass when prediction quality drops. Everything runs on numpy float64 with
a hand-rolled reverse-mode tape, so runs are deterministic end to end.
"""

from .autodiff import Tensor, no_grad
from .brain import (
    ReasonOutput,
    Vocabulary,
    build_prompt,
    build_vocabulary,
    lora_merge,
    reason,
)
from .core import (
    AnnotatedSequence,
    BinaryMask,
    ConfigError,
    Frame,
    InstructionRecord,
    RunConfig,
    load_config,
    load_sequence,
    save_sequence,
)
from .decoder import (
    MaskPrediction,
    decode,
    fuse_purport,
    init_online_query,
    propagate_query,
)
from .encoder import FeatureMap, encode
from .metrics import (
    EvalReport,
    boundary_measure,
    evaluate_benchmark,
    recall_over_threshold,
    region_similarity,
)
from .model import (
    TrackModel,
    build_model,
    checksum,
    frozen_names,
    load_checkpoint,
    save_checkpoint,
    trainable_names,
)
from .synthgen import (
    AmbiguousInstructionError,
    Benchmark,
    ChangeEvent,
    GenerationError,
    SceneSpec,
    ShapeSpec,
    generate_benchmark,
    load_benchmark,
    make_instructions,
    render_sequence,
    resolve_superlative,
    write_benchmark,
)
from .tracker import SessionStats, Tracker, TrackResult
from .training import AdamW, TrainExample, TrainHistory, joint_loss, train

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AmbiguousInstructionError", "AnnotatedSequence", "Benchmark",
    "BinaryMask", "ChangeEvent", "ConfigError", "EvalReport", "FeatureMap",
    "Frame", "GenerationError", "InstructionRecord", "MaskPrediction",
    "ReasonOutput", "RunConfig", "SceneSpec", "SessionStats", "ShapeSpec",
    "Tensor", "TrackModel", "TrackResult", "Tracker", "TrainExample",
    "TrainHistory", "Vocabulary", "boundary_measure", "build_model",
    "build_prompt", "build_vocabulary", "checksum", "decode", "encode",
    "evaluate_benchmark", "frozen_names", "fuse_purport", "init_online_query",
    "joint_loss", "load_benchmark", "load_checkpoint", "load_config",
    "load_sequence", "lora_merge", "make_instructions", "no_grad",
    "propagate_query", "reason", "recall_over_threshold", "region_similarity",
    "render_sequence", "resolve_superlative", "save_checkpoint",
    "save_sequence", "trainable_names", "train", "write_benchmark",
]
