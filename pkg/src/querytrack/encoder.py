"""Frozen visual encoder: patch embedding, 2-D positions, self-attention.

The encoder is randomly initialized once and then never trained; its
parameters all live under the "enc/" prefix so the freeze checksum can
cover them as a group. Randomly initialized but frozen keeps the training
topology of a pretrained-and-frozen backbone while staying self-contained;
externally trained weights can be loaded into the same parameter names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import Frame, RunConfig
from .nn import add_linear, add_transformer_block, linear, sinusoid_2d, transformer_block


@dataclass(frozen=True)
class FeatureMap:
    """P x P grid of feature vectors for one frame."""

    grid: np.ndarray
    frame_index: int

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError(f"feature grid must be PxPxD, got {self.grid.shape}")

    @property
    def side(self) -> int:
        return self.grid.shape[0]

    @property
    def dim(self) -> int:
        return self.grid.shape[2]


def add_encoder_params(params: dict, rng, config: RunConfig) -> None:
    d = config.decoder_dim
    add_linear(params, rng, "enc/patch", config.patch_size ** 2 * 3, d)
    for i in range(config.encoder_blocks):
        add_transformer_block(params, rng, f"enc/blk{i}", d)


def _patch_grid(frame: Frame, patch: int) -> np.ndarray:
    h, w = frame.height, frame.width
    if h % patch or w % patch:
        raise ValueError(
            f"frame {h}x{w} is not divisible by patch_size {patch}"
        )
    px = frame.pixels.reshape(h // patch, patch, w // patch, patch, 3)
    return px.transpose(0, 2, 1, 3, 4).reshape((h // patch) * (w // patch), patch * patch * 3)


def patch_embeddings(params: dict, config: RunConfig, frame: Frame) -> np.ndarray:
    """Pre-attention embeddings (P*P, D): patch linear map plus position code."""
    if frame.height != frame.width:
        raise ValueError(f"canvas must be square, got {frame.height}x{frame.width}")
    side = frame.height // config.patch_size
    with ad.no_grad():
        emb = linear(params, "enc/patch", ad.constant(_patch_grid(frame, config.patch_size)))
    pos = sinusoid_2d(side, side, config.decoder_dim).reshape(side * side, -1)
    # content scaled by sqrt(d), matching the language side: the position
    # code must not dominate patch appearance
    return emb.data * (config.decoder_dim ** 0.5) + pos


def encode(params: dict, config: RunConfig, frame: Frame) -> FeatureMap:
    """Frozen forward pass; gradients never flow into or out of here."""
    x = patch_embeddings(params, config, frame)
    side = frame.height // config.patch_size
    with ad.no_grad():
        t = ad.constant(x)
        for i in range(config.encoder_blocks):
            t = transformer_block(params, f"enc/blk{i}", t, config.encoder_heads)
    return FeatureMap(grid=t.data.reshape(side, side, config.decoder_dim),
                      frame_index=frame.index)
