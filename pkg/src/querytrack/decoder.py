"""Query-conditioned mask decoder with cross-frame query propagation.

Four tokens attend over the frame's feature grid through two-way blocks:

    0  mask token       learned, read out through a hypernetwork
    1  purport token    purport query gated elementwise by a learned vector,
                        read out as a scalar score of prediction quality
    2  referring query  from the reasoning pass, says which object
    3  online query     carried across frames, says where it was

Parameter groups (all trainable):

    dec/*   tokens, two-way blocks, upscalers, hypernetwork, score head
    prop/*  3-layer MLP moving the online query to the next frame

Each two-way block runs, post-LN: token self-attention, token-to-image
cross-attention, token MLP, then image-to-token cross-attention. The image
grid is upscaled back to pixel resolution by two pixel-shuffle stages that
each halve the channel count; mask logits are the dot product of per-pixel
features with the hypernetwork projection of the mask token joined with the
raw referring query, so the instruction directly parameterizes the readout
and the mask loss always reaches the reasoning pathway without having to be
discovered through token attention first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, concat, sigmoid, tanh
from .core import RunConfig
from .encoder import FeatureMap
from .nn import (
    add_attention,
    add_layer_norm,
    add_linear,
    add_mlp,
    add_param,
    apply_layer_norm,
    attention,
    linear,
    mlp,
    sinusoid_2d,
)


def add_decoder_params(params: dict, rng, config: RunConfig) -> None:
    d = config.decoder_dim
    if d % 4:
        raise ValueError(f"decoder_dim must be divisible by 4, got {d}")
    add_param(params, "dec/mask_tok", rng.normal(0.0, d ** -0.5, (d,)))
    add_param(params, "dec/iou_tok", np.ones(d))
    add_param(params, "dec/init_q", np.zeros(d))
    for i in range(config.decoder_blocks):
        base = f"dec/blk{i}"
        add_attention(params, rng, f"{base}/self", d)
        add_layer_norm(params, f"{base}/ln1", d)
        add_attention(params, rng, f"{base}/t2i", d)
        add_layer_norm(params, f"{base}/ln2", d)
        add_mlp(params, rng, f"{base}/mlp", d, 2 * d)
        add_layer_norm(params, f"{base}/ln3", d)
        add_attention(params, rng, f"{base}/i2t", d)
        add_layer_norm(params, f"{base}/ln4", d)
    c = d
    for i, f in enumerate(config.upscale_stages):
        add_linear(params, rng, f"dec/up{i}", c, (c // 2) * f * f)
        c //= 2
    add_linear(params, rng, "dec/hyper/l0", 2 * d, d)
    add_linear(params, rng, "dec/hyper/l1", d, d)
    add_linear(params, rng, "dec/hyper/l2", d, c)
    add_linear(params, rng, "dec/score", d, 1)
    add_linear(params, rng, "prop/l0", d, d)
    add_linear(params, rng, "prop/l1", d, d)
    add_linear(params, rng, "prop/l2", d, d)


def fuse_purport(query, gate) -> Tensor:
    """Elementwise product of a query with a gating vector of the same shape."""
    q, g = as_tensor(query), as_tensor(gate)
    if q.shape != g.shape or q.ndim != 1:
        raise ValueError(f"cannot fuse queries with shapes {q.shape} and {g.shape}")
    return q * g


def init_online_query(params: dict) -> Tensor:
    """The learned first-frame online query (zeros at initialization)."""
    return params["dec/init_q"]


def propagate_query(params: dict, q) -> Tensor:
    """3-layer MLP carrying the online query to the next frame."""
    x = as_tensor(q)
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, x.shape[0]))
    h = tanh(linear(params, "prop/l0", x))
    h = tanh(linear(params, "prop/l1", h))
    out = linear(params, "prop/l2", h)
    return ad.reshape(out, (out.shape[1],)) if squeeze else out


def _as_query(name: str, q, dim: int) -> Tensor:
    t = as_tensor(q)
    if t.shape != (dim,):
        raise ValueError(f"{name} query has shape {t.shape}, expected ({dim},)")
    return t


def _pixel_shuffle(x: Tensor, side: int, factor: int, channels: int) -> Tensor:
    """(side*side, channels*factor^2) -> (side*factor)^2 rows of `channels`."""
    x = ad.reshape(x, (side, side, factor, factor, channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    out = side * factor
    return ad.reshape(x, (out * out, channels))


def decode_tensors(params: dict, config: RunConfig, features: FeatureMap,
                   q_referring, q_online, q_purport):
    """Graph-tensor decode of one frame.

    Returns (mask_logits (H, W), purport_score scalar in (0, 1), q_next (D,)):
    the raw online-query output, before cross-frame propagation.
    """
    d = config.decoder_dim
    if features.dim != d:
        raise ValueError(f"feature dim {features.dim} does not match decoder_dim {d}")
    q_r = _as_query("referring", q_referring, d)
    q_t = _as_query("online", q_online, d)
    q_p = _as_query("purport", q_purport, d)

    side = features.side
    img = ad.constant(features.grid.reshape(side * side, d) +
                      sinusoid_2d(side, side, d).reshape(side * side, d))
    tokens = concat([
        ad.reshape(params["dec/mask_tok"], (1, d)),
        ad.reshape(fuse_purport(q_p, params["dec/iou_tok"]), (1, d)),
        ad.reshape(q_r, (1, d)),
        ad.reshape(q_t, (1, d)),
    ], axis=0)

    heads = config.decoder_heads
    for i in range(config.decoder_blocks):
        base = f"dec/blk{i}"
        tokens = apply_layer_norm(params, f"{base}/ln1",
                                  tokens + attention(params, f"{base}/self",
                                                     tokens, tokens, heads))
        tokens = apply_layer_norm(params, f"{base}/ln2",
                                  tokens + attention(params, f"{base}/t2i",
                                                     tokens, img, heads))
        tokens = apply_layer_norm(params, f"{base}/ln3",
                                  tokens + mlp(params, f"{base}/mlp", tokens))
        img = apply_layer_norm(params, f"{base}/ln4",
                               img + attention(params, f"{base}/i2t",
                                               img, tokens, heads))
        if not (np.isfinite(tokens.data).all() and np.isfinite(img.data).all()):
            raise ValueError(f"non-finite values after decoder block {i}")

    # the readout sees the attended mask token AND the raw referring query
    mask_h = ad.reshape(concat([ad.take(tokens, 0), q_r], axis=0), (1, 2 * d))
    score_h = ad.reshape(ad.take(tokens, 1), (1, d))
    q_next = ad.take(tokens, 3)

    x, s, c = img, side, d
    for i, f in enumerate(config.upscale_stages):
        if i:
            x = tanh(x)
        x = _pixel_shuffle(linear(params, f"dec/up{i}", x), s, f, c // 2)
        s, c = s * f, c // 2

    hyper = tanh(linear(params, "dec/hyper/l0", mask_h))
    hyper = tanh(linear(params, "dec/hyper/l1", hyper))
    hyper = linear(params, "dec/hyper/l2", hyper)
    logits = ad.reshape(ad.matmul(x, ad.transpose(hyper, (1, 0))), (s, s))

    score = ad.reshape(sigmoid(linear(params, "dec/score", score_h)), ())
    return logits, score, q_next


@dataclass(frozen=True)
class MaskPrediction:
    """Decoded frame result; the mask is the strict positive part of the logits."""

    logits: np.ndarray
    mask: np.ndarray
    purport_score: float
    q_next_raw: np.ndarray


def decode(params: dict, config: RunConfig, features: FeatureMap,
           q_referring, q_online, q_purport) -> MaskPrediction:
    """Numpy decode of one frame, outside any gradient tape."""
    with ad.no_grad():
        logits, score, q_next = decode_tensors(params, config, features,
                                               q_referring, q_online, q_purport)
    return MaskPrediction(logits=logits.data, mask=logits.data > 0.0,
                          purport_score=float(score.data),
                          q_next_raw=q_next.data)
