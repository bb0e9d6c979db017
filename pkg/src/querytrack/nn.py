"""Shared neural building blocks over the autodiff core.

Parameters live in one flat dict mapping slash-separated names to Tensors
("enc/blk0/attn/wq/w"), which keeps optimizers, checkpoints, and freeze
checksums trivial. Builders add entries; apply functions read them.

All activations are tanh and every softmax subtracts a detached max, so
the whole stack stays smooth enough for central-difference gradient
checks in double precision.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    concat,
    layer_norm,
    matmul,
    parameter,
    reshape,
    softmax,
    tanh,
    transpose,
)

_NEG_INF = -1e9  # additive mask value; exp underflows to exactly 0.0


def add_param(params: dict, name: str, data) -> None:
    if name in params:
        raise ValueError(f"duplicate parameter name {name}")
    params[name] = parameter(np.asarray(data, dtype=np.float64))


def add_linear(params: dict, rng, name: str, d_in: int, d_out: int,
               scale: float | None = None, zero: bool = False) -> None:
    if zero:
        w = np.zeros((d_in, d_out))
    else:
        w = rng.normal(0.0, scale if scale is not None else d_in ** -0.5, (d_in, d_out))
    add_param(params, f"{name}/w", w)
    add_param(params, f"{name}/b", np.zeros(d_out))


def linear(params: dict, name: str, x) -> Tensor:
    return matmul(as_tensor(x), params[f"{name}/w"]) + params[f"{name}/b"]


def add_layer_norm(params: dict, name: str, dim: int) -> None:
    add_param(params, f"{name}/g", np.ones(dim))
    add_param(params, f"{name}/b", np.zeros(dim))


def apply_layer_norm(params: dict, name: str, x) -> Tensor:
    return layer_norm(x, params[f"{name}/g"], params[f"{name}/b"])


def add_attention(params: dict, rng, name: str, dim: int) -> None:
    for sub in ("wq", "wk", "wv", "wo"):
        add_linear(params, rng, f"{name}/{sub}", dim, dim)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    t, d = x.shape
    return transpose(reshape(x, (t, n_heads, d // n_heads)), (1, 0, 2))


def _join_heads(x: Tensor) -> Tensor:
    h, t, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (t, h * dh))


def causal_mask(n: int) -> np.ndarray:
    return np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, _NEG_INF)


def attention(params: dict, name: str, q_in, kv_in, n_heads: int,
              mask: np.ndarray | None = None, proj=None) -> Tensor:
    """Multi-head attention of q_in (T_q, D) over kv_in (T_k, D).

    `proj` overrides the four projections (signature proj(sub, x) for sub in
    wq/wk/wv/wo); the default reads `{name}/{sub}` from params. `mask` is an
    additive (T_q, T_k) array.
    """
    if proj is None:
        proj = lambda sub, x: linear(params, f"{name}/{sub}", x)
    q = _split_heads(proj("wq", as_tensor(q_in)), n_heads)
    k = _split_heads(proj("wk", as_tensor(kv_in)), n_heads)
    v = _split_heads(proj("wv", as_tensor(kv_in)), n_heads)
    dh = q.shape[2]
    scores = matmul(q, transpose(k, (0, 2, 1))) * (dh ** -0.5)
    if mask is not None:
        scores = scores + Tensor(mask)
    out = matmul(softmax(scores, axis=-1), v)
    return proj("wo", _join_heads(out))


def add_mlp(params: dict, rng, name: str, dim: int, hidden: int) -> None:
    add_linear(params, rng, f"{name}/l0", dim, hidden)
    add_linear(params, rng, f"{name}/l1", hidden, dim)


def mlp(params: dict, name: str, x) -> Tensor:
    return linear(params, f"{name}/l1", tanh(linear(params, f"{name}/l0", x)))


def add_transformer_block(params: dict, rng, name: str, dim: int) -> None:
    add_attention(params, rng, f"{name}/attn", dim)
    add_layer_norm(params, f"{name}/ln1", dim)
    add_mlp(params, rng, f"{name}/mlp", dim, 2 * dim)
    add_layer_norm(params, f"{name}/ln2", dim)


def transformer_block(params: dict, name: str, x, n_heads: int,
                      mask: np.ndarray | None = None, proj=None) -> Tensor:
    h = apply_layer_norm(params, f"{name}/ln1",
                         x + attention(params, f"{name}/attn", x, x, n_heads,
                                       mask=mask, proj=proj))
    return apply_layer_norm(params, f"{name}/ln2",
                            h + mlp(params, f"{name}/mlp", h))


# -- fixed positional encodings ---------------------------------------------------


def sinusoid_1d(n: int, dim: int) -> np.ndarray:
    """(n, dim) sin/cos table; dim must be even."""
    if dim % 2:
        raise ValueError(f"positional dim must be even, got {dim}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    ang = pos * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sinusoid_2d(h: int, w: int, dim: int) -> np.ndarray:
    """(h, w, dim) table: first half encodes the row, second half the column."""
    if dim % 4:
        raise ValueError(f"2-D positional dim must be divisible by 4, got {dim}")
    half = dim // 2
    rows = sinusoid_1d(h, half)[:, None, :]
    cols = sinusoid_1d(w, half)[None, :, :]
    return np.concatenate([np.broadcast_to(rows, (h, w, half)),
                           np.broadcast_to(cols, (h, w, half))], axis=2)
