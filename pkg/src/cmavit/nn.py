"""Transformer building blocks shared by the image and context encoders.

Parameters live in a flat ``dict[str, Tensor]``; blocks look theirs up by
name prefix, e.g. ``enc0/attn/Wq``.
"""

from __future__ import annotations

import math

import numpy as np

from cmavit.core import Tensor, dropout, gelu, layer_norm, linear, matmul, reshape, softmax_rows, swap_last, transpose
from cmavit.rng import make_rng, truncated_normal

Params = dict[str, Tensor]


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, L, d) -> (B, heads, L, d/heads)."""
    B, L, d = x.shape
    return transpose(reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


def scaled_scores(q: Tensor, k: Tensor) -> Tensor:
    return matmul(q, swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))


def attend(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None, key_mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_head) + bias) v with masked keys at -inf."""
    logits = scaled_scores(q, k)
    if bias is not None:
        logits = logits + bias
    return matmul(softmax_rows(logits, key_mask), v)


def norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}/g"], params[f"{prefix}/b"])


def mlp_block(x: Tensor, params: Params, prefix: str, rate: float, rng, training: bool) -> Tensor:
    h = norm(x, params, f"{prefix}/ln2")
    h = gelu(linear(h, params[f"{prefix}/mlp/W1"], params[f"{prefix}/mlp/b1"]))
    h = linear(h, params[f"{prefix}/mlp/W2"], params[f"{prefix}/mlp/b2"])
    return x + dropout(h, rate, rng, training)


def self_attention(
    x: Tensor,
    params: Params,
    prefix: str,
    n_heads: int,
    *,
    bias: Tensor | None = None,
    key_mask=None,
) -> Tensor:
    """Multi-head self-attention on the pre-normed stream (no residual)."""
    h = norm(x, params, f"{prefix}/ln1")
    q = split_heads(linear(h, params[f"{prefix}/attn/Wq"]), n_heads)
    k = split_heads(linear(h, params[f"{prefix}/attn/Wk"]), n_heads)
    v = split_heads(linear(h, params[f"{prefix}/attn/Wv"]), n_heads)
    out = merge_heads(attend(q, k, v, bias, key_mask))
    return linear(out, params[f"{prefix}/attn/Wo"])


# ---------------------------------------------------------------------------
# parameter shapes and initialisation
# ---------------------------------------------------------------------------

def block_shapes(prefix: str, d: int, mlp_hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}/ln1/g": (d,),
        f"{prefix}/ln1/b": (d,),
        f"{prefix}/attn/Wq": (d, d),
        f"{prefix}/attn/Wk": (d, d),
        f"{prefix}/attn/Wv": (d, d),
        f"{prefix}/attn/Wo": (d, d),
        f"{prefix}/ln2/g": (d,),
        f"{prefix}/ln2/b": (d,),
        f"{prefix}/mlp/W1": (d, mlp_hidden),
        f"{prefix}/mlp/b1": (mlp_hidden,),
        f"{prefix}/mlp/W2": (mlp_hidden, d),
        f"{prefix}/mlp/b2": (d,),
    }


FAN_IN_PREFIXES = ("met/W",)
ZERO_INIT_SUFFIXES = ("/b", "/b1", "/b2", "temporal")


def init_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """LayerNorm gains start at one, biases and the temporal table at zero,
    climate projections fan-in scaled, everything else truncated-normal(0.02).
    Each tensor has its own stream."""
    if name.endswith("/g"):
        return np.ones(shape)
    if name.endswith(ZERO_INIT_SUFFIXES):
        return np.zeros(shape)
    std = 1.0 / np.sqrt(shape[0]) if name.startswith(FAN_IN_PREFIXES) or "/met/" in name else 0.02
    return truncated_normal(make_rng(seed, "init", name), shape, std=std)
