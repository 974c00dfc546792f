"""Scaled dot-product attention and post-norm encoder/decoder layers."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import DimensionError, Tensor, parameter, relu, reshape, softmax, transpose
from .nn import LayerNorm, Linear, Module, xavier_uniform


class AttentionParams(Module):
    """Projections W_Q, W_K, W_V (d_in x D) and the output projection W_O (D x D).

    No projection biases: queries, keys and values are pure linear maps of
    their inputs.
    """

    def __init__(self, rng, d_model: int, d_in: Optional[int] = None, n_heads: int = 1,
                 dtype=np.float32):
        d_in = d_model if d_in is None else d_in
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.w_q = parameter(xavier_uniform(rng, d_in, d_model, dtype))
        self.w_k = parameter(xavier_uniform(rng, d_in, d_model, dtype))
        self.w_v = parameter(xavier_uniform(rng, d_in, d_model, dtype))
        self.w_o = parameter(xavier_uniform(rng, d_model, d_model, dtype))


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, s, d = x.shape
    return transpose(reshape(x, (*lead, s, h, d // h)), (*range(len(lead)), len(lead) + 1,
                                                          len(lead), len(lead) + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    n = len(lead)
    x = transpose(x, (*range(n), n + 1, n, n + 2))
    return reshape(x, (*lead, s, h * dh))


def attend(
    q_in: Tensor,
    kv_in: Tensor,
    params: AttentionParams,
    q_bias: Optional[Tensor] = None,
    k_bias: Optional[Tensor] = None,
) -> Tensor:
    """softmax((Q + q_bias)(K + k_bias)^T / sqrt(d)) V, then the output projection.

    Inputs are (..., s, d_in); biases are (s, D) and broadcast over leading
    axes.  ``d`` is the per-head width, which equals D for a single head.
    """
    d_in = params.w_q.shape[0]
    if q_in.shape[-1] != d_in or kv_in.shape[-1] != d_in:
        raise DimensionError(
            f"attend: inputs {q_in.shape} / {kv_in.shape} do not match d_in={d_in}"
        )
    q = q_in @ params.w_q
    k = kv_in @ params.w_k
    v = kv_in @ params.w_v
    if q_bias is not None:
        if q_bias.shape[-2:] != q.shape[-2:]:
            raise DimensionError(f"attend: q_bias {q_bias.shape} vs query {q.shape}")
        q = q + q_bias
    if k_bias is not None:
        if k_bias.shape[-2:] != k.shape[-2:]:
            raise DimensionError(f"attend: k_bias {k_bias.shape} vs key {k.shape}")
        k = k + k_bias
    h = params.n_heads
    if h > 1:
        q, k, v = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    scale = 1.0 / np.sqrt(q.shape[-1])
    weights = softmax((q @ k.T) * scale, axis=-1)
    out = weights @ v
    if h > 1:
        out = _merge_heads(out)
    return out @ params.w_o


class FeedForward(Module):
    def __init__(self, rng, d_model: int, dtype=np.float32):
        self.fc1 = Linear(rng, d_model, 4 * d_model, dtype)
        self.fc2 = Linear(rng, 4 * d_model, d_model, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, d_model: int, n_heads: int = 1, dtype=np.float32):
        self.self_attn = AttentionParams(rng, d_model, n_heads=n_heads, dtype=dtype)
        self.ffn = FeedForward(rng, d_model, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.norm2 = LayerNorm(d_model, dtype)


class DecoderLayer(Module):
    def __init__(self, rng, d_model: int, n_heads: int = 1, residual_cross: bool = True,
                 dtype=np.float32):
        self.self_attn = AttentionParams(rng, d_model, n_heads=n_heads, dtype=dtype)
        self.cross_attn = AttentionParams(rng, d_model, n_heads=n_heads, dtype=dtype)
        self.ffn = FeedForward(rng, d_model, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.norm2 = LayerNorm(d_model, dtype)
        self.norm3 = LayerNorm(d_model, dtype)
        self.residual_cross_enabled = residual_cross


def encoder_layer_forward(x: Tensor, layer: EncoderLayer) -> Tensor:
    x = layer.norm1(x + attend(x, x, layer.self_attn))
    return layer.norm2(x + layer.ffn(x))


def decoder_layer_forward(
    tgt: Tensor,
    memory: Tensor,
    layer: DecoderLayer,
    q_bias: Optional[Tensor] = None,
) -> Tensor:
    """One decoder layer.

    ``q_bias`` (O x D) is the additive object-query term: it is added to the
    self-attention query and key and to the cross-attention query.  Memory
    keys carry no bias.
    """
    if tgt.shape[-1] != memory.shape[-1]:
        raise DimensionError(f"decoder: tgt {tgt.shape} vs memory {memory.shape}")
    tgt = layer.norm1(tgt + attend(tgt, tgt, layer.self_attn, q_bias, q_bias))
    cross = attend(tgt, memory, layer.cross_attn, q_bias)
    tgt = layer.norm2(tgt + cross if layer.residual_cross_enabled else cross)
    return layer.norm3(tgt + layer.ffn(tgt))
