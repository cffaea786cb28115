"""Transformer building blocks composed from :mod:`phasemem.tensor` ops.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names
(``"dec.0.attn.qkv.w"``); each block reads its weights under a prefix.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

MLP_RATIO = 4
MASKED_SCORE = -1e9
INIT_STD = 0.02


def trunc_normal(rng, shape, std=INIT_STD, dtype=np.float32):
    """Normal(0, std) samples redrawn until they fall inside +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_linear(params, prefix, rng, n_in, n_out, bias=True, dtype=np.float32):
    params[f"{prefix}.w"] = T.Tensor(trunc_normal(rng, (n_in, n_out), dtype=dtype),
                                     requires_grad=True)
    if bias:
        params[f"{prefix}.b"] = T.Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)


def init_layer_norm(params, prefix, d, dtype=np.float32):
    params[f"{prefix}.g"] = T.Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    params[f"{prefix}.b"] = T.Tensor(np.zeros(d, dtype=dtype), requires_grad=True)


def init_block(params, prefix, rng, d, heads, dtype=np.float32):
    """Register the weights of one pre-norm attention + GELU-MLP block."""
    if d % heads:
        raise ConfigError(f"embedding dim {d} is not divisible by {heads} heads")
    init_layer_norm(params, f"{prefix}.ln1", d, dtype)
    init_linear(params, f"{prefix}.attn.qkv", rng, d, 3 * d, dtype=dtype)
    init_linear(params, f"{prefix}.attn.proj", rng, d, d, dtype=dtype)
    init_layer_norm(params, f"{prefix}.ln2", d, dtype)
    init_linear(params, f"{prefix}.mlp.fc1", rng, d, MLP_RATIO * d, dtype=dtype)
    init_linear(params, f"{prefix}.mlp.fc2", rng, MLP_RATIO * d, d, dtype=dtype)


def apply_layer_norm(x, params, prefix, eps=1e-5):
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def key_mask_bias(key_mask, heads, dtype):
    """Additive score bias hiding keys where ``key_mask`` (batch, n) is 0."""
    key_mask = np.asarray(key_mask)
    b, n = key_mask.shape
    bias = np.where(key_mask > 0, 0.0, MASKED_SCORE).astype(dtype)
    return np.broadcast_to(bias[:, None, None, :], (b, heads, n, n))


def self_attention(x, params, prefix, heads, attn_out=None, key_mask=None):
    """Multi-head self-attention over ``x`` of shape (batch, n, d).

    Keys whose ``key_mask`` entry is 0 receive exactly zero attention weight.
    """
    b, n, d = x.shape
    dh = d // heads
    qkv = T.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (T.take(qkv, i, 0) for i in range(3))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if key_mask is not None:
        scores = T.add(scores, T.Tensor(key_mask_bias(key_mask, heads, scores.dtype)))
    weights = T.softmax(scores)
    if attn_out is not None:
        attn_out.append(weights.data)
    mixed = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    return T.linear(mixed, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def mlp(x, params, prefix):
    hidden = T.gelu(T.linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return T.linear(hidden, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def mhsa_block(tokens, params, prefix, heads, attn_out=None, key_mask=None):
    """Pre-norm residual block: ``x + Attn(LN(x))`` then ``x + MLP(LN(x))``.

    Accepts (n, d) or (batch, n, d).  When ``attn_out`` is a list, the
    per-head attention weights (batch, heads, n, n) are appended to it.
    """
    x = T.as_tensor(tokens)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    if x.ndim != 3:
        raise DimensionError(f"mhsa_block expects (n, d) or (batch, n, d), got {x.shape}")
    if x.shape[-1] % heads:
        raise ConfigError(f"embedding dim {x.shape[-1]} is not divisible by {heads} heads")
    x = T.add(x, self_attention(apply_layer_norm(x, params, f"{prefix}.ln1"),
                                params, f"{prefix}.attn", heads, attn_out, key_mask))
    x = T.add(x, mlp(apply_layer_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp"))
    if squeeze:
        x = T.reshape(x, x.shape[1:])
    return x


def sinusoidal_encoding(position, d, base=10000.0):
    """Interleaved sin/cos code: entry 2i is sin(pos / base^(2i/d)), 2i+1 the cos."""
    if d % 2:
        raise ConfigError(f"sinusoidal encoding needs an even dimension, got {d}")
    pos = np.asarray(position, dtype=np.float64)
    freqs = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos[..., None] * freqs
    out = np.empty(pos.shape + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out
