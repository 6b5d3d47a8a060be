"""Multi-head attention over feature maps, with optional epipolar reweighting.

All variants share one code path: tokens are projected to q/k/v, affinities
are scaled by 1/sqrt(head_channels), optionally multiplied elementwise by a
per-pair weight matrix E (the same E for every head, never differentiated
through), then row-softmaxed and applied to v. An all-ones E is therefore
bit-identical to plain cross-view attention, which is the degradation the
geometry module's uniform fallback relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeMismatch,
    Tensor,
    as_tensor,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    transpose,
)


@dataclass
class AttentionParams:
    """Projection weights (each channels x channels) and the head split."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    head_channels: int

    def __post_init__(self):
        c = self.heads * self.head_channels
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (c, c):
                raise ShapeMismatch(f"{name} must be ({c}, {c}), got {w.shape}")
            if not np.all(np.isfinite(w.data)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def channels(self):
        return self.heads * self.head_channels

    @classmethod
    def init(cls, rng, channels, head_channels, dtype=np.float64, requires_grad=True):
        if channels % head_channels != 0:
            raise ShapeMismatch(f"channels {channels} not a multiple of head_channels {head_channels}")
        std = channels ** -0.5

        def w():
            return Tensor(rng.standard_normal((channels, channels)).astype(dtype) * std,
                          requires_grad=requires_grad)

        return cls(wq=w(), wk=w(), wv=w(), wo=w(),
                   heads=channels // head_channels, head_channels=head_channels)


@dataclass
class FeatureMap:
    """A (c, h, w) activation grid."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeMismatch(f"feature map must be (c, h, w), got {self.values.shape}")

    @property
    def c(self):
        return self.values.shape[0]

    @property
    def h(self):
        return self.values.shape[1]

    @property
    def w(self):
        return self.values.shape[2]


def _split_heads(t, n, tokens, heads, dk):
    return transpose(reshape(t, (n, tokens, heads, dk)), (0, 2, 1, 3))


def attend_tokens(q_tokens, kv_tokens, params, weight=None):
    """Batched attention core. q_tokens, kv_tokens: (n, tokens, c) Tensors.

    weight, if given, is an (n, tokens, tokens) ndarray multiplied into the
    scaled affinity logits of every head as a constant.
    """
    n, tokens, c = q_tokens.shape
    if kv_tokens.shape != (n, tokens, c):
        raise ShapeMismatch(f"q/kv token shapes differ: {q_tokens.shape} vs {kv_tokens.shape}")
    if c != params.channels:
        raise ShapeMismatch(f"tokens have {c} channels, params expect {params.channels}")
    heads, dk = params.heads, params.head_channels

    q = _split_heads(matmul(q_tokens, params.wq), n, tokens, heads, dk)
    k = _split_heads(matmul(kv_tokens, params.wk), n, tokens, heads, dk)
    v = _split_heads(matmul(kv_tokens, params.wv), n, tokens, heads, dk)

    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), dk ** -0.5)
    if weight is not None:
        weight = np.asarray(weight)
        if weight.shape != (n, tokens, tokens):
            raise ShapeMismatch(f"weight must be ({n}, {tokens}, {tokens}), got {weight.shape}")
        logits = mul(logits, Tensor(weight[:, None].astype(logits.dtype, copy=False)))
    attn = softmax(logits, axis=-1)
    out = matmul(attn, v)
    out = reshape(transpose(out, (0, 2, 1, 3)), (n, tokens, c))
    return matmul(out, params.wo)


def _to_tokens(fm):
    c, h, w = fm.values.shape
    return reshape(transpose(fm.values, (1, 2, 0)), (1, h * w, c))


def _from_tokens(tokens, c, h, w):
    return FeatureMap(values=transpose(reshape(tokens, (h, w, c)), (2, 0, 1)))


def self_attention(feat, params):
    """Attention of a feature map against itself."""
    out = attend_tokens(_to_tokens(feat), _to_tokens(feat), params)
    return _from_tokens(out, feat.c, feat.h, feat.w)


def cross_view_attention(target, source, params):
    """Queries from the target map, keys/values from the source map."""
    if target.values.shape != source.values.shape:
        raise ShapeMismatch(
            f"target {target.values.shape} and source {source.values.shape} differ")
    out = attend_tokens(_to_tokens(target), _to_tokens(source), params)
    return _from_tokens(out, target.c, target.h, target.w)


def epipolar_attention(target, source, weight_matrix, params):
    """Cross-view attention with affinities gated by an epipolar weight matrix.

    weight_matrix is an EpipolarWeightMatrix (or a raw (hw, hw) array) for
    the maps' resolution; it is applied identically to every head.
    """
    if target.values.shape != source.values.shape:
        raise ShapeMismatch(
            f"target {target.values.shape} and source {source.values.shape} differ")
    e = weight_matrix.values if hasattr(weight_matrix, "values") else np.asarray(weight_matrix)
    hw = target.h * target.w
    if e.shape != (hw, hw):
        raise ShapeMismatch(f"weight matrix {e.shape} does not match {target.h}x{target.w} maps")
    out = attend_tokens(_to_tokens(target), _to_tokens(source), params, weight=e[None])
    return _from_tokens(out, target.c, target.h, target.w)
