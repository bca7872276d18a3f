"""Kinematics modeling: joint-to-joint temporal attention between two frames.

Query features come from frame t, key features from frame t+1. The K x K
correlation has rows indexed by frame-(t+1) joints and columns by frame-t
joints; after a row softmax each new joint is a convex combination of the
previous frame's joint heatmaps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .numeric_core import (
    ShapeError,
    Tensor,
    conv2d,
    convex_mix,
    matmul,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose,
)


@dataclass(frozen=True)
class KmmParams:
    w_query: Tensor
    w_key: Tensor
    share_qk: bool = False

    def __post_init__(self):
        for name, w in (("w_query", self.w_query), ("w_key", self.w_key)):
            if len(w.shape) != 4 or w.shape[2:] != (1, 1):
                raise ShapeError(f"{name} must be K x D x 1 x 1, got {w.shape}")
        if self.w_query.shape != self.w_key.shape:
            raise ShapeError(f"query/key projections differ: {self.w_query.shape} vs {self.w_key.shape}")
        if self.share_qk and self.w_key is not self.w_query:
            raise ValueError("share_qk requires w_key to be the same tensor as w_query")

    @classmethod
    def shared(cls, w: Tensor) -> "KmmParams":
        return cls(w, w, share_qk=True)

    @property
    def num_joints(self) -> int:
        return self.w_query.shape[0]


@dataclass(frozen=True)
class CorrelationMatrix:
    raw: Tensor
    attention: Tensor
    d: int


def project_qk(f_t: Tensor, f_next: Tensor, params: KmmParams) -> tuple[Tensor, Tensor]:
    """Query (hw x K) from frame t and key (K x hw) from frame t+1."""
    if f_t.shape != f_next.shape:
        raise ShapeError(f"feature maps differ in shape: {f_t.shape} vs {f_next.shape}")
    k = params.num_joints
    _, h, w = f_t.shape
    q = relu(conv2d(f_t, params.w_query))
    key = relu(conv2d(f_next, params.w_key))
    return transpose(reshape(q, (k, h * w))), reshape(key, (k, h * w))


def temporal_correlation(f_q: Tensor, f_k: Tensor, d: int) -> Tensor:
    """raw[j, i] = <key row j, query column i> / sqrt(d)."""
    if d <= 0:
        raise ValueError(f"normalization factor must be positive, got {d}")
    return scale(matmul(f_k, f_q), 1.0 / math.sqrt(d))


def attention_weights(raw: Tensor) -> Tensor:
    return softmax_rows(raw, 1.0)


def infer_initial_heatmaps(attention: Tensor, m_t: Tensor) -> Tensor:
    k, h, w = m_t.shape
    if attention.shape != (k, k):
        raise ShapeError(f"attention {attention.shape} does not match {k} heatmaps")
    return reshape(convex_mix(attention, reshape(m_t, (k, h * w))), (k, h, w))


def correlate(f_t: Tensor, f_next: Tensor, params: KmmParams, use_sqrt_d: bool = True) -> CorrelationMatrix:
    _, h, w = f_t.shape
    f_q, f_k = project_qk(f_t, f_next, params)
    d = h * w
    raw = temporal_correlation(f_q, f_k, d if use_sqrt_d else 1)
    return CorrelationMatrix(raw, attention_weights(raw), d)


def kmm_forward(
    f_t: Tensor, f_next: Tensor, m_t: Tensor, params: KmmParams, use_sqrt_d: bool = True
) -> tuple[Tensor, Tensor]:
    """Initial heatmaps for frame t+1 and the attention that produced them."""
    if m_t.shape[0] != params.num_joints or m_t.shape[1:] != f_t.shape[1:]:
        raise ShapeError(f"heatmaps {m_t.shape} inconsistent with features {f_t.shape} and K={params.num_joints}")
    corr = correlate(f_t, f_next, params, use_sqrt_d)
    return infer_initial_heatmaps(corr.attention, m_t), corr.attention
