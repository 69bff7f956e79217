"""Channel-wise and temporal-wise excitation blocks for (N, T, C, H, W) features.

Both modules follow the same squeeze-excite-residual pattern::

    pooled = mean of x over the other three feature axes
    gate   = sigmoid(W2 relu(W1 pooled + b1) + b2)
    out    = x + gate * x

The channel module pools over (T, H, W) and gates per channel; the temporal
module pools over (C, H, W) and gates per frame.  The four block variants
chain them: ``C``, ``T``, ``CT`` (channel then temporal) and ``TC``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ctan import ops
from ctan.tensor import Tensor

VARIANTS = ("C", "T", "TC", "CT")

CHANNEL_POOL_AXES = (1, 3, 4)
TEMPORAL_POOL_AXES = (2, 3, 4)


def check_variant(tag: str) -> str:
    if tag not in VARIANTS:
        raise ValueError(f"unknown block variant {tag!r}; expected one of {VARIANTS}")
    return tag


@dataclass
class ExcitationParams:
    """Weights of one squeeze-excite bottleneck (``extent -> extent/r -> extent``).

    ``b1``/``b2`` may be ``None`` for the bias-free form.
    """

    w1: Tensor
    w2: Tensor
    b1: Optional[Tensor] = None
    b2: Optional[Tensor] = None
    r: int = 4

    @property
    def extent(self) -> int:
        return self.w1.shape[1]

    @property
    def reduced(self) -> int:
        return self.w1.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = {"w1": self.w1, "w2": self.w2}
        if self.b1 is not None:
            out["b1"] = self.b1
        if self.b2 is not None:
            out["b2"] = self.b2
        return out


class ChannelAttentionParams(ExcitationParams):
    pass


class TemporalAttentionParams(ExcitationParams):
    pass


def channel_reduced_extent(channels: int, r: int) -> int:
    if r < 1:
        raise ValueError(f"reduction ratio must be positive, got {r}")
    if channels % r:
        raise ValueError(f"channel extent {channels} is not divisible by reduction ratio {r}")
    return channels // r


def temporal_reduced_extent(frames: int, r: int) -> int:
    if r < 1:
        raise ValueError(f"reduction ratio must be positive, got {r}")
    return max(1, frames // r)


def _init_bottleneck(cls, extent: int, reduced: int, r: int, rng: np.random.Generator,
                     dtype, bias: bool):
    def uniform(out_dim, in_dim):
        bound = np.sqrt(1.0 / in_dim)
        return Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)), requires_grad=True, dtype=dtype)

    w1 = uniform(reduced, extent)
    w2 = uniform(extent, reduced)
    b1 = Tensor(np.zeros(reduced), requires_grad=True, dtype=dtype) if bias else None
    b2 = Tensor(np.zeros(extent), requires_grad=True, dtype=dtype) if bias else None
    return cls(w1=w1, w2=w2, b1=b1, b2=b2, r=r)


def init_channel_params(channels: int, r: int, rng: np.random.Generator,
                        dtype=np.float32, bias: bool = True) -> ChannelAttentionParams:
    return _init_bottleneck(ChannelAttentionParams, channels, channel_reduced_extent(channels, r),
                            r, rng, dtype, bias)


def init_temporal_params(frames: int, r: int, rng: np.random.Generator,
                         dtype=np.float32, bias: bool = True) -> TemporalAttentionParams:
    return _init_bottleneck(TemporalAttentionParams, frames, temporal_reduced_extent(frames, r),
                            r, rng, dtype, bias)


def _gate(x: Tensor, p: ExcitationParams, pool_axes, gate_shape) -> Tensor:
    pooled = ops.reshape(ops.avg_pool_axes(x, pool_axes), (x.shape[0], p.extent))
    hidden = ops.relu(ops.linear(p.w1, p.b1, pooled))
    return ops.reshape(ops.sigmoid(ops.linear(p.w2, p.b2, hidden)), gate_shape)


def _excite(x: Tensor, gate: Tensor) -> Tensor:
    return ops.add(x, ops.broadcast_mul(gate, x))


def _forced(force_gate, shape, dtype) -> Tensor:
    gate = force_gate if isinstance(force_gate, Tensor) else Tensor(force_gate, dtype=dtype)
    if gate.shape != shape:
        raise ValueError(f"forced gate shape {gate.shape} != {shape}")
    return gate


def channel_attention(x: Tensor, p: ChannelAttentionParams,
                      force_gate=None) -> tuple[Tensor, Tensor]:
    """Channel excitation; returns ``(x + A_c * x, A_c)`` with ``A_c`` of shape (N, 1, C, 1, 1).

    ``force_gate`` replaces the computed gate verbatim (used to pin the
    residual structure in tests).
    """
    if x.ndim != 5:
        raise ValueError(f"expected an (N, T, C, H, W) feature, got shape {x.shape}")
    n, _, c, _, _ = x.shape
    if c != p.extent:
        raise ValueError(f"feature has {c} channels, attention expects {p.extent}")
    channel_reduced_extent(c, p.r)
    shape = (n, 1, c, 1, 1)
    gate = _forced(force_gate, shape, x.dtype) if force_gate is not None else _gate(x, p, CHANNEL_POOL_AXES, shape)
    return _excite(x, gate), gate


def temporal_attention(x: Tensor, p: TemporalAttentionParams,
                       force_gate=None) -> tuple[Tensor, Tensor]:
    """Temporal excitation; returns ``(x + A_t * x, A_t)`` with ``A_t`` of shape (N, T, 1, 1, 1)."""
    if x.ndim != 5:
        raise ValueError(f"expected an (N, T, C, H, W) feature, got shape {x.shape}")
    n, t = x.shape[:2]
    if t != p.extent:
        raise ValueError(f"feature has {t} frames, attention expects {p.extent}")
    if p.reduced != temporal_reduced_extent(t, p.r):
        raise ValueError(f"temporal bottleneck {p.reduced} inconsistent with T={t}, r={p.r}")
    shape = (n, t, 1, 1, 1)
    gate = _forced(force_gate, shape, x.dtype) if force_gate is not None else _gate(x, p, TEMPORAL_POOL_AXES, shape)
    return _excite(x, gate), gate


def cta_forward(x: Tensor, variant: str, cp: Optional[ChannelAttentionParams],
                tp: Optional[TemporalAttentionParams], force_gate=None) -> Tensor:
    """Apply one block variant.

    ``force_gate`` is a scalar fill value (e.g. 0 or 1) applied to every gate
    of the block; gate shapes differ between the two modules, so a single
    array cannot serve both.
    """
    check_variant(variant)

    def gate_for(shape):
        return None if force_gate is None else np.full(shape, force_gate, dtype=x.dtype)

    n, t, c = x.shape[:3]
    for step in variant:
        if step == "C":
            x, _ = channel_attention(x, cp, gate_for((n, 1, c, 1, 1)))
        else:
            x, _ = temporal_attention(x, tp, gate_for((n, t, 1, 1, 1)))
    return x
