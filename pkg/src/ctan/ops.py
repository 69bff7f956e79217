"""Differentiable primitives.

Each primitive is a :class:`~ctan.tensor.Function` with a thin functional
wrapper.  Broadcasting is deliberately narrow: only extent-1 axes against full
axes of equal rank, which is all the excitation gates need.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ctan.tensor import Function, Tensor


def _norm_axes(axes: Iterable[int], ndim: int) -> tuple[int, ...]:
    axes = tuple(sorted(set(axes)))
    if not axes:
        raise ValueError("axes must be nonempty")
    for a in axes:
        if not 0 <= a < ndim:
            raise IndexError(f"axis {a} out of range for rank {ndim}")
    return axes


class AvgPool(Function):
    @staticmethod
    def forward(ctx, x, axes):
        ctx["shape"] = x.shape
        ctx["count"] = int(np.prod([x.shape[a] for a in axes]))
        return x.mean(axis=axes, keepdims=True)

    @staticmethod
    def backward(ctx, grad):
        return (np.broadcast_to(grad / ctx["count"], ctx["shape"]).copy(),)


def avg_pool_axes(x: Tensor, axes: Iterable[int]) -> Tensor:
    """Mean over ``axes``, keeping them as extent-1 axes."""
    return AvgPool.apply(x, axes=_norm_axes(axes, x.ndim))


class Linear(Function):
    @staticmethod
    def forward(ctx, w, b, x):
        ctx["w"], ctx["x"] = w, x
        return x @ w.T + b

    @staticmethod
    def backward(ctx, grad):
        w, x = ctx["w"], ctx["x"]
        g2 = grad.reshape(-1, grad.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        return g2.T @ x2, g2.sum(axis=0), grad @ w


class LinearNoBias(Function):
    @staticmethod
    def forward(ctx, w, x):
        ctx["w"], ctx["x"] = w, x
        return x @ w.T

    @staticmethod
    def backward(ctx, grad):
        w, x = ctx["w"], ctx["x"]
        g2 = grad.reshape(-1, grad.shape[-1])
        return g2.T @ x.reshape(-1, x.shape[-1]), grad @ w


def linear(w: Tensor, b: Optional[Tensor], x: Tensor) -> Tensor:
    """``W x + b`` along the trailing axis of ``x``, batched over leading axes."""
    if w.ndim != 2:
        raise ValueError(f"weight must be rank 2, got shape {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input trailing extent {x.shape[-1]} != weight in-extent {w.shape[1]}")
    if b is None:
        return LinearNoBias.apply(w, x)
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
    return Linear.apply(w, b, x)


class Relu(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx["mask"] = mask
        return np.where(mask, x, 0).astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["mask"],)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, x):
        # exp of a non-positive argument only, so no overflow at either tail
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        y = ctx["y"]
        return (grad * y * (1 - y),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def _check_broadcast(a_shape, x_shape) -> tuple[int, ...]:
    if len(a_shape) != len(x_shape) or any(
        ai != xi and ai != 1 for ai, xi in zip(a_shape, x_shape)
    ):
        raise ValueError(f"cannot broadcast {a_shape} against {x_shape}")
    return tuple(i for i, (ai, xi) in enumerate(zip(a_shape, x_shape)) if ai != xi)


class BroadcastMul(Function):
    @staticmethod
    def forward(ctx, a, x, axes):
        ctx["a"], ctx["x"], ctx["axes"] = a, x, axes
        return a * x

    @staticmethod
    def backward(ctx, grad):
        a, x, axes = ctx["a"], ctx["x"], ctx["axes"]
        ga = grad * x
        if axes:
            ga = ga.sum(axis=axes, keepdims=True)
        return ga, grad * a


def broadcast_mul(a: Tensor, x: Tensor) -> Tensor:
    """Elementwise ``a * x`` where ``a`` may hold extent 1 on any axis of ``x``."""
    return BroadcastMul.apply(a, x, axes=_check_broadcast(a.shape, x.shape))


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return Add.apply(a, b)


class Scale(Function):
    @staticmethod
    def forward(ctx, x, factor):
        ctx["factor"] = factor
        return (x * factor).astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return ((grad * ctx["factor"]).astype(grad.dtype),)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


class Standardize(Function):
    @staticmethod
    def forward(ctx, x, mean, std):
        ctx["std"] = std
        return ((x - mean) / std).astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return ((grad / ctx["std"]).astype(grad.dtype),)


def standardize(x: Tensor, mean: float, std: float) -> Tensor:
    """``(x - mean) / std`` with fixed constants."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return Standardize.apply(x, mean=mean, std=std)


class SampleStandardize(Function):
    @staticmethod
    def forward(ctx, x, eps):
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(((x - mu) ** 2).mean(axis=axes, keepdims=True) + eps)
        y = (x - mu) * inv
        ctx.update(y=y, inv=inv, axes=axes)
        return y.astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        y, inv, axes = ctx["y"], ctx["inv"], ctx["axes"]
        gm = grad.mean(axis=axes, keepdims=True)
        gym = (grad * y).mean(axis=axes, keepdims=True)
        return ((inv * (grad - gm - y * gym)).astype(grad.dtype),)


def sample_standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample ``(x - mean) / sqrt(var + eps)`` over every axis but the first."""
    if x.ndim < 2 or eps <= 0:
        raise ValueError("sample_standardize needs a batched tensor and eps > 0")
    return SampleStandardize.apply(x, eps=eps)


class SumAll(Function):
    @staticmethod
    def forward(ctx, x):
        ctx["shape"] = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return (np.broadcast_to(grad, ctx["shape"]).copy(),)


def sum_all(x: Tensor) -> Tensor:
    return SumAll.apply(x)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx["shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx["shape"]),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class Concat(Function):
    @staticmethod
    def forward(ctx, *xs):
        ctx["splits"] = np.cumsum([x.shape[0] for x in xs])[:-1]
        return np.concatenate(xs, axis=0)

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.split(grad, ctx["splits"], axis=0))


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Stack along the leading (batch) axis."""
    return Concat.apply(*xs)


@dataclass(frozen=True)
class GrlCoefficient:
    """Strength of the gradient reversal, constrained to [0, 1]."""

    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"reversal coefficient must lie in [0, 1], got {self.lam}")

    def __float__(self) -> float:
        return float(self.lam)


class GradReverse(Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx["lam"] = lam
        return x

    @staticmethod
    def backward(ctx, grad):
        return ((grad * -ctx["lam"]).astype(grad.dtype),)


def grad_reverse(x: Tensor, coeff) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-coeff``.

    ``coeff`` is a :class:`GrlCoefficient` or a plain float in [0, 1].
    """
    if not isinstance(coeff, GrlCoefficient):
        coeff = GrlCoefficient(float(coeff))
    return GradReverse.apply(x, lam=coeff.lam)


class Dropout(Function):
    @staticmethod
    def forward(ctx, x, mask):
        ctx["mask"] = mask
        return x * mask

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["mask"],)


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``p``, else ``1/(1-p)``."""
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    return Dropout.apply(x, mask=dropout_mask(x.shape, p, rng, x.dtype))


class SoftmaxCrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels):
        n = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        ctx["p"] = np.exp(log_p)
        ctx["labels"] = labels
        return np.asarray(-log_p[np.arange(n), labels].mean(), dtype=logits.dtype)

    @staticmethod
    def backward(ctx, grad):
        p, labels = ctx["p"], ctx["labels"]
        g = p.copy()
        g[np.arange(len(labels)), labels] -= 1
        return ((g * (grad / len(labels))).astype(p.dtype),)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ValueError(f"logits {logits.shape} do not match {labels.size} labels")
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


def conv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


class Conv3d(Function):
    """Cross-correlation over (T, H, W) of an (N, T, C, H, W) input."""

    @staticmethod
    def forward(ctx, x, k, b, stride, padding, needs_input_grad=True):
        ctx["needs_input_grad"] = needs_input_grad
        n, _, c, _, _ = x.shape
        co, _, kt, kh, kw = k.shape
        st, sh, sw = stride
        pt, ph, pw = padding
        xp = np.pad(x, ((0, 0), (pt, pt), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 3, 4))[:, ::st, :, ::sh, ::sw]
        _, to, _, ho, wo = win.shape[:5]
        cols = win.transpose(0, 1, 3, 4, 2, 5, 6, 7).reshape(n * to * ho * wo, c * kt * kh * kw)
        kflat = k.reshape(co, -1)
        y = cols @ kflat.T
        if b is not None:
            y += b
        ctx.update(cols=cols, kflat=kflat, xp_shape=xp.shape, x_shape=x.shape, k_shape=k.shape,
                   stride=stride, padding=padding, out=(n, to, ho, wo), has_bias=b is not None)
        return np.ascontiguousarray(y.reshape(n, to, ho, wo, co).transpose(0, 1, 4, 2, 3))

    @staticmethod
    def backward(ctx, grad):
        n, to, ho, wo = ctx["out"]
        co, c, kt, kh, kw = ctx["k_shape"]
        st, sh, sw = ctx["stride"]
        pt, ph, pw = ctx["padding"]
        g = grad.transpose(0, 1, 3, 4, 2).reshape(-1, co)
        dk = (g.T @ ctx["cols"]).reshape(ctx["k_shape"])
        db = g.sum(axis=0) if ctx["has_bias"] else None
        if not ctx.get("needs_input_grad", True):
            return (None, dk) + ((db,) if ctx["has_bias"] else ())
        # one contiguous (kT, kH, kW, N, T', C, H', W') copy, then shifted adds per kernel tap
        dcols = np.ascontiguousarray((g @ ctx["kflat"]).reshape(n, to, ho, wo, c, kt, kh, kw)
                                     .transpose(5, 6, 7, 0, 1, 4, 2, 3))
        dxp = np.zeros(ctx["xp_shape"], dtype=grad.dtype)
        for i in range(kt):
            for j in range(kh):
                for l in range(kw):
                    dxp[:, i:i + st * (to - 1) + 1:st, :, j:j + sh * (ho - 1) + 1:sh,
                        l:l + sw * (wo - 1) + 1:sw] += dcols[i, j, l]
        _, t, _, h, w = ctx["x_shape"]
        dx = dxp[:, pt:pt + t, :, ph:ph + h, pw:pw + w]
        grads = (np.ascontiguousarray(dx), dk)
        return grads + ((db,) if ctx["has_bias"] else ())


def conv3d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: Sequence[int] = (1, 1, 1), padding: Sequence[int] = (0, 0, 0)) -> Tensor:
    """3-D convolution (no kernel flip, zero padding) of an (N, T, C, H, W) tensor.

    ``kernels`` has shape (C_out, C_in, kT, kH, kW); the output is
    (N, T', C_out, H', W') with ``floor((in + 2p - k) / s) + 1`` per axis.
    """
    if x.ndim != 5 or kernels.ndim != 5:
        raise ValueError("conv3d expects a rank-5 input and rank-5 kernels")
    if x.shape[2] != kernels.shape[1]:
        raise ValueError(f"input channels {x.shape[2]} != kernel in-channels {kernels.shape[1]}")
    stride, padding = tuple(int(s) for s in stride), tuple(int(p) for p in padding)
    for size, k, s, p, axis in zip((x.shape[1], x.shape[3], x.shape[4]), kernels.shape[2:], stride, padding, "THW"):
        if s < 1 or p < 0:
            raise ValueError(f"invalid stride/padding on axis {axis}")
        if k > size + 2 * p or conv_output_extent(size, k, s, p) < 1:
            raise ValueError(f"kernel extent {k} exceeds padded input {size + 2 * p} on axis {axis}")
    if bias is not None:
        if bias.shape != (kernels.shape[0],):
            raise ValueError(f"bias shape {bias.shape} != ({kernels.shape[0]},)")
        return Conv3d.apply(x, kernels, bias, stride=stride, padding=padding, needs_input_grad=x.requires_grad)
    return _Conv3dNoBias.apply(x, kernels, stride=stride, padding=padding, needs_input_grad=x.requires_grad)


class _Conv3dNoBias(Function):
    @staticmethod
    def forward(ctx, x, k, stride, padding, needs_input_grad=True):
        return Conv3d.forward(ctx, x, k, None, stride, padding, needs_input_grad)

    @staticmethod
    def backward(ctx, grad):
        return Conv3d.backward(ctx, grad)
