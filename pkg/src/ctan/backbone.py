"""Mini 3-D CNN feature extractor with excitation insertion points, plus heads.

The extractor runs ``conv3d -> relu -> [block]`` per stage and global-average
pools the last stage over (T, H, W).  Stages are numbered from 1; blocks are
only allowed after middle stages unless the depth policy is switched off.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ctan import attention, ops
from ctan.attention import ChannelAttentionParams, TemporalAttentionParams
from ctan.tensor import Tensor


# "sample": each clip standardized by its own mean and deviation; "fixed": (x - input_mean) / input_std
INPUT_NORMS = ("sample", "fixed", "none")


@dataclass(frozen=True)
class StageConfig:
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 2, 2)
    padding: tuple[int, int, int] = (1, 1, 1)


def _default_stages() -> tuple[StageConfig, ...]:
    return tuple(StageConfig(c) for c in (8, 16, 32))


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)
    cta_after: tuple[int, ...] = (2,)
    variant: str = "CT"
    r: int = 4
    in_channels: int = 1
    frames: int = 16
    height: int = 28
    width: int = 28
    hidden_action: int = 32
    hidden_domain: int = 32
    dropout: float = 0.5
    input_norm: str = "sample"
    input_mean: float = 0.0
    input_std: float = 1.0
    enforce_depth_policy: bool = True

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].out_channels

    def validate(self) -> "BackboneConfig":
        if not self.stages:
            raise ValueError("at least one stage is required")
        n = len(self.stages)
        for idx in self.cta_after:
            if not 1 <= idx <= n:
                raise ValueError(f"cta_after index {idx} does not name a stage (1..{n})")
            if self.enforce_depth_policy and idx in (1, n):
                raise ValueError(f"cta_after index {idx} is the first or last stage; blocks go in middle stages only")
        if self.cta_after:
            attention.check_variant(self.variant)
        if self.input_norm not in INPUT_NORMS:
            raise ValueError(f"input_norm must be one of {INPUT_NORMS}, got {self.input_norm!r}")
        if self.r < 1 or not 0.0 <= self.dropout < 1.0 or self.input_std <= 0:
            raise ValueError("invalid reduction ratio, dropout or input_std")
        if min(self.in_channels, self.frames, self.height, self.width, self.hidden_action, self.hidden_domain) < 1:
            raise ValueError("extents must be positive")
        self.stage_shapes()
        return self

    def stage_shapes(self) -> list[tuple[int, int, int, int]]:
        """(T, C, H, W) after each stage; raises if any extent underflows."""
        t, h, w = self.frames, self.height, self.width
        shapes = []
        for i, s in enumerate(self.stages, start=1):
            t, h, w = (ops.conv_output_extent(size, k, st, p)
                       for size, k, st, p in zip((t, h, w), s.kernel, s.stride, s.padding))
            if min(t, h, w) < 1:
                raise ValueError(f"stage {i} output extent underflows to ({t}, {h}, {w})")
            shapes.append((t, s.out_channels, h, w))
        return shapes


@dataclass
class ModelBundle:
    """Extractor, action head and domain head parameters, enumerable by name."""

    config: BackboneConfig
    num_classes: int
    params: dict[str, Tensor]
    rng: np.random.Generator

    def cta(self, stage: int) -> tuple[Optional[ChannelAttentionParams], Optional[TemporalAttentionParams]]:
        p, key, r = self.params, f"cta{stage}", self.config.r

        def block(cls, part):
            if f"{key}.{part}.w1" not in p:
                return None
            return cls(w1=p[f"{key}.{part}.w1"], w2=p[f"{key}.{part}.w2"],
                       b1=p.get(f"{key}.{part}.b1"), b2=p.get(f"{key}.{part}.b2"), r=r)

        return block(ChannelAttentionParams, "channel"), block(TemporalAttentionParams, "temporal")

    def clone(self) -> "ModelBundle":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype) for k, v in self.params.items()}
        return ModelBundle(self.config, self.num_classes, params, copy.deepcopy(self.rng))

    def names(self, prefix: str) -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ValueError(f"checkpoint does not match model (missing {sorted(missing)}, unexpected {sorted(extra)})")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {self.params[k].shape}")
            self.params[k] = Tensor(arr, requires_grad=True, dtype=self.params[k].dtype)


def _uniform(rng, shape, fan_in, dtype, gain: float = 1.0) -> Tensor:
    bound = gain * np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, dtype=dtype)


# layers feeding a ReLU use the He bound sqrt(6 / fan_in) to keep activation scale
RELU_GAIN = np.sqrt(6.0)


def _zeros(n, dtype) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)


def init_model(config: BackboneConfig, num_classes: int, seed: int, dtype=np.float32) -> ModelBundle:
    """Deterministic parameters from ``seed``; biases start at zero.

    Conv and hidden head weights are uniform in ±sqrt(6/fan_in); attention
    and output-layer weights in ±sqrt(1/fan_in).
    """
    config.validate()
    if num_classes < 2:
        raise ValueError("need at least two classes")
    init_seed, dropout_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(init_seed)
    params: dict[str, Tensor] = {}
    c_in = config.in_channels
    for i, (stage, (t, c, _, _)) in enumerate(zip(config.stages, config.stage_shapes()), start=1):
        fan_in = c_in * int(np.prod(stage.kernel))
        params[f"stage{i}.weight"] = _uniform(rng, (c, c_in, *stage.kernel), fan_in, dtype, RELU_GAIN)
        params[f"stage{i}.bias"] = _zeros(c, dtype)
        if i in config.cta_after:
            if "C" in config.variant:
                cp = attention.init_channel_params(c, config.r, rng, dtype)
                params.update({f"cta{i}.channel.{k}": v for k, v in cp.named().items()})
            if "T" in config.variant:
                tp = attention.init_temporal_params(t, config.r, rng, dtype)
                params.update({f"cta{i}.temporal.{k}": v for k, v in tp.named().items()})
        c_in = c
    d, hy, hd = config.feature_dim, config.hidden_action, config.hidden_domain
    params["action.fc1.weight"] = _uniform(rng, (hy, d), d, dtype, RELU_GAIN)
    params["action.fc1.bias"] = _zeros(hy, dtype)
    params["action.fc2.weight"] = _uniform(rng, (num_classes, hy), hy, dtype)
    params["action.fc2.bias"] = _zeros(num_classes, dtype)
    params["domain.fc1.weight"] = _uniform(rng, (hd, d), d, dtype, RELU_GAIN)
    params["domain.fc1.bias"] = _zeros(hd, dtype)
    params["domain.fc2.weight"] = _uniform(rng, (2, hd), hd, dtype)
    params["domain.fc2.bias"] = _zeros(2, dtype)
    return ModelBundle(config, num_classes, params, np.random.default_rng(dropout_seed))


def parameter_count(config: BackboneConfig, num_classes: int) -> int:
    """Closed-form number of scalar parameters for ``init_model(config, num_classes)``."""
    total, c_in = 0, config.in_channels
    for i, (stage, (t, c, _, _)) in enumerate(zip(config.stages, config.stage_shapes()), start=1):
        total += c * c_in * int(np.prod(stage.kernel)) + c
        if i in config.cta_after:
            if "C" in config.variant:
                cr = c // config.r
                total += 2 * c * cr + cr + c
            if "T" in config.variant:
                tr = max(1, t // config.r)
                total += 2 * t * tr + tr + t
        c_in = c
    d, hy, hd = config.feature_dim, config.hidden_action, config.hidden_domain
    return total + (d * hy + hy + hy * num_classes + num_classes) + (d * hd + hd + 2 * hd + 2)


def extract_features(x: Tensor, bundle: ModelBundle, train_mode: bool = False) -> Tensor:
    """(N, T, C_in, H, W) clips -> (N, D) embeddings.

    Inputs are first normalized according to ``input_norm``.

    The extractor has no train/eval-dependent layers; ``train_mode`` is
    accepted for interface symmetry with the heads.
    """
    cfg = bundle.config
    if x.ndim != 5 or x.shape[2] != cfg.in_channels:
        raise ValueError(f"expected (N, T, {cfg.in_channels}, H, W) input, got {x.shape}")
    if cfg.input_norm == "sample":
        h = ops.sample_standardize(x)
    elif cfg.input_norm == "fixed":
        h = ops.standardize(x, cfg.input_mean, cfg.input_std)
    else:
        h = x
    for i, stage in enumerate(cfg.stages, start=1):
        h = ops.relu(ops.conv3d(h, bundle.params[f"stage{i}.weight"], bundle.params[f"stage{i}.bias"],
                                stage.stride, stage.padding))
        if i in cfg.cta_after:
            cp, tp = bundle.cta(i)
            h = attention.cta_forward(h, cfg.variant, cp, tp)
    pooled = ops.avg_pool_axes(h, (1, 3, 4))
    return ops.reshape(pooled, (x.shape[0], cfg.feature_dim))


def _check_features(features: Tensor, bundle: ModelBundle) -> None:
    if features.ndim != 2 or features.shape[1] != bundle.config.feature_dim:
        raise ValueError(f"features {features.shape} do not match feature_dim {bundle.config.feature_dim}")


def classify_action(features: Tensor, bundle: ModelBundle, train_mode: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Action logits (N, K); softmax is left to the loss and to argmax."""
    _check_features(features, bundle)
    p = bundle.params
    h = ops.relu(ops.linear(p["action.fc1.weight"], p["action.fc1.bias"], features))
    h = ops.dropout(h, bundle.config.dropout, train_mode, rng if rng is not None else bundle.rng)
    return ops.linear(p["action.fc2.weight"], p["action.fc2.bias"], h)


def discriminate_domain(features: Tensor, bundle: ModelBundle, coeff: float, reverse: bool = True) -> Tensor:
    """Domain logits (N, 2) behind a gradient reversal of strength ``coeff``.

    ``reverse=False`` drops the reversal layer; it exists for comparing
    gradients against the reversed graph.
    """
    _check_features(features, bundle)
    p = bundle.params
    h = ops.grad_reverse(features, coeff) if reverse else features
    h = ops.relu(ops.linear(p["domain.fc1.weight"], p["domain.fc1.bias"], h))
    return ops.linear(p["domain.fc2.weight"], p["domain.fc2.bias"], h)
