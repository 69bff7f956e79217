"""Adversarial two-stage training and evaluation.

Per step the optimized objective is ``L_y(source) + L_d(source + target)``
with a gradient reversal of strength ``lambda`` between the extractor and
the domain head, so the extractor effectively descends
``L_y - lambda * L_d`` while the domain head descends ``L_d``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ctan import ops
from ctan.backbone import ModelBundle, classify_action, discriminate_domain, extract_features
from ctan.data import ClipSet
from ctan.ops import GrlCoefficient
from ctan.optim import SGD
from ctan.tensor import NonFiniteError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "stage", "lambda", "l_task", "l_domain", "source_acc", "target_val_acc"]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr_stage1: float = 1e-2
    stage1_epochs: int = 10
    stage2_epochs: int = 20
    lr_stage2: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    gamma: float = 10.0
    source_only: bool = False
    max_grad_norm: Optional[float] = None
    domain_lr_scale: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts >= 0")
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0 or self.domain_lr_scale <= 0:
            raise ValueError("learning rates must be positive")
        return self


@dataclass(frozen=True)
class LossBreakdown:
    l_task: float
    l_domain: float
    lambda_v: float
    correct: int = 0
    count: int = 0

    @property
    def total(self) -> float:
        """The extractor's effective objective ``l_task - lambda * l_domain``."""
        return self.l_task - self.lambda_v * self.l_domain


@dataclass
class Datasets:
    source_train: ClipSet
    target_train: ClipSet
    target_val: Optional[ClipSet] = None
    source_val: Optional[ClipSet] = None


@dataclass
class EpochMetrics:
    epoch: int
    stage: int
    lam: float
    l_task: float
    l_domain: float
    source_acc: float
    target_val_acc: float

    def row(self) -> list[str]:
        return [str(self.epoch), str(self.stage)] + [
            f"{v:.6f}" for v in (self.lam, self.l_task, self.l_domain, self.source_acc, self.target_val_acc)]


def lambda_schedule(progress: float, gamma: float = 10.0) -> GrlCoefficient:
    """``2 / (1 + exp(-gamma * progress)) - 1``: 0 at the start, approaching 1."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return GrlCoefficient(2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0)


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite {what} loss ({value}); aborting")
    return value


def train_step(bundle: ModelBundle, optimizer: SGD, source_x: Tensor, source_y, target_x: Tensor,
               coeff, frozen: Sequence[str] = (), max_grad_norm: Optional[float] = None) -> LossBreakdown:
    """One forward/backward/update over a source batch and an unlabeled target batch.

    Source and target go through the extractor separately (shared weights).
    Parameters named in ``frozen`` are not updated.
    """
    source_y = np.asarray(source_y)
    if source_x.shape[0] == 0 or target_x.shape[0] == 0:
        raise ValueError("source and target batches must be nonempty")
    lam = coeff if isinstance(coeff, GrlCoefficient) else GrlCoefficient(float(coeff))
    fs = extract_features(source_x, bundle, train_mode=True)
    ft = extract_features(target_x, bundle, train_mode=True)
    logits = classify_action(fs, bundle, train_mode=True)
    l_task = ops.softmax_cross_entropy(logits, source_y)
    domain_logits = ops.concat([discriminate_domain(fs, bundle, lam), discriminate_domain(ft, bundle, lam)])
    domain_labels = np.concatenate([np.ones(fs.shape[0], np.int64), np.zeros(ft.shape[0], np.int64)])
    l_domain = ops.softmax_cross_entropy(domain_logits, domain_labels)
    out = LossBreakdown(_check_finite(l_task.item(), "task"), _check_finite(l_domain.item(), "domain"), lam.lam,
                        int(np.sum(np.argmax(logits.data, axis=1) == source_y)), len(source_y))
    backward(ops.add(l_task, l_domain))
    optimizer.step(frozen, max_grad_norm)
    return out


def predict(bundle: ModelBundle, data: ClipSet, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for every clip (centre crops)."""
    dtype = bundle.params["action.fc1.weight"].dtype
    out = []
    with no_grad():
        for lo in range(0, len(data), batch_size):
            x = data.batch(range(lo, min(lo + batch_size, len(data))), train_mode=False, dtype=dtype)
            out.append(classify_action(extract_features(x, bundle), bundle, train_mode=False).data)
    return np.concatenate(out)


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot score an empty dataset")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(bundle: ModelBundle, data: ClipSet) -> float:
    """Fraction of segments whose eval-mode argmax equals the label."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return accuracy_from_logits(predict(bundle, data), data.labels)


def export_embeddings(bundle: ModelBundle, data: ClipSet, batch_size: int = 64) -> np.ndarray:
    dtype = bundle.params["action.fc1.weight"].dtype
    out = []
    with no_grad():
        for lo in range(0, len(data), batch_size):
            x = data.batch(range(lo, min(lo + batch_size, len(data))), train_mode=False, dtype=dtype)
            out.append(extract_features(x, bundle).data)
    return np.concatenate(out)


class _Stream:
    """Endless shuffled index stream; reshuffles each time it wraps."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            m = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + m])
            self.pos += m
        return np.array(out)


@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list[EpochMetrics] = field(default_factory=list)
    steps: list[LossBreakdown] = field(default_factory=list)
    stage_bundles: dict[int, ModelBundle] = field(default_factory=dict)


def train(bundle: ModelBundle, data: Datasets, config: TrainConfig) -> TrainResult:
    """Stage 1 at lambda = 0 and ``lr_stage1``; stage 2 ramps lambda over its own
    progress at ``lr_stage2``.  With ``source_only`` stage 2 is skipped.

    An epoch is one pass over the shuffled source-train set; the target
    stream cycles independently.  Source accuracy is the running accuracy
    of the epoch's training steps (train-mode crops and dropout).  A snapshot of the bundle is kept at the
    end of each stage that ran.
    """
    config.validate()
    if len(data.source_train) == 0 or len(data.target_train) == 0:
        raise ValueError("source-train and target-train must be nonempty")
    source_ss, target_ss, crop_ss = np.random.SeedSequence(config.seed).spawn(3)
    source_rng, crop_rng = np.random.default_rng(source_ss), np.random.default_rng(crop_ss)
    target_stream = _Stream(len(data.target_train), np.random.default_rng(target_ss))
    dtype = bundle.params["action.fc1.weight"].dtype
    bs = config.batch_size
    steps_per_epoch = math.ceil(len(data.source_train) / bs)
    stage2_steps = steps_per_epoch * config.stage2_epochs
    result = TrainResult(bundle)
    epoch = 0
    for stage, epochs, lr in ((1, config.stage1_epochs, config.lr_stage1),
                              (2, config.stage2_epochs, config.lr_stage2)):
        if epochs == 0 or (stage == 2 and config.source_only):
            continue
        opt = SGD(bundle.params, lr, config.momentum, config.weight_decay,
                  {n: config.domain_lr_scale for n in bundle.names("domain.")})
        for local_epoch in range(epochs):
            epoch += 1
            order = source_rng.permutation(len(data.source_train))
            losses = []
            for b in range(steps_per_epoch):
                idx = order[b * bs:(b + 1) * bs]
                if stage == 1:
                    lam = 0.0
                else:
                    lam = lambda_schedule((local_epoch * steps_per_epoch + b) / max(stage2_steps - 1, 1),
                                          config.gamma).lam
                xs = data.source_train.batch(idx, True, crop_rng, dtype)
                xt = data.target_train.batch(target_stream.take(len(idx)), True, crop_rng, dtype)
                losses.append(train_step(bundle, opt, xs, data.source_train.labels[idx], xt, lam,
                                         max_grad_norm=config.max_grad_norm))
            result.steps.extend(losses)
            row = EpochMetrics(
                epoch, stage, losses[-1].lambda_v,
                float(np.mean([l.l_task for l in losses])), float(np.mean([l.l_domain for l in losses])),
                sum(l.correct for l in losses) / sum(l.count for l in losses),
                evaluate(bundle, data.target_val) if data.target_val is not None else float("nan"))
            log.info("epoch %d stage %d lambda %.4f l_task %.4f l_domain %.4f src %.3f tgt-val %.3f",
                     row.epoch, row.stage, row.lam, row.l_task, row.l_domain, row.source_acc, row.target_val_acc)
            result.metrics.append(row)
        result.stage_bundles[stage] = bundle.clone()
    return result


def metrics_csv(metrics: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow(m.row())
    return buf.getvalue()
