"""Synthetic domain-shift benchmark and the block ablation.

Methods compared (all share data splits and initial seeds):

    source-only  no blocks, stage 1 only
    DANN         no blocks, adversarial stage 2
    C, T, TC, CT one block of that variant after the middle stage, adversarial
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from ctan.backbone import BackboneConfig, init_model
from ctan.config import RunConfig, derive_seeds
from ctan.data import (ClipSet, SyntheticConfig, SyntheticDomain, build_clipset, clip_loader, generate_synthetic,
                       load_manifest, make_splits)
from ctan.trainer import Datasets, TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)

METHODS = ("source-only", "DANN", "C", "T", "TC", "CT")
DEFAULT_SEEDS = (0, 1, 2)


@dataclass
class DomainSplits:
    train: ClipSet
    val: ClipSet
    test: ClipSet


def domain_splits(domain: SyntheticDomain, split_seed: int, size: int = 32, crop: Optional[int] = None) -> DomainSplits:
    manifests = make_splits(domain.records, domain.class_names, split_seed)
    load = domain.videos.__getitem__
    return DomainSplits(*(build_clipset(manifests[s].records, load, size, crop) for s in ("train", "val", "test")))


def synthetic_benchmark(config: SyntheticConfig, split_seed: int = 0, size: int = 32,
                        crop: Optional[int] = None) -> tuple[DomainSplits, DomainSplits]:
    source, target = generate_synthetic(config)
    return domain_splits(source, split_seed, size, crop), domain_splits(target, split_seed, size, crop)


def run_data(cfg: RunConfig) -> tuple[DomainSplits, Optional[DomainSplits], list[str]]:
    """Source and target splits of a run plus the class list.

    Synthetic data is generated in memory from the derived data and split
    seeds.  From manifests only source-train and the target splits exist, so
    the source entry carries source-train in every slot.
    """
    seeds = cfg.seeds
    if cfg.synthetic is not None:
        synth = replace(cfg.synthetic, seed=seeds.data)
        source, target = synthetic_benchmark(synth, seeds.split, cfg.size, cfg.crop)
        return source, target, synth.class_names
    m = cfg.manifest
    load = clip_loader(m.clip_dir)
    manifests = {k: load_manifest(getattr(m, k)) for k in ("source_train", "target_train", "target_val", "target_test")}
    classes = manifests["source_train"].class_names
    for name, man in manifests.items():
        if man.class_names != classes:
            raise ValueError(f"manifest {name} has a different class list than source_train")
    sets = {k: build_clipset(v.records, load, cfg.size, cfg.crop) for k, v in manifests.items()}
    src = sets["source_train"]
    return (DomainSplits(src, src, src), DomainSplits(sets["target_train"], sets["target_val"], sets["target_test"]),
            classes)


def fit_backbone(backbone: BackboneConfig, clips: ClipSet) -> BackboneConfig:
    """Input geometry taken from the data."""
    _, frames, channels, height, width = clips.clips[:, :, :, :clips.crop, :clips.crop].shape
    return replace(backbone, frames=frames, in_channels=channels, height=height, width=width)


def method_configs(method: str, backbone: BackboneConfig, train_cfg: TrainConfig) -> tuple[BackboneConfig, TrainConfig]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method in ("source-only", "DANN"):
        backbone = replace(backbone, cta_after=())
    else:
        backbone = replace(backbone, variant=method, cta_after=backbone.cta_after or (2,))
    return backbone, replace(train_cfg, source_only=method == "source-only")


def run_method(method: str, source: DomainSplits, target: DomainSplits, backbone: BackboneConfig,
               train_cfg: TrainConfig, seed: int, num_classes: int) -> tuple[float, TrainResult]:
    """Train one method from ``seed`` and return its target-test accuracy.

    Initialization and training seeds are derived from ``seed``, so every
    method starting from the same seed shares them.
    """
    bcfg, tcfg = method_configs(method, backbone, train_cfg)
    seeds = derive_seeds(seed)
    bundle = init_model(fit_backbone(bcfg, source.train), num_classes, seeds.init)
    result = train(bundle, Datasets(source.train, target.train, target.val, source.val),
                   replace(tcfg, seed=seeds.train))
    return evaluate(result.bundle, target.test), result


@dataclass
class AblationRow:
    method: str
    accuracies: list[float]
    gain: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))


def run_ablation(source: DomainSplits, target: DomainSplits, backbone: BackboneConfig, train_cfg: TrainConfig,
                 num_classes: int, seeds: Sequence[int] = DEFAULT_SEEDS, methods: Sequence[str] = METHODS,
                 progress: Optional[Callable[[str, int, float], None]] = None) -> list[AblationRow]:
    rows = []
    for method in methods:
        accs = []
        for seed in seeds:
            acc, _ = run_method(method, source, target, backbone, train_cfg, seed, num_classes)
            log.info("%s seed %d target-test accuracy %.4f", method, seed, acc)
            if progress:
                progress(method, seed, acc)
            accs.append(acc)
        rows.append(AblationRow(method, accs))
    base = next((r.mean for r in rows if r.method == "source-only"), None)
    for r in rows:
        r.gain = 0.0 if base is None or r.method == "source-only" else r.mean - base
    return rows


def ablate(cfg: RunConfig, methods: Sequence[str] = METHODS,
           progress: Optional[Callable[[str, int, float], None]] = None) -> list[AblationRow]:
    """All methods over ``cfg.ablation_seeds`` on the run's data."""
    source, target, classes = run_data(cfg)
    return run_ablation(source, target, cfg.backbone, cfg.train, len(classes), cfg.ablation_seeds, methods, progress)


def format_table(rows: Sequence[AblationRow], seeds: Sequence[int]) -> str:
    """Aligned text table, accuracies in percent."""
    head = ["method"] + [f"seed{s}" for s in seeds] + ["mean", "gain"]
    body = [[r.method] + [f"{100 * a:.1f}" for a in r.accuracies] + [f"{100 * r.mean:.1f}", f"{100 * r.gain:+.1f}"]
            for r in rows]
    widths = [max(len(line[i]) for line in [head] + body) for i in range(len(head))]
    fmt = lambda line: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
    ranking = sorted(rows, key=lambda r: -r.mean)
    lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    lines.append("ranking: " + " > ".join(r.method for r in ranking))
    return "\n".join(lines)


def table_csv(rows: Sequence[AblationRow], seeds: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"seed{s}" for s in seeds] + ["mean", "gain"])
    for r in rows:
        w.writerow([r.method] + [f"{a:.6f}" for a in r.accuracies] + [f"{r.mean:.6f}", f"{r.gain:.6f}"])
    return buf.getvalue()
