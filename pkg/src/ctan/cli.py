"""Command-line front end.

    ctan init-config [--out FILE]
    ctan synth-data --config FILE --out DIR [--seed N]
    ctan train --config FILE [--out DIR] [--seed N] [--source-only]
    ctan eval --checkpoint FILE --manifest FILE [--config FILE]
    ctan export-embeddings --checkpoint FILE --manifest FILE --out FILE [--config FILE]
    ctan gradcheck [--seed N]
    ctan ablate --config FILE [--out DIR] [--seed N]

Exit status: 0 success, 1 user or configuration error, 2 internal failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from ctan import benchmark, gradcheck
from ctan.backbone import ModelBundle, init_model
from ctan.config import ConfigError, RunConfig, load_config, serialize_config
from ctan.data import (SPLITS, ManifestError, build_clipset, clip_loader, generate_synthetic, load_manifest,
                       write_domain)
from ctan.serialization import FormatError, load_checkpoint, save_checkpoint
from ctan.trainer import Datasets, evaluate, export_embeddings, metrics_csv, train

log = logging.getLogger("ctan")

USER_ERRORS = (ConfigError, ManifestError, FormatError, OSError, ValueError)
CONFIG_NAME = "config.cfg"


def _with_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "source_only", False):
        cfg = replace(cfg, train=replace(cfg.train, source_only=True))
    return cfg.validate()


def _write_atomic(path: Path, data: str | bytes) -> None:
    # write-then-rename so an interrupted command never leaves a truncated artifact
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)
    os.replace(tmp, path)


def cmd_init_config(args) -> int:
    text = serialize_config(RunConfig())
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth_data(args) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    if cfg.synthetic is None:
        raise ConfigError("synth-data needs a synthetic.* section")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.seeds
    synth = replace(cfg.synthetic, seed=seeds.data)
    counts = {}
    for domain in generate_synthetic(synth):
        manifests = write_domain(domain, out, seeds.split)
        counts[domain.name] = {split: Counter(r.label for r in m.records) for split, m in manifests.items()}
    print(_count_table(counts, synth.class_names))
    return 0


def _count_table(counts: dict, class_names: Sequence[str]) -> str:
    """Segments per class, one column per (domain, split)."""
    cols = [(d, s) for d in counts for s in SPLITS]
    head = ["class"] + [f"{d}/{s}" for d, s in cols]
    rows = [[name] + [str(counts[d][s][i]) for d, s in cols] for i, name in enumerate(class_names)]
    rows.append(["total"] + [str(sum(counts[d][s].values())) for d, s in cols])
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                     for r in [head] + rows)


def cmd_train(args) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target, classes = benchmark.run_data(cfg)
    seeds = cfg.seeds
    bundle = init_model(benchmark.fit_backbone(cfg.backbone, source.train), len(classes), seeds.init)
    data = Datasets(source.train, target.train, target.val, source.val if cfg.synthetic is not None else None)
    result = train(bundle, data, replace(cfg.train, seed=seeds.train))
    _write_atomic(out / CONFIG_NAME, serialize_config(cfg))
    for stage, snapshot in sorted(result.stage_bundles.items()):
        path = out / f"stage{stage}.ckpt"
        tmp = path.with_name(path.name + ".tmp")
        save_checkpoint(tmp, {k: v.data for k, v in snapshot.params.items()})
        os.replace(tmp, path)
    _write_atomic(out / "metrics.csv", metrics_csv(result.metrics))
    if result.metrics:
        last = result.metrics[-1]
        print(f"epochs={last.epoch} source_acc={last.source_acc:.4f} target_val_acc={last.target_val_acc:.4f}")
    print(f"target_test_accuracy={evaluate(result.bundle, target.test):.4f}")
    return 0


def _load_bundle(checkpoint: str, config: Optional[str], num_classes: int, clips) -> ModelBundle:
    config = config or str(Path(checkpoint).with_name(CONFIG_NAME))
    cfg = load_config(config, check_paths=False)
    arrays = load_checkpoint(checkpoint)
    bundle = init_model(benchmark.fit_backbone(cfg.backbone, clips), num_classes, 0)
    try:
        bundle.load_arrays(arrays)
    except ValueError as exc:
        raise ConfigError(f"checkpoint {checkpoint} does not fit the model of {config}: {exc}") from None
    return bundle


def _manifest_clips(manifest_path: str, config: Optional[str], checkpoint: str, clip_dir: Optional[str]):
    manifest = load_manifest(manifest_path)
    if not manifest.records:
        raise ConfigError(f"manifest {manifest_path} has no records")
    cfg = load_config(config or str(Path(checkpoint).with_name(CONFIG_NAME)), check_paths=False)
    clips_dir = clip_dir or str(Path(manifest_path).parent / "clips")
    return manifest, build_clipset(manifest.records, clip_loader(clips_dir), cfg.size, cfg.crop)


def cmd_eval(args) -> int:
    manifest, clips = _manifest_clips(args.manifest, args.config, args.checkpoint, args.clips)
    bundle = _load_bundle(args.checkpoint, args.config, len(manifest.class_names), clips)
    print(f"accuracy={evaluate(bundle, clips):.4f}")
    return 0


def cmd_export_embeddings(args) -> int:
    manifest, clips = _manifest_clips(args.manifest, args.config, args.checkpoint, args.clips)
    bundle = _load_bundle(args.checkpoint, args.config, len(manifest.class_names), clips)
    emb = export_embeddings(bundle, clips)
    lines = [",".join([*(repr(float(v)) for v in row), str(r.label), str(r.domain)])
             for row, r in zip(emb, manifest.records)]
    _write_atomic(Path(args.out), "\n".join(lines) + "\n")
    print(f"rows={len(lines)} dim={emb.shape[1]}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck.run_gradcheck(seed=args.seed or 0)
    print(gradcheck.format_report(rows))
    return 0 if all(r.passed for r in rows) else 2


def cmd_ablate(args) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = benchmark.ablate(cfg, progress=lambda m, s, a: log.info("%s seed %d: %.4f", m, s, a))
    table = benchmark.format_table(rows, cfg.ablation_seeds)
    _write_atomic(out / "ablation.txt", table + "\n")
    _write_atomic(out / "ablation.csv", benchmark.table_csv(rows, cfg.ablation_seeds))
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctan", description="Channel-temporal attention for adversarial "
                                                              "video domain adaptation, at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out_help="output directory (overrides run.output_dir)"):
        if config:
            p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("init-config", help="write a complete commented default configuration")
    p.add_argument("--out", help="file to write (default: stdout)")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("synth-data", help="generate synthetic source/target clips and manifests")
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="two-stage adversarial training")
    common(p)
    p.add_argument("--source-only", action="store_true", help="skip the adversarial stage")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "accuracy of a checkpoint on a manifest"),
                              ("export-embeddings", cmd_export_embeddings, "feature-extractor outputs as CSV")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--config", help=f"run configuration (default: {CONFIG_NAME} beside the checkpoint)")
        p.add_argument("--clips", help="clip directory (default: clips/ beside the manifest)")
        if name == "export-embeddings":
            p.add_argument("--out", required=True, help="CSV file: embedding values, label, domain")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="source-only, DANN and the four block variants over several seeds")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal invariant violated
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
