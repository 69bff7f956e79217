"""Run configuration: a flat ``section.key = value`` text file.

Values are Python literals (numbers, strings in quotes, tuples, ``True``,
``None``); ``#`` starts a comment.  Data comes either from a ``synthetic.*``
section or from ``manifest.*`` paths, never both.  Every seed used by a run
is derived from ``run.seed``.
"""
from __future__ import annotations

import ast
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from ctan.backbone import BackboneConfig, StageConfig
from ctan.data import DomainShift, SyntheticConfig
from ctan.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    data: int
    split: int
    init: int
    train: int


def derive_seeds(root: int) -> Seeds:
    """Independent child seeds for data generation, splitting, initialization and training."""
    if root < 0:
        raise ConfigError(f"seed must be nonnegative, got {root}")
    children = np.random.SeedSequence(root).spawn(4)
    return Seeds(*(int(c.generate_state(1, np.uint32)[0]) for c in children))


@dataclass(frozen=True)
class ManifestPaths:
    source_train: str
    target_train: str
    target_val: str
    target_test: str
    clip_dir: str

    def check(self) -> None:
        for f in fields(self):
            if not Path(getattr(self, f.name)).exists():
                raise ConfigError(f"manifest.{f.name}: {getattr(self, f.name)} does not exist")


# defaults of the committed synthetic benchmark (see README); library dataclasses keep their own defaults
BENCHMARK_SYNTHETIC = SyntheticConfig(spatial=(64, 64), pattern_size=6.0, travel=(0.8, 1.0))
BENCHMARK_BACKBONE = BackboneConfig()
BENCHMARK_TRAIN = TrainConfig(lr_stage1=0.03, max_grad_norm=5.0)


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = BENCHMARK_BACKBONE
    train: TrainConfig = BENCHMARK_TRAIN
    synthetic: Optional[SyntheticConfig] = BENCHMARK_SYNTHETIC
    manifest: Optional[ManifestPaths] = None
    output_dir: str = "runs/default"
    seed: int = 0
    size: int = 32
    crop: Optional[int] = None
    ablation_seeds: tuple[int, ...] = (0, 1, 2)

    def validate(self, check_paths: bool = False) -> "RunConfig":
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("exactly one data source is required: synthetic.* or manifest.*")
        if self.size < 1 or (self.crop is not None and not 1 <= self.crop <= self.size):
            raise ConfigError(f"invalid size/crop ({self.size}, {self.crop})")
        if not self.ablation_seeds:
            raise ConfigError("run.ablation_seeds must not be empty")
        try:
            self.train.validate()
            if self.synthetic is not None:
                self.synthetic.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if check_paths and self.manifest is not None:
            self.manifest.check()
        return self

    @property
    def seeds(self) -> Seeds:
        return derive_seeds(self.seed)

    @property
    def effective_crop(self) -> int:
        return int(0.875 * self.size) if self.crop is None else self.crop


# Keys that are not written to the file: derived from the data or from run.seed.
_BACKBONE_DERIVED = {"stages", "in_channels", "frames", "height", "width"}
_RUN_KEYS = ("output_dir", "seed", "size", "crop", "ablation_seeds")


def _field_type(cls, name):
    return typing.get_type_hints(cls)[name]


def _coerce(value: Any, hint, key: str) -> Any:
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected True or False, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a quoted string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key}: expected a tuple, got {value!r}")
        item = args[0]
        if len(args) == 2 and args[1] is Ellipsis or len(args) == 1:
            return tuple(_coerce(v, item, key) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    raise ConfigError(f"{key}: unsupported field type {hint}")  # pragma: no cover


def to_flat(cfg: RunConfig) -> dict[str, Any]:
    """The configuration as an ordered ``{dotted key: value}`` mapping."""
    flat: dict[str, Any] = {f"run.{k}": getattr(cfg, k) for k in _RUN_KEYS}
    stages = cfg.backbone.stages
    flat["backbone.channels"] = tuple(s.out_channels for s in stages)
    for part in ("kernel", "stride", "padding"):
        values = {getattr(s, part) for s in stages}
        if len(values) != 1:
            raise ConfigError(f"stages with differing {part} cannot be written to a flat config")
        flat[f"backbone.{part}"] = values.pop()
    for f in fields(BackboneConfig):
        if f.name not in _BACKBONE_DERIVED:
            flat[f"backbone.{f.name}"] = getattr(cfg.backbone, f.name)
    for f in fields(TrainConfig):
        if f.name != "seed":
            flat[f"train.{f.name}"] = getattr(cfg.train, f.name)
    if cfg.synthetic is not None:
        for f in fields(SyntheticConfig):
            if f.name in ("seed", "source_shift", "target_shift"):
                continue
            flat[f"synthetic.{f.name}"] = getattr(cfg.synthetic, f.name)
        for side in ("source", "target"):
            shift = getattr(cfg.synthetic, f"{side}_shift")
            for f in fields(DomainShift):
                flat[f"synthetic.{side}.{f.name}"] = getattr(shift, f.name)
    if cfg.manifest is not None:
        for f in fields(ManifestPaths):
            flat[f"manifest.{f.name}"] = getattr(cfg.manifest, f.name)
    return flat


def from_flat(flat: dict[str, Any], base: RunConfig = RunConfig()) -> RunConfig:
    """Overlay dotted keys on ``base``; unknown keys and mistyped values raise :class:`ConfigError`."""
    groups: dict[str, dict[str, Any]] = {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"{key}: keys are written as section.name")
        groups.setdefault(section, {})[name] = value
    unknown = set(groups) - {"run", "backbone", "train", "synthetic", "manifest"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if "synthetic" in groups and "manifest" in groups:
        raise ConfigError("synthetic.* and manifest.* are mutually exclusive")

    run = {}
    for name, value in groups.get("run", {}).items():
        if name not in _RUN_KEYS:
            raise ConfigError(f"run.{name}: unknown key")
        run[name] = _coerce(value, _field_type(RunConfig, name), f"run.{name}")

    backbone = base.backbone
    b = dict(groups.get("backbone", {}))
    stage_keys = {k: b.pop(k) for k in ("channels", "kernel", "stride", "padding") if k in b}
    if stage_keys:
        channels = _coerce(stage_keys.get("channels", tuple(s.out_channels for s in backbone.stages)),
                           tuple[int, ...], "backbone.channels")
        first = backbone.stages[0]
        geom = {p: _coerce(stage_keys.get(p, getattr(first, p)), tuple[int, int, int], f"backbone.{p}")
                for p in ("kernel", "stride", "padding")}
        backbone = replace(backbone, stages=tuple(StageConfig(c, **geom) for c in channels))
    backbone = replace(backbone, **_section(b, BackboneConfig, "backbone", _BACKBONE_DERIVED))
    train = replace(base.train, **_section(groups.get("train", {}), TrainConfig, "train", {"seed"}))

    synthetic, manifest = base.synthetic, base.manifest
    if "manifest" in groups:
        synthetic = None
        m = groups["manifest"]
        missing = [f.name for f in fields(ManifestPaths) if f.name not in m and manifest is None]
        if missing:
            raise ConfigError(f"manifest section is missing {', '.join('manifest.' + k for k in missing)}")
        current = {f.name: getattr(manifest, f.name) for f in fields(ManifestPaths)} if manifest else {}
        current.update(_section(m, ManifestPaths, "manifest", set()))
        manifest = ManifestPaths(**current)
    elif "synthetic" in groups:
        manifest = None
        s = dict(groups["synthetic"])
        synthetic = synthetic or SyntheticConfig()
        shifts = {}
        for side in ("source", "target"):
            sub = {k.split(".", 1)[1]: s.pop(k) for k in list(s) if k.startswith(side + ".")}
            shifts[f"{side}_shift"] = replace(getattr(synthetic, f"{side}_shift"),
                                              **_section(sub, DomainShift, f"synthetic.{side}", set()))
        synthetic = replace(synthetic, **_section(s, SyntheticConfig, "synthetic", {"seed"}), **shifts)
    try:
        return replace(base, backbone=backbone, train=train, synthetic=synthetic, manifest=manifest, **run)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _section(values: dict[str, Any], cls, prefix: str, excluded: set[str]) -> dict[str, Any]:
    names = {f.name for f in fields(cls)} - excluded
    out = {}
    for name, value in values.items():
        if name not in names:
            raise ConfigError(f"{prefix}.{name}: unknown key")
        out[name] = _coerce(value, _field_type(cls, name), f"{prefix}.{name}")
    return out


def parse_config(text: str, base: RunConfig = RunConfig(), source: str = "<config>") -> RunConfig:
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key in flat:
            raise ConfigError(f"{source}:{lineno}: {key} given twice")
        try:
            flat[key] = ast.literal_eval(value.strip())
        except (ValueError, SyntaxError):
            raise ConfigError(f"{source}:{lineno}: cannot read value {value.strip()!r} "
                              "(strings need quotes)") from None
    try:
        return from_flat(flat, base)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _strip_comment(line: str) -> str:
    # a '#' inside a quoted string is not a comment
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


_COMMENTS = {
    "run": "output directory, root seed (all other seeds derive from it), resize side, crop side "
           "(None = 0.875 * size), seeds used by ablate",
    "backbone": "mini 3-D CNN; cta_after lists 1-based stages followed by an attention block",
    "train": "two-stage schedule: lambda = 0 at lr_stage1, then the lambda ramp at lr_stage2",
    "synthetic": "moving-pattern videos; the target regime is the domain shift",
    "manifest": "manifests written by synth-data (or your own) and the directory of <video_id>.ctan clips",
}


def serialize_config(cfg: RunConfig, comments: bool = True) -> str:
    lines, section = [], None
    for key, value in to_flat(cfg).items():
        head = key.split(".", 1)[0]
        if head != section:
            if section is not None:
                lines.append("")
            if comments:
                lines.append(f"# {head}: {_COMMENTS[head]}")
            section = head
        lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path)).validate(check_paths)
