"""Segments, splits, manifests, clip preprocessing and the synthetic domain-shift generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ctan.serialization import load_tensor, save_tensor
from ctan.tensor import Tensor

SEGMENT_LENGTH = 16
SEGMENT_OVERLAP = 4
SPLITS = ("train", "val", "test")
SOURCE, TARGET = 1, 0
MANIFEST_HEADER = ["video_id", "start_frame", "length", "label", "domain"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentRecord:
    video_id: str
    start_frame: int
    label: int
    domain: int
    length: int = SEGMENT_LENGTH

    def __post_init__(self):
        if self.length != SEGMENT_LENGTH:
            raise ValueError(f"segments are {SEGMENT_LENGTH} frames, got {self.length}")
        if self.start_frame < 0:
            raise ValueError("start_frame must be nonnegative")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"domain tag must be 1 (source) or 0 (target), got {self.domain}")

    @property
    def key(self) -> tuple[str, int]:
        return self.video_id, self.start_frame


@dataclass
class Manifest:
    records: list[SegmentRecord]
    split: str
    class_names: list[str]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        seen = set()
        for r in self.records:
            if not 0 <= r.label < len(self.class_names):
                raise ManifestError(f"label {r.label} of {r.key} outside the class list")
            if r.key in seen:
                raise ManifestError(f"duplicate segment {r.key}")
            seen.add(r.key)


def window_segments(frame_count: int, window: int = SEGMENT_LENGTH, overlap: int = SEGMENT_OVERLAP) -> list[int]:
    """Start frames of all full windows at stride ``window - overlap``."""
    if not window > overlap >= 0:
        raise ValueError(f"need window > overlap >= 0, got window={window}, overlap={overlap}")
    return list(range(0, frame_count - window + 1, window - overlap))


def _by_class(records: Iterable[SegmentRecord]) -> dict[int, list[SegmentRecord]]:
    groups: dict[int, list[SegmentRecord]] = {}
    for r in records:
        groups.setdefault(r.label, []).append(r)
    return {k: sorted(v, key=lambda r: r.key) for k, v in sorted(groups.items())}


def split_test_equidistant(records: Iterable[SegmentRecord], period: int = 5) -> tuple[list[SegmentRecord], list[SegmentRecord]]:
    """Per class, every ``period``-th segment (index ``period-1``, ``2*period-1``, ...) goes to test.

    Within a class, segments are ordered by (video_id, start_frame) first.
    """
    train, test = [], []
    for group in _by_class(records).values():
        for i, r in enumerate(group):
            (test if i % period == period - 1 else train).append(r)
    return train, test


def split_val_random(records: Sequence[SegmentRecord], seed: int, val_fraction: float = 0.1) -> tuple[list[SegmentRecord], list[SegmentRecord]]:
    """Seeded shuffle; the first ``ceil(val_fraction * m)`` records become validation."""
    if not records:
        raise ValueError("cannot split an empty record list")
    order = np.random.default_rng(seed).permutation(len(records))
    n_val = math.ceil(val_fraction * len(records))
    val_idx = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def make_splits(records: Sequence[SegmentRecord], class_names: list[str], seed: int) -> dict[str, Manifest]:
    rest, test = split_test_equidistant(records)
    train, val = split_val_random(rest, seed)
    return {"train": Manifest(train, "train", class_names),
            "val": Manifest(val, "val", class_names),
            "test": Manifest(test, "test", class_names)}


def header_path(path) -> Path:
    return Path(path).with_suffix(".header")


def save_manifest(manifest: Manifest, path) -> None:
    """CSV rows with class-name labels, plus a sibling ``.header`` holding split and class list."""
    path = Path(path)
    with open(header_path(path), "w", encoding="utf-8") as f:
        f.write(f"split={manifest.split}\n")
        for name in manifest.class_names:
            f.write(f"class={name}\n")
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow([r.video_id, r.start_frame, r.length, manifest.class_names[r.label], r.domain])


def load_manifest(path) -> Manifest:
    path = Path(path)
    split, class_names = None, []
    with open(header_path(path), encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or key not in ("split", "class"):
                raise ManifestError(f"{header_path(path)}:{lineno}: expected split=... or class=...")
            if key == "split":
                split = value
            else:
                class_names.append(value)
    if split is None:
        raise ManifestError(f"{header_path(path)}: missing split line")
    index = {name: i for i, name in enumerate(class_names)}
    records, seen = [], {}
    with open(path, encoding="utf-8", newline="") as f:
        rows = csv.reader(f)
        header = next(rows, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            video_id, start, length, label, domain = row
            if label not in index:
                raise ManifestError(f"{path}:{lineno}: unknown class name {label!r}")
            try:
                rec = SegmentRecord(video_id, int(start), index[label], int(domain), int(length))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if rec.key in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate segment {rec.key} (first seen on line {seen[rec.key]})")
            seen[rec.key] = lineno
            records.append(rec)
    return Manifest(records, split, class_names)


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(frames: np.ndarray, size: int) -> np.ndarray:
    """Resize the trailing (H, W) axes to (size, size) with half-pixel-centre bilinear sampling."""

    def axis_weights(n_in):
        src = np.clip((np.arange(size) + 0.5) * n_in / size - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(frames.dtype)

    lo, hi, f = axis_weights(frames.shape[-2])
    out = frames[..., lo, :] * (1 - f)[:, None] + frames[..., hi, :] * f[:, None]
    lo, hi, f = axis_weights(frames.shape[-1])
    return out[..., lo] * (1 - f) + out[..., hi] * f


def crop_offsets(size: int, crop: int, train_mode: bool, rng: Optional[np.random.Generator]) -> tuple[int, int]:
    if train_mode:
        if rng is None:
            raise ValueError("train-mode cropping needs a random generator")
        return int(rng.integers(0, size - crop + 1)), int(rng.integers(0, size - crop + 1))
    return (size - crop) // 2, (size - crop) // 2


def preprocess_clip(frames: np.ndarray, train_mode: bool, rng: Optional[np.random.Generator] = None,
                    size: int = 32, crop: Optional[int] = None, value_scale: float = 255.0) -> np.ndarray:
    """Raw (16, C, H0, W0) frames -> (1, 16, C, crop, crop) floats in [0, 1].

    Resize to ``size`` x ``size``, then random crop (train) or centre crop
    (eval) of side ``crop`` (default ``floor(0.875 * size)``), one offset for
    the whole clip.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] != SEGMENT_LENGTH:
        raise ValueError(f"expected a ({SEGMENT_LENGTH}, C, H, W) clip, got shape {frames.shape}")
    crop = int(0.875 * size) if crop is None else crop
    if not 1 <= crop <= size:
        raise ValueError(f"crop {crop} must lie in [1, {size}]")
    resized = resize_bilinear(frames.astype(np.float32), size)
    y, x = crop_offsets(size, crop, train_mode, rng)
    out = resized[..., y:y + crop, x:x + crop] / np.float32(value_scale)
    return np.clip(out, 0.0, 1.0)[None]


@dataclass
class ClipSet:
    """Resized segments held in memory, cropped per batch."""

    clips: np.ndarray  # (n, 16, C, size, size), already scaled to [0, 1]
    labels: np.ndarray
    domains: np.ndarray
    records: list[SegmentRecord]
    crop: int

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, idx: Sequence[int], train_mode: bool, rng: Optional[np.random.Generator] = None,
              dtype=np.float32) -> Tensor:
        size = self.clips.shape[-1]
        parts = []
        for i in idx:
            y, x = crop_offsets(size, self.crop, train_mode, rng)
            parts.append(self.clips[i, ..., y:y + self.crop, x:x + self.crop])
        return Tensor(np.stack(parts), dtype=dtype)

    def subset(self, idx: Sequence[int]) -> "ClipSet":
        idx = list(idx)
        return ClipSet(self.clips[idx], self.labels[idx], self.domains[idx],
                       [self.records[i] for i in idx], self.crop)


def build_clipset(records: Sequence[SegmentRecord], load_video: Callable[[str], np.ndarray],
                  size: int = 32, crop: Optional[int] = None, value_scale: float = 255.0) -> ClipSet:
    if not records:
        raise ValueError("cannot build a clip set from zero records")
    cache: dict[str, np.ndarray] = {}
    clips = []
    for r in records:
        if r.video_id not in cache:
            cache[r.video_id] = load_video(r.video_id)
        video = cache[r.video_id]
        if r.start_frame + r.length > video.shape[0]:
            raise ValueError(f"segment {r.key} runs past the end of a {video.shape[0]}-frame video")
        seg = video[r.start_frame:r.start_frame + r.length].astype(np.float32)
        clips.append(np.clip(resize_bilinear(seg, size) / np.float32(value_scale), 0.0, 1.0))
    crop = int(0.875 * size) if crop is None else crop
    return ClipSet(np.stack(clips).astype(np.float32),
                   np.array([r.label for r in records], dtype=np.int64),
                   np.array([r.domain for r in records], dtype=np.int64),
                   list(records), crop)


# ---------------------------------------------------------------------------
# synthetic moving-pattern videos

MOTION_NAMES = ("horizontal", "vertical", "circular", "pulsate",
                "diagonal", "leftward", "upward", "static")


@dataclass(frozen=True)
class DomainShift:
    """Photometric regime of one domain: ``clip(contrast * v + brightness + noise)``."""

    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    noise_sigma: float = 0.0
    background_palette_id: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.contrast_scale <= 0:
            raise ValueError("noise_sigma must be >= 0 and contrast_scale > 0")


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 4
    clips_per_class_per_domain: int = 40
    frames: int = SEGMENT_LENGTH
    spatial: tuple[int, int] = (32, 32)
    channels: int = 1
    pattern_size: float = 2.0
    travel: tuple[float, float] = (0.45, 0.6)  # fraction of the free span a translating pattern covers
    source_shift: DomainShift = DomainShift()
    target_shift: DomainShift = field(default_factory=lambda: DomainShift(0.3, 0.7, 0.1, 1))
    class_fraction: Optional[tuple[float, ...]] = None
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        h, w = self.spatial
        if min(self.num_classes, self.clips_per_class_per_domain, self.frames, h, w, self.channels) < 1:
            raise ValueError("synthetic extents must be positive")
        if not 2 <= self.num_classes <= len(MOTION_NAMES):
            raise ValueError(f"num_classes must be in [2, {len(MOTION_NAMES)}]")
        if 6 * self.pattern_size >= min(h, w):
            raise ValueError(f"pattern of scale {self.pattern_size} does not fit a {h}x{w} frame")
        if not 0 < self.travel[0] <= self.travel[1] <= 1:
            raise ValueError(f"travel range {self.travel} must satisfy 0 < low <= high <= 1")
        if self.class_fraction is not None and (
                len(self.class_fraction) != self.num_classes or not all(0 < f <= 1 for f in self.class_fraction)):
            raise ValueError("class_fraction needs one value in (0, 1] per class")
        return self

    @property
    def class_names(self) -> list[str]:
        return list(MOTION_NAMES[:self.num_classes])


def motion_path(label: int, frames: int, spatial: tuple[int, int], rng: np.random.Generator,
                pattern_size: float, travel_range: tuple[float, float] = (0.45, 0.6)
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame (row, col, scale) of the pattern under the class's motion law."""
    h, w = spatial
    f = np.arange(frames, dtype=np.float64)
    u = f / max(frames - 1, 1)
    margin = 2.5 * pattern_size
    scale = np.full(frames, pattern_size)
    name = MOTION_NAMES[label]
    travel = rng.uniform(*travel_range)
    if name in ("horizontal", "leftward", "vertical", "upward", "diagonal"):
        span_c, span_r = w - 2 * margin, h - 2 * margin
        along_c = margin + span_c * ((1 - travel) * rng.uniform(0, 1) + travel * u)
        along_r = margin + span_r * ((1 - travel) * rng.uniform(0, 1) + travel * u)
        fixed_r = rng.uniform(margin, h - margin) + np.zeros(frames)
        fixed_c = rng.uniform(margin, w - margin) + np.zeros(frames)
        if name == "horizontal":
            row, col = fixed_r, along_c
        elif name == "leftward":
            row, col = fixed_r, (w - 1) - along_c
        elif name == "vertical":
            row, col = along_r, fixed_c
        elif name == "upward":
            row, col = (h - 1) - along_r, fixed_c
        else:
            row, col = along_r, along_c
    elif name == "circular":
        radius = rng.uniform(0.22, 0.3) * min(h, w)
        cr = h / 2 + rng.uniform(-1.5, 1.5)
        cc = w / 2 + rng.uniform(-1.5, 1.5)
        theta = rng.uniform(0, 2 * np.pi) + 2 * np.pi * u
        row, col = cr + radius * np.sin(theta), cc + radius * np.cos(theta)
    elif name == "pulsate":
        row = h / 2 + rng.uniform(-2, 2) + np.zeros(frames)
        col = w / 2 + rng.uniform(-2, 2) + np.zeros(frames)
        scale = pattern_size * (1.0 + 0.6 * np.sin(2 * np.pi * 2 * u + rng.uniform(0, 2 * np.pi)))
    else:  # static
        row = rng.uniform(margin, h - margin) + np.zeros(frames)
        col = rng.uniform(margin, w - margin) + np.zeros(frames)
    return row, col, scale


def background(palette_id: int, spatial: tuple[int, int]) -> np.ndarray:
    h, w = spatial
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    if palette_id == 0:
        return 0.15 + 0.05 * rows / max(h - 1, 1)
    kind = palette_id % 3
    if kind == 1:
        return 0.2 + 0.06 * np.sin(2 * np.pi * (rows + cols) / 8.0)
    if kind == 2:
        return 0.2 + 0.06 * ((rows // 4 + cols // 4) % 2)
    return 0.2 + 0.05 * cols / max(w - 1, 1)


def render_motion(label: int, config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Pattern intensity layer (frames, H, W) in [0, 1]; no background, no photometry."""
    h, w = config.spatial
    row, col, scale = motion_path(label, config.frames, config.spatial, rng, config.pattern_size, config.travel)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (rr[None] - row[:, None, None]) ** 2 + (cc[None] - col[:, None, None]) ** 2
    return 0.8 * np.exp(-d2 / (2 * scale[:, None, None] ** 2))


def apply_shift(layer: np.ndarray, shift: DomainShift, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Composite the pattern over the domain background and apply the photometric regime.

    Returns (frames, C, H, W) in [0, 1].
    """
    frames, h, w = layer.shape
    base = np.minimum(background(shift.background_palette_id, (h, w))[None] + layer, 1.0)
    clip = np.repeat(base[:, None], channels, axis=1)
    clip = shift.contrast_scale * clip + shift.brightness_offset
    if shift.noise_sigma > 0:
        clip = clip + rng.normal(0.0, shift.noise_sigma, clip.shape)
    return np.clip(clip, 0.0, 1.0)


@dataclass
class SyntheticDomain:
    name: str
    tag: int
    videos: dict[str, np.ndarray]  # video_id -> (frames, C, H, W), raw scale 0..255
    records: list[SegmentRecord]
    class_names: list[str]


def generate_domain(config: SyntheticConfig, shift: DomainShift, domain_key: int, tag: int, name: str) -> SyntheticDomain:
    """Videos of one domain.  ``domain_key`` selects the random streams, so two
    calls with the same key and shift are bitwise equal whatever the tag."""
    config.validate()
    videos, records = {}, []
    for label in range(config.num_classes):
        count = config.clips_per_class_per_domain
        if config.class_fraction is not None:
            count = max(1, int(round(count * config.class_fraction[label])))
        for i in range(count):
            motion_ss, noise_ss = np.random.SeedSequence(config.seed, spawn_key=(domain_key, label, i)).spawn(2)
            layer = render_motion(label, config, np.random.default_rng(motion_ss))
            clip = apply_shift(layer, shift, config.channels, np.random.default_rng(noise_ss))
            vid = f"{name}_{config.class_names[label]}_{i:03d}"
            videos[vid] = (clip * 255.0).astype(np.float32)
            records.extend(SegmentRecord(vid, s, label, tag) for s in window_segments(config.frames))
    return SyntheticDomain(name, tag, videos, records, config.class_names)


def generate_synthetic(config: SyntheticConfig) -> tuple[SyntheticDomain, SyntheticDomain]:
    """Source and target domains sharing class motion laws, differing in photometry."""
    source = generate_domain(config, config.source_shift, 0, SOURCE, "source")
    target = generate_domain(config, config.target_shift, 1, TARGET, "target")
    return source, target


def write_domain(domain: SyntheticDomain, out_dir, split_seed: int) -> dict[str, Manifest]:
    """Write ``clips/<video_id>.ctan`` and ``<domain>_<split>.csv`` manifests under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    for vid, video in domain.videos.items():
        save_tensor(out_dir / "clips" / f"{vid}.ctan", video)
    manifests = make_splits(domain.records, domain.class_names, split_seed)
    for split, m in manifests.items():
        save_manifest(m, out_dir / f"{domain.name}_{split}.csv")
    return manifests


def clip_loader(clip_dir) -> Callable[[str], np.ndarray]:
    clip_dir = Path(clip_dir)
    return lambda vid: load_tensor(clip_dir / f"{vid}.ctan")


def with_shift(config: SyntheticConfig, **target_overrides) -> SyntheticConfig:
    return replace(config, target_shift=replace(config.target_shift, **target_overrides))
