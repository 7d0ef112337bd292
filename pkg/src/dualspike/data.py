"""Datasets, poison partitions and baseline trigger stamping.

Image corpora are either loaded from IDX files or synthesized (class-coded
gaussian blobs / oriented bars on a dark background). Event corpora are
binary spatio-temporal patterns emulating a moving neuromorphic source.
All generators are deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .idx import read_idx

_SIGMA_FLOOR = 1e-3


@dataclass
class Dataset:
    """Images in [0,1] with integer labels and per-channel train-split stats."""

    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    n_classes: int
    mu: np.ndarray = field(default=None)
    sigma: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree on sample count")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must be < n_classes")
        if self.mu is None:
            self.compute_stats()

    def __len__(self):
        return len(self.images)

    @property
    def in_shape(self):
        return self.images.shape[1:]

    def compute_stats(self):
        """Per-channel mean/std; call on the training split only."""
        if len(self.images):
            self.mu = self.images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            sig = self.images.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            self.sigma = np.maximum(sig, _SIGMA_FLOOR)
        else:
            c = self.images.shape[1]
            self.mu = np.zeros(c, dtype=np.float32)
            self.sigma = np.ones(c, dtype=np.float32)

    def with_stats_from(self, other: "Dataset") -> "Dataset":
        self.mu = other.mu.copy()
        self.sigma = other.sigma.copy()
        return self

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mu.reshape(1, -1, 1, 1)) / self.sigma.reshape(1, -1, 1, 1)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.sigma.reshape(1, -1, 1, 1) + self.mu.reshape(1, -1, 1, 1)


@dataclass
class EventDataset:
    """Binary spike frames [N, T, 2, H, W] with integer labels."""

    frames: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 5 or self.frames.shape[2] != 2:
            raise ValueError(f"event frames must be [N, T, 2, H, W], got {self.frames.shape}")
        if len(self.frames) and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise ValueError("event values must lie in [0, 1]")

    def __len__(self):
        return len(self.frames)

    @property
    def T(self):
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def load_idx_images(image_path, label_path, n_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; byte 255 maps to pixel 1.0."""
    raw = read_idx(image_path)
    labels = read_idx(label_path)
    if labels.ndim != 1:
        raise ValueError(f"{label_path}: labels must be 1-D, got shape {labels.shape}")
    if raw.ndim == 3:
        raw = raw[:, None]  # single channel
    elif raw.ndim != 4:
        raise ValueError(f"{image_path}: images must be 3-D or 4-D, got shape {raw.shape}")
    if len(raw) != len(labels):
        raise ValueError(f"image count {len(raw)} != label count {len(labels)}")
    images = raw.astype(np.float32) / 255.0
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(images, labels, n_classes)


def load_idx_events(frame_path, label_path, n_classes: int | None = None) -> EventDataset:
    raw = read_idx(frame_path)
    labels = read_idx(label_path).astype(np.int64)
    if raw.ndim != 5:
        raise ValueError(f"{frame_path}: event frames must be 5-D, got shape {raw.shape}")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 0
    return EventDataset(raw.astype(np.float32), labels, n_classes)


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def _blob(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2)).astype(np.float32)


def _class_anchor(c: int, n_classes: int, size: int):
    angle = 2.0 * np.pi * c / n_classes
    r = size * 0.28
    return size / 2 + r * np.sin(angle), size / 2 + r * np.cos(angle)


def synth_dataset(kind: str, classes: int, per_class: int, seed: int,
                  size: int = 16) -> Dataset:
    """Class-conditional structured images on a dark noisy background.

    blobs: a gaussian bump at a class-specific ring position, jittered.
    bars:  a bright bar through the center at a class-specific angle.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if kind not in ("blobs", "bars"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng([seed, 11])
    n = classes * per_class
    images = np.empty((n, 1, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class).astype(np.int64)
    for i, c in enumerate(labels):
        base = rng.uniform(0.02, 0.10) + rng.uniform(0.0, 0.06, (size, size)).astype(np.float32)
        if kind == "blobs":
            cy, cx = _class_anchor(int(c), classes, size)
            cy += rng.uniform(-1.2, 1.2)
            cx += rng.uniform(-1.2, 1.2)
            amp = rng.uniform(0.65, 0.95)
            img = base + amp * _blob(size, cy, cx, radius=size / 7.5)
        else:
            angle = np.pi * c / classes + rng.uniform(-0.08, 0.08)
            yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2.0
            dist = np.abs(np.cos(angle) * yy - np.sin(angle) * xx)
            amp = rng.uniform(0.65, 0.95)
            img = base + amp * np.exp(-(dist**2) / 2.0).astype(np.float32)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes)


def synth_events(classes: int, per_class: int, T: int, density: float, seed: int,
                 size: int = 12) -> EventDataset:
    """Moving-source spike patterns: a disc travels along a class-coded path.

    Channel 0 carries the disc at its current position, channel 1 the disc at
    the previous position (arriving/leaving polarity). Values are exactly
    {0, 1}; within the disc each site fires with probability `density`.
    """
    if not 0.0 < density < 1.0:
        raise ValueError(f"density must be in (0, 1), got {density}")
    rng = np.random.default_rng([seed, 12])
    n = classes * per_class
    frames = np.zeros((n, T, 2, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class).astype(np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    radius = size / 4.5
    for i, c in enumerate(labels):
        angle = 2.0 * np.pi * c / classes
        vy, vx = np.sin(angle) * size / (2.2 * T), np.cos(angle) * size / (2.2 * T)
        cy = size / 2 - vy * (T - 1) / 2 + rng.uniform(-0.8, 0.8)
        cx = size / 2 - vx * (T - 1) / 2 + rng.uniform(-0.8, 0.8)
        prev = None
        for t in range(T):
            disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius**2
            fire = disc & (rng.random((size, size)) < density)
            frames[i, t, 0][fire] = 1.0
            if prev is not None:
                frames[i, t, 1][prev] = 1.0
            prev = fire
            cy += vy
            cx += vx
    return EventDataset(frames, labels, classes)


# ---------------------------------------------------------------------------
# poison partitioning
# ---------------------------------------------------------------------------

class PartitionError(ValueError):
    pass


@dataclass
class PoisonPartition:
    """Index split (non-target, clean-target, poison-target) at ratio P."""

    y_target: int
    non_target: np.ndarray
    clean_target: np.ndarray
    poison: np.ndarray
    ratio: float

    def validate(self, labels: np.ndarray):
        sets = [set(self.non_target.tolist()), set(self.clean_target.tolist()),
                set(self.poison.tolist())]
        total = len(self.non_target) + len(self.clean_target) + len(self.poison)
        union = sets[0] | sets[1] | sets[2]
        if len(union) != total or len(union) != len(labels):
            raise PartitionError("partition sets must be disjoint and cover all indices")
        if not all(labels[i] == self.y_target for i in self.clean_target):
            raise PartitionError("clean-target set contains a non-target label")
        if not all(labels[i] == self.y_target for i in self.poison):
            raise PartitionError("poison set contains a non-target label")
        if not all(labels[i] != self.y_target for i in self.non_target):
            raise PartitionError("non-target set contains a target label")


def partition(labels: np.ndarray, y_target: int, ratio: float, seed: int) -> PoisonPartition:
    """Draw the poison subset uniformly from the target class.

    The poison size is round-half-up of ratio * |D|; a ratio that would need
    more samples than the target class holds is rejected with the maximum
    feasible value.
    """
    labels = np.asarray(labels)
    n = len(labels)
    target_idx = np.flatnonzero(labels == y_target)
    n_poison = int(np.floor(ratio * n + 0.5))
    if n_poison > len(target_idx):
        raise PartitionError(
            f"poison ratio {ratio} needs {n_poison} target-class samples but only "
            f"{len(target_idx)} exist (max feasible ratio {len(target_idx) / n:.4f})"
        )
    rng = np.random.default_rng([seed, 13])
    poison = np.sort(rng.choice(target_idx, size=n_poison, replace=False))
    clean_target = np.setdiff1d(target_idx, poison)
    non_target = np.flatnonzero(labels != y_target)
    return PoisonPartition(y_target, non_target, clean_target, poison, ratio)


# ---------------------------------------------------------------------------
# baseline poisoning
# ---------------------------------------------------------------------------

def baseline_poison(x: np.ndarray, kind: str, patch_size: int = 3,
                    blend_ratio: float = 0.15, pattern: np.ndarray | None = None) -> np.ndarray:
    """Stamp a conventional trigger onto images [.., C, H, W].

    badnet_patch: white square in the bottom-right corner.
    blended: (1 - r) * x + r * pattern, clipped to [0, 1]; the default
    pattern is a fixed seeded noise image.
    """
    out = np.array(x, dtype=np.float32, copy=True)
    h, w = out.shape[-2:]
    if kind == "badnet_patch":
        if patch_size > h or patch_size > w:
            raise ValueError(f"patch {patch_size} does not fit in {h}x{w}")
        out[..., h - patch_size :, w - patch_size :] = 1.0
    elif kind == "blended":
        if not 0.0 <= blend_ratio <= 1.0:
            raise ValueError(f"blend ratio must be in [0, 1], got {blend_ratio}")
        if pattern is None:
            pattern = default_blend_pattern(out.shape[-3:])
        out = np.clip((1.0 - blend_ratio) * out + blend_ratio * pattern, 0.0, 1.0)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return out.astype(np.float32)


def default_blend_pattern(shape) -> np.ndarray:
    return np.random.default_rng([20240101, 14]).random(shape, dtype=np.float32)


def poison_dataset_baseline(dataset: Dataset, kind: str, ratio: float, y_target: int,
                            seed: int, **kwargs) -> Dataset:
    """Classic label-flipping data poisoning: stamp + relabel a random subset."""
    rng = np.random.default_rng([seed, 15])
    n_poison = int(np.floor(ratio * len(dataset) + 0.5))
    chosen = rng.choice(len(dataset), size=n_poison, replace=False)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    images[chosen] = baseline_poison(images[chosen], kind, **kwargs)
    labels[chosen] = y_target
    out = Dataset(images, labels, dataset.n_classes)
    return out.with_stats_from(dataset)


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------

def write_dataset_manifest(path, kind: str, seed: int, sizes: dict[str, int], extra: dict | None = None):
    lines = [f"kind = {kind}", f"seed = {seed}"]
    for name, value in sizes.items():
        lines.append(f"{name} = {value}")
    for name, value in (extra or {}).items():
        lines.append(f"{name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
