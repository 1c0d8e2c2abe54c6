"""Synthetic moving-shape clips: one shape and one constant velocity per class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

SHAPES = ("square", "disk", "triangle", "cross", "ring", "bar")
# (dx, dy) in pixels per frame
DEFAULT_VELOCITIES = ((1, 0), (0, 1), (-1, 1), (2, -1), (-2, 0), (1, 2))


@dataclass(frozen=True)
class SyntheticVideoSpec:
    num_classes: int = 4
    frames: int = 8
    channels: int = 4
    height: int = 32
    width: int = 32
    shape_size: int = 10
    samples_per_class: int = 16
    seed: int = 0
    velocities: Optional[tuple] = None

    def velocity(self, k: int) -> tuple:
        table = self.velocities if self.velocities is not None else DEFAULT_VELOCITIES
        return tuple(table[k % len(table)])

    def validate(self) -> None:
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("need at least one class and one sample per class")
        if self.frames < 1 or self.channels < 1:
            raise ValueError("frames and channels must be positive")
        if self.shape_size < 1:
            raise ValueError(f"shape_size must be positive, got {self.shape_size}")
        if self.shape_size > min(self.height, self.width):
            raise ValueError(f"shape of size {self.shape_size} does not fit a {self.height}x{self.width} frame")
        if self.velocities is not None and len(self.velocities) < 1:
            raise ValueError("velocities must be non-empty when given")


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` stencil."""
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2.0
    r = size / 2.0
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "disk":
        return (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    if kind == "triangle":
        return np.abs(xx - c) <= yy / 2.0 + 0.5
    if kind == "cross":
        w = max(1, size // 4)
        return (np.abs(xx - c) < w) | (np.abs(yy - c) < w)
    if kind == "ring":
        d = (yy - c) ** 2 + (xx - c) ** 2
        return (d <= r * r) & (d >= (r * 0.5) ** 2)
    if kind == "bar":
        return np.abs(yy - c) < max(1, size // 4)
    raise ValueError(f"unknown shape {kind!r}")


class VideoDataset:
    """Indexable ``(clip [F, C, H, W], class id)`` collection.

    Item ``i`` belongs to class ``i % num_classes``; its start position and
    per-channel brightness come from a generator keyed by (seed, class, index).
    """

    def __init__(self, spec: SyntheticVideoSpec):
        spec.validate()
        self.spec = spec

    def __len__(self) -> int:
        return self.spec.num_classes * self.spec.samples_per_class

    def clip(self, k: int, index: int) -> np.ndarray:
        s = self.spec
        if not 0 <= k < s.num_classes:
            raise IndexError(f"class {k} out of range")
        rng = np.random.default_rng([s.seed, k, index])
        y0 = int(rng.integers(0, s.height))
        x0 = int(rng.integers(0, s.width))
        level = rng.uniform(0.3, 1.0, size=s.channels)

        mask = np.zeros((s.height, s.width), dtype=bool)
        mask[:s.shape_size, :s.shape_size] = shape_mask(SHAPES[k % len(SHAPES)], s.shape_size)
        mask = np.roll(mask, (y0, x0), axis=(0, 1))
        frame0 = np.where(mask[None], level[:, None, None], -1.0)

        dx, dy = s.velocity(k)
        return np.stack([np.roll(frame0, (f * dy, f * dx), axis=(1, 2)) for f in range(s.frames)])

    def __getitem__(self, i: int):
        if not 0 <= i < len(self):
            raise IndexError(f"item {i} out of range for {len(self)} items")
        k = i % self.spec.num_classes
        return self.clip(k, i // self.spec.num_classes), k

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        items = [self[int(i)] for i in indices]
        return np.stack([c for c, _ in items]), np.array([k for _, k in items], dtype=np.int64)


def make_dataset(spec: SyntheticVideoSpec) -> VideoDataset:
    return VideoDataset(spec)
