"""Shared value types: images, labeled datasets, and a splittable RNG.

Everything downstream works on 64-bit floats. Images are stored as flat
row-major, channel-last vectors so that parameter vectors and pixel vectors
share one substrate. All types are immutable values; operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class NumericError(RuntimeError):
    """A numerical routine failed to reach its accuracy target."""


class BudgetExhaustedError(RuntimeError):
    """The privacy budget cannot accommodate the requested mechanisms."""


def _splitmix64(z: int) -> int:
    """One round of the SplitMix64 mixer (stable 64-bit stream derivation)."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngSeed:
    """Deterministic RNG handle: a (seed, stream) pair.

    Identical (seed, stream) pairs reproduce identical draw sequences on all
    platforms. `derive` produces statistically independent child streams from
    integer indices; derivation is order-sensitive, so ``derive(a, b)`` and
    ``derive(b, a)`` differ. Backed by the counter-based Philox generator, so
    streams never need to be drawn in a particular order.
    """

    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.seed <= _MASK64) or not (0 <= self.stream <= _MASK64):
            raise InvalidArgumentError("seed and stream must be unsigned 64-bit integers")

    def derive(self, *indices: int) -> "RngSeed":
        if not indices:
            raise InvalidArgumentError("derive() needs at least one index")
        s = self.stream
        for idx in indices:
            s = _splitmix64(s ^ (int(idx) & _MASK64))
        return RngSeed(self.seed, s)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImageTensor:
    """Dense real-valued image, flat row-major channel-last storage.

    `data` has length ``width * height * channels`` and is indexed
    (row, column, channel). Dataset images live in [0, 1]; noisy query
    outputs may carry arbitrary real values.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if min(self.width, self.height, self.channels) < 1:
            raise InvalidArgumentError("image dimensions must be positive")
        object.__setattr__(self, "data", _frozen(self.data).reshape(-1))
        if self.data.size != self.width * self.height * self.channels:
            raise InvalidArgumentError(
                f"data length {self.data.size} != {self.width}x{self.height}x{self.channels}"
            )
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("image data must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def as_3d(self) -> np.ndarray:
        return self.data.reshape(self.height, self.width, self.channels)

    def in_unit_range(self) -> bool:
        return bool(np.all(self.data >= 0.0) and np.all(self.data <= 1.0))

    @classmethod
    def from_3d(cls, array: np.ndarray) -> "ImageTensor":
        a = np.asarray(array, dtype=np.float64)
        if a.ndim != 3:
            raise InvalidArgumentError("expected a (height, width, channels) array")
        h, w, c = a.shape
        return cls(width=w, height=h, channels=c, data=a.reshape(-1))


def l2_norm(x: ImageTensor) -> float:
    """Euclidean norm of the flattened pixel vector."""
    return float(np.linalg.norm(x.data))


def gaussian_noise(shape: Sequence[int] | int, std: float, rng: RngSeed) -> np.ndarray:
    """I.i.d. N(0, std^2) samples; std == 0 returns exact zeros."""
    if std < 0:
        raise InvalidArgumentError(f"noise std must be non-negative, got {std}")
    if std == 0:
        return np.zeros(shape, dtype=np.float64)
    return std * rng.generator().standard_normal(shape)


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered (image, label) pairs of uniform shape with label count."""

    images: tuple[ImageTensor, ...]
    labels: tuple[int, ...]
    num_classes: int
    _pixels: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise InvalidArgumentError("num_classes must be positive")
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        if len(self.images) != len(self.labels):
            raise InvalidArgumentError("images and labels must have equal length")
        if self.images:
            shape = self.images[0].shape
            for i, img in enumerate(self.images):
                if img.shape != shape:
                    raise InvalidArgumentError(f"image {i} shape {img.shape} != {shape}")
                if not img.in_unit_range():
                    raise InvalidArgumentError(f"image {i} has values outside [0, 1]")
        for i, l in enumerate(self.labels):
            if not (0 <= l < self.num_classes):
                raise InvalidArgumentError(f"label {l} at index {i} outside [0, {self.num_classes})")
        if self._pixels is None:
            if self.images:
                mat = np.stack([img.data for img in self.images])
            else:
                mat = np.zeros((0, 0), dtype=np.float64)
            object.__setattr__(self, "_pixels", _frozen(mat))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        if not self.images:
            raise InvalidArgumentError("empty dataset has no image shape")
        return self.images[0].shape

    def pixel_matrix(self) -> np.ndarray:
        """(N, width*height*channels) read-only view of all images."""
        return self._pixels

    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "LabeledDataset":
        idx = list(indices)
        return LabeledDataset(
            images=tuple(self.images[i] for i in idx),
            labels=tuple(self.labels[i] for i in idx),
            num_classes=self.num_classes,
        )

    def partition_by_label(self) -> dict[int, "LabeledDataset"]:
        """Disjoint per-label subsets (labels keep their original values)."""
        groups: dict[int, list[int]] = {}
        for i, l in enumerate(self.labels):
            groups.setdefault(l, []).append(i)
        return {l: self.subset(ix) for l, ix in sorted(groups.items())}

    @classmethod
    def from_arrays(
        cls,
        pixels: np.ndarray,
        labels: Sequence[int],
        num_classes: int,
        shape: tuple[int, int, int],
    ) -> "LabeledDataset":
        """Build from an (N, H*W*C) or (N, H, W, C) pixel array."""
        h, w, c = shape
        a = np.asarray(pixels, dtype=np.float64).reshape(len(labels), h * w * c)
        images = tuple(ImageTensor(width=w, height=h, channels=c, data=row) for row in a)
        return cls(images=images, labels=tuple(labels), num_classes=num_classes)
