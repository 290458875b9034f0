"""Bit-exact dataset ingestion and emission.

Three surfaces: the classic IDX binary pair (big-endian magics 0x00000803
for image stacks, 0x00000801 for label vectors, unsigned bytes scaled into
[0, 1] on read), a native container for image sets with provenance (JSON
header plus little-endian float64 payload, checksummed), and a deterministic
toy-glyph generator that stands in for real datasets at desk scale.

Readers reject malformed input with errors that name the failing byte
offset; no partially parsed dataset ever escapes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ImageTensor, InvalidArgumentError, LabeledDataset, RngSeed

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CONTAINER_MAGIC = b"DPSYNIC1"
CONTAINER_KINDS = ("sensitive", "central", "synthetic")


class FormatError(Exception):
    """Malformed file; `offset` is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_exact(data: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(data):
        raise FormatError(f"truncated while reading {what}: need {n} bytes", offset)
    return data[offset : offset + n]


def _parse_idx_images(data: bytes) -> np.ndarray:
    magic = struct.unpack(">I", _read_exact(data, 0, 4, "image magic"))[0]
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}", 0)
    n, rows, cols = struct.unpack(">III", _read_exact(data, 4, 12, "image dimensions"))
    payload = _read_exact(data, 16, n * rows * cols, "image payload")
    if len(data) != 16 + n * rows * cols:
        raise FormatError(f"trailing bytes after image payload", 16 + n * rows * cols)
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(n, rows, cols)


def _parse_idx_labels(data: bytes) -> np.ndarray:
    magic = struct.unpack(">I", _read_exact(data, 0, 4, "label magic"))[0]
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}", 0)
    (n,) = struct.unpack(">I", _read_exact(data, 4, 4, "label count"))
    payload = _read_exact(data, 8, n, "label payload")
    if len(data) != 8 + n:
        raise FormatError(f"trailing bytes after label payload", 8 + n)
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def read_idx(images_path, labels_path, num_classes: Optional[int] = None) -> LabeledDataset:
    """Paired IDX image/label files -> dataset with pixels in [0, 1]."""
    with open(images_path, "rb") as f:
        pixels = _parse_idx_images(f.read())
    with open(labels_path, "rb") as f:
        labels = _parse_idx_labels(f.read())
    n, rows, cols = pixels.shape
    if len(labels) != n:
        raise FormatError(f"label count {len(labels)} != image count {n}", 4)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(
            f"label {labels[bad[0]]} at record {bad[0]} >= num_classes {num_classes}",
            8 + int(bad[0]),
        )
    return LabeledDataset.from_arrays(
        pixels.reshape(n, rows * cols), labels.tolist(), num_classes, (rows, cols, 1)
    )


def write_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (inverse of read_idx)."""
    h, w, c = ds.image_shape
    if c != 1:
        raise InvalidArgumentError("IDX image stacks are single-channel")
    if ds.num_classes > 256:
        raise InvalidArgumentError("IDX labels are single bytes; need num_classes <= 256")
    pixels = np.rint(ds.pixel_matrix() * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise InvalidArgumentError("pixel values outside [0, 1] cannot round-trip through IDX")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, len(ds), h, w))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(ds)))
        f.write(ds.label_array().astype(np.uint8).tobytes())


@dataclass(frozen=True)
class ContainerFile:
    """Decoded native container: pixels, optional labels, provenance."""

    kind: str
    height: int
    width: int
    channels: int
    pixels: np.ndarray  # (count, H*W*C) float64
    labels: Optional[np.ndarray]
    provenance: dict

    @property
    def count(self) -> int:
        return self.pixels.shape[0]

    def to_dataset(self, num_classes: Optional[int] = None) -> LabeledDataset:
        if self.labels is None:
            raise InvalidArgumentError("container carries no labels")
        if num_classes is None:
            num_classes = int(self.labels.max()) + 1 if self.count else 1
        return LabeledDataset.from_arrays(
            self.pixels, self.labels.tolist(), num_classes, (self.height, self.width, self.channels)
        )


def save_container(
    path,
    kind: str,
    pixels: np.ndarray,
    shape: tuple[int, int, int],
    labels: Optional[np.ndarray] = None,
    provenance: Optional[dict] = None,
) -> None:
    """Write kind + shape + optional labels + float64 LE pixels, checksummed."""
    if kind not in CONTAINER_KINDS:
        raise InvalidArgumentError(f"unknown container kind {kind!r}")
    h, w, c = shape
    pix = np.ascontiguousarray(pixels, dtype="<f8").reshape(-1, h * w * c)
    label_bytes = b""
    if labels is not None:
        label_bytes = np.ascontiguousarray(labels, dtype="<u4").tobytes()
    payload = label_bytes + pix.tobytes()
    header = {
        "version": 1,
        "kind": kind,
        "height": h,
        "width": w,
        "channels": c,
        "count": int(pix.shape[0]),
        "has_labels": labels is not None,
        "provenance": provenance or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def load_container(path) -> ContainerFile:
    with open(path, "rb") as f:
        data = f.read()
    if _read_exact(data, 0, 8, "container magic") != CONTAINER_MAGIC:
        raise FormatError(f"bad container magic {data[:8]!r}", 0)
    (hlen,) = struct.unpack("<I", _read_exact(data, 8, 4, "header length"))
    try:
        header = json.loads(_read_exact(data, 12, hlen, "header").decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"undecodable header: {exc}", 12) from exc
    off = 12 + hlen
    kind = header.get("kind")
    if kind not in CONTAINER_KINDS:
        raise FormatError(f"unknown container kind {kind!r}", 12)
    h, w, c, count = (int(header[k]) for k in ("height", "width", "channels", "count"))
    has_labels = bool(header["has_labels"])
    label_bytes = 4 * count if has_labels else 0
    pixel_bytes = 8 * count * h * w * c
    payload = _read_exact(data, off, label_bytes + pixel_bytes, "payload")
    if len(data) != off + label_bytes + pixel_bytes:
        raise FormatError("trailing bytes after payload", off + label_bytes + pixel_bytes)
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise FormatError("payload checksum mismatch", off)
    labels = None
    if has_labels:
        labels = np.frombuffer(payload[:label_bytes], dtype="<u4").astype(np.int64)
    pixels = np.frombuffer(payload[label_bytes:], dtype="<f8").reshape(count, h * w * c)
    return ContainerFile(
        kind=kind,
        height=h,
        width=w,
        channels=c,
        pixels=pixels,
        labels=labels,
        provenance=header.get("provenance", {}),
    )


def _glyph_canvas(cls: int, h: int, w: int) -> np.ndarray:
    """Centered template for one of ten glyph classes."""
    img = np.zeros((h, w))
    cy, cx = h // 2, w // 2
    t = max(1, h // 8)  # stroke thickness
    if cls == 0:  # horizontal bar
        img[cy - t // 2 : cy + (t + 1) // 2, 1 : w - 1] = 1.0
    elif cls == 1:  # vertical bar
        img[1 : h - 1, cx - t // 2 : cx + (t + 1) // 2] = 1.0
    elif cls == 2:  # cross
        img[cy - t // 2 : cy + (t + 1) // 2, 1 : w - 1] = 1.0
        img[1 : h - 1, cx - t // 2 : cx + (t + 1) // 2] = 1.0
    elif cls == 3:  # main diagonal
        for i in range(min(h, w)):
            img[i, max(0, i - t + 1) : min(w, i + t)] = 1.0
    elif cls == 4:  # anti-diagonal
        for i in range(min(h, w)):
            j = w - 1 - i
            img[i, max(0, j - t + 1) : min(w, j + t)] = 1.0
    elif cls == 5:  # filled disk
        yy, xx = np.mgrid[0:h, 0:w]
        r = min(h, w) * 0.3
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
    elif cls == 6:  # ring
        yy, xx = np.mgrid[0:h, 0:w]
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        r = min(h, w) * 0.38
        img[(d2 <= r * r) & (d2 >= (r - t) ** 2)] = 1.0
    elif cls == 7:  # top-left corner block
        img[1 : h // 2, 1 : w // 2] = 1.0
    elif cls == 8:  # frame
        img[1:-1, 1:-1] = 1.0
        img[1 + t : h - 1 - t, 1 + t : w - 1 - t] = 0.0
    elif cls == 9:  # two vertical bars
        img[1 : h - 1, 1 : 1 + t] = 1.0
        img[1 : h - 1, w - 1 - t : w - 1] = 1.0
    else:
        raise InvalidArgumentError(f"glyph class {cls} not defined (have 0..9)")
    return img


def generate_toy_glyphs(
    n_per_class: int,
    num_classes: int = 10,
    shape: tuple[int, int, int] = (8, 8, 1),
    rng: RngSeed = RngSeed(0),
) -> LabeledDataset:
    """Deterministic jittered glyph dataset, linearly separable by class.

    Each sample shifts its class template by up to one pixel and scales its
    intensity into [0.7, 1.0]; classes stay far apart in pixel space, so a
    pixel-feature linear classifier separates them essentially perfectly.
    """
    h, w, c = shape
    if h < 8 or w < 8:
        raise InvalidArgumentError("glyph canvas must be at least 8x8")
    if not (1 <= num_classes <= 10):
        raise InvalidArgumentError("glyph classes available: 1..10")
    gen = rng.generator()
    templates = [_glyph_canvas(k, h, w) for k in range(num_classes)]
    images, labels = [], []
    for cls in range(num_classes):
        for _ in range(n_per_class):
            dy, dx = gen.integers(-1, 2, size=2)
            base = np.zeros((h, w))
            src = templates[cls]
            ys = slice(max(dy, 0), min(h + dy, h))
            xs = slice(max(dx, 0), min(w + dx, w))
            base[ys, xs] = src[max(-dy, 0) : min(h - dy, h), max(-dx, 0) : min(w - dx, w)]
            intensity = gen.uniform(0.7, 1.0)
            img = np.repeat((base * intensity)[:, :, None], c, axis=2)
            images.append(ImageTensor.from_3d(img))
            labels.append(cls)
    return LabeledDataset(images=tuple(images), labels=tuple(labels), num_classes=num_classes)
