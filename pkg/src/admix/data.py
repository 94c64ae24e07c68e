"""Image datasets: the ADMD file format and a procedural shape generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetFormatError

MAGIC = b"ADMD"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError(
                f"images must be [N,C,H,W] with one label each; got {list(self.images.shape)} "
                f"and {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def split(self, n: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n)), self.subset(slice(n, None))

    def to_bytes(self) -> bytes:
        n, c, h, w = self.images.shape
        out = bytearray(HEADER.pack(MAGIC, VERSION, n, c, h, w))
        pixels = self.images.reshape(n, -1).astype("<f4")
        for label, row in zip(self.labels, pixels):
            out += struct.pack("<I", int(label))
            out += row.tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Dataset":
        if len(buf) < HEADER.size:
            raise DatasetFormatError(f"truncated header: expected {HEADER.size} bytes, got {len(buf)}", 0)
        magic, version, n, c, h, w = HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise DatasetFormatError("bad magic", 0)
        if version != VERSION:
            raise DatasetFormatError(f"unsupported version {version}", 4)
        record = 4 + 4 * c * h * w
        expected = HEADER.size + n * record
        if len(buf) != expected:
            raise DatasetFormatError(
                f"file length {len(buf)} does not match header (expected {expected} bytes)",
                min(len(buf), expected))
        rows = np.frombuffer(buf, dtype="<u4", offset=HEADER.size).reshape(n, record // 4)
        labels = rows[:, 0].astype(np.int64)
        images = rows[:, 1:].copy().view("<f4").astype(np.float32).reshape(n, c, h, w)
        bad = ~np.isfinite(images) | (images < 0) | (images > 1)
        if bad.any():
            first = int(np.argmax(bad.reshape(n, -1).any(axis=1)))
            raise DatasetFormatError(f"record {first} has pixels outside [0,1]", HEADER.size + first * record)
        return cls(images, labels)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# synthetic shapes


def _box(x, y, hx, hy):
    qx, qy = np.abs(x) - hx, np.abs(y) - hy
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    return outside + np.minimum(np.maximum(qx, qy), 0)


def _plus(x, y):
    return np.minimum(_box(x, y, 0.85, 0.22), _box(x, y, 0.22, 0.85))


def _triangle(x, y):
    angles = np.deg2rad([90.0, 210.0, 330.0])
    return np.max([x * np.cos(a) + y * np.sin(a) for a in angles], axis=0) - 0.5


def _rot(x, y, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * x + s * y, -s * x + c * y


# signed distance functions in shape-local units (negative inside)
SHAPES = (
    ("disk", lambda x, y: np.hypot(x, y) - 0.8),
    ("square", lambda x, y: _box(x, y, 0.7, 0.7)),
    ("triangle", _triangle),
    ("plus", _plus),
    ("ring", lambda x, y: np.abs(np.hypot(x, y) - 0.6) - 0.18),
    ("hbar", lambda x, y: _box(x, y, 0.9, 0.25)),
    ("vbar", lambda x, y: _box(x, y, 0.25, 0.9)),
    ("cross", lambda x, y: _plus(*_rot(x, y, np.pi / 4))),
    ("frame", lambda x, y: np.abs(_box(x, y, 0.62, 0.62)) - 0.14),
    ("dots", lambda x, y: np.minimum(np.hypot(x + 0.5, y) - 0.32, np.hypot(x - 0.5, y) - 0.32)),
)


# per-channel brightness step from background to shape
CONTRAST = (0.2, 0.45)
# largest centre offset (image half-widths) and rotation (degrees)
SHIFT = 0.12
TILT = 10.0


def render_shape(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One [3,size,size] image of the shape assigned to ``label``.

    Labels beyond the ten base shapes reuse a shape with a fixed colour tint
    per group of ten.
    """
    shape_fn = SHAPES[label % len(SHAPES)][1]
    group = label // len(SHAPES)

    v, u = np.mgrid[0:size, 0:size]
    u = (u + 0.5) / size * 2 - 1
    v = (v + 0.5) / size * 2 - 1

    cx, cy = rng.uniform(-SHIFT, SHIFT, size=2)
    scale = rng.uniform(0.5, 0.7)
    theta = np.deg2rad(rng.uniform(-TILT, TILT))
    lx, ly = _rot((u - cx) / scale, (v - cy) / scale, theta)
    pixel = 2.0 / (size * scale)
    mask = np.clip(0.5 - shape_fn(lx, ly) / pixel, 0.0, 1.0)

    base = rng.uniform(0.1, 0.6, size=3)
    direction = rng.uniform(0, 2 * np.pi)
    ramp = 0.1 * (np.cos(direction) * u + np.sin(direction) * v)
    freq, phase = rng.uniform(2, 6), rng.uniform(0, 2 * np.pi)
    stripes = 0.05 * np.sin(freq * np.pi * (u + v) + phase)
    background = base[:, None, None] + ramp + stripes + rng.normal(0, 0.03, size=(3, size, size))

    fg = base + rng.uniform(*CONTRAST, size=3)
    if group:
        tint = np.roll(np.array([1.0, 0.6, 0.3]), group % 3)
        fg = fg + CONTRAST[0] * (tint - 0.6)
    foreground = fg[:, None, None] + rng.normal(0, 0.03, size=(3, size, size))

    img = background * (1 - mask) + foreground * mask
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(classes: int, per_class: int, size: int, seed: int) -> Dataset:
    """Balanced shape dataset; record i carries label ``i % classes``."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if per_class < 1 or size < 4:
        raise ConfigError("per_class must be >= 1 and size >= 4")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.arange(n) % classes
    images = np.stack([render_shape(int(lab), size, rng) for lab in labels])
    return Dataset(images, labels)
