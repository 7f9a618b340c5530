"""Datasets: a seeded synthetic generator and the LCDS binary image format.

LCDS layout, little-endian throughout::

    b"LCDS"  u32 count  u32 channels  u32 height  u32 width  u32 classes
    count x ( u8 label, channels*height*width x f64 pixel in [0, 1] )
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LCDS"
_HEADER = struct.Struct("<4s5I")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not 1 <= self.classes <= 256:
            raise DatasetFormatError(f"class count must be in 1..256, got {self.classes}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DatasetFormatError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.images)) or self.images.min(initial=0) < 0 or self.images.max(initial=0) > 1:
            raise DatasetFormatError("pixels must be finite and lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, start: int, stop: int | None = None) -> "Dataset":
        return Dataset(self.images[start:stop], self.labels[start:stop], self.classes)


def to_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    parts = [_HEADER.pack(MAGIC, n, c, h, w, ds.classes)]
    pixels = ds.images.reshape(n, -1).astype("<f8")
    for label, row in zip(ds.labels, pixels):
        parts.append(bytes([int(label)]))
        parts.append(row.tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}")
    magic, n, c, h, w, classes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    pixels = c * h * w
    record = 1 + 8 * pixels
    expected = _HEADER.size + n * record
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise DatasetFormatError(f"{kind} dataset: expected {expected} bytes, got {len(raw)}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, record)
    labels = body[:, 0].astype(np.int64)
    if n and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise DatasetFormatError(f"record {bad} has label {labels[bad]} >= class count {classes}")
    images = np.ascontiguousarray(body[:, 1:]).view("<f8").astype(np.float64).reshape(n, c, h, w)
    return Dataset(images, labels, classes)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} does not exist")
    return from_bytes(path.read_bytes())


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 2
    shape: tuple[int, int, int] = (3, 16, 16)
    margin: float = 1.0
    count: int = 256
    seed: int = 0
    noise: float | None = None

    @property
    def dims(self) -> int:
        return int(np.prod(self.shape))


def synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """Gaussian clusters around points on a sphere centred at 0.5.

    Centres are ``0.5 + margin * sqrt(2) * u_j`` with orthonormal ``u_j``, so
    each centre sits at distance ``margin`` from every pairwise bisector.  The
    per-sample noise has expected norm ``noise`` (default ``margin / 4``).
    Labels cycle through the classes so the counts are balanced.
    """
    dims = spec.dims
    if spec.classes < 2 or spec.classes > min(dims, 256):
        raise ValueError(f"need 2 <= classes <= min(dims, 256), got {spec.classes}")
    if spec.margin <= 0 or spec.count < 1:
        raise ValueError("margin must be positive and count >= 1")
    rng = np.random.default_rng(spec.seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dims, spec.classes)))
    centres = 0.5 + spec.margin * math.sqrt(2.0) * basis.T
    labels = np.arange(spec.count) % spec.classes
    rng.shuffle(labels)
    noise = spec.margin / 4 if spec.noise is None else spec.noise
    points = centres[labels] + rng.standard_normal((spec.count, dims)) * (noise / math.sqrt(dims))
    images = np.clip(points, 0.0, 1.0).reshape((spec.count,) + tuple(spec.shape))
    return Dataset(images, labels, spec.classes)


def parse_shape(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"shape must be C,H,W with positive extents, got {text!r}")
    return tuple(parts)


def shape_for_dims(dims: int) -> tuple[int, int, int]:
    """Three-channel square shape with ``dims`` pixels, e.g. 48 -> (3, 4, 4)."""
    side = math.isqrt(dims // 3) if dims % 3 == 0 else 0
    if side and 3 * side * side == dims:
        return (3, side, side)
    return (1, 1, dims)
