"""Long-tailed labeled datasets and the LTDS1 binary format.

LTDS1 layout (little-endian)::

    b"LTDS1" | u32 n_total | u32 dim | u32 C | n_total * (f32[dim] sample, u16 label)
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LTDS1"
_HEADER = struct.Struct("<III")


class DatasetFormatError(ValueError):
    """Raised when an LTDS1 file cannot be decoded. ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        # float32 storage keeps the file round-trip exact
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a [n, dim] matrix")
        if self.labels.shape != (self.samples.shape[0],):
            raise ValueError("one label per sample required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in 0..C-1")
        self.class_counts = np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def n_total(self) -> int:
        return self.samples.shape[0]

    def take(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.samples[idx], self.labels[idx], self.num_classes)


def class_counts(N: int, rho: float, C: int) -> list[int]:
    """n_i = floor(N * rho^(i / (C - 1))) for i = 0..C-1."""
    if not (0.0 < rho <= 1.0):
        raise ValueError("rho must lie in (0, 1]")
    if N < 1 or C < 1:
        raise ValueError("N and C must be positive")
    if C == 1:
        return [int(N)]
    return [int(math.floor(N * rho ** (i / (C - 1)))) for i in range(C)]


def ring_centers(C: int, radius: float, dim: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(C) / C
    centers = np.zeros((C, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def make_ring_gaussians(C, counts, radius, sigma, dim, rng: np.random.Generator) -> LabeledDataset:
    """Class i is N(center_i, sigma^2 I) with centers evenly spaced on a circle in the first two axes."""
    counts = np.asarray(counts, dtype=np.int64)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    if counts.shape != (C,) or np.any(counts < 0):
        raise ValueError("counts must be C non-negative integers")
    if counts.sum() == 0:
        raise ValueError("all class counts are zero")
    centers = ring_centers(C, radius, dim)
    labels = np.repeat(np.arange(C), counts)
    samples = centers[labels] + sigma * rng.standard_normal((labels.size, dim))
    return LabeledDataset(samples, labels, C)


def subsample_longtail(data: LabeledDataset, rho: float, rng: np.random.Generator) -> LabeledDataset:
    """Keep class_counts(N, rho, C) samples per class, drawn without replacement."""
    per_class = data.class_counts
    if per_class.size == 0 or np.any(per_class != per_class[0]):
        raise ValueError("input dataset must be balanced")
    targets = class_counts(int(per_class[0]), rho, data.num_classes)
    keep = []
    for c, n_c in enumerate(targets):
        idx = np.flatnonzero(data.labels == c)
        if n_c > idx.size:
            raise ValueError(f"class {c} needs {n_c} samples, only {idx.size} available")
        keep.append(rng.choice(idx, size=n_c, replace=False))
    keep = np.sort(np.concatenate(keep))
    return data.take(keep)


def write_dataset(data: LabeledDataset, path) -> None:
    if data.num_classes > 0xFFFF:
        raise ValueError("LTDS1 labels are u16")
    rec = np.dtype([("x", "<f4", (data.dim,)), ("y", "<u2")])
    records = np.empty(data.n_total, dtype=rec)
    records["x"] = data.samples
    records["y"] = data.labels
    payload = MAGIC + _HEADER.pack(data.n_total, data.dim, data.num_classes) + records.tobytes()
    Path(path).write_bytes(payload)


def read_dataset(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad_magic", f"{path} is not an LTDS1 file")
    head_end = len(MAGIC) + _HEADER.size
    if len(raw) < head_end:
        raise DatasetFormatError("truncated", "header is incomplete")
    n, dim, C = _HEADER.unpack_from(raw, len(MAGIC))
    rec = np.dtype([("x", "<f4", (dim,)), ("y", "<u2")])
    expected = head_end + n * rec.itemsize
    if len(raw) != expected:
        raise DatasetFormatError("truncated", f"expected {expected} bytes, found {len(raw)}")
    records = np.frombuffer(raw, dtype=rec, count=n, offset=head_end)
    labels = records["y"].astype(np.int64)
    if labels.size and labels.max() >= C:
        raise DatasetFormatError("bad_label", f"label {labels.max()} >= C={C}")
    samples = records["x"].reshape(n, dim).astype(np.float32)
    return LabeledDataset(samples, labels, C)
