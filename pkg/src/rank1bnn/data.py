"""Datasets, K-fold batch duplication, and a small corruption suite.

IDX layout (big-endian)::

    [0] 0x00  [1] 0x00  [2] dtype code  [3] ndim
    [4 .. 4+4*ndim) uint32 dimension sizes
    payload, row-major
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

CORRUPTION_TYPES = ("gaussian_noise", "impulse_noise", "box_blur", "contrast", "brightness")
INTENSITIES = (1, 2, 3, 4, 5)

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


class IDXParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, index, name: Optional[str] = None) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], name or self.name)


def duplicate_batch(x, ensemble_size: int) -> np.ndarray:
    """Stack K copies of the batch; rows [k*B, (k+1)*B) belong to component k."""
    if ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")
    x = np.asarray(x)
    return np.concatenate([x] * ensemble_size, axis=0)


def component_slice(x, ensemble_size: int, k: int) -> np.ndarray:
    b = len(x) // ensemble_size
    return np.asarray(x)[k * b:(k + 1) * b]


def split(dataset: Dataset, holdout_fraction: float = 0.2) -> Tuple[Dataset, Dataset]:
    """Deterministic split: the last ``holdout_fraction`` of rows is held out."""
    n_hold = int(round(len(dataset) * holdout_fraction))
    cut = len(dataset) - n_hold
    return (dataset.subset(slice(0, cut), dataset.name + ":train"),
            dataset.subset(slice(cut, None), dataset.name + ":holdout"))


def unit_scaler(features: np.ndarray):
    """Per-feature min-max map to [0, 1] fitted on ``features``; applies with clipping."""
    lo = features.min(axis=0)
    span = np.where(features.max(axis=0) > lo, features.max(axis=0) - lo, 1.0)
    return lambda x: np.clip((np.asarray(x) - lo) / span, 0.0, 1.0)


# ------------------------------------------------------------------ synthetic
def synthetic(name: str, n: int, noise: float = 0.1, seed: int = 0, num_classes: int = 3) -> Dataset:
    """``two_moons`` (two interleaved unit half-circles) or ``gaussians`` (isotropic clusters)."""
    if n < 2:
        raise ValueError("need at least two examples")
    rng = np.random.default_rng(seed)
    if name == "two_moons":
        n0 = n // 2
        n1 = n - n0
        t0 = rng.uniform(0.0, np.pi, n0)
        t1 = rng.uniform(0.0, np.pi, n1)
        upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        x = np.concatenate([upper, lower])
        y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
        if noise:
            x = x + rng.normal(0.0, noise, x.shape)
    elif name == "gaussians":
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        centers = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        y = np.arange(n) % num_classes
        x = centers[y] + rng.normal(0.0, noise, (n, 2))
    else:
        raise ValueError(f"unknown synthetic dataset {name!r}")
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], name)


def save_csv(dataset: Dataset, path) -> None:
    feats = dataset.features.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(feats.shape[1])] + ["label"])
        for row, label in zip(feats, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, name: Optional[str] = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label" or not all(
                h == f"x{i}" for i, h in enumerate(header[:-1])):
            raise ValueError(f"{path}: expected header x0,x1,...,label")
        rows = [r for r in reader if r]
    feats = np.array([[float(v) for v in r[:-1]] for r in rows]).reshape(len(rows), len(header) - 1)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Dataset(feats, labels, name or Path(path).stem)


# ------------------------------------------------------------------------ IDX
def read_idx(path) -> np.ndarray:
    """Parse an IDX file into an array of its native element type."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXParseError("file too short for an IDX header", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IDXParseError("bad magic: first two bytes must be zero", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise IDXParseError(f"unknown element type 0x{code:02x}", 2)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IDXParseError(f"truncated dimension table for {ndim} dims", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(raw) - header_end
    if payload != expected:
        raise IDXParseError(
            f"payload has {payload} bytes but dims {dims} need {expected}", header_end)
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


def load_idx(path, labels_path=None, name: Optional[str] = None) -> Dataset:
    """Images from an IDX file plus labels from a companion IDX file.

    Unsigned-byte pixels are divided by 255; other element types are cast to
    float64 unchanged. Without ``labels_path`` every label is 0.
    """
    images = read_idx(path)
    feats = images.astype(np.float64)
    if images.dtype == np.dtype(">u1"):
        feats = feats / 255.0
    if labels_path is None:
        labels = np.zeros(len(feats), dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64).reshape(-1)
    return Dataset(feats, labels, name or Path(path).stem)


# ---------------------------------------------------------------- corruptions
@dataclass(frozen=True)
class CorruptionSpec:
    type: str
    intensity: int

    def __post_init__(self):
        if self.type not in CORRUPTION_TYPES:
            raise ValueError(f"unknown corruption {self.type!r}; expected one of {CORRUPTION_TYPES}")
        if self.intensity not in INTENSITIES:
            raise ValueError(f"intensity must be in 1..5, got {self.intensity}")


def _spatial_axes(x: np.ndarray) -> tuple:
    if x.ndim == 2:
        return (1,)
    if x.ndim in (3, 4):
        return (1, 2)
    raise ValueError(f"cannot corrupt array of shape {x.shape}")


def corrupt(x, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply one corruption to features in [0, 1]; the output is clipped to [0, 1].

    Severity per intensity i: gaussian noise stddev 0.04*i, impulse fraction
    0.03*i, box blur width 2*i+1, contrast factor 1 - 0.15*i, brightness
    shift 0.1*i. Blur treats flat feature vectors as 1-D signals.
    """
    x = np.asarray(x, dtype=np.float64)
    i = spec.intensity
    if spec.type == "gaussian_noise":
        out = x + rng.normal(0.0, 0.04 * i, x.shape)
    elif spec.type == "impulse_noise":
        hit = rng.uniform(size=x.shape) < 0.03 * i
        salt = rng.uniform(size=x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), x)
    elif spec.type == "box_blur":
        size = [1] * x.ndim
        for ax in _spatial_axes(x):
            size[ax] = 2 * i + 1
        out = ndimage.uniform_filter(x, size=size, mode="nearest")
    elif spec.type == "contrast":
        axes = tuple(range(1, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        out = mean + (x - mean) * (1.0 - 0.15 * i)
    else:
        out = x + 0.1 * i
    return np.clip(out, 0.0, 1.0)
