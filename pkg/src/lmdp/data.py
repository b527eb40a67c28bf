"""Labelled datasets: synthetic generators and IDX (MNIST-format) files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lmdp.errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

KINDS = ("blobs", "moons", "anisotropic")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ConfigError(f"features {self.X.shape} do not match labels {self.y.shape}")

    def __len__(self):
        return self.X.shape[0]

    @property
    def dims(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx])

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


def generate_synthetic(kind: str, n: int, dims: int, classes: int, seed: int, *,
                       center_scale: float = 4.0, std: float = 1.0) -> Dataset:
    """Deterministic, class-balanced (within one example) synthetic data.

    ``blobs`` places one isotropic Gaussian per class at a random point of the
    cube ``[-center_scale, center_scale]^dims``; ``anisotropic`` applies a
    random linear map to the blobs; ``moons`` is the two interleaved half
    circles in the first two coordinates with Gaussian noise elsewhere.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")
    if classes < 2 or n < classes:
        raise ConfigError(f"need n >= classes >= 2, got n={n}, classes={classes}")
    if dims < 1 or std < 0:
        raise ConfigError("dims must be >= 1 and std >= 0")
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % classes)

    if kind == "moons":
        if classes != 2 or dims < 2:
            raise ConfigError("moons needs exactly 2 classes and dims >= 2")
        t = rng.uniform(0.0, np.pi, size=n)
        X = np.zeros((n, dims))
        X[:, 0] = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
        X[:, 1] = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
        X += std * rng.normal(size=(n, dims))
        return Dataset(X, y)

    centers = rng.uniform(-center_scale, center_scale, size=(classes, dims))
    X = centers[y] + std * rng.normal(size=(n, dims))
    if kind == "anisotropic":
        X = X @ rng.normal(size=(dims, dims))
    return Dataset(X, y)


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("file too short for an IDX header", path)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX header", path)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    payload = raw[header:]
    if len(payload) != size:
        raise FormatError(f"payload has {len(payload)} bytes, header promises {size}", path)
    return dims, payload


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    dims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (count,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if dims[0] != count:
        raise FormatError(f"{dims[0]} images but {count} labels in {labels_path}", images_path)
    X = np.frombuffer(pixels, dtype=np.uint8).reshape(dims[0], -1).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return Dataset(X, y)


def save_idx(images, labels, images_path, labels_path, shape=(28, 28)) -> None:
    """Write uint8 images/labels in IDX format (used to build fixtures)."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, *shape)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())
