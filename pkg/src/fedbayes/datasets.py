"""Dataset container, IDX (MNIST) ingestion, synthetic digits and IID splits."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class IDXFormatError(ValueError):
    """Bad magic number, truncated payload or inconsistent IDX pair."""


@dataclass(frozen=True)
class Dataset:
    """Flat images in [0, 1] with integer labels.

    Arrays are copied and made read-only on construction.
    """

    features: np.ndarray
    labels: np.ndarray
    image_height: int
    image_width: int
    class_count: int

    def __post_init__(self) -> None:
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.int64, copy=True)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} rows")
        if x.shape[1] != self.image_height * self.image_width:
            raise ValueError(
                f"feature width {x.shape[1]} != {self.image_height}x{self.image_width}"
            )
        if x.size and (x.min() < 0.0 or x.max() > 1.0 or not np.isfinite(x).all()):
            raise ValueError("feature values must lie in [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> Dataset:
        return self.with_arrays(self.features[index], self.labels[index])

    def with_arrays(self, features: np.ndarray, labels: np.ndarray) -> Dataset:
        return Dataset(features, labels, self.image_height, self.image_width, self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def equals(self, other: Dataset) -> bool:
        return (
            (self.image_height, self.image_width, self.class_count)
            == (other.image_height, other.image_width, other.class_count)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def _header(buf: bytes, n_fields: int, which: str) -> tuple[int, ...]:
    size = 4 * n_fields
    if len(buf) < size:
        raise IDXFormatError(f"{which} file truncated: header needs {size} bytes, got {len(buf)}")
    return struct.unpack(f">{n_fields}I", buf[:size])


def load_idx(images_bytes: bytes, labels_bytes: bytes, class_count: int = 10) -> Dataset:
    """Parse an IDX image/label pair; pixels are scaled by 1/255."""
    magic, count, rows, cols = _header(images_bytes, 4, "images")
    if magic != IMAGES_MAGIC:
        raise IDXFormatError(f"images file: bad magic {magic}, expected {IMAGES_MAGIC}")
    lmagic, lcount = _header(labels_bytes, 2, "labels")
    if lmagic != LABELS_MAGIC:
        raise IDXFormatError(f"labels file: bad magic {lmagic}, expected {LABELS_MAGIC}")
    if count != lcount:
        raise IDXFormatError(f"images file holds {count} items but labels file holds {lcount}")
    need = 16 + count * rows * cols
    if len(images_bytes) < need:
        raise IDXFormatError(f"images file truncated: expected {need} bytes, got {len(images_bytes)}")
    if len(labels_bytes) < 8 + count:
        raise IDXFormatError(
            f"labels file truncated: expected {8 + count} bytes, got {len(labels_bytes)}"
        )
    pixels = np.frombuffer(images_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(labels_bytes, dtype=np.uint8, count=count, offset=8)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    if labels.size:
        class_count = max(class_count, int(labels.max()) + 1)
    return Dataset(features, labels.astype(np.int64), rows, cols, class_count)


def _read_maybe_gz(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx_files(
    images_path: str | PathLike[str], labels_path: str | PathLike[str], class_count: int = 10
) -> Dataset:
    """Read an IDX pair from disk (plain or gzip-compressed)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.is_file():
            raise FileNotFoundError(f"IDX file not found: {p}")
    return load_idx(_read_maybe_gz(images_path), _read_maybe_gz(labels_path), class_count)


def to_idx(data: Dataset) -> tuple[bytes, bytes]:
    """Serialize to (images, labels) IDX bytes; pixels are rounded to 0..255."""
    pixels = np.rint(data.features * 255.0).astype(np.uint8)
    images = struct.pack(">4I", IMAGES_MAGIC, data.n, data.image_height, data.image_width)
    labels = struct.pack(">2I", LABELS_MAGIC, data.n)
    return images + pixels.tobytes(), labels + data.labels.astype(np.uint8).tobytes()


def _image_shape(dim: int) -> tuple[int, int]:
    side = math.isqrt(dim)
    return (side, side) if side * side == dim else (1, dim)


def _strokes(rng: np.random.Generator, h: int, w: int, count: int) -> np.ndarray:
    # Anti-aliased line segments with endpoints inside the central region.
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    lo_r, hi_r, lo_c, hi_c = 0.25 * h, 0.75 * h, 0.25 * w, 0.75 * w
    thickness = max(h, w) / 28.0
    img = np.zeros((h, w))
    for _ in range(count):
        p = np.array([rng.uniform(lo_r, hi_r), rng.uniform(lo_c, hi_c)])
        q = np.array([rng.uniform(lo_r, hi_r), rng.uniform(lo_c, hi_c)])
        d = q - p
        t = ((rows - p[0]) * d[0] + (cols - p[1]) * d[1]) / max(d @ d, 1e-12)
        t = np.clip(t, 0.0, 1.0)
        dist2 = (rows - p[0] - t * d[0]) ** 2 + (cols - p[1] - t * d[1]) ** 2
        img = np.maximum(img, np.exp(-dist2 / (2 * thickness**2)))
    img[img < 0.05] = 0.0
    return img


def _class_means(rng: np.random.Generator, class_count: int, h: int, w: int) -> np.ndarray:
    shared = _strokes(rng, h, w, 1)
    return np.array([
        np.maximum(0.6 * shared, _strokes(rng, h, w, 3)).ravel() for _ in range(class_count)
    ])


def synth_generate(
    seed: int,
    per_class: int,
    class_count: int = 10,
    dim: int = 784,
    noise: float = 0.5,
    image_shape: tuple[int, int] | None = None,
) -> Dataset:
    """Gaussian clusters around seeded per-class "digit" images, clipped to [0, 1].

    Each class mean is a few thin strokes (one stroke shared by all classes)
    drawn in the central half of the image.  Noise with standard deviation
    ``noise`` is added only on pixels that carry ink in some class mean, so
    the background stays exactly 0 as in MNIST.  Examples are ordered by
    class; ``noise=0`` reproduces the means exactly.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    h, w = image_shape if image_shape is not None else _image_shape(dim)
    if h * w != dim:
        raise ValueError(f"image_shape {h}x{w} does not match dim {dim}")
    rng = np.random.default_rng(seed)
    means = _class_means(rng, class_count, h, w)
    labels = np.repeat(np.arange(class_count), per_class)
    features = means[labels]
    if noise > 0:
        ink = (means > 0).any(axis=0)
        jitter = noise * rng.standard_normal(features.shape) * ink
        features = np.clip(features + jitter, 0.0, 1.0)
    return Dataset(features, labels, h, w, class_count)


@dataclass(frozen=True)
class PartitionPlan:
    subset_count: int = 9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.subset_count < 2:
            raise ValueError(f"subset_count must be >= 2, got {self.subset_count}")


def partition_iid(data: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Class-balanced disjoint split.

    Each class is shuffled with a seeded generator and dealt round-robin, so
    per-class counts differ by at most one between subsets.  The round-robin
    start rotates with the class index so remainders spread across subsets.
    """
    k = plan.subset_count
    if data.n < k * data.class_count:
        raise ValueError(
            f"{data.n} examples cannot fill {k} subsets x {data.class_count} classes"
        )
    rng = np.random.default_rng(plan.seed)
    buckets: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in range(data.class_count):
        members = np.flatnonzero(data.labels == c)
        members = members[rng.permutation(members.size)]
        for j, idx in enumerate(members):
            buckets[(offset + j) % k].append(int(idx))
        offset = (offset + members.size) % k
    return [data.subset(np.sort(np.array(b, dtype=np.int64))) for b in buckets]


def subsample_per_class(data: Dataset, total: int, seed: int) -> Dataset:
    """Class-balanced random subset of about ``total`` examples."""
    if total >= data.n:
        return data
    rng = np.random.default_rng(seed)
    per_class = total // data.class_count
    keep = []
    for c in range(data.class_count):
        members = np.flatnonzero(data.labels == c)
        keep.append(rng.choice(members, size=min(per_class, members.size), replace=False))
    return data.subset(np.sort(np.concatenate(keep)))


def split_holdout(data: Dataset, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``per_class`` random examples of every class; returns (rest, holdout)."""
    rng = np.random.default_rng(seed)
    held = []
    for c in range(data.class_count):
        members = np.flatnonzero(data.labels == c)
        if members.size < per_class:
            raise ValueError(f"class {c} has {members.size} examples, cannot hold out {per_class}")
        held.append(rng.choice(members, size=per_class, replace=False))
    mask = np.zeros(data.n, dtype=bool)
    mask[np.concatenate(held)] = True
    return data.subset(np.flatnonzero(~mask)), data.subset(np.flatnonzero(mask))
