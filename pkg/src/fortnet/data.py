"""Dataset ingestion (IDX files) and synthetic generators for fast tests."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W or N x d, values in [0, 1]
    labels: np.ndarray  # N class indices
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images/labels length mismatch: {self.images.shape[0]} vs "
                f"{self.labels.shape[0]}"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes,
                       self.split)

    def flat_images(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(
            f"{path}: truncated {what} at offset {f.tell() - len(buf)}: "
            f"wanted {n} bytes, got {len(buf)}"
        )
    return buf


def load_idx(image_path, label_path, limit: int | None = None,
             split: str = "train") -> Dataset:
    """Load an MNIST-style IDX image/label file pair.

    Pixel bytes are scaled by 1/255 into [0, 1]; images come out N x 1 x H x W.
    `limit` keeps only the first `limit` examples (desk-scale subsets).
    """
    with open(image_path, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, image_path,
                                                            "header"))
        if magic != IMAGES_MAGIC:
            raise FormatError(
                f"{image_path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IMAGES_MAGIC:08x}"
            )
        take = n if limit is None else min(n, limit)
        payload = _read_exact(f, take * h * w, image_path, "pixel payload")
    images = np.frombuffer(payload, dtype=np.uint8).astype(float) / 255.0
    images = images.reshape(take, 1, h, w)

    with open(label_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, label_path,
                                                           "header"))
        if magic != LABELS_MAGIC:
            raise FormatError(
                f"{label_path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{LABELS_MAGIC:08x}"
            )
        if n_labels != n:
            raise FormatError(
                f"{label_path}: item count {n_labels} does not match image "
                f"count {n}"
            )
        labels = np.frombuffer(_read_exact(f, take, label_path, "label payload"),
                               dtype=np.uint8).astype(int)

    return Dataset(images, labels, num_classes=int(labels.max()) + 1
                   if labels.size else 10, split=split)


@dataclass
class SyntheticSpec:
    kind: str  # gaussian_clusters | two_moons | concentric_spheres
    n_per_class: int
    dimension: int = 2
    noise: float = 0.1
    seed: int = 0
    separation: float = 6.0  # gaussian_clusters: distance between means, in stds
    radii: tuple = (0.5, 1.0)  # concentric_spheres: class 0 and class 1 radii


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Pure generator: identical SyntheticSpec values yield identical datasets.

    Points are affinely squashed into [0, 1]^d so they satisfy the Dataset
    domain invariant; labels are 0/1.
    """
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_per_class, spec.dimension
    if spec.kind == "gaussian_clusters":
        offset = spec.separation / 2.0
        a = rng.normal(-offset, 1.0, size=(n, d))
        b = rng.normal(offset, 1.0, size=(n, d))
        points = np.concatenate([a, b])
        scale = 2.0 * (offset + 5.0)
    elif spec.kind == "two_moons":
        t = rng.uniform(0, np.pi, size=n)
        a = np.stack([np.cos(t), np.sin(t)], axis=1)
        t = rng.uniform(0, np.pi, size=n)
        b = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        points = np.concatenate([a, b])
        if d != 2:
            raise ValueError("two_moons is 2-D only")
        points = points + rng.normal(0.0, spec.noise, size=points.shape)
        scale = 6.0
    elif spec.kind == "concentric_spheres":
        r0, r1 = spec.radii
        if r1 <= r0:
            raise ValueError(f"outer radius must exceed inner: {spec.radii}")
        a = _uniform_on_sphere(rng, n, d) * r0
        b = _uniform_on_sphere(rng, n, d) * r1
        points = np.concatenate([a, b])
        if spec.noise:
            points = points + rng.normal(0.0, spec.noise, size=points.shape)
        scale = 4.0 * r1
    else:
        raise ValueError(f"unknown synthetic kind {spec.kind!r}")
    labels = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    images = np.clip(points / scale + 0.5, 0.0, 1.0)
    return Dataset(images, labels, num_classes=2, split="synthetic")


def _uniform_on_sphere(rng, n: int, d: int) -> np.ndarray:
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sphere_points(spec: SyntheticSpec) -> np.ndarray:
    """Raw (unsquashed) concentric-sphere points, for geometry checks."""
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_per_class, spec.dimension
    r0, r1 = spec.radii
    a = _uniform_on_sphere(rng, n, d) * r0
    b = _uniform_on_sphere(rng, n, d) * r1
    pts = np.concatenate([a, b])
    if spec.noise:
        pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
    return pts


def batch_iter(dataset: Dataset, batch_size: int, seed: int = 0,
               shuffle: bool = True):
    """Yield (images, labels) batches; the final short batch is kept.

    The permutation is a pure function of the seed, so iteration order is
    reproducible.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
