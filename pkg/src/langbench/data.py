"""IDX-format dataset ingestion, batching, truncation and synthetic data.

IDX layout: 4-byte big-endian magic (2051 for image tensors, 2049 for
label vectors), one big-endian uint32 per dimension, then the unsigned
byte payload. Pixels are scaled to [0, 1] on load so the adversarial
clipping box is well defined.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as streams

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

_MAX_ELEMENTS = 1 << 40  # guards against corrupt headers allocating absurd tensors


@dataclass
class Dataset:
    images: np.ndarray  # (count, H, W) float64 in [0, 1]
    labels: np.ndarray  # (count,) int64
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{self.name or 'dataset'}: {len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def batch_input(self, idx=slice(None)):
        """Images as (N, 1, H, W) network input."""
        return self.images[idx][:, None, :, :]


@dataclass
class BatchPlan:
    batch_size: int = 512
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _read_u32(data, offset):
    if offset + 4 > len(data):
        raise ValueError(f"idx data truncated at offset {offset}")
    return int.from_bytes(data[offset:offset + 4], "big"), offset + 4


def parse_idx(data):
    """Decode one IDX payload into an image tensor or label vector.

    Returns ("images", (n, h, w) float array in [0,1]) or
    ("labels", (n,) int array).
    """
    magic, offset = _read_u32(data, 0)
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"bad idx magic {magic} at offset 0 (want {IMAGE_MAGIC} or {LABEL_MAGIC})")
    dims = []
    count = 1
    for _ in range(ndim):
        d, offset = _read_u32(data, offset)
        dims.append(d)
        count *= d
    if count > _MAX_ELEMENTS:
        raise ValueError(f"idx dimensions {dims} overflow sanity bound (offset 4)")
    if len(data) - offset < count:
        raise ValueError(f"idx payload truncated at offset {offset}: "
                         f"want {count} bytes, have {len(data) - offset}")
    if len(data) - offset > count:
        raise ValueError(f"idx payload has {len(data) - offset - count} trailing bytes "
                         f"after offset {offset + count}")
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)
    if magic == IMAGE_MAGIC:
        return "images", raw.reshape(dims).astype(np.float64) / 255.0
    return "labels", raw.astype(np.int64)


def serialize_idx(kind, array):
    """Inverse of parse_idx; emits images rescaled back to bytes."""
    if kind == "images":
        magic, payload = IMAGE_MAGIC, np.round(np.asarray(array) * 255.0).astype(np.uint8)
    elif kind == "labels":
        magic, payload = LABEL_MAGIC, np.asarray(array).astype(np.uint8)
    else:
        raise ValueError(f"unknown idx kind {kind!r}")
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in payload.shape)
    return header + payload.tobytes()


def load_idx(path):
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def load_dataset(images_path, labels_path, name=""):
    kind, images = load_idx(images_path)
    if kind != "images":
        raise ValueError(f"{images_path} holds labels, expected images")
    kind, labels = load_idx(labels_path)
    if kind != "labels":
        raise ValueError(f"{labels_path} holds images, expected labels")
    return Dataset(images, labels, name=name or str(images_path))


def truncate(dataset, n, seed):
    """Deterministic random subset of exactly n examples."""
    if n > len(dataset):
        raise ValueError(f"cannot truncate {len(dataset)} examples to {n}")
    gen = streams.stream(seed, "truncate")
    keep = np.sort(gen.choice(len(dataset), size=n, replace=False))
    return Dataset(dataset.images[keep], dataset.labels[keep], name=f"{dataset.name}[{n}]")


def label_histogram(dataset):
    """Counts per label value, for the run log."""
    values, counts = np.unique(dataset.labels, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def batches(dataset, plan):
    """Seed-deterministic shuffled mini-batches covering one full epoch.

    Every batch has plan.batch_size examples except possibly the last.
    """
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = streams.stream(plan.seed, "shuffle", plan.epoch).permutation(len(dataset))
    for start in range(0, len(dataset), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield dataset.batch_input(idx), dataset.labels[idx]


def synthetic(n, classes, side, seed, variant="train", noise=0.1):
    """Class-conditional Gaussian-blob images, linearly separable.

    Each class paints a soft blob at a class-specific position; variants
    "train"/"test" share geometry (different draws), "ood" shifts the
    centers off-grid and widens the blobs to mimic covariate shift.
    """
    if n < 1 or classes < 1:
        raise ValueError("n and classes must be positive")
    gen = streams.stream(seed, "synthetic", {"train": 0, "test": 1, "ood": 2}[variant])
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = side / 3.5
    sigma = side / 7.0
    if variant == "ood":
        angles = angles + np.pi / classes
        radius = side / 5.0
        sigma = side / 3.5
    cy = side / 2 - 0.5 + radius * np.sin(angles)
    cx = side / 2 - 0.5 + radius * np.cos(angles)
    labels = gen.integers(0, classes, size=n)
    yy, xx = np.mgrid[0:side, 0:side]
    dist2 = (yy[None] - cy[labels, None, None]) ** 2 + (xx[None] - cx[labels, None, None]) ** 2
    jitter = gen.normal(0.0, 0.35, size=(n, 2))
    dist2 = dist2 + 2 * jitter[:, 0, None, None] * (yy[None] - cy[labels, None, None])
    dist2 = dist2 + 2 * jitter[:, 1, None, None] * (xx[None] - cx[labels, None, None])
    images = 0.9 * np.exp(-np.clip(dist2, 0.0, None) / (2 * sigma ** 2))
    images += gen.normal(0.0, noise, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, name=f"synthetic-{variant}")
