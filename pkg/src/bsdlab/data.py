"""Dataset construction, file ingestion, label-noise protocols, and augmentations.

Datasets are immutable after construction: noise injection returns a copy with
a fresh ``labels`` array while ``clean_labels`` is never touched. All
generators and noise protocols are pure functions of their spec and seed.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "Dataset",
    "NoiseSpec",
    "make_blobs",
    "read_idx",
    "write_idx",
    "load_idx",
    "load_csv",
    "export_csv",
    "inject_symmetric",
    "inject_asymmetric",
    "cyclic_map",
    "apply_noise",
    "augment_weak",
    "augment_strong",
]

IDX_UBYTE = 0x08


@dataclass
class Dataset:
    samples: np.ndarray          # (n, d) vectors or (n, h, w, ch) grids
    clean_labels: np.ndarray
    labels: np.ndarray           # active labels (post-noise); starts equal to clean
    k: int
    split: str = "train"

    def __post_init__(self):
        self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.shape[0] != self.clean_labels.shape[0]:
            raise ValueError("sample/label count mismatch")
        if self.clean_labels.size and (self.clean_labels.min() < 0 or self.clean_labels.max() >= self.k):
            raise ValueError(f"label out of range [0, {self.k})")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite sample values")

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def is_grid(self):
        return self.samples.ndim == 4

    @property
    def d(self):
        return int(np.prod(self.samples.shape[1:]))

    def with_labels(self, labels):
        return replace(self, labels=np.asarray(labels, dtype=np.int64))


@dataclass
class NoiseSpec:
    kind: str = "none"  # "none" | "symmetric" | "asymmetric"
    rate: float = 0.0
    seed: int = 0
    mapping: dict | None = None  # asymmetric only; None selects the cyclic successor map

    def __post_init__(self):
        if self.kind not in ("none", "symmetric", "asymmetric"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not (0.0 <= self.rate <= 1.0):
            raise ValueError("noise rate must be in [0, 1]")


def make_blobs(k, per_class, dim=2, spacing=3.0, cov_scale=1.0, seed=0,
               centers=None, split="train"):
    """Gaussian class clusters with controllable overlap.

    Default centers sit on a ring of radius ``spacing`` in the first two
    dimensions, so adjacent classes overlap and confusions have structure.
    Pass explicit ``centers`` (k x dim) to override, e.g. coincident pairs.
    """
    if k < 2:
        raise ValueError("need at least 2 classes")
    if cov_scale <= 0.0:
        raise ValueError("degenerate covariance")
    if centers is None:
        if dim < 2:
            raise ValueError("default ring centers need dim >= 2")
        angles = 2.0 * np.pi * np.arange(k) / k
        centers = np.zeros((k, dim))
        centers[:, 0] = spacing * np.cos(angles)
        centers[:, 1] = spacing * np.sin(angles)
    else:
        centers = np.asarray(centers, dtype=np.float64)
        if centers.shape != (k, dim):
            raise ValueError(f"centers must have shape ({k}, {dim})")
    rng = np.random.default_rng(seed)
    samples = np.empty((k * per_class, dim))
    labels = np.repeat(np.arange(k), per_class)
    for j in range(k):
        block = rng.normal(0.0, np.sqrt(cov_scale), size=(per_class, dim))
        samples[j * per_class:(j + 1) * per_class] = centers[j] + block
    return Dataset(samples=samples, clean_labels=labels, labels=labels.copy(), k=k, split=split)


def read_idx(path):
    """Parse one IDX file (unsigned-byte payload) into an ndarray."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) != 4 or magic[0] != 0 or magic[1] != 0:
            raise ValueError(f"bad IDX magic in {path}")
        dtype_code, ndim = magic[2], magic[3]
        if dtype_code != IDX_UBYTE:
            raise ValueError(f"unsupported IDX data type 0x{dtype_code:02x} in {path}")
        dims = []
        for _ in range(ndim):
            raw = fh.read(4)
            if len(raw) != 4:
                raise ValueError(f"truncated IDX header in {path}")
            dims.append(struct.unpack(">I", raw)[0])
        count = int(np.prod(dims)) if dims else 0
        payload = fh.read(count)
        if len(payload) != count:
            raise ValueError(f"truncated IDX payload in {path}: expected {count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    """Write an unsigned-byte ndarray in IDX layout (big-endian dims)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, IDX_UBYTE, arr.ndim]))
        for dim in arr.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path, split="train"):
    """Load an IDX image file plus its IDX label file as one Dataset.

    Pixels are scaled to [0, 1]; images become (n, h, w, 1) grids.
    """
    images = read_idx(images_path)
    if images.ndim != 3:
        raise ValueError(f"expected 3-dimensional IDX image file, got {images.ndim} dims")
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise ValueError(f"expected 1-dimensional IDX label file, got {labels.ndim} dims")
    if labels.shape[0] != images.shape[0]:
        raise ValueError("IDX image/label counts differ")
    samples = images.astype(np.float64)[..., None] / 255.0
    labels = labels.astype(np.int64)
    k = int(labels.max()) + 1 if labels.size else 2
    return Dataset(samples=samples, clean_labels=labels, labels=labels.copy(),
                   k=max(k, 2), split=split)


def load_csv(path, label_column="label", k=None, split="train"):
    """Load a header-bearing CSV with one labeled sample per row."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"empty CSV {path}")
    header = rows[0]
    if label_column not in header:
        raise ValueError(f"label column {label_column!r} not in CSV header")
    label_idx = header.index(label_column)
    feat_idx = [j for j in range(len(header)) if j != label_idx]
    samples = np.empty((len(rows) - 1, len(feat_idx)))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ValueError(f"CSV row {i + 2} has {len(row)} fields, header has {len(header)}")
        labels[i] = int(row[label_idx])
        samples[i] = [float(row[j]) for j in feat_idx]
    inferred_k = int(labels.max()) + 1 if labels.size else 2
    k = max(k or 0, inferred_k, 2)
    if labels.size and labels.min() < 0:
        raise ValueError("label out of range in CSV")
    return Dataset(samples=samples, clean_labels=labels, labels=labels.copy(), k=k, split=split)


def export_csv(dataset: Dataset, path, label_column="label"):
    """Write a vector dataset to CSV; floats use repr so re-import is exact."""
    if dataset.is_grid:
        raise ValueError("CSV export handles vector datasets only; use write_idx for grids")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(dataset.samples.shape[1])] + [label_column])
        for i in range(dataset.n):
            writer.writerow([repr(float(v)) for v in dataset.samples[i]] + [int(dataset.labels[i])])


def inject_symmetric(labels, rate, k, seed):
    """Reassign exactly round(rate*n) labels, each to a different random class.

    Flips are guaranteed (the new class is drawn from the other k-1), so the
    realized noise rate equals the nominal rate.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    n_flip = int(round(rate * n))
    rng = np.random.default_rng(seed)
    noisy = labels.copy()
    if n_flip == 0:
        return noisy
    chosen = rng.choice(n, size=n_flip, replace=False)
    offsets = rng.integers(1, k, size=n_flip)
    noisy[chosen] = (labels[chosen] + offsets) % k
    return noisy


def cyclic_map(k):
    """Default asymmetric map: each class flips to its successor mod k."""
    return {j: (j + 1) % k for j in range(k)}


def inject_asymmetric(labels, rate, mapping, seed):
    """Per mapped class, relabel round(rate * class_count) of its samples to map(class)."""
    labels = np.asarray(labels, dtype=np.int64)
    for src, dst in mapping.items():
        if src == dst:
            raise ValueError(f"asymmetric map has a fixed point at class {src}")
    rng = np.random.default_rng(seed)
    noisy = labels.copy()
    for src in sorted(mapping):
        members = np.flatnonzero(labels == src)
        n_flip = int(round(rate * members.size))
        if n_flip == 0:
            continue
        chosen = rng.choice(members, size=n_flip, replace=False)
        noisy[chosen] = mapping[src]
    return noisy


def apply_noise(dataset: Dataset, spec: NoiseSpec) -> Dataset:
    """Return a copy of the dataset with active labels noised per the spec."""
    if spec.kind == "none" or spec.rate == 0.0:
        return dataset.with_labels(dataset.clean_labels.copy())
    if spec.kind == "symmetric":
        noisy = inject_symmetric(dataset.clean_labels, spec.rate, dataset.k, spec.seed)
    else:
        mapping = spec.mapping if spec.mapping is not None else cyclic_map(dataset.k)
        noisy = inject_asymmetric(dataset.clean_labels, spec.rate, mapping, spec.seed)
    return dataset.with_labels(noisy)


def _jitter(batch, rng, sigma):
    if sigma == 0.0:
        return batch.copy()
    return batch + rng.normal(0.0, sigma, size=batch.shape)


def _crop_flip(batch, rng, pad=4):
    """Pad-and-crop plus horizontal flip, drawn per sample."""
    n, h, w, ch = batch.shape
    padded = np.pad(batch, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="constant")
    out = np.empty_like(batch)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.uniform(size=n) < 0.5
    for i in range(n):
        oy, ox = offs[i]
        view = padded[i, oy:oy + h, ox:ox + w, :]
        out[i] = view[:, ::-1, :] if flips[i] else view
    return out


def _erase(batch, rng, frac):
    """Zero out one random square patch per sample (side = frac * min(h, w))."""
    n, h, w, _ = batch.shape
    side = max(1, int(round(frac * min(h, w))))
    out = batch.copy()
    ys = rng.integers(0, h - side + 1, size=n)
    xs = rng.integers(0, w - side + 1, size=n)
    for i in range(n):
        out[i, ys[i]:ys[i] + side, xs[i]:xs[i] + side, :] = 0.0
    return out


def augment_weak(batch, rng, jitter_sigma=0.05):
    """Weak view: pad-4 crop + horizontal flip for grids, light jitter for vectors."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 4:
        return _crop_flip(batch, rng)
    return _jitter(batch, rng, jitter_sigma)


def augment_strong(batch, rng, jitter_sigma=0.2, erase_frac=0.3):
    """Strong view: the weak transform plus square erasure and amplified jitter."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 4:
        out = _crop_flip(batch, rng)
        out = _erase(out, rng, erase_frac)
        return _jitter(out, rng, jitter_sigma)
    return _jitter(batch, rng, jitter_sigma)
