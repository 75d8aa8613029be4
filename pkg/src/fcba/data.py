"""Datasets, Dirichlet client partitioning and batch assembly."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigurationError,
    CountMismatchError,
    EmptyDatasetError,
    IngestionError,
    TruncatedFileError,
)
from .rng import substream

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Images as float32 [N, H, W, C] in [0, 1] and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if len(self.images) == 0:
            raise EmptyDatasetError("dataset has no samples")
        if self.images.ndim != 4:
            raise ConfigurationError(f"images must be [N, H, W, C], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigurationError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConfigurationError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


# ------------------------------------------------------------------- IDX files


def _read_bytes(path: Path) -> bytes:
    try:
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise IngestionError("file not found", path) from None
    except (OSError, EOFError) as exc:
        raise IngestionError(f"cannot read: {exc}", path) from None


def _parse_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError("missing IDX header", path)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError("truncated IDX dimension header", path)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) < expected:
        raise TruncatedFileError(f"expected {expected} data bytes, found {len(body)}", path)
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzip-compressed)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    pixels = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(pixels) != len(labels):
        raise CountMismatchError(
            f"{len(pixels)} images but {len(labels)} labels in {labels_path}", images_path
        )
    if len(pixels) == 0:
        raise EmptyDatasetError(f"{images_path}: no images")
    images = (pixels.astype(np.float32) / np.float32(255.0))[..., None]
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = max(int(labels.max()) + 1, 2)
    return Dataset(images, labels, class_count)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 [N, H, W] pixels and labels as an IDX pair (fixtures, exports)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SynthParams:
    """Knobs for the class-blob generator.

    Each class owns ``blobs`` Gaussian bump centres inside the central
    ``margin``-inset region. A sample re-renders its class's bumps with every
    centre displaced by N(0, ``deform``) pixels (shape variation within a
    class), scales by a random contrast, shifts by up to ``jitter`` pixels and
    adds pixel noise. Pixels where the clean rendering is below ``background``
    are set to exactly 0, giving a black border like handwritten-digit scans.
    """

    blobs: int = 3
    blob_sigma: float = 2.0
    margin: int = 5
    noise: float = 0.1
    jitter: int = 1
    contrast: tuple[float, float] = (0.8, 1.0)
    background: float = 0.05
    deform: float = 0.0


def _class_centres(classes: int, dims, params: SynthParams, rng):
    h, w, ch = dims
    lo_y, hi_y = min(params.margin, h // 2), max(h - params.margin, h // 2 + 1)
    lo_x, hi_x = min(params.margin, w // 2), max(w - params.margin, w // 2 + 1)
    centres = np.empty((classes, params.blobs, 2))
    tints = np.empty((classes, ch))
    for c in range(classes):
        centres[c, :, 0] = rng.uniform(lo_y, hi_y, params.blobs)
        centres[c, :, 1] = rng.uniform(lo_x, hi_x, params.blobs)
        tints[c] = rng.uniform(0.6, 1.0, ch)
    return centres, tints


def _render(centres: np.ndarray, dims, sigma: float) -> np.ndarray:
    """Normalised sum of Gaussian bumps; centres is [N, blobs, 2]."""
    h, w, _ = dims
    yy = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)
    out = np.empty((len(centres), h, w))
    for s in range(0, len(centres), 2048):
        c = centres[s:s + 2048]
        gy = np.exp(-((yy[None, None, :] - c[:, :, 0:1]) ** 2) / (2 * sigma ** 2))
        gx = np.exp(-((xx[None, None, :] - c[:, :, 1:2]) ** 2) / (2 * sigma ** 2))
        img = np.einsum("nby,nbx->nyx", gy, gx)
        out[s:s + 2048] = img / img.max(axis=(1, 2), keepdims=True)
    return out


def synth_dataset(
    classes: int,
    per_class: int,
    dims=(28, 28, 1),
    seed: int = 0,
    split: str = "train",
    params: SynthParams | None = None,
) -> Dataset:
    """Gaussian class-blob images clipped to [0, 1].

    Class shapes depend only on ``seed``; ``split`` selects an independent
    sample stream so train and test sets share classes but not samples.
    """
    if classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if per_class <= 0:
        raise EmptyDatasetError("per_class must be positive")
    params = params or SynthParams()
    dims = tuple(int(d) for d in dims)
    centres, tints = _class_centres(classes, dims, params, substream(seed, "synth", "prototypes"))
    rng = substream(seed, "synth", split)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    contrast = rng.uniform(*params.contrast, size=n)
    sample_centres = centres[labels]
    if params.deform > 0:
        sample_centres = sample_centres + rng.normal(0.0, params.deform, size=sample_centres.shape)
    shapes = _render(sample_centres, dims, params.blob_sigma)
    images = shapes[..., None] * tints[labels][:, None, None, :] * contrast[:, None, None, None]
    if params.jitter:
        shifts = rng.integers(-params.jitter, params.jitter + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            images[i] = np.roll(images[i], (int(dy), int(dx)), axis=(0, 1))
    ink = images >= params.background
    images += rng.normal(0.0, params.noise, size=images.shape)
    images *= ink
    order = rng.permutation(n)
    images = np.clip(images[order], 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels[order].astype(np.int64), classes)


# ------------------------------------------------------------------ partition


@dataclass(frozen=True)
class Partition:
    client_indices: tuple[np.ndarray, ...]
    alpha: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.client_indices], dtype=np.int64)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` following ``proportions`` exactly summing to it."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: ties go to the lower client index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float, seed: int) -> Partition:
    """Split every class across clients with Dirichlet(alpha) proportions."""
    if n_clients < 1:
        raise ConfigurationError("n_clients must be >= 1")
    if not alpha > 0:
        raise ConfigurationError(f"dirichlet alpha must be > 0, got {alpha}")
    rng = substream(seed, "partition")
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        if n_clients == 1:
            counts = np.array([len(idx)])
        else:
            counts = largest_remainder(rng.dirichlet(np.full(n_clients, alpha)), len(idx))
        for client, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[client].append(chunk)
    clients = tuple(
        np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets
    )
    return Partition(clients, float(alpha), int(seed))


@dataclass(frozen=True)
class PartitionStats:
    sizes: list[int]
    histograms: list[list[int]]
    max_size: int
    min_size: int
    class_max_share: list[float] = field(default_factory=list)
    class_holders: list[int] = field(default_factory=list)

    def clients_below(self, n: int) -> int:
        return sum(s < n for s in self.sizes)

    def clients_above(self, n: int) -> int:
        return sum(s > n for s in self.sizes)

    def to_dict(self) -> dict:
        return {
            "n_clients": len(self.sizes),
            "total": int(sum(self.sizes)),
            "max_size": self.max_size,
            "min_size": self.min_size,
            "sizes": self.sizes,
            "histograms": self.histograms,
            "class_max_share": self.class_max_share,
            "class_holders": self.class_holders,
        }


def partition_stats(dataset: Dataset, partition: Partition) -> PartitionStats:
    hists = np.array(
        [np.bincount(dataset.labels[ix], minlength=dataset.class_count) for ix in partition.client_indices],
        dtype=np.int64,
    ).reshape(partition.n_clients, dataset.class_count)
    sizes = hists.sum(axis=1)
    per_class = hists.sum(axis=0)
    share = np.divide(hists.max(axis=0), per_class, out=np.zeros(dataset.class_count), where=per_class > 0)
    return PartitionStats(
        sizes=sizes.tolist(),
        histograms=hists.tolist(),
        max_size=int(sizes.max()),
        min_size=int(sizes.min()),
        class_max_share=[round(float(s), 6) for s in share],
        class_holders=(hists > 0).sum(axis=0).tolist(),
    )


def make_batches(indices, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded per-epoch shuffle of ``indices`` cut into batches; the last may be short."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    idx = np.asarray(indices, dtype=np.int64)
    order = substream(seed, "batches", epoch).permutation(len(idx))
    shuffled = idx[order]
    return [shuffled[s:s + batch_size] for s in range(0, len(shuffled), batch_size)]
