"""MNIST-style IDX ingestion, normalization, batching, and synthetic fixtures.

IDX files are the standard big-endian MNIST format (magic 2051 for images,
2049 for labels), optionally gzip-compressed. Pixels parse losslessly as
unsigned bytes and are normalized to [0, 1] by plain division by 255.
"""
from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
NUM_CLASSES = 10


class IdxFormatError(ValueError):
    """Malformed IDX stream; offset is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: tuple[int, ...]


@dataclass(eq=False)
class Dataset:
    """Images (N, 1, H, W) float64 in [0, 1] with integer class labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"image/label count mismatch: {len(self.images)} vs {len(self.labels)}")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def _parse_header(data: bytes, expected_magic: int) -> tuple[IdxHeader, int]:
    if len(data) < 4:
        raise IdxFormatError("stream too short for magic number", 0)
    magic = int.from_bytes(data[0:4], "big")
    if magic != expected_magic:
        raise IdxFormatError(f"bad magic {magic}, expected {expected_magic}", 0)
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError("stream too short for dimension sizes", len(data))
    dims = tuple(int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    return IdxHeader(magic, dims), header_len


def parse_idx_images(data: bytes) -> np.ndarray:
    """Decode an IDX image stream into uint8 pixels of shape (N, 1, H, W)."""
    header, offset = _parse_header(data, IMAGE_MAGIC)
    n, h, w = header.dims
    expected = n * h * w
    payload = data[offset:]
    if len(payload) < expected:
        raise IdxFormatError(
            f"image payload truncated: expected {expected} bytes, got {len(payload)}",
            offset + len(payload))
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(n, 1, h, w)


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Decode an IDX label stream into int64 class ids in [0, 9]."""
    header, offset = _parse_header(data, LABEL_MAGIC)
    (n,) = header.dims
    payload = data[offset:]
    if len(payload) < n:
        raise IdxFormatError(
            f"label payload truncated: expected {n} bytes, got {len(payload)}",
            offset + len(payload))
    labels = np.frombuffer(payload, dtype=np.uint8, count=n).astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise IdxFormatError(
            f"label {labels[bad]} out of range [0, {NUM_CLASSES - 1}]", offset + bad)
    return labels


def write_idx_images(images: np.ndarray) -> bytes:
    """Inverse of parse_idx_images; accepts uint8 (N, 1, H, W) or (N, H, W)."""
    images = np.asarray(images)
    if images.ndim == 4 and images.shape[1] == 1:
        images = images[:, 0]
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError(f"expected uint8 (N, H, W) images, got {images.dtype} {images.shape}")
    n, h, w = images.shape
    header = IMAGE_MAGIC.to_bytes(4, "big") + n.to_bytes(4, "big") + \
        h.to_bytes(4, "big") + w.to_bytes(4, "big")
    return header + images.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"expected 1-d labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise ValueError(f"labels must lie in [0, {NUM_CLASSES - 1}]")
    header = LABEL_MAGIC.to_bytes(4, "big") + int(labels.size).to_bytes(4, "big")
    return header + labels.astype(np.uint8).tobytes()


def normalize_images(raw: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float64 in [0, 1] by x/255."""
    return np.asarray(raw, dtype=np.float64) / 255.0


def denormalize_images(images: np.ndarray) -> np.ndarray:
    """Exact inverse of normalize_images for images that came from uint8."""
    raw = np.rint(np.asarray(images) * 255.0)
    if raw.min(initial=0) < 0 or raw.max(initial=0) > 255:
        raise ValueError("images out of [0, 1] range; cannot quantize to bytes")
    return raw.astype(np.uint8)


def dataset_to_idx(ds: Dataset) -> tuple[bytes, bytes]:
    return write_idx_images(denormalize_images(ds.images)), write_idx_labels(ds.labels)


def dataset_from_idx(image_bytes: bytes, label_bytes: bytes) -> Dataset:
    return Dataset(normalize_images(parse_idx_images(image_bytes)),
                   parse_idx_labels(label_bytes))


def _read_maybe_gzip(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx_pair(images_path, labels_path) -> Dataset:
    """Load a dataset from IDX files on disk (gzip detected by magic bytes)."""
    return dataset_from_idx(_read_maybe_gzip(Path(images_path)),
                            _read_maybe_gzip(Path(labels_path)))


def load_mnist(data_dir, split: str = "train") -> Dataset:
    """Load MNIST from data_dir using the standard published file names."""
    prefix = {"train": "train", "test": "t10k"}[split]
    data_dir = Path(data_dir)
    for suffix in ("", ".gz"):
        images = data_dir / f"{prefix}-images-idx3-ubyte{suffix}"
        labels = data_dir / f"{prefix}-labels-idx1-ubyte{suffix}"
        if images.exists() and labels.exists():
            return load_idx_pair(images, labels)
    raise FileNotFoundError(
        f"no {split} IDX files ({prefix}-images-idx3-ubyte[.gz]) under {data_dir}")


def split_dataset(ds: Dataset, n_tail: int) -> tuple[Dataset, Dataset]:
    """Split off the last n_tail examples (e.g. a held-out validation slice)."""
    if not 0 <= n_tail <= len(ds):
        raise ValueError(f"cannot split {n_tail} from dataset of {len(ds)}")
    cut = len(ds) - n_tail
    return ds.take(slice(0, cut)), ds.take(slice(cut, len(ds)))


def make_batches(ds: Dataset, batch_size: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle partitioned into batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [(ds.images[perm[i:i + batch_size]], ds.labels[perm[i:i + batch_size]])
            for i in range(0, len(ds), batch_size)]


def synth_dataset(n: int, seed: int, hw: int = 28) -> Dataset:
    """Separable synthetic digits: a bright block at a class-coded position.

    Classes map to a 2x5 grid of block locations over a noisy background, so a
    tiny convnet separates them within a few hundred SGD steps. Pixels are
    quantized to uint8 before normalization, which keeps IDX round-trips exact.
    """
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 38, size=(n, 1, hw, hw), dtype=np.uint8)  # dim background
    labels = rng.integers(0, NUM_CLASSES, size=n, dtype=np.int64)
    block_h, block_w = hw // 4, hw // 8
    for i in range(n):
        k = labels[i]
        r0 = hw // 8 + (k // 5) * (hw // 2)
        c0 = hw // 16 + (k % 5) * (hw * 3 // 16)
        level = rng.integers(178, 256)
        raw[i, 0, r0:r0 + block_h, c0:c0 + block_w] = level
    return Dataset(normalize_images(raw), labels)
