"""Dataset ingestion and generation.

Two sources: the CIFAR-100 binary distribution (3074-byte records: coarse
label, fine label, three 1024-byte row-major color planes) and seeded
synthetic 32x32 scenes of simple shapes, which stand in for the counting
benchmark. Normalization statistics always come from the training split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 32
CIFAR_RECORD = 3074
CIFAR_PIXELS = 3072

SYNTH_MAGIC = b"SJPD"
SYNTH_VERSION = 1
SYNTH_TASKS = {"class": 0, "count": 1}

N_SHAPE_CLASSES = 4   # rect, disc, frame, cross
N_COUNT_CLASSES = 6   # 1..6 objects -> labels 0..5

DOMINANT_SIZE = 22    # fixed, so object area tracks the distractor count
DISTRACTOR_MIN = 6
DISTRACTOR_MAX = 9
DISTRACTOR_GRAY = 0.85  # fixed color keeps the count signal clean


class DataFormatError(ValueError):
    """Malformed dataset file (bad length, label, or header)."""


@dataclass
class DatasetHandle:
    source: str
    images: np.ndarray           # (n, 3, 32, 32) float64 in [0, 1]
    labels: np.ndarray           # (n,) int64
    coarse_labels: np.ndarray | None = None
    mean: np.ndarray | None = None  # per-channel, from the TRAIN split
    std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    def compute_stats(self) -> None:
        """Per-channel mean/std over this split (call on train only)."""
        self.mean = self.images.mean(axis=(0, 2, 3))
        self.std = self.images.std(axis=(0, 2, 3))

    def adopt_stats(self, other: "DatasetHandle") -> None:
        self.mean = other.mean
        self.std = other.std

    def normalized(self, idx) -> np.ndarray:
        if self.mean is None or self.std is None:
            raise ValueError("normalization stats not set; compute or adopt them first")
        imgs = self.images[idx]
        return (imgs - self.mean[:, None, None]) / self.std[:, None, None]


# ---------------------------------------------------------------------------
# CIFAR-100 binary format


def load_cifar100(path: str, source: str = "cifar100-train",
                  expected_records: int | None = None) -> DatasetHandle:
    """Parse the official CIFAR-100 binary layout.

    ``expected_records`` (50000 train / 10000 test) also rejects truncations
    that happen to end on a record boundary.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if expected_records is not None and len(raw) != expected_records * CIFAR_RECORD:
        raise DataFormatError(
            f"expected {expected_records} records ({expected_records * CIFAR_RECORD} bytes), "
            f"file has {len(raw)} bytes")
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise DataFormatError(
            f"file length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"trailing fragment starts at offset {offset}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    coarse = records[:, 0].astype(np.int64)
    fine = records[:, 1].astype(np.int64)
    if coarse.max(initial=0) > 19:
        bad = int(np.argmax(coarse > 19))
        raise DataFormatError(f"coarse label out of range in record {bad}")
    if fine.max(initial=0) > 99:
        bad = int(np.argmax(fine > 99))
        raise DataFormatError(f"fine label out of range in record {bad}")
    pixels = records[:, 2:].reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE).astype(np.float64) / 255.0
    return DatasetHandle(source=source, images=pixels, labels=fine, coarse_labels=coarse)


def serialize_cifar100(handle: DatasetHandle) -> bytes:
    """Inverse of load_cifar100 (the format is bijective)."""
    n = len(handle)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = handle.coarse_labels
    out[:, 1] = handle.labels
    out[:, 2:] = np.round(handle.images * 255.0).astype(np.uint8).reshape(n, CIFAR_PIXELS)
    return out.tobytes()


# ---------------------------------------------------------------------------
# synthetic shapes


def _shape_mask(shape_type: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if shape_type == 0:      # filled rectangle
        return np.ones((size, size), dtype=bool)
    if shape_type == 1:      # filled disc
        r = size / 2.0
        return (yy - r + 0.5) ** 2 + (xx - r + 0.5) ** 2 <= (r - 0.5) ** 2
    if shape_type == 2:      # hollow frame
        return (yy < 2) | (yy >= size - 2) | (xx < 2) | (xx >= size - 2)
    third = size // 3        # cross
    return ((yy >= third) & (yy < size - third)) | ((xx >= third) & (xx < size - third))


def _render_scene(rng: np.random.Generator, primary_type: int | None = None,
                  count: int | None = None):
    """1..6 non-overlapping shapes on a dark background.

    One dominant object (the class label carrier, fixed size so total
    object area is informative about the count) plus 0..5 small
    gray distractors; the dominant one is the largest by construction, so
    the class label stays uniform over shape types. Callers retrying after
    a placement failure pass the same (primary_type, count) back in so
    regeneration cannot skew the label marginals.

    Returns (image, shape_type_of_largest, count), or None on failure.
    """
    img = np.zeros((3, IMAGE_SIZE, IMAGE_SIZE))
    occupied = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    if count is None:
        count = int(rng.integers(1, N_COUNT_CLASSES + 1))
    if primary_type is None:
        primary_type = int(rng.integers(0, N_SHAPE_CLASSES))
    specs = [(primary_type, DOMINANT_SIZE, None)]
    for _ in range(count - 1):
        specs.append((int(rng.integers(0, N_SHAPE_CLASSES)),
                      int(rng.integers(DISTRACTOR_MIN, DISTRACTOR_MAX + 1)),
                      DISTRACTOR_GRAY))
    for shape_type, size, gray in specs:
        mask = _shape_mask(shape_type, size)
        for _ in range(40):
            top = int(rng.integers(0, IMAGE_SIZE - size))
            left = int(rng.integers(0, IMAGE_SIZE - size))
            region = occupied[top:top + size, left:left + size]
            if not (region & mask).any():
                break
        else:
            return None  # caller regenerates the scene
        region |= mask
        color = np.full(3, gray) if gray is not None else rng.uniform(0.3, 1.0, size=3)
        for c in range(3):
            img[c, top:top + size, left:left + size][mask] = color[c]
    return img, primary_type, count


def synth_shapes(n: int, task: str, rng: np.random.Generator,
                 source: str | None = None) -> DatasetHandle:
    """Seeded synthetic dataset; label is the largest object's shape type
    ('class') or the object count minus one ('count')."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if task not in SYNTH_TASKS:
        raise ValueError(f"unknown task {task!r}")
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        want_type = int(rng.integers(0, N_SHAPE_CLASSES))
        want_count = int(rng.integers(1, N_COUNT_CLASSES + 1))
        scene = None
        while scene is None:
            scene = _render_scene(rng, want_type, want_count)
        img, shape_type, count = scene
        images[i] = img
        labels[i] = shape_type if task == "class" else count - 1
    return DatasetHandle(source=source or f"synth-{task}", images=images, labels=labels)


def save_synth(handle: DatasetHandle, path: str, task: str) -> None:
    """Flat cache file: 16-byte header (magic, version, n, task id) then
    records of 1 label byte + 3072 pixel bytes."""
    with open(path, "wb") as fh:
        fh.write(SYNTH_MAGIC)
        fh.write(struct.pack("<IIH", SYNTH_VERSION, len(handle), SYNTH_TASKS[task]))
        fh.write(b"\x00\x00")  # pad header to 16 bytes
        for img, label in zip(handle.images, handle.labels):
            fh.write(bytes([int(label)]))
            fh.write(np.round(img * 255.0).astype(np.uint8).tobytes())


def load_synth(path: str) -> DatasetHandle:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:4] != SYNTH_MAGIC:
            raise DataFormatError("bad synthetic dataset header")
        version, n, task_id = struct.unpack("<IIH", header[4:14])
        if version != SYNTH_VERSION:
            raise DataFormatError(f"unsupported version {version}")
        body = fh.read()
    record = 1 + CIFAR_PIXELS
    if len(body) != n * record:
        raise DataFormatError(f"expected {n * record} record bytes, found {len(body)}")
    records = np.frombuffer(body, dtype=np.uint8).reshape(n, record)
    task = {v: k for k, v in SYNTH_TASKS.items()}[task_id]
    return DatasetHandle(
        source=f"synth-{task}",
        images=records[:, 1:].reshape(n, 3, IMAGE_SIZE, IMAGE_SIZE).astype(np.float64) / 255.0,
        labels=records[:, 0].astype(np.int64))


# ---------------------------------------------------------------------------
# batching


def batch_iter(handle: DatasetHandle, batch_size: int, epoch_seed: int, epoch: int = 0,
               normalized: bool = True):
    """Yield (images, labels) batches in a per-epoch seeded permutation.

    The final partial batch is kept. Normalization uses the handle's adopted
    train-split stats.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=epoch_seed,
                                                       spawn_key=(epoch,)))
    order = rng.permutation(len(handle))
    for start in range(0, len(handle), batch_size):
        idx = order[start:start + batch_size]
        imgs = handle.normalized(idx) if normalized else handle.images[idx]
        yield imgs, handle.labels[idx]
