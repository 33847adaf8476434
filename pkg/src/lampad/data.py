"""Dataset ingestion and one-class anomaly-detection task construction.

Two sources are supported: IDX binaries (big-endian, magic 0x803 for
images and 0x801 for labels, ``.gz`` accepted) and image directories
following the industrial layout ``<category>/train/good/*.png`` plus
``<category>/test/<defect_or_good>/*.png``. Directory walks are sorted
so loading is order-deterministic.

A one-class task designates a single source class as normal: its
training split contains only that class (unlabeled), and the test split
keeps everything with anomaly labels (0 = normal class, 1 = anything
else).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, FormatError
from .tensor import Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class ImageBatch:
    """Batch of [N,C,H,W] pixels in [0,1] with optional per-sample info.

    ``labels`` are anomaly labels (0 normal / 1 anomalous) on test data
    and absent on training data; ``class_tag`` keeps the original class
    (digit or defect name) when known.
    """

    pixels: Tensor
    labels: Optional[np.ndarray] = None
    ids: Optional[list] = None
    class_tag: Optional[np.ndarray] = None

    def __post_init__(self):
        d = self.pixels.data
        if d.ndim != 4:
            raise DataError(f"pixels must be [N,C,H,W], got {tuple(d.shape)}")
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise DataError(f"pixel values must lie in [0,1], got [{d.min()}, {d.max()}]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (d.shape[0],):
                raise DataError(f"labels must have shape ({d.shape[0]},), got {self.labels.shape}")
            if not np.all(np.isin(self.labels, (0, 1))):
                raise DataError("anomaly labels must be 0 or 1")

    def __len__(self):
        return self.pixels.data.shape[0]


@dataclass
class ADTask:
    """Named pair of a normal-only train batch and a labeled test batch."""

    name: str
    train: ImageBatch
    test: ImageBatch

    def __post_init__(self):
        if self.train.labels is not None and np.any(self.train.labels != 0):
            raise DataError(f"task {self.name}: anomalous sample leaked into the training split")
        if self.test.labels is None:
            raise DataError(f"task {self.name}: test split must be labeled")


@dataclass
class LabeledImages:
    """Raw class-labeled images prior to task construction."""

    images: np.ndarray  # [N,C,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] original class ids


# ---------------------------------------------------------------------------
# IDX binaries


def _open_maybe_gzip(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated IDX file while reading {what}")
    return buf


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair into LabeledImages.

    Pixel bytes are scaled to [0,1] by division with 255; image and
    label counts must agree.
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        raw = _read_exact(fh, count * rows * cols, "image payload")
        if fh.read(1):
            raise FormatError("trailing bytes after IDX image payload")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = images.astype(np.float32) / np.float32(255.0)

    with _open_maybe_gzip(labels_path) as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        raw = _read_exact(fh, label_count, "label payload")
        if fh.read(1):
            raise FormatError("trailing bytes after IDX label payload")
    if label_count != count:
        raise FormatError(f"image count {count} != label count {label_count}")
    return LabeledImages(images, np.frombuffer(raw, dtype=np.uint8).astype(np.int64))


def load_idx_dir(directory):
    """Load the conventional 4-file IDX layout from one directory."""
    directory = Path(directory)

    def pick(stem):
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                return directory / name
        raise DataError(f"missing {stem}[.gz] under {directory}")

    train = load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"))
    test = load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"))
    return train, test


# ---------------------------------------------------------------------------
# one-class task construction


def make_one_class_task(train_set, test_set, normal_class, image_size=None, name=None):
    """Build an AD task: one class is normal, every other class anomalous.

    The train split keeps only normal-class samples (unlabeled); the
    test split keeps everything, labeled 0 iff its class matches.
    ``image_size`` optionally resizes both splits (bilinear).
    """
    normal_class = int(normal_class)
    mask = train_set.labels == normal_class
    if not mask.any():
        raise DataError(f"normal class {normal_class} absent from the training set")
    train_images = train_set.images[mask]
    train_ids = [f"train:{i}" for i in np.nonzero(mask)[0]]
    test_images = test_set.images
    test_ids = [f"test:{i}" for i in range(test_images.shape[0])]
    if image_size is not None:
        train_images = bilinear_resize(train_images, image_size)
        test_images = bilinear_resize(test_images, image_size)
    train = ImageBatch(
        Tensor(train_images),
        ids=train_ids,
        class_tag=np.full(train_images.shape[0], normal_class, dtype=np.int64),
    )
    test = ImageBatch(
        Tensor(test_images),
        labels=(test_set.labels != normal_class).astype(np.int64),
        ids=test_ids,
        class_tag=test_set.labels.copy(),
    )
    return ADTask(name or f"one_class_{normal_class}", train, test)


def truncate_batch(batch, limit):
    """Deterministically keep the first ``limit`` samples of a batch."""
    if limit is None or len(batch) <= limit:
        return batch
    return ImageBatch(
        Tensor(batch.pixels.data[:limit]),
        labels=None if batch.labels is None else batch.labels[:limit],
        ids=None if batch.ids is None else batch.ids[:limit],
        class_tag=None if batch.class_tag is None else batch.class_tag[:limit],
    )


# ---------------------------------------------------------------------------
# image directories (industrial layout)


def _decode_png(path, channels):
    from PIL import Image

    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    arr = arr.transpose(2, 0, 1)  # [3,H,W]
    if channels == 1:
        arr = rgb_to_grayscale(arr[None])[0]
    return arr


def _load_image_dir(directory, channels, target_size):
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"no .png images under {directory}")
    images = []
    for p in files:
        arr = _decode_png(p, channels)
        images.append(bilinear_resize(arr[None], target_size)[0])
    return np.stack(images), files


def load_mvtec_category(root_dir, category, target_size=(256, 256), channels=3):
    """Load one category from an anomaly-detection image tree.

    Layout: ``<category>/train/good/*.png`` and
    ``<category>/test/<defect_or_good>/*.png``; the ``good`` test folder
    maps to label 0, every other folder to label 1.
    """
    base = Path(root_dir) / category
    train_dir = base / "train" / "good"
    test_root = base / "test"
    for d in (train_dir, test_root):
        if not d.is_dir():
            raise DataError(f"missing dataset directory: {d}")

    train_images, train_files = _load_image_dir(train_dir, channels, target_size)
    train = ImageBatch(
        Tensor(train_images),
        ids=[str(p.relative_to(base)) for p in train_files],
        class_tag=np.array(["good"] * len(train_files)),
    )

    images, labels, ids, tags = [], [], [], []
    defect_dirs = sorted(p for p in test_root.iterdir() if p.is_dir())
    if not defect_dirs:
        raise DataError(f"no test subdirectories under {test_root}")
    for sub in defect_dirs:
        batch_images, files = _load_image_dir(sub, channels, target_size)
        images.append(batch_images)
        labels.extend([0 if sub.name == "good" else 1] * len(files))
        ids.extend(str(p.relative_to(base)) for p in files)
        tags.extend([sub.name] * len(files))
    test = ImageBatch(
        Tensor(np.concatenate(images)),
        labels=np.array(labels, dtype=np.int64),
        ids=ids,
        class_tag=np.array(tags),
    )
    return ADTask(category, train, test)


# ---------------------------------------------------------------------------
# preprocessing


def bilinear_resize(images, size):
    """Resize [N,C,H,W] to ``size`` = (H', W') with bilinear sampling.

    Uses half-pixel-centered source coordinates; interpolating a
    constant image reproduces the constant exactly.
    """
    if isinstance(size, int):
        size = (size, size)
    ho, wo = int(size[0]), int(size[1])
    if ho < 1 or wo < 1:
        raise DataError(f"invalid resize target {size}")
    n, c, h, w = images.shape
    if (h, w) == (ho, wo):
        return images

    def axis_coords(src, dst):
        coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        coords = np.clip(coords, 0.0, src - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        frac = (coords - lo).astype(images.dtype)
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(h, ho)
    xlo, xhi, fx = axis_coords(w, wo)
    fy = fy.reshape(1, 1, ho, 1)
    fx = fx.reshape(1, 1, 1, wo)
    # a + t*(b-a) keeps constants bit-exact (b-a is exactly zero there)
    rows_lo, rows_hi = images[:, :, ylo], images[:, :, yhi]
    top = rows_lo[:, :, :, xlo]
    top = top + fx * (rows_lo[:, :, :, xhi] - top)
    bot = rows_hi[:, :, :, xlo]
    bot = bot + fx * (rows_hi[:, :, :, xhi] - bot)
    return top + fy * (bot - top)


def rgb_to_grayscale(images):
    """Luma transform of [N,3,H,W]; 1-channel input passes through."""
    if images.shape[1] == 1:
        return images
    if images.shape[1] != 3:
        raise DataError(f"grayscale needs 1 or 3 channels, got {images.shape[1]}")
    w = np.array([0.2989, 0.5870, 0.1140], dtype=images.dtype).reshape(1, 3, 1, 1)
    return np.clip((images * w).sum(axis=1, keepdims=True), 0.0, 1.0)


def preprocess(batch, resize=None, grayscale=False, normalize=False):
    """Apply an optional op chain; with no ops the input is returned as is."""
    if resize is None and not grayscale and not normalize:
        return batch
    pixels = batch.pixels.data
    if grayscale:
        pixels = rgb_to_grayscale(pixels)
    if resize is not None:
        pixels = bilinear_resize(pixels, resize)
    if normalize:
        flat = pixels.reshape(pixels.shape[0], -1)
        lo = flat.min(axis=1).reshape(-1, 1, 1, 1)
        hi = flat.max(axis=1).reshape(-1, 1, 1, 1)
        span = np.where(hi > lo, hi - lo, 1.0).astype(pixels.dtype)
        pixels = (pixels - lo) / span
    return ImageBatch(Tensor(pixels), labels=batch.labels, ids=batch.ids, class_tag=batch.class_tag)
