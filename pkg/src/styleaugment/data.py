"""Dataset ingestion and deterministic batch iteration.

Supports CIFAR-10 (python pickle archive layout) and generic
root/split/<class>/*.png|jpg image folders. All shuffling and train-time
geometric augmentation is a pure function of (seed, epoch) so runs are
exactly reproducible. Per-channel normalization constants are computed
from the train split of the dataset itself.
"""

from __future__ import annotations

import hashlib
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

CIFAR10_TRAIN_FILES = [f"data_batch_{i}" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch"]
CIFAR10_DIRNAME = "cifar-10-batches-py"

# md5 sums of the canonical CIFAR-10 python batches; a mismatch is
# reported as a warning (the data may be a subset or re-encoded), only a
# structurally broken file is an error.
CIFAR10_MD5 = {
    "data_batch_1": "c99cafc152244af753f735de768cd75f",
    "data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
    "data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
    "data_batch_4": "634d18415352ddfa80567beed471001a",
    "data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
    "test_batch": "40351d587109b95175f43aff81a1287e",
}

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}


class IngestionError(Exception):
    """Raised when a dataset root is missing or structurally broken."""


@dataclass
class ImageBatch:
    """Normalized images with aligned integer labels.

    pixels: float32 tensor N x 3 x H x W in normalized space.
    labels: int64 tensor of length N, values in [0, num_classes).
    normalization: per-channel (mean, std) used to produce `pixels`.
    """

    pixels: torch.Tensor
    labels: torch.Tensor
    normalization: tuple[tuple[float, float, float], tuple[float, float, float]]
    num_classes: int

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"pixels must be N x 3 x H x W, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] != self.labels.shape[0]:
            raise ValueError("pixels / labels length mismatch")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("pixels contain non-finite values")
        if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of class range")

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def resolution(self):
        return tuple(self.pixels.shape[2:])

    def clamp_range(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Valid normalized pixel range corresponding to raw [0, 1]."""
        mean, std = self.normalization
        mean_t = torch.tensor(mean).view(1, 3, 1, 1)
        std_t = torch.tensor(std).view(1, 3, 1, 1)
        return (0.0 - mean_t) / std_t, (1.0 - mean_t) / std_t


def normalize_pixels(raw, normalization):
    """Map raw [0,1] float tensor (N x 3 x H x W) to normalized space."""
    mean, std = normalization
    mean_t = torch.tensor(mean, dtype=raw.dtype).view(1, 3, 1, 1)
    std_t = torch.tensor(std, dtype=raw.dtype).view(1, 3, 1, 1)
    return (raw - mean_t) / std_t


def denormalize_pixels(pixels, normalization):
    """Inverse of normalize_pixels. Does not clamp."""
    mean, std = normalization
    mean_t = torch.tensor(mean, dtype=pixels.dtype).view(1, 3, 1, 1)
    std_t = torch.tensor(std, dtype=pixels.dtype).view(1, 3, 1, 1)
    return pixels * std_t + mean_t


@dataclass
class DatasetHandle:
    """Read-only dataset with seeded, epoch-deterministic iteration."""

    images: np.ndarray  # N x H x W x 3 uint8
    labels: np.ndarray  # N int64
    split: str  # "train" or "test"
    num_classes: int
    resolution: tuple[int, int]
    normalization: tuple[tuple[float, float, float], tuple[float, float, float]]
    seed: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of class range")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return self.images.shape[0]

    def manifest(self) -> dict:
        """Dataset provenance echoed into evaluation reports."""
        return {
            "split": self.split,
            "num_samples": len(self),
            "num_classes": self.num_classes,
            "resolution": list(self.resolution),
            "seed": self.seed,
            "normalization": {
                "mean": list(self.normalization[0]),
                "std": list(self.normalization[1]),
            },
            "class_names": list(self.class_names),
        }


def _channel_stats(images: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    std = np.maximum(std, 1e-8)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, "rb") as f:
            entry = pickle.load(f, encoding="bytes")
        data = entry[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        labels = np.asarray(entry[b"labels"], dtype=np.int64)
    except (OSError, pickle.UnpicklingError, KeyError, ValueError) as e:
        raise IngestionError(f"corrupt CIFAR-10 batch file {path}: {e}") from e
    if data.shape[0] != labels.shape[0]:
        raise IngestionError(f"corrupt CIFAR-10 batch file {path}: data/label count mismatch")
    return np.ascontiguousarray(data, dtype=np.uint8), labels


def _cifar_dir(root_path) -> Path:
    root = Path(root_path)
    for candidate in (root, root / CIFAR10_DIRNAME):
        if (candidate / "data_batch_1").exists():
            return candidate
    raise IngestionError(
        f"CIFAR-10 archive not found under {root}: missing file 'data_batch_1' "
        f"(expected layout {CIFAR10_DIRNAME}/data_batch_*)"
    )


def _check_md5(path: Path):
    expected = CIFAR10_MD5.get(path.name)
    if expected is None:
        return
    digest = hashlib.md5(path.read_bytes()).hexdigest()
    if digest != expected:
        log.warning("checksum mismatch for %s: got %s, expected %s", path, digest, expected)


def load_cifar10(root_path, split: str, seed: int = 0) -> DatasetHandle:
    """Load CIFAR-10 from the standard python pickle archive layout.

    Normalization constants are always computed from the train split.
    """
    base = _cifar_dir(root_path)
    filenames = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
    for name in CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES:
        if not (base / name).exists():
            raise IngestionError(f"missing CIFAR-10 batch file: {base / name}")
        _check_md5(base / name)

    train_parts = [_read_cifar_batch(base / n) for n in CIFAR10_TRAIN_FILES]
    train_images = np.concatenate([p[0] for p in train_parts])
    normalization = _channel_stats(train_images)

    if split == "train":
        images = train_images
        labels = np.concatenate([p[1] for p in train_parts])
    else:
        parts = [_read_cifar_batch(base / n) for n in filenames]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])

    class_names = [
        "airplane", "automobile", "bird", "cat", "deer",
        "dog", "frog", "horse", "ship", "truck",
    ]
    return DatasetHandle(
        images=images,
        labels=labels,
        split=split,
        num_classes=10,
        resolution=(32, 32),
        normalization=normalization,
        seed=seed,
        class_names=class_names,
    )


def _load_folder_split(split_dir: Path, resolution: tuple[int, int]):
    class_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class directories under {split_dir}")
    images, labels = [], []
    skipped = 0
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(path) as img:
                    img = img.convert("RGB")
                    img = _resize_center_crop(img, resolution)
            except OSError as e:
                skipped += 1
                log.warning("skipping unreadable image %s: %s", path, e)
                continue
            images.append(np.asarray(img, dtype=np.uint8))
            labels.append(label)
    if skipped:
        log.warning("skipped %d unreadable images under %s", skipped, split_dir)
    if not images:
        raise IngestionError(f"no readable images under {split_dir}")
    return (
        np.stack(images),
        np.asarray(labels, dtype=np.int64),
        [d.name for d in class_dirs],
    )


def _resize_center_crop(img: Image.Image, resolution: tuple[int, int]) -> Image.Image:
    h, w = resolution
    scale = max(h / img.height, w / img.width)
    new_size = (max(w, round(img.width * scale)), max(h, round(img.height * scale)))
    img = img.resize(new_size, Image.BILINEAR)
    left = (img.width - w) // 2
    top = (img.height - h) // 2
    return img.crop((left, top, left + w, top + h))


def load_image_folder(root_path, split: str, resolution, seed: int = 0) -> DatasetHandle:
    """Load a root/split/<class_name>/*.png|jpg dataset.

    Classes are enumerated in lexicographic order. Images are resized and
    center-cropped to `resolution` (int or (H, W)).
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    root = Path(root_path)
    split_dir = root / split
    if not split_dir.is_dir():
        raise IngestionError(f"dataset split directory not found: {split_dir}")

    images, labels, class_names = _load_folder_split(split_dir, resolution)

    train_dir = root / "train"
    if train_dir.is_dir() and split != "train":
        try:
            train_images, _, _ = _load_folder_split(train_dir, resolution)
            normalization = _channel_stats(train_images)
        except IngestionError:
            log.warning("train split unusable for normalization stats; using %s split", split)
            normalization = _channel_stats(images)
    else:
        normalization = _channel_stats(images)

    return DatasetHandle(
        images=images,
        labels=labels,
        split=split,
        num_classes=len(class_names),
        resolution=resolution,
        normalization=normalization,
        seed=seed,
        class_names=class_names,
    )


def handle_from_arrays(images, labels, split, num_classes, seed=0, class_names=None):
    """Build a handle directly from uint8 arrays (synthetic / test data)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.int64)
    return DatasetHandle(
        images=images,
        labels=labels,
        split=split,
        num_classes=num_classes,
        resolution=(images.shape[1], images.shape[2]),
        normalization=_channel_stats(images),
        seed=seed,
        class_names=list(class_names) if class_names else [str(i) for i in range(num_classes)],
    )


def subset_handle(handle: DatasetHandle, fraction: float, seed: int = 0) -> DatasetHandle:
    """Deterministic class-stratified subset (reduced-budget experiments)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return handle
    rng = np.random.default_rng([handle.seed, seed, 0x5B5])
    keep = []
    for cls in range(handle.num_classes):
        idx = np.flatnonzero(handle.labels == cls)
        n_keep = max(1, int(round(len(idx) * fraction)))
        keep.append(rng.choice(idx, size=n_keep, replace=False))
    keep = np.sort(np.concatenate(keep))
    return DatasetHandle(
        images=handle.images[keep].copy(),
        labels=handle.labels[keep].copy(),
        split=handle.split,
        num_classes=handle.num_classes,
        resolution=handle.resolution,
        normalization=handle.normalization,
        seed=handle.seed,
        class_names=list(handle.class_names),
    )


def _epoch_rng(handle: DatasetHandle, epoch: int) -> np.random.Generator:
    return np.random.default_rng([handle.seed, epoch, 0x5EED])


def _augment_train(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Geometric train augmentation only: pad-crop (32x32) + horizontal flip.

    No color jittering or lightening is ever applied.
    """
    n, h, w, _ = images.shape
    out = images
    if (h, w) == (32, 32):
        pad = 4
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
        ys = rng.integers(0, 2 * pad + 1, size=n)
        xs = rng.integers(0, 2 * pad + 1, size=n)
        out = np.stack([padded[i, ys[i]:ys[i] + h, xs[i]:xs[i] + w] for i in range(n)])
    flips = rng.random(n) < 0.5
    out = out.copy()
    out[flips] = out[flips, :, ::-1]
    return out


def _to_batch(handle: DatasetHandle, images: np.ndarray, labels: np.ndarray) -> ImageBatch:
    raw = torch.from_numpy(images.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
    pixels = normalize_pixels(raw, handle.normalization)
    return ImageBatch(
        pixels=pixels,
        labels=torch.from_numpy(labels.copy()),
        normalization=handle.normalization,
        num_classes=handle.num_classes,
    )


def iterate_batches(handle: DatasetHandle, batch_size: int, epoch: int, drop_last: bool = False):
    """Yield ImageBatch objects for one epoch.

    Sample order and augmentation randomness depend only on
    (handle.seed, epoch). Train splits are shuffled and geometrically
    augmented; test splits are delivered in stored order, unaugmented.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(handle)
    rng = _epoch_rng(handle, epoch)
    if handle.split == "train":
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        images = handle.images[idx]
        if handle.split == "train":
            images = _augment_train(images, rng)
        yield _to_batch(handle, images, handle.labels[idx])


def next_batch(handle: DatasetHandle, batch_size: int, epoch: int, step: int = 0) -> ImageBatch:
    """Return the batch at position `step` of the given epoch."""
    for i, batch in enumerate(iterate_batches(handle, batch_size, epoch)):
        if i == step:
            return batch
    raise IndexError(f"epoch exhausted before step {step}")
