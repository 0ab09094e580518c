"""Mini-batch augmentation strategies.

The core operation stylizes every sample of a mini-batch using another
sample of the same batch (uniform random permutation) as the style
reference, then concatenates clean and stylized halves with duplicated
labels. Variants: label mixing for the stylized half, Mixup / CutMix
baselines, and a static pre-stylization mode for comparison.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import DatasetHandle, ImageBatch, denormalize_pixels, load_image_folder
from .stylizer import StylizerWeights, stylize_pixels

log = logging.getLogger(__name__)

AUGMENT_MODES = ("styleaugment", "label_mix", "mixup", "cutmix", "prestylized", "none")


@dataclass
class MixTarget:
    """Convex label combination: weight lam on label_a, (1-lam) on label_b."""

    label_a: int
    label_b: int
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")


@dataclass
class AugmentedBatch:
    """Clean + stylized concatenation (2N samples) with duplicated labels."""

    pixels: torch.Tensor
    labels: torch.Tensor
    style_assignment: torch.Tensor  # permutation of 0..N-1
    mode: str

    def __post_init__(self):
        if self.mode not in AUGMENT_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        n = self.style_assignment.shape[0]
        if self.pixels.shape[0] != 2 * n or self.labels.shape[0] != 2 * n:
            raise ValueError("augmented batch must have exactly 2N samples")
        if not torch.equal(torch.sort(self.style_assignment).values, torch.arange(n)):
            raise ValueError("style_assignment is not a permutation of 0..N-1")

    def __len__(self):
        return self.pixels.shape[0]


def style_augment(batch: ImageBatch, weights: StylizerWeights,
                  rng: torch.Generator, alpha: float = 1.0) -> AugmentedBatch:
    """Double the batch with in-batch stylized copies, labels duplicated.

    stylized[i] uses batch[i] as content and batch[pi(i)] as style, for a
    fresh uniform permutation pi drawn from `rng` (fixed points allowed).
    """
    n = len(batch)
    perm = torch.randperm(n, generator=rng)
    lo, hi = batch.clamp_range()
    stylized = stylize_pixels(batch.pixels, batch.pixels[perm], weights, alpha,
                              clamp_range=(lo, hi))
    return AugmentedBatch(
        pixels=torch.cat([batch.pixels, stylized], dim=0),
        labels=torch.cat([batch.labels, batch.labels], dim=0),
        style_assignment=perm,
        mode="styleaugment",
    )


def style_augment_label_mix(batch: ImageBatch, weights: StylizerWeights,
                            rng: torch.Generator, lam: float,
                            alpha: float = 1.0) -> tuple[AugmentedBatch, list[MixTarget]]:
    """StyleAugment variant where stylized samples carry mixed targets.

    The stylized half's target is lam * content_label + (1-lam) * style_label.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    aug = style_augment(batch, weights, rng, alpha=alpha)
    aug = AugmentedBatch(
        pixels=aug.pixels,
        labels=aug.labels,
        style_assignment=aug.style_assignment,
        mode="label_mix",
    )
    perm = aug.style_assignment
    targets = [
        MixTarget(int(batch.labels[i]), int(batch.labels[perm[i]]), lam)
        for i in range(len(batch))
    ]
    return aug, targets


def mixup_batch(batch: ImageBatch, rng: np.random.Generator,
                beta_param: float = 1.0) -> tuple[ImageBatch, list[MixTarget]]:
    """Standard Mixup: convex pixel mixing against a shuffled batch."""
    n = len(batch)
    if n < 2:
        raise ValueError("mixup needs a batch of at least 2 samples")
    lam = float(rng.beta(beta_param, beta_param))
    perm = rng.permutation(n)
    mixed = lam * batch.pixels + (1.0 - lam) * batch.pixels[perm]
    targets = [MixTarget(int(batch.labels[i]), int(batch.labels[perm[i]]), lam) for i in range(n)]
    out = ImageBatch(
        pixels=mixed,
        labels=batch.labels.clone(),
        normalization=batch.normalization,
        num_classes=batch.num_classes,
    )
    return out, targets


def cutmix_batch(batch: ImageBatch, rng: np.random.Generator,
                 beta_param: float = 1.0) -> tuple[ImageBatch, list[MixTarget]]:
    """Standard CutMix: paste a random rectangle from a shuffled batch.

    lam is the area fraction kept from the original image.
    """
    n = len(batch)
    if n < 2:
        raise ValueError("cutmix needs a batch of at least 2 samples")
    h, w = batch.resolution
    lam_draw = float(rng.beta(beta_param, beta_param))
    perm = rng.permutation(n)
    cut_ratio = np.sqrt(1.0 - lam_draw)
    cut_h, cut_w = int(h * cut_ratio), int(w * cut_ratio)
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y1, y2 = max(cy - cut_h // 2, 0), min(cy + cut_h // 2, h)
    x1, x2 = max(cx - cut_w // 2, 0), min(cx + cut_w // 2, w)
    mixed = batch.pixels.clone()
    mixed[:, :, y1:y2, x1:x2] = batch.pixels[perm][:, :, y1:y2, x1:x2]
    lam = 1.0 - (y2 - y1) * (x2 - x1) / (h * w)
    targets = [MixTarget(int(batch.labels[i]), int(batch.labels[perm[i]]), lam) for i in range(n)]
    out = ImageBatch(
        pixels=mixed,
        labels=batch.labels.clone(),
        normalization=batch.normalization,
        num_classes=batch.num_classes,
    )
    return out, targets


def _save_image(pixels01: torch.Tensor, path: Path):
    arr = (pixels01.clamp(0, 1) * 255.0).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).numpy()
    Image.fromarray(arr).save(path)


def prestylize_dataset(dataset: DatasetHandle, style_folder, weights: StylizerWeights,
                       out_path, seed: int = 0, alpha: float = 1.0,
                       batch_size: int = 32) -> DatasetHandle:
    """Stylize every training image ONCE with a single random style image.

    This reproduces the static pre-stylization strategy: assignments are
    fixed on disk and identical across epochs. Writes an image-folder
    layout plus a manifest mapping content index -> style id.
    """
    style_dir = Path(style_folder)
    style_paths = sorted(
        p for p in style_dir.iterdir()
        if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}
    ) if style_dir.is_dir() else []
    if not style_paths:
        raise ValueError(f"style folder {style_folder} is empty or missing")

    out_root = Path(out_path)
    split_dir = out_root / dataset.split
    split_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([seed, 0x57E1])
    h, w = dataset.resolution
    styles = []
    for p in style_paths:
        with Image.open(p) as img:
            img = img.convert("RGB").resize((w, h), Image.BILINEAR)
        styles.append(np.asarray(img, dtype=np.uint8))
    styles = np.stack(styles)

    from .data import _to_batch  # same normalization path as training batches

    assignment = rng.integers(0, len(style_paths), size=len(dataset))
    class_names = dataset.class_names or [str(i) for i in range(dataset.num_classes)]
    lo_hi = None
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        content = _to_batch(dataset, dataset.images[idx], dataset.labels[idx])
        style = _to_batch(dataset, styles[assignment[idx]],
                          np.zeros(len(idx), dtype=np.int64))
        if lo_hi is None:
            lo_hi = content.clamp_range()
        out = stylize_pixels(content.pixels, style.pixels, weights, alpha,
                             clamp_range=lo_hi)
        out01 = denormalize_pixels(out, dataset.normalization)
        for j, i in enumerate(idx):
            cls_dir = split_dir / class_names[int(dataset.labels[i])]
            cls_dir.mkdir(exist_ok=True)
            _save_image(out01[j], cls_dir / f"{i:06d}_s{int(assignment[i]):03d}.png")

    manifest = {
        "seed": seed,
        "alpha": alpha,
        "num_styles": len(style_paths),
        "style_files": [p.name for p in style_paths],
        "assignment": {str(i): int(s) for i, s in enumerate(assignment)},
    }
    (out_root / "prestylize_manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d pre-stylized images to %s", len(dataset), split_dir)
    return load_image_folder(out_root, dataset.split, dataset.resolution, seed=seed)
