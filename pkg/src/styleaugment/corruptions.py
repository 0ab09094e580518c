"""Deterministic common-corruption generator.

Eight corruption kinds, two per group (noise / blur / weather / digital),
each at 5 severities. The parameter tables are declared defaults for this
desk-scale suite and are intentionally NOT the ImageNet-C constants; the
suite preserves the group-wise breakdown, not cell-for-cell values of the
reference benchmark. Corruptions operate in raw [0, 1] pixel space and
are applied at evaluation time only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .data import ImageBatch, denormalize_pixels, normalize_pixels

KIND_TO_GROUP = {
    "gaussian_noise": "noise",
    "shot_noise": "noise",
    "defocus_blur": "blur",
    "motion_blur": "blur",
    "fog": "weather",
    "brightness": "weather",
    "contrast": "digital",
    "pixelate": "digital",
}

GROUPS = ("noise", "blur", "weather", "digital")

# severity 1..5 parameter tables (see module docstring)
PARAMS = {
    "gaussian_noise": [0.04, 0.08, 0.12, 0.16, 0.20],        # noise sigma
    "shot_noise": [500.0, 250.0, 100.0, 50.0, 25.0],          # photon scale
    "defocus_blur": [1, 2, 3, 4, 6],                          # disk radius @32px
    "motion_blur": [3, 5, 7, 9, 13],                          # kernel length @32px
    "fog": [0.15, 0.30, 0.45, 0.60, 0.75],                    # haze intensity t
    "brightness": [0.1, 0.2, 0.3, 0.4, 0.5],                  # additive shift
    "contrast": [0.75, 0.6, 0.45, 0.3, 0.15],                 # scale toward mean
    "pixelate": [0.8, 0.65, 0.5, 0.4, 0.3],                   # downscale factor
}

CANONICAL_KINDS = tuple(KIND_TO_GROUP)


class CorruptionError(Exception):
    """Unknown corruption kind or severity."""


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int  # 1..5; 0 is the identity sentinel

    def __post_init__(self):
        if self.kind not in KIND_TO_GROUP:
            raise CorruptionError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in (0, 1, 2, 3, 4, 5):
            raise CorruptionError(f"severity must be 0..5, got {self.severity}")

    @property
    def group(self) -> str:
        return KIND_TO_GROUP[self.kind]

    @property
    def param(self):
        if self.severity == 0:
            return None
        return PARAMS[self.kind][self.severity - 1]


def corruption_suite() -> list[CorruptionSpec]:
    """The full 8 kinds x 5 severities = 40 specs in canonical order."""
    return [CorruptionSpec(kind, sev) for kind in CANONICAL_KINDS for sev in range(1, 6)]


def _disk_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = ((x ** 2 + y ** 2) <= r ** 2).astype(np.float64)
    return k / k.sum()


def _motion_kernel(length: int, angle: float) -> np.ndarray:
    size = int(length)
    if size % 2 == 0:
        size += 1
    k = np.zeros((size, size))
    c = size // 2
    dx, dy = np.cos(angle), np.sin(angle)
    for t in np.linspace(-c, c, 4 * size):
        x, y = int(round(c + t * dx)), int(round(c + t * dy))
        if 0 <= x < size and 0 <= y < size:
            k[y, x] = 1.0
    return k / k.sum()


def _scaled_px(base: float, h: int) -> int:
    # parameter tables are anchored at 32px; scale to the actual resolution
    return max(1, int(round(base * h / 32.0)))


def _apply_kernel(images: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(images)
    for n in range(images.shape[0]):
        for c in range(3):
            out[n, c] = ndimage.convolve(images[n, c], kernel, mode="nearest")
    return out


def _corrupt_array(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply a corruption to N x 3 x H x W float64 images in [0, 1]."""
    h = x.shape[2]
    p = spec.param
    if spec.kind == "gaussian_noise":
        return x + rng.normal(0.0, p, size=x.shape)
    if spec.kind == "shot_noise":
        return rng.poisson(np.clip(x, 0, 1) * p) / p
    if spec.kind == "defocus_blur":
        return _apply_kernel(x, _disk_kernel(_scaled_px(p, h)))
    if spec.kind == "motion_blur":
        angle = rng.uniform(0.0, np.pi)
        return _apply_kernel(x, _motion_kernel(_scaled_px(p, h), angle))
    if spec.kind == "fog":
        return (1.0 - p) * x + p
    if spec.kind == "brightness":
        return x + p
    if spec.kind == "contrast":
        mean = x.mean(axis=(2, 3), keepdims=True)
        return mean + p * (x - mean)
    if spec.kind == "pixelate":
        small = max(1, int(round(h * p)))
        w = x.shape[3]
        small_w = max(1, int(round(w * p)))
        down_y = (np.arange(small) * h / small).astype(int)
        down_x = (np.arange(small_w) * w / small_w).astype(int)
        up_y = (np.arange(h) * small / h).astype(int)
        up_x = (np.arange(w) * small_w / w).astype(int)
        small_img = x[:, :, down_y][:, :, :, down_x]
        return small_img[:, :, up_y][:, :, :, up_x]
    raise CorruptionError(f"unknown corruption kind {spec.kind!r}")


def corrupt(batch: ImageBatch, spec: CorruptionSpec, rng: np.random.Generator) -> ImageBatch:
    """Corrupt a normalized batch; deterministic given (batch, spec, rng state).

    Severity 0 is the identity sentinel and returns the input pixels
    bit-exactly. Otherwise pixels are denormalized to [0, 1], corrupted,
    clamped, and renormalized.
    """
    if spec.severity == 0:
        out = batch.pixels.clone()
    else:
        raw = denormalize_pixels(batch.pixels, batch.normalization).double().numpy()
        raw = np.clip(raw, 0.0, 1.0)
        corrupted = np.clip(_corrupt_array(raw, spec, rng), 0.0, 1.0)
        out = normalize_pixels(torch.from_numpy(corrupted).float(), batch.normalization)
    return ImageBatch(
        pixels=out,
        labels=batch.labels.clone(),
        normalization=batch.normalization,
        num_classes=batch.num_classes,
    )


def spec_rng(spec: CorruptionSpec, seed: int) -> np.random.Generator:
    """Canonical per-spec RNG so evaluation is reproducible spec by spec."""
    return np.random.default_rng([seed, CANONICAL_KINDS.index(spec.kind), spec.severity])
