"""Encoder -> AdaIN -> decoder stylization.

Two encoder configurations are available: a small 4-block convolutional
encoder usable at 32x32 (desk scale), and a VGG19-style encoder up to
relu4_1 for 224x224 inputs. The encoder is always frozen; only the
decoder is ever trained. AdaIN renormalizes each content channel's
spatial (mean, std) to the style channel's (mean, std).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch

log = logging.getLogger(__name__)

EPS = 1e-5
WEIGHT_FORMAT_VERSION = 1


class WeightFormatError(Exception):
    """Raised on weight-file version or architecture mismatch."""


class StylizerError(Exception):
    """Raised on invalid stylizer inputs (shape/resolution)."""


def instance_stats(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample per-channel spatial mean and population std of N x C x H x W."""
    mean = f.mean(dim=(2, 3))
    std = f.std(dim=(2, 3), unbiased=False)
    return mean, std


def adain_transform(f_c: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
    """Renormalize content feature statistics to the style's statistics.

    output[n,c] = sigma_s * (f_c - mu_c) / max(sigma_c, eps) + mu_s
    """
    if f_c.shape[1] != f_s.shape[1]:
        raise StylizerError(
            f"channel mismatch: content has {f_c.shape[1]}, style has {f_s.shape[1]}"
        )
    mu_c, sd_c = instance_stats(f_c)
    mu_s, sd_s = instance_stats(f_s)
    mu_c = mu_c[:, :, None, None]
    sd_c = sd_c[:, :, None, None]
    mu_s = mu_s[:, :, None, None]
    sd_s = sd_s[:, :, None, None]
    return sd_s * (f_c - mu_c) / sd_c.clamp(min=EPS) + mu_s


class SmallEncoder(nn.Module):
    """4-block conv encoder for low-resolution inputs (downsamples 4x)."""

    min_resolution = 8
    stride = 4
    block_channels = (32, 64, 128, 128)
    texture_block = 2  # block whose stats serve as texture descriptor

    def __init__(self):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(3, 32, 3, 1, 1), nn.ReLU(inplace=True))
        self.block2 = nn.Sequential(nn.Conv2d(32, 64, 3, 2, 1), nn.ReLU(inplace=True))
        self.block3 = nn.Sequential(nn.Conv2d(64, 128, 3, 2, 1), nn.ReLU(inplace=True))
        self.block4 = nn.Sequential(nn.Conv2d(128, 128, 3, 1, 1), nn.ReLU(inplace=True))

    def forward(self, x, all_blocks=False):
        h1 = self.block1(x)
        h2 = self.block2(h1)
        h3 = self.block3(h2)
        h4 = self.block4(h3)
        if all_blocks:
            return [h1, h2, h3, h4]
        return h4


class SmallDecoder(nn.Module):
    """Mirror of SmallEncoder: nearest upsampling + conv."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(128, 128, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(128, 64, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 32, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 3, 3, 1, 1),
        )

    def forward(self, f):
        return self.net(f)


class VggEncoder(nn.Module):
    """VGG19-style encoder up to relu4_1, with taps at relu{1..4}_1.

    Layer layout matches torchvision's vgg19.features indices 0..21 so
    externally pretrained weights can be copied in (see README).
    """

    min_resolution = 32
    stride = 8
    block_channels = (64, 128, 256, 512)
    texture_block = 2

    def __init__(self):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(3, 64, 3, 1, 1), nn.ReLU(inplace=True),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(64, 64, 3, 1, 1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, 1, 1), nn.ReLU(inplace=True),
        )
        self.block3 = nn.Sequential(
            nn.Conv2d(128, 128, 3, 1, 1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(128, 256, 3, 1, 1), nn.ReLU(inplace=True),
        )
        self.block4 = nn.Sequential(
            nn.Conv2d(256, 256, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, 1, 1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(256, 512, 3, 1, 1), nn.ReLU(inplace=True),
        )

    def forward(self, x, all_blocks=False):
        h1 = self.block1(x)
        h2 = self.block2(h1)
        h3 = self.block3(h2)
        h4 = self.block4(h3)
        if all_blocks:
            return [h1, h2, h3, h4]
        return h4


class VggDecoder(nn.Module):
    """Mirror of VggEncoder from relu4_1 back to pixels."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(512, 256, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(256, 256, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(256, 128, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(128, 128, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(128, 64, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 64, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(64, 3, 3, 1, 1),
        )

    def forward(self, f):
        return self.net(f)


ARCHITECTURES = {
    "small4": (SmallEncoder, SmallDecoder),
    "vgg19_relu4_1": (VggEncoder, VggDecoder),
}


def _descriptor(arch: str) -> dict:
    enc_cls, _ = ARCHITECTURES[arch]
    return {
        "arch": arch,
        "block_channels": list(enc_cls.block_channels),
        "stride": enc_cls.stride,
        "min_resolution": enc_cls.min_resolution,
    }


@dataclass
class StylizerWeights:
    """Frozen encoder + trainable decoder with an architecture descriptor."""

    encoder: nn.Module
    decoder: nn.Module
    descriptor: dict
    version: int = WEIGHT_FORMAT_VERSION

    def __post_init__(self):
        self.encoder.requires_grad_(False)
        self.encoder.eval()

    @property
    def arch(self) -> str:
        return self.descriptor["arch"]

    def encoder_fingerprint(self) -> str:
        """Stable hash of encoder parameters, for frozenness checks."""
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.encoder.state_dict().items()):
            h.update(name.encode())
            h.update(p.numpy().tobytes())
        return h.hexdigest()


def init_weights(arch: str = "small4", seed: int = 0) -> StylizerWeights:
    """Build a randomly initialized stylizer of the given architecture."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; options: {sorted(ARCHITECTURES)}")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    enc_cls, dec_cls = ARCHITECTURES[arch]
    return StylizerWeights(encoder=enc_cls(), decoder=dec_cls(), descriptor=_descriptor(arch))


def save_weights(weights: StylizerWeights, path):
    torch.save(
        {
            "format_version": weights.version,
            "descriptor": weights.descriptor,
            "encoder": weights.encoder.state_dict(),
            "decoder": weights.decoder.state_dict(),
        },
        path,
    )


def _shape_diff(expected: dict, found: dict) -> str:
    lines = []
    for k in sorted(set(expected) | set(found)):
        e = tuple(expected[k].shape) if k in expected else "missing"
        f = tuple(found[k].shape) if k in found else "missing"
        if e != f:
            lines.append(f"  {k}: expected {e}, found {f}")
    return "\n".join(lines)


def load_weights(path) -> StylizerWeights:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise WeightFormatError(f"cannot read weight file {path}: {e}") from e
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise WeightFormatError(f"not a stylizer weight file: {path}")
    if blob["format_version"] != WEIGHT_FORMAT_VERSION:
        raise WeightFormatError(
            f"weight format version {blob['format_version']} unsupported "
            f"(this build reads version {WEIGHT_FORMAT_VERSION})"
        )
    arch = blob["descriptor"]["arch"]
    if arch not in ARCHITECTURES:
        raise WeightFormatError(f"unknown architecture in weight file: {arch!r}")
    enc_cls, dec_cls = ARCHITECTURES[arch]
    encoder, decoder = enc_cls(), dec_cls()
    for module, key in ((encoder, "encoder"), (decoder, "decoder")):
        expected = module.state_dict()
        found = blob[key]
        diff = _shape_diff(expected, found)
        if diff:
            raise WeightFormatError(
                f"architecture mismatch in {key} of {path}:\n{diff}"
            )
        module.load_state_dict(found)
    return StylizerWeights(encoder=encoder, decoder=decoder, descriptor=blob["descriptor"])


def _check_resolution(weights: StylizerWeights, h: int, w: int):
    enc = weights.encoder
    if h < enc.min_resolution or w < enc.min_resolution or h % enc.stride or w % enc.stride:
        raise StylizerError(
            f"resolution {h}x{w} incompatible with encoder stride {enc.stride}; "
            f"minimum resolution is {enc.min_resolution}x{enc.min_resolution} "
            f"and sides must be multiples of {enc.stride}"
        )


@torch.no_grad()
def stylize_pixels(content, style, weights: StylizerWeights, alpha: float = 1.0,
                   clamp_range=None) -> torch.Tensor:
    """Core stylization on normalized pixel tensors (N x 3 x H x W).

    Returns Dec(alpha * AdaIN(f_c, f_s) + (1 - alpha) * f_c), optionally
    clamped to (lo, hi).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if content.shape[2:] != style.shape[2:]:
        raise StylizerError("content and style must share resolution")
    _check_resolution(weights, content.shape[2], content.shape[3])
    weights.decoder.eval()
    f_c = weights.encoder(content)
    if alpha == 0.0:
        target = f_c
    else:
        f_s = weights.encoder(style)
        target = alpha * adain_transform(f_c, f_s) + (1.0 - alpha) * f_c
    out = weights.decoder(target)
    if clamp_range is not None:
        lo, hi = clamp_range
        out = torch.max(torch.min(out, hi), lo)
    return out.detach()


def stylize(content: ImageBatch, style: ImageBatch, weights: StylizerWeights,
            alpha: float = 1.0) -> ImageBatch:
    """Stylize a content batch with a style batch; keeps the content labels."""
    lo, hi = content.clamp_range()
    out = stylize_pixels(content.pixels, style.pixels, weights, alpha, clamp_range=(lo, hi))
    return ImageBatch(
        pixels=out,
        labels=content.labels.clone(),
        normalization=content.normalization,
        num_classes=content.num_classes,
    )


def _style_loss(feats_out, feats_style) -> torch.Tensor:
    loss = feats_out[0].new_zeros(())
    for fo, fs in zip(feats_out, feats_style):
        mu_o, sd_o = instance_stats(fo)
        mu_s, sd_s = instance_stats(fs)
        loss = loss + F.mse_loss(mu_o, mu_s) + F.mse_loss(sd_o, sd_s)
    return loss


def train_decoder(dataset, weights: StylizerWeights, steps: int, lr: float = 1e-3,
                  batch_size: int = 16, style_weight: float = 10.0, seed: int = 0,
                  log_every: int = 10):
    """Train the decoder on in-batch stylization; the encoder stays frozen.

    Loss = MSE(Enc(out), AdaIN target) + style_weight * sum over encoder
    blocks of MSE between instance stats of the output and of the style
    image. Returns (weights, losses). On NaN loss, aborts and restores the
    last finite-loss snapshot.
    """
    weights.encoder.requires_grad_(False)
    if steps <= 0:
        return weights, []
    gen = torch.Generator().manual_seed(seed)
    decoder = weights.decoder
    decoder.train()
    opt = torch.optim.Adam(decoder.parameters(), lr=lr)
    losses: list[float] = []
    snapshot = copy.deepcopy(decoder.state_dict())

    step = 0
    epoch = 0
    from .data import iterate_batches

    while step < steps:
        for batch in iterate_batches(dataset, batch_size, epoch, drop_last=True):
            if step >= steps:
                break
            content = batch.pixels
            perm = torch.randperm(content.shape[0], generator=gen)
            style = content[perm]
            with torch.no_grad():
                f_c = weights.encoder(content)
                style_feats = weights.encoder(style, all_blocks=True)
                target = adain_transform(f_c, style_feats[-1])
            out = decoder(target)
            out_feats = weights.encoder(out, all_blocks=True)
            content_loss = F.mse_loss(out_feats[-1], target)
            loss = content_loss + style_weight * _style_loss(out_feats, style_feats)
            if not torch.isfinite(loss):
                log.error("decoder training diverged at step %d; restoring last checkpoint", step)
                decoder.load_state_dict(snapshot)
                decoder.eval()
                return weights, losses
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if step % log_every == 0:
                snapshot = copy.deepcopy(decoder.state_dict())
                log.info("decoder step %d loss %.5f", step, float(loss.detach()))
            step += 1
        epoch += 1
    decoder.eval()
    return weights, losses


def reconstruction_psnr(batch: ImageBatch, weights: StylizerWeights) -> float:
    """PSNR (dB, raw [0,1] space) of the alpha=0 autoencoder round trip."""
    from .data import denormalize_pixels

    recon = stylize(batch, batch, weights, alpha=0.0)
    x = denormalize_pixels(batch.pixels, batch.normalization)
    y = denormalize_pixels(recon.pixels, batch.normalization)
    mse = F.mse_loss(y, x).item()
    if mse == 0:
        return float("inf")
    return float(10.0 * torch.log10(torch.tensor(1.0 / mse)))
