"""Classifier training loop with per-iteration batch augmentation.

All randomness (sample order, geometric augmentation, style permutations,
mix draws, model init) derives from (config.seed, epoch), so a run is a
pure function of its config and checkpoints only need parameters,
optimizer state, and the epoch index to resume bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from .data import DatasetHandle, iterate_batches
from .models import build_model
from .stylizer import StylizerWeights

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(Exception):
    """Raised when the loss becomes non-finite."""


class CheckpointError(Exception):
    """Raised on checkpoint/config mismatches."""


@dataclass
class TrainConfig:
    arch: str = "small_resnet_cifar"
    epochs: int = 100
    batch_size: int = 128
    base_lr: float = 0.1
    optimizer: str = "sgd_momentum"  # or "adam"
    schedule: str = "cosine"
    augment_mode: str = "styleaugment"
    alpha: float = 1.0          # stylization strength
    mix_lam: float = 0.5        # label_mix convex weight on the content label
    beta_param: float = 1.0     # Beta parameter for mixup/cutmix draws
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.augment_mode not in aug.AUGMENT_MODES:
            raise ValueError(f"unknown augment_mode {self.augment_mode!r}")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        data = json.loads(text)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr (step 0) to 0 (step == total_steps)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + float(np.cos(np.pi * step / total_steps))) / 2.0


def _mixed_cross_entropy(logits: torch.Tensor, targets: list[aug.MixTarget]) -> torch.Tensor:
    """Per-sample convex combination of cross-entropy losses, summed."""
    ya = torch.tensor([t.label_a for t in targets])
    yb = torch.tensor([t.label_b for t in targets])
    lam = torch.tensor([t.lam for t in targets], dtype=logits.dtype)
    ce_a = F.cross_entropy(logits, ya, reduction="none")
    ce_b = F.cross_entropy(logits, yb, reduction="none")
    return (lam * ce_a + (1.0 - lam) * ce_b).sum()


def _epoch_generators(seed: int, epoch: int):
    style_gen = torch.Generator().manual_seed(
        int(np.random.default_rng([seed, epoch, 0xA0]).integers(0, 2**63 - 1))
    )
    mix_rng = np.random.default_rng([seed, epoch, 0xA1])
    return style_gen, mix_rng


def _iteration_loss(model, batch, config: TrainConfig, stylizer: StylizerWeights | None,
                    style_gen, mix_rng):
    """Forward one iteration; returns (mean loss, #samples backpropped)."""
    mode = config.augment_mode
    if mode == "styleaugment":
        ab = aug.style_augment(batch, stylizer, style_gen, alpha=config.alpha)
        logits = model(ab.pixels)
        loss = F.cross_entropy(logits, ab.labels)
        return loss, len(ab)
    if mode == "label_mix":
        ab, targets = aug.style_augment_label_mix(
            batch, stylizer, style_gen, lam=config.mix_lam, alpha=config.alpha)
        n = len(batch)
        logits = model(ab.pixels)
        clean_loss = F.cross_entropy(logits[:n], ab.labels[:n], reduction="sum")
        mixed_loss = _mixed_cross_entropy(logits[n:], targets)
        return (clean_loss + mixed_loss) / len(ab), len(ab)
    if mode in ("mixup", "cutmix"):
        fn = aug.mixup_batch if mode == "mixup" else aug.cutmix_batch
        mixed, targets = fn(batch, mix_rng, beta_param=config.beta_param)
        logits = model(mixed.pixels)
        loss = _mixed_cross_entropy(logits, targets) / len(batch)
        return loss, len(batch)
    # "none" and "prestylized": plain ERM on the delivered batch
    logits = model(batch.pixels)
    return F.cross_entropy(logits, batch.labels), len(batch)


def _draw_size(config: TrainConfig) -> int:
    # StyleAugment doubles the batch: draw half as many clean samples so
    # each optimizer step backprops over exactly batch_size inputs.
    if config.augment_mode in ("styleaugment", "label_mix"):
        return config.batch_size // 2
    return config.batch_size


def _steps_per_epoch(config: TrainConfig, dataset: DatasetHandle) -> int:
    return max(1, len(dataset) // _draw_size(config))


def _build_optimizer(config: TrainConfig, model):
    if config.optimizer == "sgd_momentum":
        return torch.optim.SGD(model.parameters(), lr=config.base_lr,
                               momentum=config.momentum, weight_decay=config.weight_decay)
    return torch.optim.Adam(model.parameters(), lr=config.base_lr,
                            weight_decay=config.weight_decay)


def _epoch_accuracy(model, dataset: DatasetHandle, batch_size: int = 256) -> float:
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for batch in iterate_batches(dataset, batch_size, epoch=0):
            pred = model(batch.pixels).argmax(dim=1)
            correct += int((pred == batch.labels).sum())
            total += len(batch)
    model.train()
    return correct / total


def train(config: TrainConfig, dataset: DatasetHandle,
          stylizer_weights: StylizerWeights | None = None,
          eval_dataset: DatasetHandle | None = None,
          resume_state: dict | None = None,
          max_steps_per_epoch: int | None = None,
          checkpoint_path=None, stop_after_epoch: int | None = None):
    """Train a classifier; returns (model, metrics).

    metrics is a list of per-step dicts (step, epoch, loss, lr) plus
    per-epoch entries with train/eval accuracy when eval_dataset is given.
    With checkpoint_path set, a resumable checkpoint is written at every
    epoch boundary; stop_after_epoch ends the run early after that epoch.
    """
    needs_stylizer = config.augment_mode in ("styleaugment", "label_mix")
    if needs_stylizer and stylizer_weights is None:
        raise ValueError(f"augment_mode {config.augment_mode!r} requires stylizer weights")
    if config.arch == "resnet18" and dataset.resolution[0] < 64:
        raise ValueError(
            f"arch resnet18 expects >=64px inputs, dataset is {dataset.resolution}; "
            "use small_resnet_cifar")

    torch.manual_seed(config.seed)
    model = build_model(config.arch, dataset.num_classes)
    optimizer = _build_optimizer(config, model)

    start_epoch = 0
    if resume_state is not None:
        model.load_state_dict(resume_state["model"])
        optimizer.load_state_dict(resume_state["optimizer"])
        start_epoch = resume_state["epoch"] + 1

    steps_per_epoch = _steps_per_epoch(config, dataset)
    if max_steps_per_epoch is not None:
        steps_per_epoch = min(steps_per_epoch, max_steps_per_epoch)
    total_steps = steps_per_epoch * config.epochs
    draw = _draw_size(config)

    metrics: list[dict] = []
    model.train()
    global_step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, config.epochs):
        style_gen, mix_rng = _epoch_generators(config.seed, epoch)
        for i, batch in enumerate(iterate_batches(dataset, draw, epoch, drop_last=True)):
            if i >= steps_per_epoch:
                break
            lr = cosine_lr(global_step, total_steps, config.base_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss, n_samples = _iteration_loss(
                model, batch, config, stylizer_weights, style_gen, mix_rng)
            if not torch.isfinite(loss):
                mu, sd = float(batch.pixels.mean()), float(batch.pixels.std())
                raise TrainingDiverged(
                    f"non-finite loss at step {global_step} (lr={lr:.6g}, "
                    f"batch mean={mu:.4g}, std={sd:.4g})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            metrics.append({
                "step": global_step,
                "epoch": epoch,
                "loss": float(loss.detach()),
                "lr": lr,
                "samples": n_samples,
            })
            global_step += 1
        entry = {"epoch": epoch, "epoch_end": True}
        if eval_dataset is not None:
            entry["eval_acc"] = _epoch_accuracy(model, eval_dataset)
        metrics.append(entry)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, optimizer, epoch, config)
        log.info("epoch %d done%s", epoch,
                 f" eval_acc={entry.get('eval_acc'):.4f}" if eval_dataset is not None else "")
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    model.eval()
    return model, metrics


def save_checkpoint(path, model, optimizer, epoch: int, config: TrainConfig):
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config_hash": config.hash(),
        "config": asdict(config),
        "epoch": epoch,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
    }, path)


def load_checkpoint(path, config: TrainConfig | None = None) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported or corrupt checkpoint: {path}")
    if config is not None and blob["config_hash"] != config.hash():
        raise CheckpointError(
            "checkpoint config hash mismatch: the checkpoint was written by a "
            "different configuration; refusing to resume")
    return blob


def resume(path, config: TrainConfig, dataset: DatasetHandle,
           stylizer_weights: StylizerWeights | None = None,
           eval_dataset: DatasetHandle | None = None,
           max_steps_per_epoch: int | None = None):
    """Continue training from a checkpoint written by save_checkpoint."""
    state = load_checkpoint(path, config)
    return train(config, dataset, stylizer_weights, eval_dataset,
                 resume_state=state, max_steps_per_epoch=max_steps_per_epoch)
