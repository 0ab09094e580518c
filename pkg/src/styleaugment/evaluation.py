"""Robustness evaluation: clean / corruption / occlusion / unbiased accuracy.

Unbiased accuracy clusters test images by texture (instance statistics of
a shallow encoder block, the same statistics AdaIN treats as style) and
averages per-(cluster, class) cell accuracies uniformly over non-empty
cells, so a texture-biased model is penalized even when its plain
accuracy is high.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import KMeans

from .corruptions import (CANONICAL_KINDS, GROUPS, KIND_TO_GROUP, CorruptionSpec,
                          corrupt, corruption_suite, spec_rng)
from .data import DatasetHandle, iterate_batches
from .stylizer import StylizerWeights

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
EVAL_BATCH = 256


class ReportSchemaError(Exception):
    """Raised when loading a report with an incompatible schema version."""


def _predict(model, batch) -> torch.Tensor:
    with torch.no_grad():
        return model(batch.pixels).argmax(dim=1)


def eval_clean(model, dataset: DatasetHandle) -> float:
    """Top-1 accuracy on the dataset (no augmentation)."""
    model.eval()
    correct = total = 0
    for batch in iterate_batches(dataset, EVAL_BATCH, epoch=0):
        correct += int((_predict(model, batch) == batch.labels).sum())
        total += len(batch)
    return correct / total


def eval_corruptions(model, dataset: DatasetHandle, suite=None, seed: int = 0) -> dict:
    """Accuracy per (kind, severity), group means, and overall mean."""
    if suite is None:
        suite = corruption_suite()
    model.eval()
    table: dict[str, dict[int, float]] = {}
    for spec in suite:
        rng = spec_rng(spec, seed)
        correct = total = 0
        for batch in iterate_batches(dataset, EVAL_BATCH, epoch=0):
            corrupted = corrupt(batch, spec, rng)
            correct += int((_predict(model, corrupted) == corrupted.labels).sum())
            total += len(batch)
        table.setdefault(spec.kind, {})[spec.severity] = correct / total
    cells = [acc for sev in table.values() for acc in sev.values()]
    group_means = {}
    for group in GROUPS:
        group_cells = [
            acc for kind, sev in table.items() if KIND_TO_GROUP[kind] == group
            for acc in sev.values()
        ]
        if group_cells:
            group_means[group] = float(np.mean(group_cells))
    return {
        "table": table,
        "group_means": group_means,
        "mean": float(np.mean(cells)),
    }


def occlude_center(pixels: torch.Tensor, normalization) -> torch.Tensor:
    """Zero out (black, in normalized space) a centered round(H/2) x round(W/2) square."""
    h, w = pixels.shape[2:]
    ph, pw = round(h / 2), round(w / 2)
    y0, x0 = (h - ph) // 2, (w - pw) // 2
    mean, std = normalization
    black = torch.tensor([(0.0 - m) / s for m, s in zip(mean, std)],
                         dtype=pixels.dtype).view(1, 3, 1, 1)
    out = pixels.clone()
    out[:, :, y0:y0 + ph, x0:x0 + pw] = black
    return out


def eval_occlusion(model, dataset: DatasetHandle) -> float:
    """Accuracy with the center half-side square blacked out."""
    model.eval()
    correct = total = 0
    for batch in iterate_batches(dataset, EVAL_BATCH, epoch=0):
        occluded = occlude_center(batch.pixels, batch.normalization)
        with torch.no_grad():
            pred = model(occluded).argmax(dim=1)
        correct += int((pred == batch.labels).sum())
        total += len(batch)
    return correct / total


@torch.no_grad()
def texture_features(pixels: torch.Tensor, weights: StylizerWeights) -> np.ndarray:
    """Per-image texture descriptor: (mean, std) per channel of a shallow block."""
    blocks = weights.encoder(pixels, all_blocks=True)
    f = blocks[weights.encoder.texture_block - 1]
    mean = f.mean(dim=(2, 3))
    std = f.std(dim=(2, 3), unbiased=False)
    return torch.cat([mean, std], dim=1).numpy()


@dataclass
class UnbiasedMatrix:
    """Per-(texture cluster, class label) accuracy cells."""

    cell_acc: np.ndarray     # K x L, NaN where undefined
    cell_count: np.ndarray   # K x L int

    def defined_cells(self):
        return self.cell_count > 0


def cluster_textures(features: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Seeded k-means (k-means++ init, <=100 iterations) over texture features.

    If a cluster comes out empty, re-seed once; remaining empty clusters
    are tolerated (only non-empty cells enter the unbiased average).
    """
    for attempt_seed in (seed, seed + 1):
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100,
                    random_state=attempt_seed)
        assignment = km.fit_predict(features)
        if len(np.unique(assignment)) == k:
            return assignment
        log.warning("k-means produced an empty cluster (seed %d)", attempt_seed)
    return assignment


def unbiased_from_cells(predictions: np.ndarray, labels: np.ndarray,
                        clusters: np.ndarray, k: int,
                        num_classes: int) -> tuple[float, UnbiasedMatrix]:
    """Unweighted mean of per-(cluster, label) accuracies over non-empty cells."""
    cell_correct = np.zeros((k, num_classes))
    cell_count = np.zeros((k, num_classes), dtype=int)
    np.add.at(cell_count, (clusters, labels), 1)
    np.add.at(cell_correct, (clusters, labels), (predictions == labels).astype(float))
    with np.errstate(invalid="ignore"):
        cell_acc = np.where(cell_count > 0, cell_correct / np.maximum(cell_count, 1), np.nan)
    defined = cell_count > 0
    return float(cell_acc[defined].mean()), UnbiasedMatrix(cell_acc, cell_count)


def unbiased_accuracy(model, dataset: DatasetHandle, k: int,
                      stylizer_weights: StylizerWeights,
                      seed: int = 0) -> tuple[float, UnbiasedMatrix]:
    """Texture-cluster unbiased accuracy over the test set."""
    if k < 2:
        raise ValueError("k must be >= 2")
    model.eval()
    feats, preds, labels = [], [], []
    for batch in iterate_batches(dataset, EVAL_BATCH, epoch=0):
        feats.append(texture_features(batch.pixels, stylizer_weights))
        preds.append(_predict(model, batch).numpy())
        labels.append(batch.labels.numpy())
    feats = np.concatenate(feats)
    preds = np.concatenate(preds)
    labels = np.concatenate(labels)
    clusters = cluster_textures(feats, k, seed=seed)
    return unbiased_from_cells(preds, labels, clusters, k, dataset.num_classes)


@dataclass
class EvalReport:
    schema_version: int = REPORT_SCHEMA_VERSION
    clean_acc: float | None = None
    corruption_table: dict = field(default_factory=dict)   # kind -> {severity: acc}
    corruption_group_means: dict = field(default_factory=dict)
    corruption_mean: float | None = None
    occlusion_acc: float | None = None
    unbiased_acc: float | None = None
    unbiased_cells: list | None = None   # [[cluster, label, acc, count], ...]
    config_hash: str | None = None
    seeds: dict = field(default_factory=dict)
    dataset_manifest: dict = field(default_factory=dict)
    timestamp: float = field(default_factory=time.time)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        # JSON keys are strings; keep severity keys as ints on load
        d["corruption_table"] = {
            kind: {str(s): a for s, a in sev.items()}
            for kind, sev in self.corruption_table.items()
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ReportSchemaError(
                f"report schema version {d.get('schema_version')} unsupported "
                f"(this build reads version {REPORT_SCHEMA_VERSION})")
        d = dict(d)
        d["corruption_table"] = {
            kind: {int(s): a for s, a in sev.items()}
            for kind, sev in d.get("corruption_table", {}).items()
        }
        return cls(**d)


def write_report(report: EvalReport, path):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)


def load_report(path) -> EvalReport:
    with open(path) as f:
        return EvalReport.from_dict(json.load(f))


def export_corruption_csv(report: EvalReport, path):
    """Corruption table as CSV: one row per kind, one column per severity."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["group", "kind", "s1", "s2", "s3", "s4", "s5", "mean"])
        for kind in CANONICAL_KINDS:
            if kind not in report.corruption_table:
                continue
            sev = report.corruption_table[kind]
            accs = [sev[s] for s in range(1, 6)]
            writer.writerow([KIND_TO_GROUP[kind], kind, *accs, float(np.mean(accs))])


def evaluate(model, dataset: DatasetHandle, stylizer_weights=None,
             with_corruptions=True, with_occlusion=True, with_unbiased=True,
             k: int | None = None, seed: int = 0,
             config_hash: str | None = None) -> EvalReport:
    """Run the requested evaluations and assemble a report."""
    report = EvalReport(config_hash=config_hash, seeds={"eval": seed},
                        dataset_manifest=dataset.manifest())
    report.clean_acc = eval_clean(model, dataset)
    if with_corruptions:
        result = eval_corruptions(model, dataset, seed=seed)
        report.corruption_table = result["table"]
        report.corruption_group_means = result["group_means"]
        report.corruption_mean = result["mean"]
    if with_occlusion:
        report.occlusion_acc = eval_occlusion(model, dataset)
    if with_unbiased:
        if stylizer_weights is None:
            raise ValueError("unbiased accuracy requires stylizer weights")
        k = k if k is not None else dataset.num_classes
        acc, matrix = unbiased_accuracy(model, dataset, k, stylizer_weights, seed=seed)
        report.unbiased_acc = acc
        report.unbiased_cells = [
            [int(ci), int(li), float(matrix.cell_acc[ci, li]), int(matrix.cell_count[ci, li])]
            for ci in range(matrix.cell_acc.shape[0])
            for li in range(matrix.cell_acc.shape[1])
            if matrix.cell_count[ci, li] > 0
        ]
    return report
