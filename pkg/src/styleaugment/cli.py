"""Command-line entry points.

Subcommands: train, eval, stylize-preview, prestylize, train-decoder,
corrupt-export. Every run writes a manifest under <out-dir>/manifests/.
Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import augment as aug
from . import corruptions as corr
from . import evaluation as ev
from . import stylizer as st
from . import trainer as tr
from .data import (IngestionError, denormalize_pixels, iterate_batches,
                   load_cifar10, load_image_folder, subset_handle)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


def _out_layout(out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    layout = {name: out / name for name in ("checkpoints", "reports", "previews", "manifests")}
    for p in layout.values():
        p.mkdir(parents=True, exist_ok=True)
    return layout


def _write_manifest(layout, command: str, args: dict, outputs: list[str],
                    start: float, config_hash: str | None = None,
                    seeds: dict | None = None):
    manifest = {
        "command": command,
        "args": {k: v for k, v in args.items() if isinstance(v, (str, int, float, bool, type(None)))},
        "config_hash": config_hash,
        "seeds": seeds or {},
        "code_version": __version__,
        "outputs": outputs,
        "started": start,
        "finished": time.time(),
    }
    path = layout["manifests"] / f"{command}-{int(start * 1000)}.json"
    if path.exists():  # manifests are append-only, never overwritten
        path = layout["manifests"] / f"{command}-{int(start * 1000)}-{os.getpid()}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _check_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise UsageError(f"refusing to overwrite {path} (use --force)")


def _load_dataset(args, split: str):
    root = args.data_root or os.environ.get("STYLEAUG_DATA_ROOT")
    if not root:
        raise UsageError("no dataset root: pass --data-root or set STYLEAUG_DATA_ROOT")
    if args.dataset == "cifar10":
        handle = load_cifar10(root, split, seed=args.seed)
    else:
        handle = load_image_folder(root, split, args.resolution, seed=args.seed)
    if getattr(args, "data_fraction", 1.0) < 1.0:
        handle = subset_handle(handle, args.data_fraction, seed=args.seed)
    return handle


def _add_data_args(p):
    p.add_argument("--dataset", choices=["cifar10", "folder"], default="cifar10")
    p.add_argument("--data-root", default=None,
                   help="dataset root (default: $STYLEAUG_DATA_ROOT)")
    p.add_argument("--resolution", type=int, default=224,
                   help="resolution for folder datasets")
    p.add_argument("--data-fraction", type=float, default=1.0,
                   help="stratified train subset fraction for reduced budgets")
    p.add_argument("--seed", type=int, default=0)


def cmd_train(args) -> int:
    layout = _out_layout(args.out_dir)
    start = time.time()
    config = tr.TrainConfig.from_json(Path(args.config).read_text())
    dataset = _load_dataset(args, "train")
    eval_dataset = None
    if args.eval_each_epoch:
        eval_dataset = _load_dataset(args, "test")
    weights = None
    if config.augment_mode in ("styleaugment", "label_mix"):
        if not args.stylizer_weights:
            raise UsageError(f"augment_mode {config.augment_mode!r} needs --stylizer-weights")
        weights = st.load_weights(args.stylizer_weights)

    ckpt_path = layout["checkpoints"] / f"model-{config.hash()}.pt"
    metrics_path = layout["reports"] / f"metrics-{config.hash()}.jsonl"
    _check_overwrite(ckpt_path, args.force)
    _check_overwrite(metrics_path, args.force)

    model, metrics = tr.train(config, dataset, weights, eval_dataset=eval_dataset)
    optimizer = tr._build_optimizer(config, model)
    tr.save_checkpoint(ckpt_path, model, optimizer, config.epochs - 1, config)
    with open(metrics_path, "w") as f:
        for record in metrics:
            f.write(json.dumps(record) + "\n")
    _write_manifest(layout, "train", vars(args), [str(ckpt_path), str(metrics_path)],
                    start, config_hash=config.hash(), seeds={"train": config.seed})
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    layout = _out_layout(args.out_dir)
    start = time.time()
    blob = tr.load_checkpoint(args.checkpoint)
    config = tr.TrainConfig(**blob["config"])
    dataset = _load_dataset(args, "test")
    from .models import build_model

    model = build_model(config.arch, dataset.num_classes)
    model.load_state_dict(blob["model"])
    model.eval()

    weights = st.load_weights(args.stylizer_weights) if args.stylizer_weights else None
    if args.unbiased and weights is None:
        raise UsageError("--unbiased needs --stylizer-weights for texture features")
    report = ev.evaluate(
        model, dataset, stylizer_weights=weights,
        with_corruptions=args.suite, with_occlusion=args.occlusion,
        with_unbiased=args.unbiased, seed=args.seed, config_hash=blob["config_hash"])
    report_path = layout["reports"] / f"eval-{blob['config_hash']}-{int(start)}.json"
    ev.write_report(report, report_path)
    if args.csv and report.corruption_table:
        ev.export_corruption_csv(report, report_path.with_suffix(".csv"))
    _write_manifest(layout, "eval", vars(args), [str(report_path)], start,
                    config_hash=blob["config_hash"], seeds={"eval": args.seed})
    print(f"report: {report_path}")
    print(f"clean_acc: {report.clean_acc:.4f}")
    if report.corruption_mean is not None:
        print(f"corruption_mean: {report.corruption_mean:.4f}")
    if report.occlusion_acc is not None:
        print(f"occlusion_acc: {report.occlusion_acc:.4f}")
    if report.unbiased_acc is not None:
        print(f"unbiased_acc: {report.unbiased_acc:.4f}")
    return EXIT_OK


def _image_grid(rows, path):
    # rows: list of lists of HxWx3 uint8 arrays; simple contact sheet
    from PIL import Image

    row_imgs = [np.concatenate(row, axis=1) for row in rows]
    grid = np.concatenate(row_imgs, axis=0)
    Image.fromarray(grid).save(path)


def cmd_stylize_preview(args) -> int:
    layout = _out_layout(args.out_dir)
    start = time.time()
    weights = st.load_weights(args.weights)
    content = _load_folder_images(args.content_dir, args.resolution)
    if args.in_batch:
        gen = torch.Generator().manual_seed(args.seed)
        perm = torch.randperm(content.shape[0], generator=gen)
        style = content[perm]
    else:
        if not args.style_dir:
            raise UsageError("pass --style-dir or --in-batch")
        style = _load_folder_images(args.style_dir, args.resolution)
        reps = (content.shape[0] + style.shape[0] - 1) // style.shape[0]
        style = style.repeat(reps, 1, 1, 1)[:content.shape[0]]
    out = st.stylize_pixels(content, style, weights, args.alpha,
                            clamp_range=(torch.zeros(1), torch.ones(1)))

    def to_u8(t):
        return (t.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()

    rows = [[to_u8(content[i]), to_u8(out[i]), to_u8(style[i])]
            for i in range(content.shape[0])]
    preview_path = layout["previews"] / f"preview-{int(start)}.png"
    _image_grid(rows, preview_path)
    _write_manifest(layout, "stylize-preview", vars(args), [str(preview_path)], start,
                    seeds={"preview": args.seed})
    print(f"preview: {preview_path}")
    return EXIT_OK


def _load_folder_images(folder, resolution) -> torch.Tensor:
    """Flat folder of images -> float tensor N x 3 x R x R in [0, 1]."""
    from PIL import Image

    from .data import _resize_center_crop

    paths = sorted(p for p in Path(folder).iterdir()
                   if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".ppm"})
    if not paths:
        raise UsageError(f"no images in {folder}")
    imgs = []
    for p in paths:
        with Image.open(p) as img:
            img = _resize_center_crop(img.convert("RGB"), (resolution, resolution))
        imgs.append(np.asarray(img, dtype=np.uint8))
    arr = np.stack(imgs).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def cmd_prestylize(args) -> int:
    layout = _out_layout(args.out_dir)
    start = time.time()
    weights = st.load_weights(args.weights)
    dataset = _load_dataset(args, args.split)
    out_path = Path(args.out_dir) / "prestylized"
    if out_path.exists() and not args.force:
        raise UsageError(f"refusing to overwrite {out_path} (use --force)")
    aug.prestylize_dataset(dataset, args.style_dir, weights, out_path,
                           seed=args.seed, alpha=args.alpha)
    _write_manifest(layout, "prestylize", vars(args), [str(out_path)], start,
                    seeds={"prestylize": args.seed})
    print(f"prestylized dataset: {out_path}")
    return EXIT_OK


def cmd_train_decoder(args) -> int:
    layout = _out_layout(args.out_dir)
    start = time.time()
    dataset = _load_dataset(args, "train")
    if args.init_weights:
        weights = st.load_weights(args.init_weights)
    else:
        weights = st.init_weights(args.arch, seed=args.seed)
    weights, losses = st.train_decoder(dataset, weights, steps=args.steps, lr=args.lr,
                                       seed=args.seed)
    weights_path = layout["checkpoints"] / "stylizer.pt"
    _check_overwrite(weights_path, args.force)
    st.save_weights(weights, weights_path)
    loss_path = layout["reports"] / "decoder-loss.jsonl"
    with open(loss_path, "w") as f:
        for i, loss in enumerate(losses):
            f.write(json.dumps({"step": i, "loss": loss}) + "\n")
    _write_manifest(layout, "train-decoder", vars(args),
                    [str(weights_path), str(loss_path)], start,
                    seeds={"decoder": args.seed})
    print(f"stylizer weights: {weights_path}")
    return EXIT_OK


def cmd_corrupt_export(args) -> int:
    layout = _out_layout(args.out_dir)
    start = time.time()
    dataset = _load_dataset(args, "test")
    out_root = Path(args.out_dir) / "corrupted"
    if out_root.exists() and not args.force:
        raise UsageError(f"refusing to overwrite {out_root} (use --force)")
    from PIL import Image

    n = min(args.limit, len(dataset)) if args.limit else len(dataset)
    entries = []
    for spec in corr.corruption_suite():
        rng = corr.spec_rng(spec, args.seed)
        spec_dir = out_root / f"{spec.kind}_s{spec.severity}"
        spec_dir.mkdir(parents=True, exist_ok=True)
        written = 0
        for batch in iterate_batches(dataset, EVAL_EXPORT_BATCH, epoch=0):
            if written >= n:
                break
            take = min(len(batch), n - written)
            sub = type(batch)(pixels=batch.pixels[:take], labels=batch.labels[:take],
                              normalization=batch.normalization,
                              num_classes=batch.num_classes)
            corrupted = corr.corrupt(sub, spec, rng)
            raw = denormalize_pixels(corrupted.pixels, corrupted.normalization)
            raw = (raw.clamp(0, 1) * 255).round().to(torch.uint8)
            for j in range(take):
                name = f"{written + j:06d}.png"
                Image.fromarray(raw[j].permute(1, 2, 0).numpy()).save(spec_dir / name)
                entries.append({"kind": spec.kind, "severity": spec.severity,
                                "file": f"{spec_dir.name}/{name}",
                                "label": int(sub.labels[j])})
            written += take
    manifest = {"seed": args.seed, "num_images": n, "entries": entries}
    (out_root / "corrupt_manifest.json").write_text(json.dumps(manifest))
    _write_manifest(layout, "corrupt-export", vars(args), [str(out_root)], start,
                    seeds={"corrupt": args.seed})
    print(f"corrupted sets: {out_root}")
    return EXIT_OK


EVAL_EXPORT_BATCH = 64


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="styleaugment",
                                     description="In-batch style augmentation training "
                                                 "and robustness evaluation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stylizer-weights", default=None)
    p.add_argument("--eval-each-epoch", action="store_true")
    p.add_argument("--force", action="store_true")
    _add_data_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stylizer-weights", default=None)
    p.add_argument("--suite", action="store_true", help="run the corruption suite")
    p.add_argument("--occlusion", action="store_true")
    p.add_argument("--unbiased", action="store_true")
    p.add_argument("--csv", action="store_true", help="also export the corruption table as CSV")
    _add_data_args(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("stylize-preview", help="write clean|stylized|style grids")
    p.add_argument("--content-dir", required=True)
    p.add_argument("--style-dir", default=None)
    p.add_argument("--in-batch", action="store_true")
    p.add_argument("--weights", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_stylize_preview)

    p = sub.add_parser("prestylize", help="statically pre-stylize a dataset")
    p.add_argument("--style-dir", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--force", action="store_true")
    _add_data_args(p)
    p.set_defaults(fn=cmd_prestylize)

    p = sub.add_parser("train-decoder", help="train the stylizer decoder")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--arch", default="small4", choices=sorted(st.ARCHITECTURES))
    p.add_argument("--init-weights", default=None)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--force", action="store_true")
    _add_data_args(p)
    p.set_defaults(fn=cmd_train_decoder)

    p = sub.add_parser("corrupt-export", help="materialize the corruption suite to disk")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--limit", type=int, default=0, help="max images per spec (0 = all)")
    p.add_argument("--force", action="store_true")
    _add_data_args(p)
    p.set_defaults(fn=cmd_corrupt_export)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (UsageError, IngestionError, ValueError, FileNotFoundError,
            tr.CheckpointError, st.WeightFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - CLI boundary
        log.exception("runtime failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
