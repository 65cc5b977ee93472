"""``marsseg`` command line.

Every command that trains or evaluates writes into a fresh run directory
``<runs-dir>/<command>-<timestamp>-<config hash>`` holding its outputs and a
``run_manifest.json`` (resolved config, versions, timestamps, sha256 of each
output file).

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ExperimentConfig,
    RunManifest,
    dump_config,
    load_config,
    make_run_dir,
    read_run_manifest,
)
from .data import (
    CLASS_NAMES,
    DatasetManifest,
    IngestionError,
    MaskError,
    check_taxonomy,
    load_arrays,
    load_manifest,
    read_manifest_cache,
    resize_mask,
    subset_size,
    write_manifest_cache,
)
from .eval import (
    INIT_MODES,
    canonical,
    class_distribution,
    markdown_table,
    plot_accuracy_vs_fraction,
    plot_bigrock_recall,
    plot_class_distribution,
    plot_confusion,
    read_sweep_csv,
    sweep,
    write_sweep_csv,
)
from .losses import write_loss_surface_csv
from .metrics import confusion, write_class_distribution_csv, write_confusion_csvs
from .model import build_model
from .synth import synth_generate
from .train import (
    TrainingError,
    evaluate,
    finetune,
    predict,
    pretrain,
    split_train_val,
    write_history_csv,
    write_loss_curve_csv,
)

logger = logging.getLogger("marsseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _setup(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"pretrain.seed={args.seed}", f"finetune.seed={args.seed}", f"synth.seed={args.seed}"]
    if getattr(args, "label_fraction", None) is not None:
        overrides.append(f"finetune.label_fraction={args.label_fraction}")
    if getattr(args, "data_root", None):
        overrides.append(f"data.root={json.dumps(args.data_root)}")
    cfg = load_config(args.config, overrides)
    if args.deterministic:
        import torch
        cfg.data = replace(cfg.data, workers=1)
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    return cfg


def _manifest(cfg: ExperimentConfig, split: str) -> DatasetManifest:
    if cfg.data.manifest_cache and split == "train":
        return read_manifest_cache(cfg.data.manifest_cache)
    return load_manifest(cfg.data.resolved_root(), split, workers=cfg.data.workers)


def _start_run(args, cfg: ExperimentConfig, command: str, seed: int) -> tuple[Path, RunManifest]:
    run_dir = make_run_dir(args.runs_dir, command, cfg)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    rm = RunManifest(command=command, argv=list(args.argv), config=cfg.to_dict(), config_hash=cfg.hash(),
                     seed=seed, deterministic=bool(args.deterministic))
    rm.write(run_dir)
    logger.info("run directory %s", run_dir)
    return run_dir, rm


def _arrays(manifest: DatasetManifest, cfg: ExperimentConfig):
    if not manifest.items:
        raise DataError(f"{manifest.split} split is empty")
    return load_arrays(manifest.items, cfg.data.image_size, workers=cfg.data.workers)


def _check_taxonomy(tax, where) -> None:
    try:
        check_taxonomy(tax or {})
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None


def _check_image_size(cfg: ExperimentConfig) -> None:
    out = tuple(cfg.model.atrous.output_size)
    if out != (cfg.data.image_size, cfg.data.image_size):
        raise ConfigError(f"model.atrous.output_size {list(out)} must match data.image_size {cfg.data.image_size}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _setup(args)
    out = Path(args.out) if args.out else cfg.data.resolved_root()
    summary = synth_generate(cfg.synth, out)
    print(f"wrote {cfg.synth.num_images} train, {cfg.synth.num_test} test, {cfg.synth.num_unlabeled} unlabeled "
          f"images to {out}")
    for name, share in summary["terrain_pixel_share"].items():
        print(f"  {name:<10} {share:7.2%} of terrain pixels")
    counts = np.asarray(summary["class_pixel_counts"])
    for name, n in zip(CLASS_NAMES, counts):
        print(f"  {name:<10} {int(n):>12,d} labeled pixels")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _setup(args)
    root = cfg.data.resolved_root()
    status = EXIT_OK
    for split in args.splits:
        man = load_manifest(root, split, workers=cfg.data.workers)
        labeled = len(man.labeled)
        print(f"{split}: {len(man)} items ({labeled} labeled, {len(man) - labeled} unlabeled), "
              f"{len(man.errors)} excluded")
        for err in man.errors:
            print(f"  excluded {err}")
        if args.cache_dir:
            path = Path(args.cache_dir) / f"manifest-{split}.tsv"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_manifest_cache(man, path)
            print(f"  cache written to {path}")
        if man.errors and args.strict:
            status = EXIT_DATA
    return status


def cmd_pretrain(args) -> int:
    cfg = _setup(args)
    man = _manifest(cfg, "train")
    if not man.items:
        raise DataError("no images available for pretraining")
    run_dir, rm = _start_run(args, cfg, "pretrain", cfg.pretrain.seed)
    images, _ = load_arrays(man.items, cfg.data.image_size, workers=cfg.data.workers, need_labels=False)
    logger.info("pretraining on %d images for %d steps", len(images), cfg.pretrain.steps)
    res = pretrain(images, cfg.model, cfg.pretrain)
    res.checkpoint.provenance["run"] = run_dir.name
    save_checkpoint(res.checkpoint, run_dir / "pretrain.ckpt")
    write_loss_curve_csv(res.losses, run_dir / "loss_curve.csv")
    if res.losses:
        print(f"nt_xent first {res.losses[0]:.4f} last {res.losses[-1]:.4f}")
    rm.finalize(run_dir)
    print(run_dir)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _setup(args)
    _check_image_size(cfg)
    man = _manifest(cfg, "train")
    labeled = man.labeled
    if not labeled.items:
        raise DataError("training split has no labeled images")
    train_items, val_items = split_train_val(labeled, cfg.finetune)
    selected = subset_size(cfg.finetune.label_fraction, len(labeled))
    logger.info("label fraction %g: %d of %d labeled images selected (%d train, %d validation)",
                cfg.finetune.label_fraction, selected, len(labeled), len(train_items), len(val_items))
    if args.dry_run:
        return EXIT_OK
    start = None if args.init == "random" else load_checkpoint(args.init)
    run_dir, rm = _start_run(args, cfg, "finetune", cfg.finetune.seed)
    (run_dir / "selection.txt").write_text("".join(f"train\t{it.name}\n" for it in train_items)
                                           + "".join(f"val\t{it.name}\n" for it in val_items))
    xt, yt = load_arrays(train_items, cfg.data.image_size, workers=cfg.data.workers)
    xv, yv = load_arrays(val_items, cfg.data.image_size, workers=cfg.data.workers)
    res = finetune(start, cfg.model, (xt, yt), (xv, yv), cfg.finetune)
    res.checkpoint.provenance["run"] = run_dir.name
    save_checkpoint(res.checkpoint, run_dir / "finetune.ckpt")
    write_history_csv(res.history, run_dir / "history.csv")
    rm.notes = {"init": "random" if start is None else str(args.init), "best_epoch": res.best_epoch,
                "epochs_run": res.epochs_run}
    rm.finalize(run_dir)
    print(f"best epoch {res.best_epoch} of {res.epochs_run}")
    print(run_dir)
    return EXIT_OK


def _read_predictions(directory: Path, items, size) -> np.ndarray:
    preds = []
    for it in items:
        path = directory / f"{it.name}.png"
        if not path.exists():
            raise DataError(f"{directory}: no prediction for {it.name}")
        with Image.open(path) as im:
            arr = np.asarray(im)
        if arr.ndim == 3:
            arr = arr[..., 0]
        preds.append(resize_mask(arr, size))
    return np.stack(preds)


def cmd_eval(args) -> int:
    cfg = _setup(args)
    if (args.checkpoint is None) == (args.predictions is None):
        raise ConfigError("eval: give exactly one of --checkpoint or --predictions")
    man = _manifest(cfg, "test").labeled
    if not man.items:
        raise DataError("test split has no labeled images")
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if ckpt is not None:
        _check_taxonomy(ckpt.taxonomy, args.checkpoint)
        if tuple(ckpt.model_config.atrous.output_size) != (cfg.data.image_size,) * 2:
            raise ConfigError(f"checkpoint predicts {list(ckpt.model_config.atrous.output_size)} masks but "
                              f"data.image_size is {cfg.data.image_size}")
    run_dir, rm = _start_run(args, cfg, "eval", cfg.finetune.seed)
    images, labels = _arrays(man, cfg)
    if ckpt is not None:
        model = ckpt.to_model()
        preds = predict(model, images)
        if args.save_predictions:
            out = run_dir / "predictions"
            out.mkdir()
            for it, p in zip(man.items, preds):
                Image.fromarray(p).save(out / f"{it.name}.png")
    else:
        preds = _read_predictions(Path(args.predictions), man.items, cfg.data.image_size)
    cm = confusion(preds, labels)
    write_confusion_csvs(cm, run_dir)
    (run_dir / "accuracy.csv").write_text(f"images,labeled_pixels,accuracy\n{len(man.items)},{cm.total},"
                                          f"{cm.accuracy:.6f}\n")
    counts = class_distribution(labels)
    write_class_distribution_csv(counts, run_dir / "class_distribution.csv")
    plot_confusion(cm, run_dir / "confusion.svg")
    plot_class_distribution(counts, run_dir / "class_distribution.svg")
    rm.notes = {"source": str(args.checkpoint or args.predictions)}
    rm.finalize(run_dir)
    print(f"accuracy {cm.accuracy:.4f} over {cm.total} labeled pixels")
    print(run_dir)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _setup(args)
    _check_image_size(cfg)
    sw = cfg.sweep
    train_man = _manifest(cfg, "train")
    labeled = train_man.labeled
    test_man = load_manifest(cfg.data.resolved_root(), "test", workers=cfg.data.workers).labeled
    if not labeled.items or not test_man.items:
        raise DataError("sweep needs labeled train and test splits")
    if args.resume:
        run_dir = Path(args.resume)
        prior = read_run_manifest(run_dir)
        if prior["config_hash"] != cfg.hash():
            raise ConfigError(f"{run_dir}: was run with config {prior['config_hash']}, not {cfg.hash()}")
        rm = RunManifest(**{k: prior[k] for k in ("command", "argv", "config", "config_hash", "seed",
                                                  "deterministic", "started")})
    else:
        run_dir, rm = _start_run(args, cfg, "sweep", cfg.finetune.seed)

    start = None
    if "pretrained" in sw.init_modes:
        if args.pretrained:
            start = load_checkpoint(args.pretrained)
        elif (run_dir / "pretrain.ckpt").exists():
            start = load_checkpoint(run_dir / "pretrain.ckpt")
        else:
            images, _ = load_arrays(train_man.items, cfg.data.image_size, workers=cfg.data.workers,
                                    need_labels=False)
            logger.info("pretraining on %d images", len(images))
            res = pretrain(images, cfg.model, cfg.pretrain)
            start = res.checkpoint
            save_checkpoint(start, run_dir / "pretrain.ckpt")
            write_loss_curve_csv(res.losses, run_dir / "loss_curve.csv")

    train = _arrays(labeled, cfg)
    test = _arrays(test_man, cfg)
    result = sweep(train, test, cfg.model, cfg.finetune, sw.fractions, sw.seeds, start, sw.init_modes,
                   out_dir=run_dir, resume=bool(args.resume))
    _write_report(result.records, run_dir)
    rm.notes = {"failures": result.failures, "pretrained_from": str(args.pretrained or "in-run")}
    rm.finalize(run_dir, status="ok" if not result.failures else "partial")
    print(markdown_table(result.records), end="")
    print(run_dir)
    if not result.records:
        raise TrainingError("every sweep run failed")
    return EXIT_OK


def _write_report(records, out: Path) -> None:
    (out / "summary.md").write_text(markdown_table(records))
    modes = {r.init_mode for r in records}
    if len(modes) > 1:
        plot_accuracy_vs_fraction(records, out / "accuracy_vs_fraction.svg")
        plot_bigrock_recall(records, out / "bigrock_recall_vs_fraction.svg")


def cmd_report(args) -> int:
    cfg = _setup(args)
    merged = {}
    taxonomy_ref = None
    for d in args.runs:
        rm = read_run_manifest(d)
        tax = rm.get("taxonomy")
        if taxonomy_ref is None:
            taxonomy_ref = tax
        elif tax != taxonomy_ref:
            raise DataError(f"{d}: class taxonomy {tax} differs from {taxonomy_ref}")
        _check_taxonomy(tax, d)
        path = Path(d) / "sweep.csv"
        if not path.exists():
            raise DataError(f"{d}: no sweep.csv")
        for rec in read_sweep_csv(path):
            if rec.key in merged and merged[rec.key].to_row() != rec.to_row():
                raise DataError(f"{d}: conflicting result for {rec.key}")
            merged[rec.key] = rec
    records = canonical(merged.values())
    run_dir, rm = _start_run(args, cfg, "report", 0)
    write_sweep_csv(records, run_dir / "sweep.csv")
    _write_report(records, run_dir)
    rm.notes = {"sources": [str(d) for d in args.runs]}
    rm.finalize(run_dir)
    print(markdown_table(records), end="")
    print(run_dir)
    return EXIT_OK


def cmd_loss_surface(args) -> int:
    cfg = _setup(args)
    run_dir, rm = _start_run(args, cfg, "loss-surface", 0)
    write_loss_surface_csv(run_dir / "loss_surface.csv", args.min, args.max, args.points)
    data = np.genfromtxt(run_dir / "loss_surface.csv", delimiter=",", skip_header=1)
    n = args.points
    from .eval import _pyplot, _save
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    cs = ax.contourf(data[:, 0].reshape(n, n), data[:, 1].reshape(n, n), data[:, 2].reshape(n, n), levels=20)
    fig.colorbar(cs, ax=ax, label="loss")
    ax.set_xlabel("positive term")
    ax.set_ylabel("sum of negative terms")
    _save(fig, run_dir / "loss_surface.svg")
    rm.finalize(run_dir)
    print(run_dir)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. finetune.learning_rate=0.01 (repeatable)")
    common.add_argument("--data-root", help="dataset root (default: config data.root or $MARSSEG_DATA_ROOT)")
    common.add_argument("--runs-dir", default="runs", help="parent directory for run outputs")
    common.add_argument("--deterministic", action="store_true", help="single worker, deterministic kernels")
    common.add_argument("--seed", type=int, help="seed for pretraining, finetuning and synthesis")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="marsseg", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"marsseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate the procedural desk-scale dataset")
    s.add_argument("--out", help="output directory (default: data root)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="validate a dataset directory")
    s.add_argument("--splits", nargs="+", default=["train", "test"], choices=["train", "test"])
    s.add_argument("--cache-dir", help="write manifest caches here")
    s.add_argument("--strict", action="store_true", help="exit 2 if any item was excluded")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="supervised finetuning")
    s.add_argument("--init", default="random", help="pretraining checkpoint, or 'random'")
    s.add_argument("--label-fraction", type=float, help="fraction of labeled training images to use")
    s.add_argument("--dry-run", action="store_true", help="resolve config and data selection, then stop")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint or a directory of predicted masks")
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help="directory of <name>.png class-id masks")
    s.add_argument("--save-predictions", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="label-fraction sweep, pretrained vs random init")
    s.add_argument("--pretrained", help="pretraining checkpoint (default: pretrain inside the run)")
    s.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted sweep")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", parents=[common], help="merge sweep results from run directories")
    s.add_argument("runs", nargs="+")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("loss-surface", parents=[common], help="tabulate the contrastive loss surface")
    s.add_argument("--min", type=float, default=0.1)
    s.add_argument("--max", type=float, default=10.0)
    s.add_argument("--points", type=int, default=50)
    s.set_defaults(func=cmd_loss_surface)
    return p


def _configure_logging(verbose: int) -> None:
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(getattr(h, "_marsseg", False) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handler._marsseg = True
        logger.addHandler(handler)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, IngestionError, MaskError, CheckpointError, FileNotFoundError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except (TrainingError, RuntimeError, ValueError) as exc:
        logger.error("runtime error: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
