"""Class distributions, label-fraction sweeps and their tables and plots."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import CLASS_NAMES, NUM_CLASSES, DatasetManifest, label_histogram, load_sample
from .metrics import ConfusionMatrix, fmt_recall, per_class_recall
from .model import ModelConfig
from .train import FinetuneConfig, evaluate, finetune, split_indices

logger = logging.getLogger(__name__)

INIT_MODES = ("pretrained", "random")
BIGROCK = CLASS_NAMES.index("bigRock")

# published full-corpus accuracies, drawn as reference lines only
REFERENCE_ACCURACY = {
    (0.01, "pretrained"): 0.911,
    (0.01, "random"): 0.819,
    (1.0, "pretrained"): 0.974,
    (1.0, "random"): 0.953,
}

SWEEP_COLUMNS = ["fraction", "seed", "init_mode", "accuracy"] + [f"recall_{c}" for c in range(NUM_CLASSES)] + ["epochs"]


# --------------------------------------------------------------------------
# class distribution
# --------------------------------------------------------------------------

def class_distribution(data, size: int | tuple[int, int] = 512) -> np.ndarray:
    """Labeled-pixel counts per class.

    ``data`` is a labeled manifest (masks merged and resized to ``size``) or
    an iterable of label arrays. Null pixels are excluded.
    """
    if isinstance(data, DatasetManifest):
        labels = (load_sample(it, size)[1] for it in data.labeled.items)
    else:
        labels = iter(data)
    counts = np.zeros(NUM_CLASSES, np.int64)
    seen = 0
    for lab in labels:
        counts += label_histogram([lab])
        seen += 1
    if seen == 0:
        logger.warning("class distribution of an empty dataset; all counts are zero")
    return counts


# --------------------------------------------------------------------------
# sweep records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRecord:
    fraction: float
    seed: int
    init_mode: str
    accuracy: float
    recall: tuple[Optional[float], ...]
    epochs: int  # best-validation epoch

    @property
    def key(self) -> tuple[float, int, str]:
        return (self.fraction, self.seed, self.init_mode)

    def to_row(self) -> list[str]:
        return ([_fmt_fraction(self.fraction), str(self.seed), self.init_mode, f"{self.accuracy:.6f}"]
                + [fmt_recall(r) for r in self.recall] + [str(self.epochs)])

    @classmethod
    def from_row(cls, row: dict) -> "SweepRecord":
        recall = tuple(None if row[f"recall_{c}"] == "n/a" else float(row[f"recall_{c}"]) for c in range(NUM_CLASSES))
        return cls(float(row["fraction"]), int(row["seed"]), row["init_mode"], float(row["accuracy"]), recall,
                   int(row["epochs"]))


@dataclass
class SweepResult:
    records: list[SweepRecord] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def accuracy(self, fraction: float, init_mode: str) -> list[float]:
        """Accuracies for one grid point, ordered by seed."""
        rows = sorted((r for r in self.records if r.fraction == fraction and r.init_mode == init_mode),
                      key=lambda r: r.seed)
        return [r.accuracy for r in rows]

    def margins(self, fraction: float) -> dict[int, float]:
        """Per-seed pretrained minus random accuracy, where both runs completed."""
        by = {(r.seed, r.init_mode): r.accuracy for r in self.records if r.fraction == fraction}
        seeds = sorted({s for s, _ in by})
        return {s: by[s, "pretrained"] - by[s, "random"] for s in seeds
                if (s, "pretrained") in by and (s, "random") in by}


def _fmt_fraction(f: float) -> str:
    return format(f, ".6g")


def canonical(records: Iterable[SweepRecord]) -> list[SweepRecord]:
    return sorted(records, key=lambda r: (r.fraction, r.seed, r.init_mode))


def write_sweep_csv(records: Iterable[SweepRecord], path: Path | str) -> None:
    """Sorted, fixed-precision CSV; written via a temp file so readers never see half a table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in canonical(records):
        w.writerow(r.to_row())
    _atomic_write(Path(path), buf.getvalue())


def read_sweep_csv(path: Path | str) -> list[SweepRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SWEEP_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: not a sweep table, missing columns {missing}")
        return [SweepRecord.from_row(row) for row in reader]


def write_failures_csv(failures: Sequence[dict], path: Path | str) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fraction", "seed", "init_mode", "error"])
    for f in sorted(failures, key=lambda f: (f["fraction"], f["seed"], f["init_mode"])):
        w.writerow([_fmt_fraction(f["fraction"]), f["seed"], f["init_mode"], f["error"]])
    _atomic_write(Path(path), buf.getvalue())


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

def run_point(fraction: float, seed: int, init_mode: str, train: tuple[np.ndarray, np.ndarray],
              test: tuple[np.ndarray, np.ndarray], model_cfg: ModelConfig, base: FinetuneConfig,
              start: Optional[Checkpoint]) -> tuple[SweepRecord, ConfusionMatrix]:
    if init_mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {init_mode!r}")
    if init_mode == "pretrained" and start is None:
        raise ValueError("pretrained init requested without a pretraining checkpoint")
    cfg = replace(base, label_fraction=fraction, seed=seed)
    tr, va = split_indices(len(train[0]), cfg)
    logger.info("fraction %s seed %d %s: %d training / %d validation images",
                _fmt_fraction(fraction), seed, init_mode, len(tr), len(va))
    res = finetune(start if init_mode == "pretrained" else None, model_cfg,
                   (train[0][tr], train[1][tr]), (train[0][va], train[1][va]), cfg)
    _, cm = evaluate(res.model, *test)
    rec = SweepRecord(fraction, seed, init_mode, cm.accuracy, tuple(per_class_recall(cm)), res.best_epoch)
    return rec, cm


def sweep(train: tuple[np.ndarray, np.ndarray], test: tuple[np.ndarray, np.ndarray], model_cfg: ModelConfig,
          base: FinetuneConfig, fractions: Sequence[float], seeds: Sequence[int],
          start: Optional[Checkpoint] = None, init_modes: Sequence[str] = INIT_MODES,
          out_dir: Path | str | None = None, resume: bool = False) -> SweepResult:
    """Finetune and test every (fraction, seed, init mode) combination.

    All pretrained-init runs start from the single checkpoint ``start``. A
    failing run is logged and recorded, the sweep carries on. With
    ``out_dir`` the table is rewritten after every run; ``resume`` keeps the
    rows already there and only runs what is missing.
    """
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction {f} outside (0, 1]")
    out = Path(out_dir) if out_dir is not None else None
    result = SweepResult()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "sweep.csv").exists():
            result.records = read_sweep_csv(out / "sweep.csv")
            logger.info("resuming: %d completed runs kept", len(result.records))
    done = {r.key for r in result.records}
    grid = [(float(f), int(s), m) for f in fractions for s in seeds for m in init_modes]
    for key in grid:
        if key in done:
            continue
        try:
            rec, _ = run_point(*key, train, test, model_cfg, base, start)
        except Exception as exc:  # one bad run must not sink the sweep
            logger.error("run %s failed: %s", key, exc)
            result.failures.append({"fraction": key[0], "seed": key[1], "init_mode": key[2], "error": str(exc)})
        else:
            result.records.append(rec)
            done.add(key)
        if out is not None:
            write_sweep_csv(result.records, out / "sweep.csv")
    result.records = canonical(result.records)
    if out is not None and result.failures:
        write_failures_csv(result.failures, out / "sweep_failures.csv")
    return result


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

def summarize(records: Sequence[SweepRecord]) -> list[dict]:
    """min/mean/max accuracy and mean bigRock recall per (fraction, init mode)."""
    groups: dict[tuple[float, str], list[SweepRecord]] = defaultdict(list)
    for r in records:
        groups[r.fraction, r.init_mode].append(r)
    rows = []
    for (frac, mode), rs in sorted(groups.items()):
        acc = [r.accuracy for r in rs]
        rock = [r.recall[BIGROCK] for r in rs if r.recall[BIGROCK] is not None]
        rows.append({
            "fraction": frac, "init_mode": mode, "runs": len(rs),
            "acc_min": min(acc), "acc_mean": float(np.mean(acc)), "acc_max": max(acc),
            "bigrock_recall": float(np.mean(rock)) if rock else None,
        })
    return rows


def markdown_table(records: Sequence[SweepRecord]) -> str:
    lines = ["| fraction | init | runs | accuracy mean | min | max | bigRock recall |",
             "|---|---|---|---|---|---|---|"]
    for s in summarize(records):
        rock = "n/a" if s["bigrock_recall"] is None else f"{s['bigrock_recall']:.4f}"
        lines.append(f"| {_fmt_fraction(s['fraction'])} | {s['init_mode']} | {s['runs']} | {s['acc_mean']:.4f} "
                     f"| {s['acc_min']:.4f} | {s['acc_max']:.4f} | {rock} |")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# plots
# --------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "marsseg"  # stable element ids across runs
    return plt


def _save(fig, path: Path | str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    fig.clear()
    _pyplot().close(fig)


_STYLE = {"pretrained": ("tab:blue", "o"), "random": ("tab:orange", "s")}


def plot_accuracy_vs_fraction(records: Sequence[SweepRecord], path: Path | str, reference: bool = True) -> None:
    """Mean accuracy per init mode on a log fraction axis; the band spans min to max over seeds."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = summarize(records)
    for mode in INIT_MODES:
        pts = [r for r in rows if r["init_mode"] == mode]
        if not pts:
            continue
        color, marker = _STYLE[mode]
        x = [p["fraction"] for p in pts]
        ax.plot(x, [p["acc_mean"] for p in pts], marker=marker, color=color, label=f"{mode} init (mean)")
        ax.fill_between(x, [p["acc_min"] for p in pts], [p["acc_max"] for p in pts], color=color, alpha=0.2)
    if reference:
        for (frac, mode), acc in sorted(REFERENCE_ACCURACY.items()):
            color, marker = _STYLE[mode]
            ax.scatter([frac], [acc], marker=marker, facecolors="none", edgecolors=color, zorder=3)
            ax.axhline(acc, color=color, linestyle=":", linewidth=0.8)
        ax.plot([], [], linestyle=":", color="gray", label="published full-corpus reference")
    ax.set_xscale("log")
    ax.set_xlabel("fraction of labeled training data")
    ax.set_ylabel("test pixel accuracy")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    _save(fig, path)


def plot_bigrock_recall(records: Sequence[SweepRecord], path: Path | str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in INIT_MODES:
        pts = [r for r in summarize(records) if r["init_mode"] == mode and r["bigrock_recall"] is not None]
        if pts:
            color, marker = _STYLE[mode]
            ax.plot([p["fraction"] for p in pts], [p["bigrock_recall"] for p in pts], marker=marker, color=color,
                    label=f"{mode} init")
    ax.set_xscale("log")
    ax.set_xlabel("fraction of labeled training data")
    ax.set_ylabel("bigRock recall (mean over seeds)")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    _save(fig, path)


def plot_confusion(cm: ConfusionMatrix, path: Path | str, title: str = "") -> None:
    plt = _pyplot()
    norm = cm.normalized()
    fig, ax = plt.subplots(figsize=(5.5, 5))
    ax.imshow(np.nan_to_num(norm, nan=0.0), cmap="Blues", vmin=0, vmax=100)
    for t in range(NUM_CLASSES):
        for p in range(NUM_CLASSES):
            v = norm[t, p]
            ax.text(p, t, "n/a" if math.isnan(v) else f"{v:.1f}", ha="center", va="center", fontsize=7,
                    color="white" if not math.isnan(v) and v > 60 else "black")
    ax.set_xticks(range(NUM_CLASSES), CLASS_NAMES, rotation=45, ha="right")
    ax.set_yticks(range(NUM_CLASSES), CLASS_NAMES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title or f"accuracy {cm.accuracy:.3f} (rows sum to 100%)")
    _save(fig, path)


def plot_class_distribution(counts: Sequence[int], path: Path | str) -> None:
    plt = _pyplot()
    counts = np.asarray(counts, dtype=np.int64)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(CLASS_NAMES, np.where(counts > 0, counts, np.nan))
    ax.set_yscale("log")
    ax.set_ylabel("labeled pixels")
    ax.tick_params(axis="x", rotation=30)
    _save(fig, path)
