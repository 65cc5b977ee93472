"""Desk-scale label-efficiency experiment on the procedural dataset.

One contrastive pretraining run on the training images (labels unused),
then a sweep over label fractions and seeds, finetuning from that checkpoint
and from random init. Data is generated in memory; the result is the same as
going through ``marsseg synth`` and loading the files back.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig, dump_config
from .eval import SweepResult, markdown_table, plot_accuracy_vs_fraction, plot_bigrock_recall, sweep
from .synth import generate_arrays
from .train import pretrain, write_loss_curve_csv

logger = logging.getLogger(__name__)


@dataclass
class Verdict:
    low: float
    high: float
    wins: int  # seeds where pretrained >= random at ``low``
    seeds: int
    margin_low: float  # mean pretrained - random accuracy
    margin_high: float

    @property
    def passed(self) -> bool:
        return self.seeds > 0 and self.wins >= math.ceil(0.8 * self.seeds) and self.margin_low > self.margin_high

    def describe(self) -> str:
        return (f"pretrained >= random at {self.low:g} in {self.wins}/{self.seeds} seeds; "
                f"mean margin {self.margin_low:+.4f} at {self.low:g} vs {self.margin_high:+.4f} at {self.high:g}")


@dataclass
class Replication:
    sweep: SweepResult
    pretrain_losses: list[float]
    timings: dict = field(default_factory=dict)

    def verdict(self, low: Optional[float] = None, high: Optional[float] = None) -> Verdict:
        fracs = sorted({r.fraction for r in self.sweep.records})
        low = fracs[0] if low is None else low
        high = fracs[-1] if high is None else high
        m_low, m_high = self.sweep.margins(low), self.sweep.margins(high)
        return Verdict(low, high, sum(m >= 0 for m in m_low.values()), len(m_low),
                       float(np.mean(list(m_low.values()))) if m_low else float("nan"),
                       float(np.mean(list(m_high.values()))) if m_high else float("nan"))


def run_replication(cfg: ExperimentConfig, out_dir: Path | str | None = None) -> Replication:
    s = cfg.synth
    if cfg.data.image_size != s.image_size:
        raise ValueError(f"data.image_size {cfg.data.image_size} differs from synth.image_size {s.image_size}")
    t0 = time.perf_counter()
    train = generate_arrays(s, s.num_images, stream=0)
    test = generate_arrays(s, s.num_test, stream=1)
    pool = train[0]
    if s.num_unlabeled:
        pool = np.concatenate([pool, generate_arrays(s, s.num_unlabeled, stream=2)[0]])
    t1 = time.perf_counter()
    logger.info("pretraining on %d images for %d steps", len(pool), cfg.pretrain.steps)
    pre = pretrain(pool, cfg.model, cfg.pretrain)
    t2 = time.perf_counter()

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))
        save_checkpoint(pre.checkpoint, out / "pretrain.ckpt")
        write_loss_curve_csv(pre.losses, out / "loss_curve.csv")
    sw = cfg.sweep
    result = sweep(train, test, cfg.model, cfg.finetune, sw.fractions, sw.seeds, pre.checkpoint, sw.init_modes,
                   out_dir=out)
    t3 = time.perf_counter()
    rep = Replication(result, pre.losses, {"data_s": t1 - t0, "pretrain_s": t2 - t1, "sweep_s": t3 - t2})
    if out is not None:
        (out / "summary.md").write_text(markdown_table(result.records) + "\n" + rep.verdict().describe() + "\n")
        plot_accuracy_vs_fraction(result.records, out / "accuracy_vs_fraction.svg")
        plot_bigrock_recall(result.records, out / "bigrock_recall_vs_fraction.svg")
    return rep
