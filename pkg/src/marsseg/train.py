"""Contrastive pretraining and supervised finetuning loops."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, augment_batch
from .checkpoint import Checkpoint
from .data import DatasetManifest, RawSample, SubsetSpec, load_arrays, round_half_up, subset_indices
from .losses import DegenerateBatchError, masked_cross_entropy, nt_xent_loss
from .metrics import ConfusionMatrix, confusion
from .model import ModelConfig, SegModel, build_model

logger = logging.getLogger(__name__)

TRANSFER_PREFIXES = ("encoder.", "projection.")


class TrainingError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    batch_size: int = 64
    steps: int = 500
    learning_rate: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    optimizer: str = "sgd-momentum"

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("pretraining batch_size must be >= 2")
        if self.steps < 0 or self.learning_rate < 0 or self.temperature <= 0:
            raise ValueError("steps and learning_rate must be nonnegative, temperature positive")
        if self.optimizer != "sgd-momentum":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        self.augment.validate()


@dataclass
class FinetuneConfig:
    batch_size: int = 8
    learning_rate: float = 0.057
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_epochs: int = 50
    patience: int = 5
    min_delta: float = 0.0
    freeze_encoder: bool = False
    label_fraction: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0
    optimizer: str = "sgd-momentum"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.optimizer != "sgd-momentum":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


def config_hash(obj) -> str:
    blob = json.dumps(obj if isinstance(obj, dict) else asdict(obj), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def make_optimizer(params, lr, momentum=0.9, weight_decay=0.0) -> torch.optim.SGD:
    return torch.optim.SGD([p for p in params if p.requires_grad], lr=lr, momentum=momentum,
                           weight_decay=weight_decay)


def segmentation_step(model: SegModel, opt: torch.optim.Optimizer, images: torch.Tensor,
                      labels: torch.Tensor) -> float:
    """One masked-CE gradient step on an NCHW batch; returns the pre-step loss."""
    loss = masked_cross_entropy(model.segment(images), labels, channels_last=False)
    if not torch.isfinite(loss):
        raise TrainingError("non-finite training loss")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach())


def _to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    model: SegModel


def pretrain(data, model_cfg: ModelConfig, cfg: PretrainConfig, image_size: Optional[int] = None,
             model: Optional[SegModel] = None) -> PretrainResult:
    """NT-Xent pretraining of encoder and projection head.

    ``data`` is a manifest (labels ignored) or an (N, H, W, 3) float array.
    """
    cfg.validate()
    if isinstance(data, DatasetManifest):
        if image_size is None:
            raise ValueError("image_size required when pretraining from a manifest")
        images, _ = load_arrays(data.items, image_size, need_labels=False)
    else:
        images = np.asarray(data, dtype=np.float32)
    if len(images) == 0:
        raise TrainingError("pretraining needs a nonempty dataset")
    model = model or build_model(model_cfg, seed=cfg.seed)
    x_all = _to_nchw(images)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model.parameters(), cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    n = len(images)
    bs = min(cfg.batch_size, n)
    losses: list[float] = []
    order = rng.permutation(n)
    cursor = 0
    model.train()
    torch.manual_seed(cfg.seed)
    for step in range(cfg.steps):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        if len(idx) < 2:
            logger.warning("step %d: batch with %d image(s) skipped", step, len(idx))
            continue
        seeds = rng.integers(0, 2 ** 31 - 1, size=len(idx))
        vi, vj = augment_batch(x_all[idx], cfg.augment, seeds)
        z = model.embed(torch.cat([vi, vj]))
        m = len(idx)
        partner = torch.cat([torch.arange(m, 2 * m), torch.arange(m)])
        loss = nt_xent_loss(z, partner, cfg.temperature)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    prov = {"stage": "pretrain", "config_hash": config_hash({"model": model_cfg.to_dict(), "pretrain": asdict(cfg)}),
            "steps": cfg.steps, "loss_curve": losses}
    return PretrainResult(Checkpoint.from_model(model, prov), losses, model)


# --------------------------------------------------------------------------
# finetuning
# --------------------------------------------------------------------------

class EarlyStopping:
    """Stop once the best loss has not improved by more than ``min_delta`` for ``patience`` epochs."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]
    best_epoch: int
    epochs_run: int
    model: SegModel


def split_indices(n: int, cfg: FinetuneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Label-fraction subset of range(n), then its trailing ``val_fraction`` held out for validation.

    With fewer than two selected items the single item serves as both.
    """
    chosen = subset_indices(n, SubsetSpec(cfg.label_fraction, cfg.seed))
    if len(chosen) < 2 or cfg.val_fraction == 0:
        return chosen, chosen
    n_val = min(max(1, round_half_up(cfg.val_fraction * len(chosen))), len(chosen) - 1)
    return chosen[:-n_val], chosen[-n_val:]


def split_train_val(manifest: DatasetManifest, cfg: FinetuneConfig) -> tuple[list[RawSample], list[RawSample]]:
    items = manifest.labeled.items
    tr, va = split_indices(len(items), cfg)
    return [items[i] for i in tr], [items[i] for i in va]


def init_model(model_cfg: ModelConfig, start: Optional[Checkpoint], seed: int) -> SegModel:
    """Random init, or random init with encoder + projection taken from ``start``."""
    model = build_model(model_cfg, seed=seed)
    if start is not None:
        start.load_into(model, prefixes=TRANSFER_PREFIXES)
    return model


def _batches(n: int, bs: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + bs] for i in range(0, n, bs)]
    # a lone trailing sample would break batch statistics
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


@torch.no_grad()
def predict(model: SegModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax class ids (N, H, W) for (N, H, W, 3) images."""
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        logits = model.segment(_to_nchw(images[i:i + batch_size]))
        out.append(logits.argmax(dim=1).to(torch.uint8).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3], np.uint8)


@torch.no_grad()
def evaluate(model: SegModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 16) -> tuple[float, ConfusionMatrix]:
    """(mean CE over labeled pixels, confusion matrix)."""
    model.eval()
    total, count = 0.0, 0
    cm = ConfusionMatrix(np.zeros((6, 6), np.int64))
    for i in range(0, len(images), batch_size):
        lab = torch.from_numpy(labels[i:i + batch_size].astype(np.int64))
        logits = model.segment(_to_nchw(images[i:i + batch_size]))
        n_lab = int((lab != 255).sum())
        if n_lab:
            total += float(masked_cross_entropy(logits, lab, channels_last=False)) * n_lab
            count += n_lab
        cm = cm + confusion(logits.argmax(dim=1).numpy(), lab.numpy())
    return (total / count if count else float("nan")), cm


def _set_train_mode(model: SegModel, freeze_encoder: bool) -> None:
    model.train()
    if freeze_encoder:
        model.encoder.eval()


def finetune(start: Optional[Checkpoint], model_cfg: ModelConfig, train: tuple[np.ndarray, np.ndarray],
             val: tuple[np.ndarray, np.ndarray], cfg: FinetuneConfig) -> FinetuneResult:
    """Masked cross-entropy finetuning with early stopping on validation loss.

    The returned checkpoint holds the weights of the best validation epoch.
    """
    cfg.validate()
    model = init_model(model_cfg, start, cfg.seed)
    if cfg.max_epochs == 0:
        ckpt = start if start is not None else Checkpoint.from_model(model, {"stage": "init"})
        return FinetuneResult(ckpt, [], 0, 0, model)

    if cfg.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    x_train, y_train = _to_nchw(train[0]), torch.from_numpy(train[1].astype(np.int64))
    opt = make_optimizer(model.parameters(), cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    rng = np.random.default_rng([cfg.seed, 1])
    torch.manual_seed(cfg.seed)
    history: list[EpochRecord] = []
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, cfg.max_epochs + 1):
        _set_train_mode(model, cfg.freeze_encoder)
        losses, weights = [], []
        for idx in _batches(len(x_train), cfg.batch_size, rng):
            try:
                losses.append(segmentation_step(model, opt, x_train[idx], y_train[idx]))
            except DegenerateBatchError:
                logger.warning("epoch %d: batch without labeled pixels skipped", epoch)
                continue
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            weights.append(len(idx))
        if not losses:
            raise TrainingError("every training batch was degenerate (no labeled pixels)")
        val_loss, cm = evaluate(model, *val)
        rec = EpochRecord(epoch, float(np.average(losses, weights=weights)), val_loss, cm.accuracy)
        history.append(rec)
        logger.info("epoch %d train %.4f val %.4f acc %.4f", epoch, rec.train_loss, rec.val_loss, rec.val_accuracy)
        stop = stopper.step(val_loss, epoch)
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    prov = {
        "stage": "finetune",
        "init": "pretrained" if start is not None else "random",
        "config_hash": config_hash({"model": model_cfg.to_dict(), "finetune": asdict(cfg)}),
        "best_epoch": stopper.best_epoch,
        "epochs_run": len(history),
        "history": [asdict(h) for h in history],
    }
    return FinetuneResult(Checkpoint.from_model(model, prov), history, stopper.best_epoch, len(history), model)


def write_history_csv(history: Sequence[EpochRecord], path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for h in history:
            w.writerow([h.epoch, f"{h.train_loss:.8f}", f"{h.val_loss:.8f}", f"{h.val_accuracy:.8f}"])


def write_loss_curve_csv(losses: Sequence[float], path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "nt_xent"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, f"{v:.8f}"])
