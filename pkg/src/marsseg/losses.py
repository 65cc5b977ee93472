"""Contrastive (NT-Xent) and masked pixel-wise cross-entropy losses."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import NULL_LABEL, NUM_CLASSES


class DegenerateBatchError(ValueError):
    """Batch carries no usable signal (e.g. every pixel unlabeled)."""


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class SegLossConfig:
    ignore_label: int = NULL_LABEL
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if 0 <= self.ignore_label < self.num_classes:
            raise ValueError("ignore_label collides with a trainable class id")


@dataclass
class EmbeddingBatch:
    """2N embeddings where ``partner[i]`` is the other view of row i's image."""

    embeddings: torch.Tensor
    partner: torch.Tensor

    def __post_init__(self):
        z, p = self.embeddings, self.partner
        if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
            raise ValueError(f"expected (2N, D) embeddings with N >= 1, got {tuple(z.shape)}")
        p = torch.as_tensor(p, dtype=torch.long)
        idx = torch.arange(z.shape[0])
        if p.shape != idx.shape or bool((p == idx).any()) or not torch.equal(p[p], idx):
            raise ValueError("pairing must be an involution without fixed points")
        norms = z.detach().norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise ValueError("embedding rows must have unit L2 norm")
        self.partner = p

    @property
    def n(self) -> int:
        return self.embeddings.shape[0] // 2

    @classmethod
    def from_views(cls, z_i: torch.Tensor, z_j: torch.Tensor) -> "EmbeddingBatch":
        """Stack two (N, D) view batches as rows [z_i; z_j] with matching pairing."""
        n = z_i.shape[0]
        z = torch.cat([z_i, z_j], dim=0)
        partner = torch.cat([torch.arange(n, 2 * n), torch.arange(n)])
        return cls(F.normalize(z, dim=1), partner)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def nt_xent_loss(z: torch.Tensor, partner: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Mean over all 2N anchors of -log(S_ip / sum_{k != i} S_ik).

    Rows are cosine-normalized here, so ``z`` need not be unit norm. The
    denominator includes the positive term.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if z.shape[0] < 2:
        raise ValueError("need at least one positive pair (2N >= 2)")
    zn = z / z.norm(dim=1, keepdim=True)
    logits = zn @ zn.T / temperature
    mask = torch.eye(z.shape[0], dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(mask, float("-inf"))
    # log-sum-exp is max-shifted internally
    log_denom = torch.logsumexp(logits, dim=1)
    pos = logits.gather(1, partner.view(-1, 1).to(z.device)).squeeze(1)
    return (log_denom - pos).mean()


def nt_xent(batch: EmbeddingBatch, config: Optional[ContrastiveConfig] = None) -> torch.Tensor:
    config = config or ContrastiveConfig()
    return nt_xent_loss(batch.embeddings, batch.partner, config.temperature)


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                         config: Optional[SegLossConfig] = None, channels_last: bool = True) -> torch.Tensor:
    """Softmax cross-entropy averaged over pixels whose label is not ignored.

    ``logits`` is (B, H, W, C) when ``channels_last`` else (B, C, H, W);
    ``labels`` is (B, H, W).
    """
    config = config or SegLossConfig()
    if channels_last:
        logits = logits.permute(0, 3, 1, 2)
    if logits.shape[1] != config.num_classes:
        raise ValueError(f"expected {config.num_classes} logit channels, got {logits.shape[1]}")
    labels = labels.long()
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    valid = labels != config.ignore_label
    if not bool(valid.any()):
        raise DegenerateBatchError("batch has no labeled pixels")
    bad = labels[valid]
    if bool(((bad < 0) | (bad >= config.num_classes)).any()):
        raise ValueError(f"label values outside 0..{config.num_classes - 1} and {config.ignore_label}")
    return F.cross_entropy(logits, labels, ignore_index=config.ignore_label, reduction="mean")


def loss_surface_sample(s_pos, s_neg_sum) -> np.ndarray:
    """Per-anchor contrastive loss -log(S_pos / (S_pos + S_negSum)), elementwise."""
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_neg_sum = np.asarray(s_neg_sum, dtype=np.float64)
    if np.any(s_pos <= 0) or np.any(s_neg_sum < 0):
        raise ValueError("S_pos must be positive and S_negSum nonnegative")
    return np.log1p(s_neg_sum / s_pos)


def write_loss_surface_csv(path: Path | str, lo: float = 0.1, hi: float = 10.0, n: int = 50) -> np.ndarray:
    if lo <= 0:
        raise ValueError("grid bounds must be positive")
    axis = np.linspace(lo, hi, n)
    sp, sn = np.meshgrid(axis, axis, indexing="ij")
    loss = loss_surface_sample(sp, sn)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s_pos", "s_neg_sum", "loss"])
        for a, b, l in zip(sp.ravel(), sn.ravel(), loss.ravel()):
            w.writerow([f"{a:.6f}", f"{b:.6f}", f"{l:.8f}"])
    return loss


LN_NUM_CLASSES = math.log(NUM_CLASSES)
