"""Two-view stochastic augmentation for contrastive pretraining.

Chain per view: random resized crop -> brightness/contrast (plus saturation
for color images) -> optional Gaussian blur -> clip to [0, 1]. Parameters
are drawn from a numpy Generator seeded by the caller, so every pair is a
pure function of (image, config, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.3, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    jitter_strength: float = 0.5
    blur_probability: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    output_size: int = 64

    def __post_init__(self):
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.crop_ratio = tuple(float(v) for v in self.crop_ratio)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)

    def validate(self) -> None:
        lo, hi = self.crop_scale
        if not 0 < lo <= hi:
            raise ValueError(f"crop_scale must satisfy 0 < min <= max, got {self.crop_scale}")
        if hi > 1:
            raise ValueError(f"crop scale {hi} exceeds the image area")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be nonnegative")
        if not 0 <= self.blur_probability <= 1:
            raise ValueError("blur_probability must lie in [0, 1]")
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"blur_sigma must be a positive range, got {self.blur_sigma}")
        if self.output_size < 1:
            raise ValueError("output_size must be positive")


def _crop_box(rng, h, w, scale, ratio):
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def is_grayscale(image: torch.Tensor) -> bool:
    """True when all three channels of a (3, H, W) image are identical."""
    return bool(torch.equal(image[0], image[1]) and torch.equal(image[1], image[2]))


def augment_view(image: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator,
                 grayscale: bool = False) -> torch.Tensor:
    """One augmented view of a (3, H, W) float image in [0, 1]."""
    _, h, w = image.shape
    top, left, ch, cw = _crop_box(rng, h, w, cfg.crop_scale, cfg.crop_ratio)
    size = [cfg.output_size, cfg.output_size]
    if (top, left, ch, cw) == (0, 0, h, w) and (h, w) == tuple(size):
        out = image.clone()
    else:
        out = TF.resized_crop(image, top, left, ch, cw, size, antialias=True)

    s = cfg.jitter_strength
    if s > 0:
        b = rng.uniform(max(0.0, 1 - 0.8 * s), 1 + 0.8 * s)
        c = rng.uniform(max(0.0, 1 - 0.8 * s), 1 + 0.8 * s)
        sat = rng.uniform(max(0.0, 1 - 0.8 * s), 1 + 0.8 * s)
        order = rng.permutation(3)
        for op in order:
            if op == 0:
                out = out * b
            elif op == 1:
                mean = out.mean()
                out = (out - mean) * c + mean
            elif not grayscale:
                lum = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2])[None]
                out = (out - lum) * sat + lum
        out = out.clamp(0.0, 1.0)

    if cfg.blur_probability > 0 and rng.random() < cfg.blur_probability:
        sigma = float(rng.uniform(*cfg.blur_sigma))
        k = min(2 * math.ceil(3 * sigma) + 1, (min(size) // 2) * 2 - 1)
        if k >= 3:
            out = TF.gaussian_blur(out, [k, k], [sigma, sigma])
    return out.clamp(0.0, 1.0)


def augment_pair(image, cfg: AugmentConfig | None = None, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independently augmented views of ``image``.

    ``image`` is (H, W, 3) or (3, H, W), numpy or torch, with values in [0, 1].
    Views are returned channels-first, (3, S, S). The input is not modified.
    """
    cfg = cfg or AugmentConfig()
    cfg.validate()
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image, dtype=torch.float32)
    if x.ndim != 3:
        raise ValueError(f"expected a single 3-channel image, got shape {tuple(x.shape)}")
    if x.shape[0] != 3 and x.shape[-1] == 3:
        x = x.permute(2, 0, 1)
    if float(x.min()) < 0 or float(x.max()) > 1:
        raise ValueError("image values must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    gray = is_grayscale(x)
    return augment_view(x, cfg, rng, gray), augment_view(x, cfg, rng, gray)


def augment_batch(images: torch.Tensor, cfg: AugmentConfig, seeds) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply ``augment_pair`` to every (3, H, W) image; returns two (N, 3, S, S) stacks."""
    vi, vj = zip(*(augment_pair(img, cfg, int(s)) for img, s in zip(images, seeds)))
    return torch.stack(vi), torch.stack(vj)
