"""Procedural desk-scale terrain dataset written in the AI4Mars directory layout.

Each terrain class is its own texture family:

* soil     - fine isotropic grain
* bedrock  - low-frequency blotches crossed by dark fractures
* sand     - oriented ripples
* bigRock  - shaded blobs with a cast shadow

Texture parameters (grain scale, ripple period/orientation, gain, tint) are
redrawn per image, so a handful of labeled images does not cover the
appearance range. Rover silhouettes rise from the bottom edge; the beyond-range
mask is a band along the top edge.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import NULL_LABEL, label_histogram, merge_masks, preprocess

logger = logging.getLogger(__name__)

TERRAIN_NAMES = ("soil", "bedrock", "sand", "bigRock")


@dataclass
class SynthConfig:
    num_images: int = 500
    num_test: int = 100
    num_unlabeled: int = 0
    image_size: int = 64
    seed: int = 0
    class_frequencies: Sequence[float] = (0.42, 0.33, 0.23, 0.02)
    gray_fraction: float = 0.5
    rover_probability: float = 0.4
    range_probability: float = 0.7
    null_region_probability: float = 0.08
    regions: tuple[int, int] = (3, 7)

    def validate(self) -> None:
        freqs = np.asarray(self.class_frequencies, dtype=float)
        if freqs.shape != (4,):
            raise ValueError(f"class_frequencies needs 4 entries, got {len(freqs)}")
        if np.any(freqs < 0) or not np.isclose(freqs.sum(), 1.0, atol=1e-6):
            raise ValueError(f"class_frequencies must be nonnegative and sum to 1, got {[float(f) for f in freqs]}")
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_images < 0 or self.num_test < 0 or self.num_unlabeled < 0:
            raise ValueError("image counts must be nonnegative")
        if not 0.0 <= self.gray_fraction <= 1.0:
            raise ValueError("gray_fraction must lie in [0, 1]")


def _smooth_noise(rng, size, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / (n.std() + 1e-8)


def _soil(rng, size, yy, xx):
    grain = rng.uniform(0.5, 1.1)
    t = 0.5 * _smooth_noise(rng, size, grain) + 0.15 * _smooth_noise(rng, size, 4.0)
    return rng.uniform(0.45, 0.6) + rng.uniform(0.08, 0.14) * t


def _bedrock(rng, size, yy, xx):
    t = _smooth_noise(rng, size, rng.uniform(2.5, 4.5))
    base = rng.uniform(0.4, 0.55) + rng.uniform(0.08, 0.13) * t
    # fractures: thin dark level-set lines of another smooth field
    f = _smooth_noise(rng, size, rng.uniform(3.0, 6.0))
    cracks = np.exp(-(f / rng.uniform(0.06, 0.12)) ** 2)
    return base - rng.uniform(0.15, 0.25) * cracks


def _sand(rng, size, yy, xx):
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 7.0)
    warp = 1.5 * _smooth_noise(rng, size, 6.0)
    phase = 2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + warp
    ripples = np.sin(phase) + 0.3 * np.sin(2 * phase)
    return rng.uniform(0.5, 0.65) + rng.uniform(0.06, 0.1) * ripples + 0.02 * _smooth_noise(rng, size, 0.7)


TEXTURES = (_soil, _bedrock, _sand)


def _rock_layer(rng, size, yy, xx, rock_mask):
    """Shaded rock appearance over the whole frame; only read where rock_mask is set."""
    light = np.array([-0.7, -0.7])
    gy, gx = np.gradient(ndimage.gaussian_filter(rock_mask.astype(float), 1.5))
    shade = -(gy * light[0] + gx * light[1]) * 4.0
    body = rng.uniform(0.55, 0.7) + 0.04 * _smooth_noise(rng, size, 1.5)
    return body + shade


def _place_rocks(rng, size, target_px, yy, xx):
    mask = np.zeros((size, size), bool)
    shadow = np.zeros((size, size), bool)
    tries = 0
    while (remaining := target_px - mask.sum()) > 2 and tries < 50:
        tries += 1
        r = np.clip(np.sqrt(remaining / np.pi) * rng.uniform(0.6, 1.0), 1.5, 0.1 * size)
        cy, cx = rng.uniform(0.2 * size, size), rng.uniform(0, size)
        ang = rng.uniform(0, np.pi)
        a, b = r, r * rng.uniform(0.6, 1.0)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(ang) + dy * np.sin(ang)
        v = -dx * np.sin(ang) + dy * np.cos(ang)
        blob = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        dy2, dx2 = yy - cy - 0.5 * r, xx - cx - 0.5 * r
        shadow |= ((dx2 / a) ** 2 + (dy2 / b) ** 2 <= 1.0) & ~blob
        mask |= blob
    return mask, shadow & ~mask


def _rover_mask(rng, size, yy, xx):
    """Deck polygon plus a wheel rising from the bottom edge."""
    top = rng.uniform(0.65, 0.85) * size
    left, right = sorted(rng.uniform(0, size, 2))
    if right - left < 0.3 * size:
        right = min(size, left + 0.3 * size)
    slope = rng.uniform(-0.3, 0.3)
    deck = (yy >= top + slope * (xx - left)) & (xx >= left) & (xx <= right)
    wc = (rng.uniform(left, right), size - rng.uniform(0.02, 0.08) * size)
    wr = rng.uniform(0.08, 0.14) * size
    wheel = (yy - wc[1]) ** 2 + (xx - wc[0]) ** 2 <= wr ** 2
    return deck | wheel


def _rover_texture(rng, size, yy, xx):
    panel = ((xx // 6 + yy // 6) % 2) * 0.05
    grad = 0.75 + 0.15 * (xx / size)
    edges = 0.12 * (((xx % 12) < 1) | ((yy % 12) < 1))
    return grad + panel - edges


def _range_texture(rng, size, yy, xx):
    return rng.uniform(0.55, 0.7) + 0.1 * (yy / size) + 0.02 * _smooth_noise(rng, size, 5.0)


def generate_image(cfg: SynthConfig, index: int, stream: int = 0):
    """Return (rgb uint8 or gray uint8, terrain labels, rover mask, range mask) for one index."""
    size = cfg.image_size
    rng = np.random.default_rng([cfg.seed, stream, index])
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    freqs = np.asarray(cfg.class_frequencies, float)

    # Voronoi layout for the three extended terrain classes
    k = int(rng.integers(cfg.regions[0], cfg.regions[1] + 1))
    centers = rng.uniform(0, size, (k, 2))
    d = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    d += 30.0 * _smooth_noise(rng, size, 4.0)[..., None]  # ragged borders
    region = d.argmin(-1)
    extended = freqs[:3]
    probs = extended / extended.sum() if extended.sum() > 0 else np.full(3, 1 / 3)
    region_cls = rng.choice(3, size=k, p=probs)

    terrain = region_cls[region].astype(np.uint8)
    gray = np.zeros((size, size))
    for c, tex in enumerate(TEXTURES):
        sel = terrain == c
        if sel.any():
            gray[sel] = tex(rng, size, yy, xx)[sel]

    target = freqs[3] * size * size * rng.uniform(0.5, 1.5)
    rocks, shadow = _place_rocks(rng, size, target, yy, xx) if freqs[3] > 0 else (np.zeros_like(terrain, bool),) * 2
    gray[shadow] *= 0.55
    gray[rocks] = _rock_layer(rng, size, yy, xx, rocks)[rocks]
    terrain[rocks] = 3

    nulls = rng.random(k) < cfg.null_region_probability
    terrain[nulls[region] & ~rocks] = NULL_LABEL

    rover = _rover_mask(rng, size, yy, xx) if rng.random() < cfg.rover_probability else np.zeros((size, size), bool)
    if rng.random() < cfg.range_probability:
        band = rng.uniform(0.08, 0.3) * size + 3.0 * _smooth_noise(rng, size, 8.0)[0]
        rng_mask = yy < band[None, :]
    else:
        rng_mask = np.zeros((size, size), bool)
    gray[rng_mask] = _range_texture(rng, size, yy, xx)[rng_mask]
    gray[rover] = _rover_texture(rng, size, yy, xx)[rover]

    # per-image exposure so absolute intensity is not a class cue
    gray = gray * rng.uniform(0.75, 1.15) + rng.uniform(-0.08, 0.08)
    if rng.random() < cfg.gray_fraction:
        img = gray
    else:
        tint = np.array([1.0, 0.85, 0.7]) * rng.uniform(0.9, 1.1, 3)
        img = gray[..., None] * tint
    # stored images are darker than display range; preprocessing brightens by 1.5
    img = np.clip(img / 1.5, 0, 1)
    img = np.round(img * 255).astype(np.uint8)
    return img, terrain, rover, rng_mask


def synth_generate(cfg: SynthConfig, root: Path | str) -> dict:
    """Write the dataset under ``root`` and return a summary dict.

    Output is a pure function of ``cfg``; rerunning produces byte-identical files.
    """
    cfg.validate()
    root = Path(root)
    for sub in ("images", "labels/train", "labels/test", "masks/rover", "masks/range"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    terrain_counts = np.zeros(4, np.int64)
    merged_counts = np.zeros(6, np.int64)
    plan = [("train", i, 0) for i in range(cfg.num_images)]
    plan += [("test", i, 1) for i in range(cfg.num_test)]
    plan += [(None, i, 2) for i in range(cfg.num_unlabeled)]
    prefix = {0: "tr", 1: "te", 2: "un"}
    for split, i, stream in plan:
        name = f"{prefix[stream]}{i:06d}"
        img, terrain, rover, rng_mask = generate_image(cfg, i, stream)
        Image.fromarray(img).save(root / "images" / f"{name}.png")
        if split is None:
            continue
        Image.fromarray(terrain).save(root / "labels" / split / f"{name}.png")
        Image.fromarray((rover * 255).astype(np.uint8)).save(root / "masks" / "rover" / f"{name}.png")
        Image.fromarray((rng_mask * 255).astype(np.uint8)).save(root / "masks" / "range" / f"{name}.png")
        terrain_counts += np.bincount(terrain.ravel(), minlength=256)[:4]
        merged_counts += label_histogram([merge_masks(terrain, rover, rng_mask)])

    summary = {
        "config": asdict(cfg),
        "terrain_pixel_share": dict(zip(TERRAIN_NAMES, _share(terrain_counts))),
        "class_pixel_counts": merged_counts.tolist(),
    }
    (root / "synth.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def generate_arrays(cfg: SynthConfig, count: int, stream: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """In-memory equivalent of writing ``count`` images and loading them back.

    Returns preprocessed float32 images (N, S, S, 3) and merged labels (N, S, S).
    """
    images, labels = [], []
    for i in range(count):
        img, terrain, rover, rng_mask = generate_image(cfg, i, stream)
        images.append(preprocess(img, cfg.image_size))
        labels.append(merge_masks(terrain, rover, rng_mask))
    s = cfg.image_size
    if not images:
        return np.zeros((0, s, s, 3), np.float32), np.zeros((0, s, s), np.uint8)
    return np.stack(images), np.stack(labels)


def _share(counts):
    total = counts.sum()
    return [float(c / total) if total else 0.0 for c in counts]
