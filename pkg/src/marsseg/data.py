"""Dataset ingestion for AI4Mars-layout terrain datasets.

Expected layout under a dataset root::

    images/<name>.png            8-bit grayscale (NAVCAM) or RGB (Mastcam)
    labels/<split>/<name>.png    8-bit terrain labels, values 0-3 and 255
    masks/rover/<name>.png       binary rover mask (0/255)
    masks/range/<name>.png       binary beyond-range mask (0/255)

Images that have a label under another split are excluded from a split's
manifest. Images with no label anywhere form an unlabeled pool that is
attached to the ``train`` split (useful for contrastive pretraining).
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CLASS_NAMES = ("soil", "bedrock", "sand", "bigRock", "rover", "background")
NUM_CLASSES = len(CLASS_NAMES)
NULL_LABEL = 255
ROVER_CLASS = 4
BACKGROUND_CLASS = 5
TERRAIN_VALUES = frozenset({0, 1, 2, 3, NULL_LABEL})

SPLITS = ("train", "test")
CAMERA_KINDS = ("navcam-gray", "mastcam-color")
MANIFEST_CACHE_VERSION = 1


class IngestionError(RuntimeError):
    """Fatal problem with a dataset root (missing directory, bad layout)."""


class MaskError(ValueError):
    pass


def taxonomy() -> dict:
    """Serializable class taxonomy stored with every checkpoint and report."""
    return {
        "classes": list(CLASS_NAMES),
        "null_label": NULL_LABEL,
    }


def check_taxonomy(tax: dict) -> None:
    if list(tax.get("classes", [])) != list(CLASS_NAMES) or tax.get("null_label") != NULL_LABEL:
        raise ValueError(f"incompatible class taxonomy: {tax!r}")


@dataclass(frozen=True)
class RawSample:
    image_path: Path
    label_path: Optional[Path] = None
    rover_mask_path: Optional[Path] = None
    range_mask_path: Optional[Path] = None
    camera_kind: str = "mastcam-color"

    @property
    def name(self) -> str:
        return self.image_path.stem


@dataclass
class DatasetManifest:
    items: list[RawSample]
    split: str
    errors: list[str] = field(default_factory=list)

    @property
    def total_count(self) -> int:
        return len(self.items)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labeled(self) -> "DatasetManifest":
        return replace(self, items=[it for it in self.items if it.label_path is not None], errors=[])


@dataclass(frozen=True)
class SubsetSpec:
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def subset_size(fraction: float, total: int) -> int:
    return max(1, round_half_up(float(Decimal(repr(fraction)) * total)))


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def _camera_kind(path: Path) -> str:
    with Image.open(path) as im:
        return "navcam-gray" if im.mode in ("L", "I", "I;16", "1") else "mastcam-color"


def _mask_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        im.verify()
    with Image.open(path) as im:
        return im.size


def _validate_item(item: RawSample) -> RawSample:
    with Image.open(item.image_path) as im:
        size = im.size
    for p in (item.label_path, item.rover_mask_path, item.range_mask_path):
        if p is None:
            continue
        msize = _mask_size(p)
        if msize != size:
            raise MaskError(f"{p}: mask size {msize} != image size {size}")
    return replace(item, camera_kind=_camera_kind(item.image_path))


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in directory.iterdir() if p.suffix.lower() == ".png"}


def load_manifest(root: os.PathLike | str, split: str = "train", workers: int = 1) -> DatasetManifest:
    """Scan ``root`` and return the lexicographically ordered manifest for ``split``.

    Items whose masks cannot be read (or disagree in size with the image) are
    excluded and reported in ``manifest.errors``.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    image_dir = root / "images"
    if not root.is_dir() or not image_dir.is_dir():
        raise IngestionError(f"{root}: missing images/ directory")

    images = _stems(image_dir)
    own_labels = _stems(root / "labels" / split)
    other_labels: set[str] = set()
    for other in SPLITS:
        if other != split:
            other_labels |= set(_stems(root / "labels" / other))
    rover = _stems(root / "masks" / "rover")
    rng_masks = _stems(root / "masks" / "range")

    candidates = []
    for name in sorted(images, key=lambda n: str(images[n])):
        if name in own_labels:
            label = own_labels[name]
        elif name in other_labels or split != "train":
            continue
        else:
            label = None
        candidates.append(RawSample(images[name], label, rover.get(name), rng_masks.get(name)))

    if not images:
        logger.warning("%s: no images found", image_dir)

    items: list[RawSample] = []
    errors: list[str] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_validate_item, c) for c in candidates]
        for cand, fut in zip(candidates, futures):
            try:
                items.append(fut.result())
            except Exception as exc:  # item-level: collect, exclude, keep going
                errors.append(f"{cand.image_path.name}: {exc}")
    for err in errors:
        logger.warning("excluded item %s", err)
    items.sort(key=lambda it: str(it.image_path))
    return DatasetManifest(items=items, split=split, errors=errors)


def write_manifest_cache(manifest: DatasetManifest, path: os.PathLike | str) -> None:
    """One tab-separated record per item; empty fields mean "absent"."""
    lines = [f"# marsseg-manifest v{MANIFEST_CACHE_VERSION} split={manifest.split}"]
    for it in manifest.items:
        fields = [str(it.image_path), str(it.label_path or ""), str(it.rover_mask_path or ""),
                  str(it.range_mask_path or ""), it.camera_kind, manifest.split]
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest_cache(path: os.PathLike | str) -> DatasetManifest:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# marsseg-manifest v"):
        raise IngestionError(f"{path}: not a manifest cache file")
    header = text[0].split()
    version = int(header[2][1:])
    if version != MANIFEST_CACHE_VERSION:
        raise IngestionError(f"{path}: manifest cache version {version} unsupported")
    split = header[3].split("=", 1)[1]
    items = []
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 6:
            raise IngestionError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        img, lab, rov, rng, cam, _ = parts
        items.append(RawSample(Path(img), Path(lab) if lab else None, Path(rov) if rov else None,
                               Path(rng) if rng else None, cam))
    return DatasetManifest(items=items, split=split)


def subset_indices(n: int, spec: SubsetSpec) -> np.ndarray:
    """First ``round_half_up(fraction * n)`` entries of a seeded permutation of range(n).

    The permutation depends only on (n, seed), so smaller fractions are
    prefixes of larger ones.
    """
    if n == 0:
        raise ValueError("cannot subset an empty manifest")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return perm[:subset_size(spec.fraction, n)]


def subset(manifest: DatasetManifest, spec: SubsetSpec) -> DatasetManifest:
    idx = subset_indices(len(manifest.items), spec)
    return replace(manifest, items=[manifest.items[i] for i in idx], errors=[])


# --------------------------------------------------------------------------
# pixel-level transforms
# --------------------------------------------------------------------------

def _nearest_indices(src: int, dst: int) -> np.ndarray:
    # top-left source pixel of each destination cell
    return (np.arange(dst) * src) // dst


def nearest_resize(arr: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    if isinstance(size, int):
        size = (size, size)
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise ValueError(f"cannot resize zero-sized array of shape {arr.shape}")
    rows = _nearest_indices(h, size[0])
    cols = _nearest_indices(w, size[1])
    return arr[rows][:, cols]


def resize_mask(mask: np.ndarray, size: int | tuple[int, int] = 512) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype.kind == "f":
        raise ValueError("mask must be integer valued")
    return nearest_resize(mask, size)


def preprocess(image: np.ndarray, size: int | tuple[int, int] = 512, brighten: float = 1.5) -> np.ndarray:
    """Resize (nearest), scale to [0, 1], brighten by ``brighten`` and clip.

    Returns float32 (H, W, 3); grayscale input is replicated across channels.
    """
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim not in (2, 3) or 0 in image.shape:
        raise ValueError(f"unexpected image shape {image.shape}")
    if image.ndim == 3 and image.shape[2] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {image.shape[2]}")
    out = nearest_resize(image, size).astype(np.float32) / np.float32(255.0)
    out = np.clip(out * np.float32(brighten), 0.0, 1.0)
    if out.ndim == 2:
        out = np.repeat(out[..., None], 3, axis=2)
    return out


def merge_masks(terrain: np.ndarray, rover: Optional[np.ndarray] = None,
                range_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Fold rover and range masks into the terrain labels.

    Precedence: rover (4) > range (5) > terrain value. Rover/range masks are
    treated as set wherever they are nonzero.
    """
    terrain = np.asarray(terrain)
    for nm, m in (("rover", rover), ("range", range_mask)):
        if m is not None and np.shape(m) != terrain.shape:
            raise MaskError(f"{nm} mask shape {np.shape(m)} != terrain shape {terrain.shape}")
    present = np.unique(terrain)
    bad = [int(v) for v in present if int(v) not in TERRAIN_VALUES]
    if bad:
        raise MaskError(f"terrain mask contains invalid value {bad[0]} (allowed: 0-3, 255)")
    out = terrain.astype(np.uint8, copy=True)
    if range_mask is not None:
        out[np.asarray(range_mask) != 0] = BACKGROUND_CLASS
    if rover is not None:
        out[np.asarray(rover) != 0] = ROVER_CLASS
    return out


def _read(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def load_sample(item: RawSample, size: int | tuple[int, int] = 512) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Read one item into (image float32 (H, W, 3), labels uint8 (H, W) or None)."""
    image = preprocess(_read(item.image_path), size)
    if item.label_path is None:
        return image, None
    terrain = _read(item.label_path)
    if terrain.ndim == 3:
        terrain = terrain[..., 0]
    rover = _read(item.rover_mask_path) if item.rover_mask_path else None
    rng = _read(item.range_mask_path) if item.range_mask_path else None
    labels = merge_masks(terrain, rover, rng)
    return image, resize_mask(labels, size)


def load_arrays(items: Sequence[RawSample], size: int | tuple[int, int], workers: int = 1,
                need_labels: bool = True) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Stack samples into (N, H, W, 3) images and (N, H, W) labels, in item order."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        loaded = list(pool.map(lambda it: load_sample(it, size), items))
    if not loaded:
        h, w = (size, size) if isinstance(size, int) else size
        return np.zeros((0, h, w, 3), np.float32), np.zeros((0, h, w), np.uint8)
    images = np.stack([im for im, _ in loaded])
    if not need_labels:
        return images, None
    missing = [it.name for it, (_, lab) in zip(items, loaded) if lab is None]
    if missing:
        raise IngestionError(f"{len(missing)} items lack labels, e.g. {missing[0]}")
    return images, np.stack([lab for _, lab in loaded])


def label_histogram(labels: Iterable[np.ndarray]) -> np.ndarray:
    """Per-class labeled pixel counts over classes 0-5 (null pixels ignored)."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for lab in labels:
        bc = np.bincount(np.asarray(lab, dtype=np.int64).ravel(), minlength=256)
        counts += bc[:NUM_CLASSES]
    return counts
