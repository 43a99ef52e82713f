"""Dataset ingestion, preprocessing to 80x80, and the augmentation policy.

Expected on-disk layout: root/{train,test}/{class}/*.{jpg,jpeg,png}. The
manifest records every decodable image in deterministic path-sorted order;
undecodable files are listed on the manifest, never silently dropped.

Augmentation applies, in fixed order: horizontal flip, crop-and-resize-back,
brightness (additive), contrast (scale about the image mean), saturation
(scale about the per-pixel channel mean). There is deliberately no vertical
flip anywhere in the policy. Each sample's randomness comes from its own
stream keyed by (seed, epoch, sample index) so loading order never changes
the result.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .tensor import Tensor

SPLITS = ("train", "test")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
TARGET_SIZE = 80


class DataError(Exception):
    """Dataset layout, decoding, or batching failure."""


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    classes: list[str]
    undecodable: list[str] = field(default_factory=list)

    def split_records(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def counts(self, split: str | None = None) -> dict[str, int]:
        """Per-class record tallies, optionally restricted to one split."""
        out = {c: 0 for c in self.classes}
        for r in self.records:
            if split is None or r.split == split:
                out[r.label] += 1
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "label", "split"])
            for r in self.records:
                writer.writerow([r.path, r.label, r.split])

    @classmethod
    def read_csv(cls, path, classes: Sequence[str] | None = None) -> "DatasetManifest":
        records = []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "label", "split"]:
                raise DataError(f"manifest {path}: unexpected header {header}")
            for row in reader:
                records.append(ManifestRecord(*row))
        if classes is None:
            classes = sorted({r.label for r in records})
        return cls(records=records, classes=list(classes))


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def scan_dataset(root, classes: Sequence[str] | None = None) -> DatasetManifest:
    """Walk root/{train,test}/{class} and index every decodable image.

    ``classes`` pins the label set (directories outside it are an error);
    when omitted the class list is discovered from the directory names.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    found = sorted(
        {
            p.name
            for split in SPLITS
            if (root / split).is_dir()
            for p in (root / split).iterdir()
            if p.is_dir()
        }
    )
    if classes is None:
        classes = found
    else:
        classes = list(classes)
        stray = set(found) - set(classes)
        if stray:
            raise DataError(
                f"dataset {root} contains class directories {sorted(stray)} "
                f"outside the configured classes {classes}"
            )
    if not classes:
        raise DataError(f"dataset root {root} has no class directories under train/ or test/")

    records: list[ManifestRecord] = []
    undecodable: list[str] = []
    for split in SPLITS:
        for cls in classes:
            d = root / split / cls
            if not d.is_dir():
                continue
            for p in sorted(d.iterdir()):
                if p.suffix.lower() not in IMAGE_SUFFIXES or not p.is_file():
                    continue
                if _decodable(p):
                    records.append(ManifestRecord(str(p), cls, split))
                else:
                    undecodable.append(str(p))
    if not records:
        raise DataError(f"no decodable images under {root}")
    return DatasetManifest(records=records, classes=list(classes), undecodable=undecodable)


def compute_class_weights(counts) -> np.ndarray:
    """w_c = total / (K * count_c): rarer classes weigh more.

    ``counts`` is a mapping (class order preserved) or a sequence of
    per-class counts; every count must be positive.
    """
    if isinstance(counts, Mapping):
        names = list(counts.keys())
        values = [counts[n] for n in names]
    else:
        values = list(counts)
        names = [str(i) for i in range(len(values))]
    for name, v in zip(names, values):
        if v <= 0:
            raise DataError(f"class {name!r} has no samples; weights undefined")
    total = float(sum(values))
    k = len(values)
    return np.array([total / (k * v) for v in values], dtype=np.float64)


# ---------------------------------------------------------------------------
# image loading
# ---------------------------------------------------------------------------


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a (C, H, W) array with half-pixel-centered
    coordinates and edge replication."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ty = (ys - y0).astype(img.dtype)
    tx = (xs - x0).astype(img.dtype)
    y0c = np.clip(y0, 0, h - 1).astype(np.intp)
    y1c = np.clip(y0 + 1, 0, h - 1).astype(np.intp)
    x0c = np.clip(x0, 0, w - 1).astype(np.intp)
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.intp)
    top = img[:, y0c[:, None], x0c] * (1 - tx) + img[:, y0c[:, None], x1c] * tx
    bot = img[:, y1c[:, None], x0c] * (1 - tx) + img[:, y1c[:, None], x1c] * tx
    return top * (1 - ty)[:, None] + bot * ty[:, None]


def load_and_resize(path, target: int = TARGET_SIZE) -> Tensor:
    """Decode a JPEG/PNG to a (3, target, target) float tensor in [0, 1].

    Grayscale sources are replicated across the three channels.
    """
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32)
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    chw = (arr / 255.0).transpose(2, 0, 1)
    return Tensor(bilinear_resize(chw, target, target))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Ranges and enable flags for the training-time augmentation ops.

    No vertical-flip field exists: vertical flips are meaningless for chest
    radiographs and are unreachable by construction.
    """

    enable_flip: bool = False
    flip_prob: float = 0.5
    enable_crop: bool = False
    crop_fraction: tuple[float, float] = (0.7, 1.0)
    enable_brightness: bool = False
    brightness_delta: tuple[float, float] = (-0.1, 0.1)
    enable_contrast: bool = False
    contrast_range: tuple[float, float] = (0.8, 1.2)
    enable_saturation: bool = False
    saturation_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        for name in ("crop_fraction", "brightness_delta", "contrast_range", "saturation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) has lo > hi")
        lo, hi = self.crop_fraction
        if not (0.0 < lo <= 1.0 and 0.0 < hi <= 1.0):
            raise ValueError(f"crop_fraction must lie in (0, 1], got ({lo}, {hi})")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def default_training(cls) -> "AugmentPolicy":
        return cls(
            enable_flip=True,
            enable_crop=True,
            enable_brightness=True,
            enable_contrast=True,
            enable_saturation=True,
        )


def hflip(img: np.ndarray) -> np.ndarray:
    """Horizontal (left-right) flip of a (C, H, W) array."""
    return img[:, :, ::-1].copy()


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample augmentation stream; a pure function of its key."""
    return np.random.default_rng((seed, epoch, index))


def augment(image: Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> Tensor:
    """Apply the sampled policy to one [0, 1] image; shape is preserved and
    the result is clamped back to [0, 1]."""
    img = image.data
    c, h, w = img.shape

    if policy.enable_flip and rng.random() < policy.flip_prob:
        img = hflip(img)

    if policy.enable_crop:
        frac = rng.uniform(*policy.crop_fraction)
        side = math.sqrt(frac)
        ch = max(1, int(round(h * side)))
        cw = max(1, int(round(w * side)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        if (ch, cw) != (h, w):
            img = bilinear_resize(np.ascontiguousarray(img[:, y0 : y0 + ch, x0 : x0 + cw]), h, w)

    if policy.enable_brightness:
        img = img + img.dtype.type(rng.uniform(*policy.brightness_delta))

    if policy.enable_contrast:
        factor = img.dtype.type(rng.uniform(*policy.contrast_range))
        mean = img.mean(dtype=img.dtype)
        img = mean + (img - mean) * factor

    if policy.enable_saturation:
        factor = img.dtype.type(rng.uniform(*policy.saturation_range))
        gray = img.mean(axis=0, keepdims=True, dtype=img.dtype)
        img = gray + (img - gray) * factor

    return Tensor(np.clip(img, 0.0, 1.0).astype(image.dtype, copy=False))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    images: Tensor  # (N, 3, H, W)
    labels: Tensor  # (N, K) one-hot
    indices: np.ndarray  # positions within the split, for per-sample RNG keys


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


def batches(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    seed: int,
    epoch: int,
    target: int = TARGET_SIZE,
) -> Iterator[Batch]:
    """Seeded shuffle of a split into batches; the last partial batch is kept.

    One-hot label columns follow the manifest's class order.
    """
    if batch_size <= 0:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    records = manifest.split_records(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    class_index = {c: i for i, c in enumerate(manifest.classes)}
    order = epoch_permutation(len(records), seed, epoch)
    k = len(manifest.classes)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        images = np.stack([load_and_resize(records[i].path, target).data for i in chunk])
        labels = np.zeros((len(chunk), k), dtype=np.float32)
        for row, i in enumerate(chunk):
            labels[row, class_index[records[i].label]] = 1.0
        yield Batch(Tensor(images), Tensor(labels), chunk.copy())
