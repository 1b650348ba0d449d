"""Quality-tiered datasets: manifest ingestion, LQ construction, batch sampling.

Manifest format: UTF-8, one record per line, ``relative/path<TAB>label<TAB>tier``
where ``tier`` is ``hq`` or ``lq`` and ``label`` is a class name from that
tier's label space. Blank lines and lines starting with ``#`` are ignored.
"""

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import List

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, DataError, DataValidationError

logger = logging.getLogger(__name__)

TIERS = ("hq", "lq")


def normalize(pixels):
    """uint8-range values [0, 255] -> [-1, 1].

    Integer input becomes float32; floating input keeps its precision.
    """
    pixels = torch.as_tensor(pixels)
    if not pixels.is_floating_point():
        pixels = pixels.to(torch.float32)
    return pixels / 127.5 - 1.0


def denormalize(x):
    """[-1, 1] -> [0, 255] floats (no rounding)."""
    return (torch.as_tensor(x) + 1.0) * 127.5


def to_uint8(x):
    return denormalize(x).round().clamp(0, 255).to(torch.uint8)


@dataclass
class LabelSpaces:
    """Separate class-name namespaces for the HQ and LQ corpora."""

    hq_names: List[str]
    lq_names: List[str]

    def __post_init__(self):
        if not self.hq_names or not self.lq_names:
            raise ContractError("both label spaces need at least one class")
        for names in (self.hq_names, self.lq_names):
            if len(set(names)) != len(names):
                raise ContractError(f"duplicate class names in {names}")

    @property
    def c_h(self):
        return len(self.hq_names)

    @property
    def c_l(self):
        return len(self.lq_names)

    def names(self, tier):
        return self.hq_names if tier == "hq" else self.lq_names

    def index(self, tier, name):
        return self.names(tier).index(name)


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    labels: torch.Tensor  # (N,) long, 0-based within the tier's label space
    tiers: List[str] = field(default_factory=list)
    sources: List[str] = field(default_factory=list)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def resolution(self):
        return tuple(self.images.shape[-2:]) if len(self) else None

    def select_tier(self, tier):
        idx = [i for i, t in enumerate(self.tiers) if t == tier]
        return self.subset(idx)

    def subset(self, indices):
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return ImageDataset(
            self.images[idx] if len(idx) else self.images[:0],
            self.labels[idx] if len(idx) else self.labels[:0],
            [self.tiers[i] for i in idx.tolist()] if self.tiers else [],
            [self.sources[i] for i in idx.tolist()] if self.sources else [],
        )


@dataclass
class ManifestRecord:
    line: int
    path: str
    label: str
    tier: str


def parse_manifest(manifest_path):
    """Return (records, errors) without touching any image file."""
    records, errors = [], []
    text = Path(manifest_path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            errors.append(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
            continue
        path, label, tier = (p.strip() for p in parts)
        if tier not in TIERS:
            errors.append(f"line {lineno}: unknown tier {tier!r} (expected hq or lq)")
            continue
        records.append(ManifestRecord(lineno, path, label, tier))
    return records, errors


def _read_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1)


def load_corpus(root, manifest_path, label_spaces, resolutions=None):
    """Load every manifest record into an :class:`ImageDataset`.

    ``resolutions`` optionally maps tier -> expected side length. All
    problems are collected and raised together as a DataValidationError.
    """
    root = Path(root)
    records, errors = parse_manifest(manifest_path)
    images, labels, tiers, sources = [], [], [], []
    for rec in records:
        names = label_spaces.names(rec.tier)
        if rec.label not in names:
            errors.append(f"line {rec.line}: unknown {rec.tier} label {rec.label!r}")
            continue
        full = root / rec.path
        if not full.is_file():
            errors.append(f"line {rec.line}: missing file {rec.path}")
            continue
        try:
            img = _read_image(full)
        except (UnidentifiedImageError, OSError) as exc:
            errors.append(f"line {rec.line}: cannot decode {rec.path}: {exc}")
            continue
        if resolutions and rec.tier in resolutions:
            side = resolutions[rec.tier]
            if tuple(img.shape[-2:]) != (side, side):
                errors.append(
                    f"line {rec.line}: {rec.path} is {img.shape[-2]}x{img.shape[-1]}, "
                    f"expected {side}x{side} for tier {rec.tier}"
                )
                continue
        if images and img.shape != images[0].shape:
            errors.append(
                f"line {rec.line}: {rec.path} is {img.shape[-2]}x{img.shape[-1]}, other records are "
                f"{images[0].shape[-2]}x{images[0].shape[-1]}; use one manifest per resolution"
            )
            continue
        images.append(img)
        labels.append(names.index(rec.label))
        tiers.append(rec.tier)
        sources.append(rec.path)
    if errors:
        raise DataValidationError(errors)
    if not images:
        return ImageDataset(torch.zeros(0, 3, 0, 0), torch.zeros(0, dtype=torch.long), [], [])
    return ImageDataset(normalize(torch.stack(images)), torch.tensor(labels), tiers, sources)


def load_tier(root, manifest_path, label_spaces, tier, side=None):
    """Load only the records of one tier."""
    records, errors = parse_manifest(manifest_path)
    other = [r for r in records if r.tier != tier]
    if other:
        errors.append(f"line {other[0].line}: {tier} manifest contains a {other[0].tier} record")
    if errors:
        raise DataValidationError(errors)
    return load_corpus(root, manifest_path, label_spaces, {tier: side} if side else None)


def make_lq_from_hq(dataset, factor):
    """Area-average downsample by ``factor``; labels keep their indices."""
    if factor < 1:
        raise ContractError("factor must be >= 1")
    if len(dataset) == 0:
        return ImageDataset(dataset.images, dataset.labels, [], [])
    h, w = dataset.images.shape[-2:]
    if h % factor or w % factor:
        raise ContractError(f"factor {factor} does not divide resolution {h}x{w}")
    images = dataset.images if factor == 1 else F.avg_pool2d(dataset.images, factor)
    return ImageDataset(
        images.clone(), dataset.labels.clone(), ["lq"] * len(dataset), list(dataset.sources)
    )


@dataclass
class QualityTieredBatch:
    hq_images: torch.Tensor
    hq_labels: torch.Tensor
    lq_images: torch.Tensor
    lq_labels: torch.Tensor
    hq_indices: np.ndarray = None
    lq_indices: np.ndarray = None


class MixedBatchSampler:
    """Equal HQ/LQ sub-batches drawn from independently shuffled epochs.

    The stream is a pure function of ``seed`` and the batch index, so a
    resumed run only needs to know how many batches were already drawn.
    """

    def __init__(self, hq, lq, batch_size, seed=0):
        if len(hq) == 0:
            raise DataError("high-quality dataset is empty")
        if len(lq) == 0:
            raise DataError("low-quality dataset is empty")
        if batch_size < 2 or batch_size % 2:
            raise ContractError(f"batch size must be even and >= 2, got {batch_size}")
        self.hq, self.lq = hq, lq
        self.batch_size = batch_size
        self.half = batch_size // 2
        self.seed = int(seed)
        self._perm_cache = {}

    def _perm(self, tier_id, n, epoch):
        key = (tier_id, epoch)
        perm = self._perm_cache.get(key)
        if perm is None:
            if len(self._perm_cache) > 64:
                self._perm_cache.clear()
            perm = np.random.default_rng([self.seed, tier_id, epoch]).permutation(n)
            self._perm_cache[key] = perm
        return perm

    def _indices(self, tier_id, n, batch_index):
        pos = np.arange(batch_index * self.half, (batch_index + 1) * self.half)
        out = np.empty(self.half, dtype=np.int64)
        for epoch in np.unique(pos // n):
            sel = pos // n == epoch
            out[sel] = self._perm(tier_id, n, int(epoch))[pos[sel] % n]
        return out

    def batch(self, index):
        hi = self._indices(0, len(self.hq), index)
        li = self._indices(1, len(self.lq), index)
        return QualityTieredBatch(
            self.hq.images[hi], self.hq.labels[hi], self.lq.images[li], self.lq.labels[li], hi, li
        )

    def draw_counts(self, num_batches):
        """(HQ draws, LQ draws) after ``num_batches`` batches."""
        return num_batches * self.half, num_batches * self.half

    def __iter__(self):
        index = 0
        while True:
            yield self.batch(index)
            index += 1


# toy corpus --------------------------------------------------------------

TOY_PATTERNS = ("hstripes", "rings", "vstripes", "checker")


def _toy_image(pattern, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    c1 = rng.uniform(0.0, 1.0, 3)
    c2 = rng.uniform(0.0, 1.0, 3)
    freq = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    if pattern == "hstripes":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * yy + phase)
    elif pattern == "vstripes":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * xx + phase)
    elif pattern == "rings":
        cy, cx = rng.uniform(0.35, 0.65, 2)
        r = np.hypot(yy - cy, xx - cx)
        t = 0.5 + 0.5 * np.cos(2 * np.pi * freq * r + phase)
    else:
        t = (np.floor(freq * xx + phase) + np.floor(freq * yy)) % 2
    img = c1[:, None, None] * t + c2[:, None, None] * (1 - t)
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_toy_dataset(n_per_class, num_classes=2, size=32, seed=0, tier="hq"):
    """Synthetic structured images, one pattern family per class."""
    if not 1 <= num_classes <= len(TOY_PATTERNS):
        raise ContractError(f"toy corpus supports 1..{len(TOY_PATTERNS)} classes")
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for i in range(n_per_class):
        for c in range(num_classes):
            imgs.append(_toy_image(TOY_PATTERNS[c], size, rng))
            labels.append(c)
    images = normalize(torch.from_numpy(np.stack(imgs))) if imgs else torch.zeros(0, 3, size, size)
    n = len(labels)
    return ImageDataset(
        images, torch.tensor(labels, dtype=torch.long), [tier] * n,
        [f"toy/{tier}/{i:05d}.png" for i in range(n)],
    )


def write_manifest_corpus(root, dataset, label_names, manifest_name="manifest.tsv"):
    """Write a dataset as PNG files plus a manifest; returns the manifest path."""
    root = Path(root)
    lines = []
    for i in range(len(dataset)):
        rel = dataset.sources[i] if dataset.sources else f"img/{i:05d}.png"
        tier = dataset.tiers[i] if dataset.tiers else "hq"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = to_uint8(dataset.images[i]).permute(1, 2, 0).numpy()
        Image.fromarray(arr).save(path)
        lines.append(f"{rel}\t{label_names[int(dataset.labels[i])]}\t{tier}")
    manifest = root / manifest_name
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return manifest


@dataclass
class Datasets:
    """Everything training needs: HQ/LQ train sets, an HQ eval slice, label spaces."""

    hq: ImageDataset
    lq: ImageDataset
    hq_eval: ImageDataset
    label_spaces: LabelSpaces

    def validate(self, lq_resolution, num_blocks):
        errors = []
        hq_side = lq_resolution * 2 ** num_blocks
        if len(self.hq) == 0:
            errors.append("high-quality dataset is empty")
        elif self.hq.resolution != (hq_side, hq_side):
            errors.append(f"HQ resolution {self.hq.resolution} != {hq_side}x{hq_side}")
        if len(self.lq) == 0:
            errors.append("low-quality dataset is empty")
        elif self.lq.resolution != (lq_resolution, lq_resolution):
            errors.append(
                f"LQ resolution {self.lq.resolution} != {lq_resolution}x{lq_resolution} "
                f"(HQ / 2^{num_blocks})"
            )
        if len(self.hq_eval) and self.hq_eval.resolution != (hq_side, hq_side):
            errors.append(f"HQ eval resolution {self.hq_eval.resolution} != {hq_side}x{hq_side}")
        if len(self.hq) and int(self.hq.labels.max()) >= self.label_spaces.c_h:
            errors.append("HQ labels exceed the HQ label space")
        if len(self.lq) and int(self.lq.labels.max()) >= self.label_spaces.c_l:
            errors.append("LQ labels exceed the LQ label space")
        if errors:
            raise DataValidationError(errors)
        return self
