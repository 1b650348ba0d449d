"""Cut-paste patch self-supervision.

A rectangle is cut from a random high-quality image and pasted at a random
place of the target image; the discriminator regresses the normalized
bounding box of the pasted region.
"""

from dataclasses import dataclass
import math
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DataError

__all__ = [
    "PatchAnnotation",
    "patch_size_range",
    "paste_random_patch",
    "paste_batch",
    "sp_loss",
]

MIN_PATCH_FRACTION = 1 / 8
MAX_PATCH_FRACTION = 1 / 3


@dataclass(frozen=True)
class PatchAnnotation:
    bbox: Tuple[float, float, float, float]  # (x1, y1, x2, y2), normalized
    source_image_id: int
    patch_size: Tuple[int, int]  # (h, w) in pixels

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise ContractError(f"malformed bounding box {self.bbox}")

    def pixel_box(self, height, width):
        """(top, left, bottom, right) in pixels for an image of the given size."""
        x1, y1, x2, y2 = self.bbox
        return (round(y1 * height), round(x1 * width), round(y2 * height), round(x2 * width))

    def as_tensor(self, dtype=torch.float32):
        return torch.tensor(self.bbox, dtype=dtype)


def patch_size_range(side, min_fraction=MIN_PATCH_FRACTION, max_fraction=MAX_PATCH_FRACTION):
    lo = max(1, math.ceil(side * min_fraction))
    hi = math.floor(side * max_fraction)
    if hi < lo:
        raise ContractError(f"no admissible patch size for an image side of {side}")
    return lo, hi


def paste_random_patch(target, hq_pool, rng, min_fraction=MIN_PATCH_FRACTION, max_fraction=MAX_PATCH_FRACTION):
    """Paste a random patch of a random pool image into a copy of ``target``.

    ``target`` is (C, H, W); ``hq_pool`` is (P, C, H', W') with H' >= patch
    height. ``rng`` is a ``numpy.random.Generator``. Returns the pasted copy
    and its annotation.
    """
    if hq_pool is None or len(hq_pool) == 0:
        raise DataError("high-quality patch pool is empty")
    if target.dim() != 3:
        raise ContractError("target must be a single (C, H, W) image")
    c, height, width = target.shape
    if hq_pool.shape[1] != c:
        raise ContractError("pool and target channel counts differ")
    ph = int(rng.integers(*_inclusive(patch_size_range(height, min_fraction, max_fraction))))
    pw = int(rng.integers(*_inclusive(patch_size_range(width, min_fraction, max_fraction))))
    src_h, src_w = hq_pool.shape[-2:]
    if ph > src_h or pw > src_w:
        raise ContractError(f"patch {ph}x{pw} larger than pool image {src_h}x{src_w}")
    src_id = int(rng.integers(len(hq_pool)))
    sy = int(rng.integers(src_h - ph + 1))
    sx = int(rng.integers(src_w - pw + 1))
    ty = int(rng.integers(height - ph + 1))
    tx = int(rng.integers(width - pw + 1))
    out = target.clone()
    out[:, ty:ty + ph, tx:tx + pw] = hq_pool[src_id, :, sy:sy + ph, sx:sx + pw]
    bbox = (tx / width, ty / height, (tx + pw) / width, (ty + ph) / height)
    return out, PatchAnnotation(bbox, src_id, (ph, pw))


def _inclusive(bounds):
    lo, hi = bounds
    return lo, hi + 1


def paste_batch(images, hq_pool, rng, fraction=0.5):
    """Paste patches into a ``fraction`` of the batch.

    Returns (pasted images (k, C, H, W), target boxes (k, 4), chosen indices).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ContractError("fraction must lie in [0, 1]")
    n = images.shape[0]
    k = int(round(fraction * n))
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    pasted, boxes = [], []
    for i in chosen:
        img, ann = paste_random_patch(images[int(i)], hq_pool, rng)
        pasted.append(img)
        boxes.append(ann.as_tensor(images.dtype))
    if not pasted:
        empty = images.new_zeros((0,) + tuple(images.shape[1:]))
        return empty, images.new_zeros((0, 4)), torch.as_tensor(chosen, dtype=torch.long)
    return torch.stack(pasted), torch.stack(boxes), torch.as_tensor(chosen, dtype=torch.long)


def sp_loss(bbox_pred, target, beta=1.0):
    """Smooth-L1 over the four coordinates, summed per box, averaged over boxes."""
    if isinstance(target, PatchAnnotation):
        target = target.as_tensor(bbox_pred.dtype)
    target = torch.as_tensor(target, dtype=bbox_pred.dtype)
    if bbox_pred.shape != target.shape or bbox_pred.shape[-1] != 4:
        raise ContractError(
            f"prediction {tuple(bbox_pred.shape)} and target {tuple(target.shape)} must be (..., 4)"
        )
    if target.numel() == 0:
        return bbox_pred.sum() * 0.0
    t = target.reshape(-1, 4)
    if not bool(((t[:, 0] < t[:, 2]) & (t[:, 1] < t[:, 3]) & (t >= 0).all(1) & (t <= 1).all(1)).all()):
        raise ContractError("malformed target bounding box")
    per_coord = F.smooth_l1_loss(bbox_pred.reshape(-1, 4), t, reduction="none", beta=beta)
    return per_coord.sum(dim=1).mean()
