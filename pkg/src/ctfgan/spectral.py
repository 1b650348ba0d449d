"""DCT-domain primitives and the per-block difference maps.

All functions operate on the last two axes of a tensor, so a single map, a
channel stack and a batch of stacks are handled alike. The DCT is the
orthonormal type-II transform (inverse: orthonormal type-III), implemented as
two dense matrix products so it stays differentiable and runs on any device.
"""

from functools import lru_cache
import math

import torch
import torch.nn.functional as F

from .errors import ContractError, NumericDomainError

__all__ = [
    "GRAY_WEIGHTS",
    "dct_matrix",
    "dct2d",
    "idct2d",
    "bilinear_upscale",
    "to_grayscale",
    "difference_map_first",
    "difference_map_inner",
]

# ITU-R BT.601 luma weights.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        raise NumericDomainError(f"{name} contains non-finite values")


@lru_cache(maxsize=64)
def _dct_matrix_cached(n, dtype, device):
    k = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(n, dtype=torch.float64).unsqueeze(0)
    mat = torch.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] /= math.sqrt(2.0)
    return mat.to(dtype=dtype, device=device)


def dct_matrix(n, dtype=torch.float64, device="cpu"):
    """Orthonormal DCT-II basis as an (n, n) matrix; rows are frequencies."""
    if n < 1:
        raise ContractError(f"DCT size must be >= 1, got {n}")
    return _dct_matrix_cached(int(n), dtype, torch.device(device))


def _as_float(x):
    x = torch.as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.to(torch.get_default_dtype())
    return x


def dct2d(x):
    """Orthonormal 2-D DCT-II over the last two axes."""
    x = _as_float(x)
    if x.dim() < 2:
        raise ContractError("dct2d needs at least a 2-D input")
    _check_finite(x, "dct2d input")
    ch = dct_matrix(x.shape[-2], x.dtype, x.device)
    cw = dct_matrix(x.shape[-1], x.dtype, x.device)
    return ch @ x @ cw.T


def idct2d(coeffs):
    """Exact inverse of :func:`dct2d`."""
    coeffs = _as_float(coeffs)
    if coeffs.dim() < 2:
        raise ContractError("idct2d needs at least a 2-D input")
    _check_finite(coeffs, "idct2d input")
    ch = dct_matrix(coeffs.shape[-2], coeffs.dtype, coeffs.device)
    cw = dct_matrix(coeffs.shape[-1], coeffs.dtype, coeffs.device)
    return ch.T @ coeffs @ cw


def bilinear_upscale(x, size):
    """Corner-aligned bilinear upsampling of the last two axes to ``size``.

    Corner pixels of the input map land exactly on the output corners.
    """
    x = _as_float(x)
    th, tw = int(size[0]), int(size[1])
    h, w = x.shape[-2:]
    if th < h or tw < w:
        raise ContractError(f"cannot upscale {h}x{w} to smaller {th}x{tw}")
    if (th, tw) == (h, w):
        return x
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, h, w)
    out = F.interpolate(flat, size=(th, tw), mode="bilinear", align_corners=True)
    return out.reshape(*lead, th, tw)


def to_grayscale(image):
    """Luma of an RGB stack; channel axis is -3 and is kept with size 1."""
    image = _as_float(image)
    if image.dim() < 3 or image.shape[-3] != 3:
        raise ContractError(f"expected 3 channels on axis -3, got shape {tuple(image.shape)}")
    w = torch.tensor(GRAY_WEIGHTS, dtype=image.dtype, device=image.device)
    return (image * w.view(3, 1, 1)).sum(dim=-3, keepdim=True)


def difference_map_first(features, low_quality_image):
    """Difference maps for the first block against the gray LQ image.

    ``features`` is ``(..., T, h, w)``; ``low_quality_image`` is
    ``(..., 3, h_l, w_l)`` with ``h_l <= h`` and ``w_l <= w``. Each of the T
    maps is differenced against the upscaled gray image in the DCT domain.
    """
    features = _as_float(features)
    gray = to_grayscale(low_quality_image).to(features.dtype)
    up = bilinear_upscale(gray, features.shape[-2:])
    if up.shape[-2:] != features.shape[-2:]:
        raise ContractError("upscaled LQ image does not match feature resolution")
    return idct2d(dct2d(features) - dct2d(up))


def difference_map_inner(features, previous):
    """Difference maps for block m > 1.

    ``features`` is ``(..., T, h, w)``, ``previous`` is ``(..., S, h', w')``
    at the coarser resolution of block m-1. Each output map is the mean over
    the S previous maps of the spectral difference against the upscaled map.
    """
    features = _as_float(features)
    previous = _as_float(previous).to(features.dtype)
    if previous.dim() < 3 or previous.shape[-3] < 1:
        raise ContractError("previous feature stack must hold at least one map")
    spec_cur = dct2d(features)
    spec_prev = dct2d(bilinear_upscale(previous, features.shape[-2:]))
    # sum_s (cur - prev_s) / S == cur - mean_s prev_s; avoids a T x S tensor
    return idct2d(spec_cur - spec_prev.mean(dim=-3, keepdim=True))
