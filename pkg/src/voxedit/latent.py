"""Dense voxel grids, structure latents and edit masks.

Every field in this package is a dense numpy array of shape ``(R, R, R)``
(or ``(R, R, R, F)`` for feature fields) in C order, so the flat index of
voxel ``(i, j, k)`` is ``(i * R + j) * R + k``. The last axis ``k`` is the
depth axis seen by the front camera.

Occupancy probabilities live in ``[0, 1]``; structure latents are unbounded
occupancy logits and ``decode`` is the element-wise logistic map.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from scipy.special import expit, logit

DEFAULT_RESOLUTION = 32
DEFAULT_MARGIN = 8.0


def flat_index(i: int, j: int, k: int, R: int) -> int:
    return (i * R + j) * R + k


def unflat_index(idx: int, R: int) -> tuple[int, int, int]:
    ij, k = divmod(idx, R)
    i, j = divmod(ij, R)
    return i, j, k


def check_cube(a: np.ndarray, name: str = "grid") -> int:
    """Return the resolution of a cubic field, raising on anything else."""
    if a.ndim < 3 or not (a.shape[0] == a.shape[1] == a.shape[2]):
        raise ValueError(f"{name} must have shape (R, R, R[, F]), got {a.shape}")
    return a.shape[0]


def encode(grid: np.ndarray, margin: float = DEFAULT_MARGIN) -> np.ndarray:
    """Occupancy probabilities -> logits.

    Values are clamped to ``[eps, 1 - eps]`` with ``eps = logistic(-margin)``
    so exact 0/1 inputs map to ``-margin`` / ``+margin``.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    grid = np.asarray(grid, dtype=np.float64)
    eps = expit(-margin)
    return logit(np.clip(grid, eps, 1.0 - eps))


def decode(logits: np.ndarray) -> np.ndarray:
    return expit(np.asarray(logits, dtype=np.float64))


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def feather(mask: np.ndarray, sigma_b: float) -> np.ndarray:
    """Separable Gaussian blur of a mask, truncated at ``ceil(3 sigma)``.

    Borders replicate the edge value, which keeps constant fields fixed.
    """
    if not sigma_b > 0:
        raise ValueError(f"sigma_b must be positive, got {sigma_b}")
    check_cube(mask, "mask")
    kernel = _gaussian_kernel(sigma_b)
    out = np.asarray(mask, dtype=np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    """6-neighbourhood binary dilation, returned as a float 0/1 field."""
    binary = np.asarray(mask) > 0
    if iterations > 0:
        structure = ndimage.generate_binary_structure(3, 1)
        binary = ndimage.binary_dilation(binary, structure=structure, iterations=iterations)
    return binary.astype(np.float64)


def downsample_mask(mesh_mask: np.ndarray, R_l: int, dilation: int = 1) -> np.ndarray:
    """Max-pool a fine mask down to ``R_l`` and dilate by ``dilation`` voxels."""
    R_m = check_cube(mesh_mask, "mesh_mask")
    if R_l < 1 or R_m < R_l or R_m % R_l:
        raise ValueError(f"mask resolution {R_m} is not a multiple of latent resolution {R_l}")
    if dilation < 0:
        raise ValueError("dilation must be non-negative")
    f = R_m // R_l
    pooled = (np.asarray(mesh_mask) > 0).reshape(R_l, f, R_l, f, R_l, f).any(axis=(1, 3, 5))
    return dilate(pooled, dilation)


def downsample_avg(field: np.ndarray, factor: int) -> np.ndarray:
    """Block-average the three spatial axes by ``factor``.

    For factor 2 this is exactly trilinear resampling with half-voxel
    aligned centres.
    """
    if factor == 1:
        return np.asarray(field, dtype=np.float64)
    R = check_cube(field)
    if R % factor:
        raise ValueError(f"resolution {R} not divisible by {factor}")
    r = R // factor
    tail = field.shape[3:]
    blocks = np.asarray(field, dtype=np.float64).reshape(r, factor, r, factor, r, factor, *tail)
    return blocks.mean(axis=(1, 3, 5))


def _upsample_axis(a: np.ndarray, factor: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    # fine voxel centres expressed in coarse index space
    pos = (np.arange(n * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n * factor
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def upsample_trilinear(field: np.ndarray, factor: int) -> np.ndarray:
    """Trilinear upsampling of the three spatial axes, edge-clamped."""
    out = np.asarray(field, dtype=np.float64)
    if factor == 1:
        return out
    for axis in range(3):
        out = _upsample_axis(out, factor, axis)
    return out


def voxel_centers(R: int) -> np.ndarray:
    """Normalised voxel centre coordinates, shape ``(R, R, R, 3)``."""
    c = (np.arange(R, dtype=np.float64) + 0.5) / R
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def sample_trilinear(field: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample a cubic field at normalised ``[0, 1]^3`` points.

    Works for scalar ``(R, R, R)`` and feature ``(R, R, R, F)`` fields.
    """
    R = check_cube(field)
    p = np.asarray(points, dtype=np.float64) * R - 0.5
    p = np.clip(p, 0.0, R - 1)
    lo = np.minimum(np.floor(p).astype(int), R - 2) if R > 1 else np.zeros_like(p, dtype=int)
    w = p - lo
    out = 0.0
    for di in (0, 1):
        wi = w[..., 0] if di else 1.0 - w[..., 0]
        for dj in (0, 1):
            wj = w[..., 1] if dj else 1.0 - w[..., 1]
            for dk in (0, 1):
                wk = w[..., 2] if dk else 1.0 - w[..., 2]
                val = field[lo[..., 0] + di, lo[..., 1] + dj, lo[..., 2] + dk]
                weight = wi * wj * wk
                if val.ndim > weight.ndim:
                    weight = weight[..., None]
                out = out + weight * val
    return out
