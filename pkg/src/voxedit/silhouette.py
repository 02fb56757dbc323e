"""Front-view occupancy silhouettes and the BCE guidance energy.

The camera is orthographic and looks along the depth axis ``k``: pixel
``(i, j)`` accumulates the decoded occupancy of column ``(i, j, :)``.
"""
from __future__ import annotations

import numpy as np

from .latent import decode

DEFAULT_KAPPA = 0.25
BCE_EPS = 1e-8


def render_silhouette(logits: np.ndarray, kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    column = decode(logits).sum(axis=2)
    return -np.expm1(-kappa * column)


def bce_energy(S: np.ndarray, target: np.ndarray, eps: float = BCE_EPS) -> float:
    S = np.asarray(S, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if S.shape != target.shape:
        raise ValueError(f"silhouette shape {S.shape} != target shape {target.shape}")
    ll = target * np.log(S + eps) + (1.0 - target) * np.log(1.0 - S + eps)
    return float(-ll.mean())


def silhouette_energy(logits, target, kappa=DEFAULT_KAPPA) -> float:
    return bce_energy(render_silhouette(logits, kappa), target)


def energy_gradient(logits: np.ndarray, target: np.ndarray, kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    """Gradient of the silhouette BCE energy with respect to the logits."""
    target = np.asarray(target, dtype=np.float64)
    p = decode(logits)
    if target.shape != p.shape[:2]:
        raise ValueError(f"target shape {target.shape} != silhouette shape {p.shape[:2]}")
    transmittance = np.exp(-kappa * p.sum(axis=2))
    S = 1.0 - transmittance
    dE_dS = -(target / (S + BCE_EPS) - (1.0 - target) / (1.0 - S + BCE_EPS)) / target.size
    return (dE_dS * kappa * transmittance)[:, :, None] * p * (1.0 - p)


def guidance(logits, target, kappa=DEFAULT_KAPPA) -> np.ndarray:
    """Descent direction ``-grad E_sil``."""
    return -energy_gradient(logits, target, kappa)


def norm_match(g: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Rescale ``g`` to the l2 norm of ``reference``.

    A vanishing ``g`` maps to zeros; a vanishing reference leaves ``g`` as is.
    """
    g = np.asarray(g, dtype=np.float64)
    g_norm = np.linalg.norm(g)
    if g_norm < 1e-12:
        return np.zeros_like(g)
    ref_norm = np.linalg.norm(reference)
    if ref_norm == 0.0:
        return g
    return g * (ref_norm / g_norm)


def silhouette_mask(grid: np.ndarray) -> np.ndarray:
    """Binary projection of an occupancy grid along depth."""
    return (np.asarray(grid) > 0.5).any(axis=2).astype(np.float64)


def pool_raster(raster: np.ndarray, size: int) -> np.ndarray:
    """Average-pool a square raster (optionally with channels) to ``size``."""
    R = raster.shape[0]
    if R % size:
        raise ValueError(f"raster size {R} not divisible by {size}")
    f = R // size
    return raster.reshape(size, f, size, f, *raster.shape[2:]).mean(axis=(1, 3))
