"""Masked repainting of per-voxel appearance features.

Inside the (feathered) mask the appearance flow generates new features for
the edited structure; outside it the source features are replayed along
their forward-noised path. The replay uses the step's output time, so the
last step lands exactly on the source features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import Condition, TimeGrid, VelocityModel, cfg_velocity
from .latent import check_cube, downsample_mask, feather


@dataclass
class SlatField:
    """Dense per-voxel features ``(R, R, R, F)`` plus the active voxel set.

    Features of inactive voxels carry no meaning; consumers skip them.
    """

    features: np.ndarray
    activity: np.ndarray

    def __post_init__(self):
        R = check_cube(self.features, "features")
        if self.features.ndim != 4:
            raise ValueError("features must have shape (R, R, R, F)")
        if self.activity.shape != (R, R, R):
            raise ValueError(f"activity shape {self.activity.shape} does not match {self.features.shape}")

    @property
    def resolution(self) -> int:
        return self.features.shape[0]

    def colors(self) -> np.ndarray:
        """RGB channels clamped for display or export."""
        return np.clip(self.features[..., :3], 0.0, 1.0)


@dataclass
class RepaintConfig:
    steps: int = 25
    sigma_b: float = 1.0
    cfg: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not self.sigma_b > 0:
            raise ValueError("sigma_b must be positive")
        if self.cfg < 0:
            raise ValueError("cfg must be non-negative")


def build_feature_mask(mesh_mask, activity, sigma_b: float, dilation: int = 1):
    """Hard and feathered per-feature masks on the active voxels.

    The downsampled mask is blurred before it is cut to the active set, so a
    full mask yields exactly the activity field.
    """
    active = (np.asarray(activity) > 0).astype(np.float64)
    coarse = downsample_mask(mesh_mask, active.shape[0], dilation)
    return coarse * active, feather(coarse, sigma_b) * active


def _blend(weight, generated, replayed):
    w = weight[..., None] if generated.ndim == weight.ndim + 1 else weight
    # exact replay wherever the weight vanishes, whatever the model returned
    return np.where(w == 0, replayed, w * generated + (1.0 - w) * replayed)


def repaint_step(z_k, t_k, t_prev, mask, z_src, model: VelocityModel, cond: Condition, eps, cfg=1.0):
    """One blended step from ``t_k`` to ``t_prev``.

    ``mask`` is per voxel and broadcasts over the feature axis.
    """
    z_k = np.asarray(z_k, dtype=np.float64)
    if z_k.shape != np.shape(z_src) or z_k.shape != np.shape(eps):
        raise ValueError("z_k, z_src and eps must share a shape")
    if np.shape(mask) != z_k.shape[:3]:
        raise ValueError(f"mask shape {np.shape(mask)} does not match features {z_k.shape}")
    generated = z_k + (t_prev - t_k) * cfg_velocity(model, z_k, t_k, cond, cfg)
    replayed = (1.0 - t_prev) * z_src + t_prev * eps
    return _blend(np.asarray(mask, dtype=np.float64), generated, replayed)


def repaint_run(z_src, mask, model: VelocityModel, cond: Condition, config: RepaintConfig, activity=None, callback=None):
    """Repaint ``z_src`` inside ``mask``; returns the final :class:`SlatField`."""
    z_src = np.asarray(z_src, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    z = rng.standard_normal(z_src.shape)
    knots = TimeGrid(config.steps).knots
    for step, (t_k, t_prev) in enumerate(zip(knots[:-1], knots[1:])):
        eps = rng.standard_normal(z_src.shape)
        z = repaint_step(z, t_k, t_prev, mask, z_src, model, cond, eps, config.cfg)
        if callback is not None:
            callback(config.steps - step - 1, t_prev, z)
    if activity is None:
        activity = np.ones(z_src.shape[:3])
    return SlatField(z, (np.asarray(activity) > 0).astype(np.float64))
