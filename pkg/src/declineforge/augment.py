"""MRI artifact simulation for pretraining-data augmentation.

Transforms run in a fixed order, each gated by its own probability:
noise, bias field, ghosting, flip, rigid motion, gamma.
"""

import itertools
import logging
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from .errors import ArgumentError
from .volio import Volume

logger = logging.getLogger(__name__)

INTENSITY_MAX = 255.0
RANGE_TOLERANCE = 1e-3


def _check_range(name: str, bounds: Tuple[float, float]) -> None:
    lo, hi = bounds
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ValueError(f"{name} must be a finite (lo, hi) pair with lo <= hi, got {bounds}")


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    noise_enabled: bool = True
    noise_p: float = Field(0.5, ge=0, le=1)
    # fraction of the intensity range
    noise_sigma_range: Tuple[float, float] = (0.005, 0.03)

    bias_enabled: bool = True
    bias_p: float = Field(0.5, ge=0, le=1)
    bias_field_order: int = Field(3, ge=0, le=5)
    coefficient_range: Tuple[float, float] = (-0.15, 0.15)

    ghost_enabled: bool = True
    ghost_p: float = Field(0.5, ge=0, le=1)
    ghost_intensity_range: Tuple[float, float] = (0.05, 0.2)
    ghost_count: int = Field(4, ge=1)

    flip_enabled: bool = True
    flip_p: float = Field(0.5, ge=0, le=1)
    flip_axes: Tuple[int, ...] = (0,)

    rigid_enabled: bool = True
    rigid_p: float = Field(0.5, ge=0, le=1)
    max_rotation_deg: float = Field(5.0, ge=0)
    max_translation_voxels: float = Field(3.0, ge=0)

    gamma_enabled: bool = True
    gamma_p: float = Field(0.5, ge=0, le=1)
    gamma_range: Tuple[float, float] = (0.8, 1.25)

    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        _check_range("noise_sigma_range", self.noise_sigma_range)
        _check_range("coefficient_range", self.coefficient_range)
        _check_range("ghost_intensity_range", self.ghost_intensity_range)
        _check_range("gamma_range", self.gamma_range)
        if self.gamma_range[0] <= 0:
            raise ValueError("gamma_range must be positive")
        if self.noise_sigma_range[0] < 0:
            raise ValueError("noise_sigma_range must be nonnegative")
        if any(a not in (0, 1, 2) for a in self.flip_axes):
            raise ValueError(f"flip_axes must be drawn from 0, 1, 2, got {self.flip_axes}")
        return self

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        """All probabilities zero; the identity configuration."""
        base = dict(noise_p=0.0, bias_p=0.0, ghost_p=0.0, flip_p=0.0, rigid_p=0.0, gamma_p=0.0)
        base.update(overrides)
        return cls(**base)


def _monomials(order: int):
    return [
        (i, j, k)
        for i, j, k in itertools.product(range(order + 1), repeat=3)
        if 0 < i + j + k <= order
    ]


def bias_field(dims: Sequence[int], coefficients: np.ndarray, order: int) -> np.ndarray:
    """exp(p(x, y, z)) over coordinates normalized to [-1, 1]."""
    coords = np.meshgrid(*[np.linspace(-1.0, 1.0, d) for d in dims], indexing="ij")
    poly = np.zeros(tuple(dims))
    for c, (i, j, k) in zip(coefficients, _monomials(order)):
        poly += c * coords[0] ** i * coords[1] ** j * coords[2] ** k
    return np.exp(poly)


def _rotation(angles_deg: np.ndarray) -> np.ndarray:
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rigid_transform(data: np.ndarray, angles_deg, translation) -> np.ndarray:
    """Rotate about the volume centre and translate; trilinear, zero fill."""
    rot = _rotation(np.asarray(angles_deg, dtype=np.float64))
    centre = (np.asarray(data.shape) - 1) / 2.0
    # affine_transform maps output coords to input coords
    inv = rot.T
    offset = centre - inv @ (centre + np.asarray(translation, dtype=np.float64))
    return ndimage.affine_transform(data, inv, offset=offset, order=1, mode="constant", cval=0.0)


def augment_volume(volume: Volume, cfg: AugmentConfig, seed=None) -> Volume:
    data = volume.data.astype(np.float64)
    if data.min() < -RANGE_TOLERANCE or data.max() > INTENSITY_MAX + RANGE_TOLERANCE:
        raise ArgumentError(
            f"augment_volume expects intensities in [0, 255], got [{data.min()}, {data.max()}]"
        )
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    def fire(enabled: bool, p: float) -> bool:
        # always draw so later transforms see the same stream regardless of gating
        draw = rng.random()
        return enabled and draw < p

    if fire(cfg.noise_enabled, cfg.noise_p):
        sigma = rng.uniform(*cfg.noise_sigma_range) * INTENSITY_MAX
        data = data + sigma * rng.standard_normal(data.shape)

    if fire(cfg.bias_enabled, cfg.bias_p):
        n_terms = len(_monomials(cfg.bias_field_order))
        coefficients = rng.uniform(*cfg.coefficient_range, size=n_terms)
        data = data * bias_field(data.shape, coefficients, cfg.bias_field_order)

    if fire(cfg.ghost_enabled, cfg.ghost_p):
        axis = int(rng.integers(0, 3))
        scale = rng.uniform(*cfg.ghost_intensity_range)
        shift = data.shape[axis] // cfg.ghost_count
        data = data + scale * np.roll(data, shift, axis=axis)

    if fire(cfg.flip_enabled, cfg.flip_p) and cfg.flip_axes:
        axis = cfg.flip_axes[int(rng.integers(0, len(cfg.flip_axes)))]
        data = np.flip(data, axis=axis)

    if fire(cfg.rigid_enabled, cfg.rigid_p):
        angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3)
        shift = rng.uniform(-cfg.max_translation_voxels, cfg.max_translation_voxels, 3)
        data = rigid_transform(data, angles, shift)

    if fire(cfg.gamma_enabled, cfg.gamma_p):
        gamma = rng.uniform(*cfg.gamma_range)
        data = (np.clip(data, 0.0, INTENSITY_MAX) / INTENSITY_MAX) ** gamma * INTENSITY_MAX

    out = np.clip(data, 0.0, INTENSITY_MAX).astype(np.float32)
    return Volume(dims=volume.dims, spacing=volume.spacing, data=np.ascontiguousarray(out))


def derived_seed(seed: int, index: int, copy: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, index, copy])


def make_training_set(volumes: Sequence[Volume], cfg: AugmentConfig, copies_per_volume: int) -> List[Volume]:
    """Originals followed by ``copies_per_volume`` augmented variants of each original."""
    if copies_per_volume < 0:
        raise ArgumentError(f"copies_per_volume must be >= 0, got {copies_per_volume}")
    out = list(volumes)
    for index, volume in enumerate(volumes):
        for copy in range(copies_per_volume):
            out.append(augment_volume(volume, cfg, seed=derived_seed(cfg.seed, index, copy)))
    logger.info("training set: %d originals + %d augmented", len(volumes), len(out) - len(volumes))
    return out


def paired_targets(volumes: Sequence[Volume], copies_per_volume: int) -> List[Volume]:
    """Clean reconstruction targets aligned with ``make_training_set`` output."""
    return list(volumes) + [v for v in volumes for _ in range(copies_per_volume)]
