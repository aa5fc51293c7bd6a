"""On-the-fly augmentation: rotation, scaling, elastic deformation, brightness and gamma.

Spatial transforms build one sampling grid and apply it to the image channels
(linear interpolation) and to the labels (nearest neighbour). Rotation about
axis ``a`` turns the plane of the two remaining axes taken in ascending order;
+90 degrees about axis ``a`` matches ``np.rot90(x, 1, axes=(b, c))`` with ``b < c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


def _check_range(name, rng, positive=False):
    lo, hi = rng
    if lo > hi:
        raise ValueError(f"{name}: lo {lo} > hi {hi}")
    if positive and lo <= 0:
        raise ValueError(f"{name}: range must be strictly positive")


@dataclass(frozen=True)
class AugmentationConfig:
    rotation: bool = True
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    p_rotation: float = 0.2
    scaling: bool = True
    scale_range: tuple[float, float] = (0.85, 1.25)
    p_scaling: float = 0.2
    elastic: bool = True
    elastic_alpha: tuple[float, float] = (0.0, 200.0)
    elastic_sigma: tuple[float, float] = (9.0, 13.0)
    p_elastic: float = 0.2
    brightness: bool = True
    brightness_mult: tuple[float, float] = (0.75, 1.25)
    brightness_add: tuple[float, float] = (-0.1, 0.1)
    p_brightness: float = 0.3
    gamma: bool = True
    gamma_range: tuple[float, float] = (0.7, 1.5)
    p_gamma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        _check_range("rotation_deg", self.rotation_deg)
        _check_range("scale_range", self.scale_range, positive=True)
        _check_range("elastic_alpha", self.elastic_alpha)
        _check_range("elastic_sigma", self.elastic_sigma, positive=True)
        _check_range("brightness_mult", self.brightness_mult)
        _check_range("brightness_add", self.brightness_add)
        _check_range("gamma_range", self.gamma_range, positive=True)
        for name in ("p_rotation", "p_scaling", "p_elastic", "p_brightness", "p_gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(rotation=False, scaling=False, elastic=False, brightness=False, gamma=False)


def rotation_matrix(angles_deg) -> np.ndarray:
    """Composite rotation R = Rz @ Ry @ Rx, where Rk turns the plane orthogonal to axis k."""
    r = np.eye(3)
    for axis, deg in enumerate(angles_deg):
        if deg == 0:
            continue
        t = np.deg2rad(deg)
        a, b = [i for i in range(3) if i != axis]
        m = np.eye(3)
        m[a, a], m[a, b], m[b, a], m[b, b] = np.cos(t), -np.sin(t), np.sin(t), np.cos(t)
        r = m @ r
    return r


def spatial_transform(image: np.ndarray, labels: np.ndarray | None, angles_deg=(0.0, 0.0, 0.0),
                      scale: float = 1.0, displacement: np.ndarray | None = None):
    """Warp ``(C, D, H, W)`` image and ``(D, H, W)`` labels with the same geometric map.

    An output voxel at offset ``p`` from the centre samples the input at
    ``R^T p / scale + centre + displacement``. Out-of-volume samples read 0.
    """
    shape = image.shape[1:]
    centre = (np.array(shape, dtype=np.float64) - 1) / 2
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1) - centre[:, None]
    coords = rotation_matrix(angles_deg).T @ grid / scale + centre[:, None]
    if displacement is not None:
        coords = coords + displacement.reshape(3, -1)
    coords = coords.reshape((3, *shape))
    out = np.stack([ndimage.map_coordinates(c, coords, order=1, mode="constant", cval=0.0)
                    for c in image.astype(np.float32)])
    out_labels = None
    if labels is not None:
        out_labels = ndimage.map_coordinates(labels, coords, order=0, mode="constant", cval=0)
    return out.astype(np.float32), out_labels


def elastic_displacement(shape, alpha: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Smoothed uniform noise scaled by ``alpha``, one field per axis."""
    return np.stack([
        ndimage.gaussian_filter(rng.uniform(-1, 1, size=shape), sigma, mode="constant") * alpha
        for _ in range(3)
    ])


def gamma_transform(x: np.ndarray, gamma: float) -> np.ndarray:
    """Power law on the min-max rescaled values, mapped back to the original range."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo == 0:
        return x.copy()
    return ((x - lo) / (hi - lo)) ** gamma * (hi - lo) + lo


def augment(image: np.ndarray, labels: np.ndarray | None, config: AugmentationConfig,
            rng: np.random.Generator):
    """Randomly augment one ``(C, D, H, W)`` patch and its labels; deterministic given ``rng`` state."""
    image = np.asarray(image, dtype=np.float32)
    shape = image.shape[1:]

    angles = (0.0, 0.0, 0.0)
    scale = 1.0
    disp = None
    if config.rotation and rng.uniform() < config.p_rotation:
        angles = tuple(rng.uniform(*config.rotation_deg, size=3))
    if config.scaling and rng.uniform() < config.p_scaling:
        scale = float(rng.uniform(*config.scale_range))
    if config.elastic and rng.uniform() < config.p_elastic:
        alpha = rng.uniform(*config.elastic_alpha)
        sigma = rng.uniform(*config.elastic_sigma)
        disp = elastic_displacement(shape, alpha, sigma, rng)
    if angles != (0.0, 0.0, 0.0) or scale != 1.0 or disp is not None:
        image, labels = spatial_transform(image, labels, angles, scale, disp)
    else:
        image = image.copy()
        labels = None if labels is None else labels.copy()

    if config.brightness and rng.uniform() < config.p_brightness:
        for c in range(image.shape[0]):
            image[c] = image[c] * rng.uniform(*config.brightness_mult) + rng.uniform(*config.brightness_add)
    if config.gamma and rng.uniform() < config.p_gamma:
        for c in range(image.shape[0]):
            image[c] = gamma_transform(image[c], rng.uniform(*config.gamma_range))
    return image.astype(np.float32), labels
