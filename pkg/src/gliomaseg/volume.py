"""Volume data model, NIfTI I/O, intensity normalization, resampling and label/region transforms.

Canonical axis order: arrays are indexed ``[i, j, k]`` in the RAS+ voxel
orientation produced by ``nibabel.as_closest_canonical``. Files written by this
module carry a diagonal affine ``diag(spacing)`` so they are already canonical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np

LABEL_VALUES = (0, 1, 2, 3)
BACKGROUND, NETC, SNFH, ET = LABEL_VALUES
LEGACY_ET = 4


class VolumeIOError(Exception):
    """Base class for volume file errors."""


class MissingVolumeError(VolumeIOError, FileNotFoundError):
    pass


class MalformedHeaderError(VolumeIOError):
    pass


class NonVolumetricError(VolumeIOError):
    """Raised when a file holds something other than a single 3D array."""


class HierarchyError(ValueError):
    """Region masks violate et <= tc <= wt."""


@dataclass(frozen=True)
class Geometry:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(p) for p in self.spacing)
        if len(shape) != 3 or len(spacing) != 3:
            raise ValueError(f"geometry needs 3 axes, got shape={shape} spacing={spacing}")
        if min(shape) < 1:
            raise ValueError(f"shape entries must be >= 1, got {shape}")
        if not all(np.isfinite(p) and p > 0 for p in spacing):
            raise ValueError(f"spacing entries must be > 0, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)

    def scaled(self, factor: Sequence[float] | float) -> "Geometry":
        """Geometry after resampling by ``factor`` (shape multiplied, spacing divided)."""
        f = _per_axis(factor)
        shape = tuple(_round_half_up(s * fi) for s, fi in zip(self.shape, f))
        spacing = tuple(p / fi for p, fi in zip(self.spacing, f))
        return Geometry(shape, spacing)

    @property
    def diagonal_mm(self) -> float:
        return float(np.sqrt(sum((s * p) ** 2 for s, p in zip(self.shape, self.spacing))))


@dataclass
class MultiModalVolume:
    """Four co-registered channels (T1, T1Gd, T2, FLAIR) stacked as a ``(4, i, j, k)`` array."""

    data: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != 4:
            raise ValueError(f"expected (4, i, j, k) channels, got {self.data.shape}")
        if self.data.shape[1:] != self.geometry.shape:
            raise ValueError(f"channel shape {self.data.shape[1:]} != geometry {self.geometry.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")

    @property
    def channels(self) -> list[np.ndarray]:
        return [self.data[c] for c in range(4)]


@dataclass
class LabelMap:
    labels: np.ndarray
    geometry: Geometry
    convention: str = "canonical"

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.geometry.shape:
            raise ValueError(f"label shape {labels.shape} != geometry {self.geometry.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 3):
            raise ValueError(f"label values must lie in {{0,1,2,3}}, found {np.unique(labels)}")
        if np.issubdtype(labels.dtype, np.floating) and not np.array_equal(labels, np.round(labels)):
            raise ValueError("label map holds non-integer values")
        self.labels = labels.astype(np.uint8)
        if self.convention != "canonical":
            raise ValueError(f"unknown label convention {self.convention!r}")


@dataclass
class RegionMaskSet:
    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray
    geometry: Geometry | None = None

    def __post_init__(self):
        self.et, self.tc, self.wt = (np.asarray(m, dtype=bool) for m in (self.et, self.tc, self.wt))
        if not self.et.shape == self.tc.shape == self.wt.shape:
            raise ValueError("region masks differ in shape")
        if not is_hierarchical(self.et, self.tc, self.wt):
            raise HierarchyError("region masks violate et <= tc <= wt")

    def stack(self) -> np.ndarray:
        """``(3, ...)`` boolean array in ET, TC, WT order."""
        return np.stack([self.et, self.tc, self.wt])


@dataclass
class Case:
    case_id: str
    image: MultiModalVolume
    labels: LabelMap | None = None
    meta: dict = field(default_factory=dict)

    @property
    def geometry(self) -> Geometry:
        return self.image.geometry


def _per_axis(value) -> tuple[float, float, float]:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (3,))
    return tuple(float(v) for v in arr)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# -- file I/O ---------------------------------------------------------------


def load_volume(path) -> tuple[np.ndarray, Geometry]:
    """Read a 3D NIfTI-1 file (``.nii`` or ``.nii.gz``) in canonical axis order.

    Integer payloads without intensity scaling are returned in their stored dtype,
    so integer volumes round-trip exactly.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingVolumeError(f"no such volume file: {path}")
    try:
        img = nib.load(str(path))
        if len(img.shape) != 3:
            raise NonVolumetricError(f"{path}: non-3D payload with shape {img.shape}")
        img = nib.as_closest_canonical(img)
        data = np.asanyarray(img.dataobj)
        zooms = img.header.get_zooms()[:3]
    except VolumeIOError:
        raise
    except Exception as exc:  # nibabel raises a zoo of exception types on bad headers
        raise MalformedHeaderError(f"{path}: cannot parse NIfTI header ({exc})") from exc
    return np.array(data), Geometry(data.shape, zooms)


def save_volume(path, array: np.ndarray, geometry: Geometry) -> Path:
    """Write a 3D array; floats are stored as float32, integers keep an integer dtype."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim != 3:
        raise NonVolumetricError(f"refusing to write non-3D array of shape {array.shape}")
    if array.shape != geometry.shape:
        raise ValueError(f"array shape {array.shape} != geometry {geometry.shape}")
    if array.dtype == bool:
        array = array.astype(np.uint8)
    elif np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float32)
    affine = np.diag([*geometry.spacing, 1.0])
    img = nib.Nifti1Image(np.ascontiguousarray(array), affine)
    img.header.set_data_dtype(array.dtype)
    img.header.set_zooms(geometry.spacing)
    img.header.set_xyzt_units("mm")
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))
    return path


def load_labels(path) -> LabelMap:
    """Load a segmentation, mapping the legacy ET value 4 onto 3."""
    data, geometry = load_volume(path)
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.floating):
        if not np.array_equal(data, np.round(data)):
            raise ValueError(f"{path}: label file holds non-integer values")
        data = data.astype(np.int64)
    data = np.where(data == LEGACY_ET, ET, data)
    return LabelMap(data, geometry)


def save_labels(path, labels: LabelMap) -> Path:
    return save_volume(path, labels.labels.astype(np.uint8), labels.geometry)


# -- intensity --------------------------------------------------------------


def znormalize(volume: np.ndarray, foreground: str = "nonzero") -> np.ndarray:
    """Z-score a scalar volume over its foreground voxels.

    With ``foreground="nonzero"`` the statistics use the nonzero voxels and the
    remaining voxels are set to 0. Zero foreground variance yields all zeros.
    """
    v = np.asarray(volume, dtype=np.float64)
    if foreground == "nonzero":
        mask = v != 0
    elif foreground == "all":
        mask = np.ones(v.shape, dtype=bool)
    else:
        raise ValueError(f"unknown foreground policy {foreground!r}")
    out = np.zeros(v.shape, dtype=np.float32)
    if not mask.any():
        return out
    fg = v[mask]
    mean = fg.mean()
    std = fg.std()
    if std == 0:
        return out
    out[mask] = ((fg - mean) / std).astype(np.float32)
    return out


def normalize_image(image: MultiModalVolume, foreground: str = "nonzero") -> MultiModalVolume:
    data = np.stack([znormalize(c, foreground) for c in image.channels])
    return MultiModalVolume(data, image.geometry)


# -- regions ----------------------------------------------------------------


def is_hierarchical(et, tc, wt) -> bool:
    et, tc, wt = (np.asarray(m, dtype=bool) for m in (et, tc, wt))
    return bool(not (et & ~tc).any() and not (tc & ~wt).any())


def labels_to_regions(labels: LabelMap) -> RegionMaskSet:
    lab = labels.labels
    et = lab == ET
    tc = et | (lab == NETC)
    wt = tc | (lab == SNFH)
    return RegionMaskSet(et, tc, wt, labels.geometry)


def regions_to_labels(regions, repair: bool = False, geometry: Geometry | None = None) -> LabelMap:
    """Emit canonical labels from ET/TC/WT masks.

    ``regions`` is a :class:`RegionMaskSet` or any ``(et, tc, wt)`` triple. With
    ``repair`` the masks are made hierarchical first (tc |= et, then wt |= tc).
    """
    if isinstance(regions, RegionMaskSet):
        et, tc, wt = regions.et, regions.tc, regions.wt
        geometry = geometry or regions.geometry
    else:
        et, tc, wt = (np.asarray(m, dtype=bool) for m in regions)
    if not et.shape == tc.shape == wt.shape:
        raise ValueError("region masks differ in shape")
    if repair:
        tc = tc | et
        wt = wt | tc
    elif not is_hierarchical(et, tc, wt):
        raise HierarchyError("region masks violate et <= tc <= wt and repair is off")
    out = np.zeros(et.shape, dtype=np.uint8)
    out[wt] = SNFH
    out[tc] = NETC
    out[et] = ET
    return LabelMap(out, geometry or Geometry(et.shape))


# -- resampling -------------------------------------------------------------


def _source_coords(n_in: int, n_out: int, factor: float) -> np.ndarray:
    # half-voxel aligned mapping (voxel centres), clamped to the input extent
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    return np.clip(src, 0.0, n_in - 1)


def resample(volume: np.ndarray, factor, mode: str = "trilinear") -> np.ndarray:
    """Resample a scalar 3D array by a per-axis factor.

    Output shape is ``round(shape * factor)``. ``trilinear`` is separable linear
    interpolation between voxel centres with edge clamping and returns float32;
    ``nearest`` copies input values (required for label data) and keeps the dtype.
    """
    v = np.asarray(volume)
    if v.ndim != 3:
        raise ValueError(f"resample expects a 3D array, got {v.shape}")
    f = _per_axis(factor)
    if min(f) <= 0:
        raise ValueError(f"resample factor must be > 0, got {f}")
    out_shape = [max(1, _round_half_up(s * fi)) for s, fi in zip(v.shape, f)]

    if mode == "nearest":
        out = v
        for axis, (n_in, n_out, fi) in enumerate(zip(v.shape, out_shape, f)):
            idx = np.minimum(np.floor((np.arange(n_out) + 0.5) / fi).astype(np.int64), n_in - 1)
            out = np.take(out, idx, axis=axis)
        return out
    if mode != "trilinear":
        raise ValueError(f"unknown resample mode {mode!r}")
    if v.dtype == np.uint8 or v.dtype == bool:
        raise TypeError("trilinear resampling of label data; use mode='nearest'")

    out = v.astype(np.float64)
    for axis, (n_in, n_out, fi) in enumerate(zip(v.shape, out_shape, f)):
        src = _source_coords(n_in, n_out, fi)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        w = src - lo
        shape = [1, 1, 1]
        shape[axis] = n_out
        w = w.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1.0 - w) + np.take(out, hi, axis=axis) * w
    return out.astype(np.float32)


def resample_labels(labels: LabelMap, factor) -> LabelMap:
    out = resample(labels.labels, factor, mode="nearest")
    return LabelMap(out, labels.geometry.scaled(factor))


def resample_image(image: MultiModalVolume, factor) -> MultiModalVolume:
    data = np.stack([resample(c, factor, "trilinear") for c in image.channels])
    return MultiModalVolume(data, image.geometry.scaled(factor))
