"""Deterministic synthetic brain-tumour phantoms and domain degradation.

All randomness comes from numpy's counter-based Philox4x64 bit generator. A
case is keyed by ``seed + (case_index << 64)`` so every case is an independent
stream that depends only on ``(spec, case_index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .volume import NETC, SNFH, ET, Case, Geometry, LabelMap, MultiModalVolume, resample

_MASK64 = (1 << 64) - 1

# mean intensity per tissue for (t1, t1gd, t2, flair); ET peaks in t1gd, SNFH in flair
DEFAULT_INTENSITIES = {
    "brain": (0.60, 0.55, 0.45, 0.40),
    "netc": (0.35, 0.40, 0.70, 0.60),
    "snfh": (0.50, 0.50, 0.80, 0.95),
    "et": (0.50, 1.00, 0.60, 0.70),
}


class PhantomFitError(ValueError):
    """The requested tumours do not fit inside the brain mask."""


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for ``(seed, stream)``."""
    key = (int(seed) & _MASK64) | ((int(stream) & _MASK64) << 64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    tumor_count: int = 1
    et_radius: tuple[float, float] = (2.5, 3.5)
    tc_radius: tuple[float, float] = (4.5, 5.5)
    wt_radius: tuple[float, float] = (6.5, 8.5)
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    noise_sigma: float = 0.03
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_fraction: float = 0.45
    margin: float = 1.0
    smoothing: float = 0.6
    texture: float = 0.08

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        for name in ("et_radius", "tc_radius", "wt_radius"):
            lo, hi = (float(x) for x in getattr(self, name))
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
            setattr(self, name, (lo, hi))
        if not (self.et_radius[1] < self.tc_radius[0] and self.tc_radius[1] < self.wt_radius[0]):
            raise ValueError("radius ranges must be ordered r_et < r_tc < r_wt")
        if self.tumor_count < 0:
            raise ValueError("tumor_count must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        missing = {"brain", "netc", "snfh", "et"} - set(self.intensities)
        if missing:
            raise ValueError(f"intensities missing tissues {sorted(missing)}")
        self.intensities = {k: tuple(float(x) for x in v) for k, v in self.intensities.items()}
        if any(len(v) != 4 for v in self.intensities.values()):
            raise ValueError("each tissue needs 4 modality intensities")


@dataclass(frozen=True)
class DomainProfile:
    blur_sigma: float = 0.0
    downsample_factor: int = 1
    extra_noise_sigma: float = 0.0
    contrast_scale: float = 1.0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.extra_noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be >= 0")
        if int(self.downsample_factor) != self.downsample_factor or self.downsample_factor < 1:
            raise ValueError("downsample_factor must be an integer >= 1")
        if self.contrast_scale <= 0:
            raise ValueError("contrast_scale must be > 0")


HIGH_QUALITY = DomainProfile()
LOW_QUALITY = DomainProfile(blur_sigma=1.0, downsample_factor=2, extra_noise_sigma=0.05, contrast_scale=0.6)
SR_PAIR_PROFILE = DomainProfile(blur_sigma=0.8, downsample_factor=2, extra_noise_sigma=0.01)


def _place_tumors(spec: PhantomSpec, rng, semi_axes, centre):
    placed = []
    for _ in range(spec.tumor_count):
        r_et = rng.uniform(*spec.et_radius)
        r_tc = rng.uniform(*spec.tc_radius)
        r_wt = rng.uniform(*spec.wt_radius)
        room = semi_axes - r_wt - spec.margin
        if np.any(room < 0.5):
            raise PhantomFitError(
                f"tumor of radius {r_wt:.2f} cannot fit in brain semi-axes {np.round(semi_axes, 2)}"
            )
        for _attempt in range(1000):
            offset = rng.uniform(-room, room)
            if np.sum((offset / room) ** 2) > 1.0:
                continue
            c = np.round(centre + offset)
            if all(np.linalg.norm(c - pc) > r_wt + pr + 1 for pc, pr in ((p[0], p[3]) for p in placed)):
                placed.append((c, r_et, r_tc, r_wt))
                break
        else:
            raise PhantomFitError(f"could not place {spec.tumor_count} non-overlapping tumors")
    return placed


def generate_case(spec: PhantomSpec, case_index: int = 0) -> tuple[MultiModalVolume, LabelMap]:
    """Render one phantom: an ellipsoidal brain holding nested spherical tumours.

    Each tumour is ET (label 3) inside NETC (label 1) inside SNFH (label 2).
    Output is a pure function of ``(spec, case_index)``.
    """
    rng = philox(spec.seed, case_index)
    shape = np.array(spec.shape)
    geometry = Geometry(spec.shape, spec.spacing)
    grid = np.indices(spec.shape, dtype=np.float64)
    centre = (shape - 1) / 2.0
    semi_axes = spec.brain_fraction * shape * rng.uniform(0.95, 1.0, size=3)

    rel = (grid - centre[:, None, None, None]) / semi_axes[:, None, None, None]
    brain = np.sum(rel**2, axis=0) <= 1.0

    labels = np.zeros(spec.shape, dtype=np.uint8)
    for c, r_et, r_tc, r_wt in _place_tumors(spec, rng, semi_axes, centre):
        dist = np.sqrt(np.sum((grid - c[:, None, None, None]) ** 2, axis=0))
        labels[(dist <= r_wt) & (labels == 0)] = SNFH
        labels[dist <= r_tc] = NETC
        labels[dist <= r_et] = ET

    texture = ndimage.gaussian_filter(rng.standard_normal(spec.shape), sigma=max(spec.shape) / 8.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    texture = 1.0 + spec.texture * texture

    tissues = {NETC: "netc", SNFH: "snfh", ET: "et"}
    channels = []
    for m in range(4):
        img = np.where(brain, spec.intensities["brain"][m] * texture, 0.0)
        for value, name in tissues.items():
            img[labels == value] = spec.intensities[name][m]
        if spec.smoothing > 0:
            img = ndimage.gaussian_filter(img, spec.smoothing)
        if spec.noise_sigma > 0:
            img = img + spec.noise_sigma * rng.standard_normal(spec.shape)
        channels.append(np.where(brain, img, 0.0))
    return MultiModalVolume(np.stack(channels).astype(np.float32), geometry), LabelMap(labels, geometry)


def generate_cases(spec: PhantomSpec, count: int, start: int = 0, prefix: str = "case") -> list[Case]:
    cases = []
    for i in range(start, start + count):
        image, labels = generate_case(spec, i)
        cases.append(Case(f"{prefix}_{i:04d}", image, labels))
    return cases


def _block_mean(x: np.ndarray, f: int) -> np.ndarray:
    s = [n // f for n in x.shape]
    x = x[: s[0] * f, : s[1] * f, : s[2] * f]
    return x.reshape(s[0], f, s[1], f, s[2], f).mean(axis=(1, 3, 5))


def degrade(volume: MultiModalVolume, profile: DomainProfile, seed: int = 0) -> MultiModalVolume:
    """Blur, downsample by block averaging, compress contrast, add noise (in that order)."""
    rng = philox(seed, 1)
    f = int(profile.downsample_factor)
    out = []
    for ch in volume.channels:
        x = ch.astype(np.float64)
        if profile.blur_sigma > 0:
            x = ndimage.gaussian_filter(x, profile.blur_sigma, mode="nearest")
        if f > 1:
            x = _block_mean(x, f)
        if profile.contrast_scale != 1.0:
            fg = x != 0
            if fg.any():
                mean = x[fg].mean()
                x = np.where(fg, mean + profile.contrast_scale * (x - mean), 0.0)
        out.append(x)
    data = np.stack(out)
    if profile.extra_noise_sigma > 0:
        data = data + profile.extra_noise_sigma * rng.standard_normal(data.shape)
    g = volume.geometry
    geometry = Geometry(data.shape[1:], tuple(p * f for p in g.spacing))
    return MultiModalVolume(data.astype(np.float32), geometry)


def degrade_case(case: Case, profile: DomainProfile, seed: int = 0) -> Case:
    """Low-quality version of a case; labels follow by nearest-neighbour downsampling."""
    image = degrade(case.image, profile, seed)
    labels = None
    if case.labels is not None:
        f = int(profile.downsample_factor)
        lab = case.labels.labels
        s = [n // f * f for n in lab.shape]
        lab = resample(lab[: s[0], : s[1], : s[2]], 1.0 / f, mode="nearest")
        labels = LabelMap(lab, image.geometry)
    return Case(case.case_id, image, labels, dict(case.meta))


def low_quality_cases(spec: PhantomSpec, count: int, profile: DomainProfile = LOW_QUALITY,
                      start: int = 0, prefix: str = "case") -> list[Case]:
    return [degrade_case(c, profile, seed=spec.seed + i)
            for i, c in enumerate(generate_cases(spec, count, start, prefix), start=start)]


def sr_training_pairs(spec: PhantomSpec, n_cases: int, profile: DomainProfile = SR_PAIR_PROFILE,
                      start: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-channel (LR, HR) pairs from phantom cases; HR is the clean phantom channel."""
    if profile.downsample_factor != 2:
        raise ValueError("super-resolution pairs need downsample_factor 2")
    if any(s % 2 for s in spec.shape):
        raise ValueError("phantom shape must be even for 2x pairs")
    pairs = []
    for i, case in enumerate(generate_cases(spec, n_cases, start), start=start):
        lr = degrade(case.image, profile, seed=spec.seed + i)
        for c in range(4):
            pairs.append((lr.data[c], case.image.data[c]))
    return pairs


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=seed)
