"""Sliding-window inference, probability ensembling and label emission."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .metrics import CaseMetrics, evaluate_case
from .segnet import SegNet
from .srnet import sr_enhance_case
from .volume import Case, Geometry, LabelMap, MultiModalVolume, normalize_image, regions_to_labels, resample


@dataclass(frozen=True)
class InferenceConfig:
    patch_shape: tuple[int, int, int] | None = None  # None: the model's training patch
    overlap: float = 0.5
    weighting: str = "gaussian"
    sigma_scale: float = 1.0 / 8.0
    threshold: float = 0.5
    ensemble_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")
        if self.weighting not in ("uniform", "gaussian"):
            raise ValueError(f"unknown window weighting {self.weighting!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.ensemble_weights is not None:
            _check_weights(self.ensemble_weights)


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"ensemble weights must be non-negative and sum to 1, got {list(w)}")
    return w


def window_starts(size: int, patch: int, overlap: float) -> list[int]:
    """Evenly spread window origins covering ``[0, size)`` with at least the requested overlap."""
    if size <= patch:
        return [0]
    step = max(1, int(patch * (1.0 - overlap)))
    n = math.ceil((size - patch) / step) + 1
    return [int(round(x)) for x in np.linspace(0, size - patch, n)]


def window_weights(patch_shape, weighting: str = "gaussian", sigma_scale: float = 1.0 / 8.0) -> np.ndarray:
    if weighting == "uniform":
        return np.ones(patch_shape, dtype=np.float64)
    w = np.ones(patch_shape, dtype=np.float64)
    for axis, p in enumerate(patch_shape):
        x = np.arange(p) - (p - 1) / 2.0
        g = np.exp(-0.5 * (x / (p * sigma_scale)) ** 2)
        shape = [1, 1, 1]
        shape[axis] = p
        w = w * g.reshape(shape)
    w /= w.max()
    w[w == 0] = w[w > 0].min()
    return w


def _predictor(model) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(model, SegNet):
        model.eval()
        dtype = next(model.parameters()).dtype

        def run(x):
            with torch.no_grad():
                return model(x.to(dtype))[0]
        return run
    return model


def sliding_window_infer(model, volume, config: InferenceConfig = InferenceConfig()) -> np.ndarray:
    """Region probabilities ``(3, *spatial)`` for a normalized ``(4, *spatial)`` volume.

    ``model`` is a :class:`SegNet` or any callable mapping a ``(1, 4, *patch)``
    tensor to ``(1, 3, *patch)`` probabilities. Windows are blended by their
    weight map and divided by the accumulated weight.
    """
    data = volume.data if isinstance(volume, MultiModalVolume) else np.asarray(volume, dtype=np.float32)
    patch = config.patch_shape
    if patch is None:
        if not isinstance(model, SegNet):
            raise ValueError("patch_shape is required for a plain callable model")
        patch = model.config.patch_shape
    patch = tuple(int(p) for p in patch)
    spatial = data.shape[1:]
    pad = [max(p - s, 0) for s, p in zip(spatial, patch)]
    before = [p // 2 for p in pad]
    if any(pad):
        data = np.pad(data, [(0, 0)] + [(b, p - b) for b, p in zip(before, pad)])
    padded = data.shape[1:]

    predict = _predictor(model)
    weights = window_weights(patch, config.weighting, config.sigma_scale)
    acc = np.zeros((3, *padded), dtype=np.float64)
    wsum = np.zeros(padded, dtype=np.float64)
    starts = [window_starts(s, p, config.overlap) for s, p in zip(padded, patch)]
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                sl = (slice(i, i + patch[0]), slice(j, j + patch[1]), slice(k, k + patch[2]))
                x = torch.from_numpy(np.ascontiguousarray(data[(slice(None), *sl)]))[None]
                p = predict(x)
                p = p[0] if isinstance(p, (list, tuple)) else p
                acc[(slice(None), *sl)] += p[0].detach().to(torch.float64).numpy() * weights
                wsum[sl] += weights
    assert (wsum > 0).all(), "window tiling left voxels uncovered"
    out = acc / wsum
    crop = tuple(slice(b, b + s) for b, s in zip(before, spatial))
    return np.clip(out[(slice(None), *crop)], 0.0, 1.0).astype(np.float32)


def ensemble(prob_maps: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Voxelwise weighted mean of region probability maps."""
    if not prob_maps:
        raise ValueError("nothing to ensemble")
    shapes = {np.shape(p) for p in prob_maps}
    if len(shapes) != 1:
        raise ValueError(f"probability maps differ in shape: {shapes}")
    w = _check_weights(weights if weights is not None else [1.0 / len(prob_maps)] * len(prob_maps))
    if len(w) != len(prob_maps):
        raise ValueError(f"{len(prob_maps)} maps but {len(w)} weights")
    out = np.zeros(shapes.pop(), dtype=np.float64)
    for wi, p in zip(w, prob_maps):
        out += wi * np.asarray(p, dtype=np.float64)
    return out.astype(np.float32)


def compose_prediction(probs: np.ndarray, threshold: float = 0.5, geometry: Geometry | None = None) -> LabelMap:
    """Threshold ET/TC/WT channels, repair the hierarchy, emit canonical labels."""
    masks = np.asarray(probs) > threshold
    geometry = geometry or Geometry(masks.shape[1:])
    return regions_to_labels((masks[0], masks[1], masks[2]), repair=True, geometry=geometry)


def predict_probabilities(models: Sequence, image: MultiModalVolume,
                          config: InferenceConfig = InferenceConfig()) -> np.ndarray:
    if not models:
        raise ValueError("predict_case needs at least one model")
    normalized = normalize_image(image)
    maps = [sliding_window_infer(m, normalized, config) for m in models]
    return ensemble(maps, config.ensemble_weights)


def predict_case(models: Sequence, volume, config: InferenceConfig = InferenceConfig()) -> LabelMap:
    """Normalize, tile each model over the volume, ensemble, threshold and emit labels."""
    image = volume.image if isinstance(volume, Case) else volume
    probs = predict_probabilities(models, image, config)
    return compose_prediction(probs, config.threshold, image.geometry)


def predict_super_resolved(models: Sequence, sr_model, case: Case,
                           config: InferenceConfig = InferenceConfig()) -> LabelMap:
    """Predict on the 2x super-resolved volume and map the labels back to the original grid."""
    enhanced = sr_enhance_case(sr_model, Case(case.case_id, case.image))
    pred = predict_case(models, enhanced.image, config)
    return LabelMap(resample(pred.labels, 0.5, mode="nearest"), case.geometry)


def evaluate_models(models: Sequence, cases: Sequence[Case], config: InferenceConfig = InferenceConfig(),
                    sr_model=None) -> list[CaseMetrics]:
    out = []
    for case in cases:
        if sr_model is not None:
            pred = predict_super_resolved(models, sr_model, case, config)
        else:
            pred = predict_case(models, case, config)
        out.append(evaluate_case(case.case_id, pred, case.labels))
    return out
