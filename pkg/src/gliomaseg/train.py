"""Patch-based training loop, fine-tuning, and the three data-utilization strategies."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentationConfig, augment
from .checkpoint import Checkpoint, CheckpointError, from_model, to_model
from .losses import LossConfig, combined_loss_terms
from .optim import NesterovSGD, OptimizerConfig
from .phantom import philox
from .segnet import SegNet, SegNetConfig, baseline_config, build, expanded_config
from .srnet import SRNet, sr_enhance_case
from .volume import Case, Geometry, LabelMap, labels_to_regions, normalize_image, resample

log = logging.getLogger(__name__)

STRATEGIES = ("S_GLI_to_SSA", "S_SSA", "S_srSSA")
LOG_FIELDS = ("step", "lr", "loss", "dice_term", "bce_term")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


def set_deterministic(threads: int = 1) -> None:
    """Single-threaded, deterministic kernels: runs with equal seeds give identical bytes."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainingLog:
    phase: str = "train"
    rows: list[dict] = field(default_factory=list)
    dataset_shapes: list[tuple[int, ...]] = field(default_factory=list)
    state: object = None  # SGDState after the last step

    @property
    def final_dice(self) -> float:
        return self.rows[-1]["dice"] if self.rows else float("nan")

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return path


def _crop_padded(arr: np.ndarray, start: Sequence[int], size: Sequence[int]) -> np.ndarray:
    """Crop the trailing 3 axes at ``start`` with zero fill outside the array."""
    spatial = arr.shape[-3:]
    out = np.zeros(arr.shape[:-3] + tuple(size), dtype=arr.dtype)
    src, dst = [], []
    for st, sz, n in zip(start, size, spatial):
        lo, hi = max(st, 0), min(st + sz, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - st, hi - st))
    out[(..., *dst)] = arr[(..., *src)]
    return out


def sample_patch(case: Case, patch_shape, foreground_bias: float, rng: np.random.Generator):
    """Draw one ``(4, *patch)`` image patch and its label patch.

    With probability ``foreground_bias`` the patch is centred (index ``p // 2``) on a
    random tumour voxel, zero-padding where it overhangs. Otherwise the start is
    uniform over positions that keep the patch inside (or centred when it cannot fit).
    """
    patch_shape = tuple(int(p) for p in patch_shape)
    image = case.image.data
    labels = case.labels.labels
    shape = labels.shape
    start = None
    if rng.uniform() < foreground_bias:
        fg = np.flatnonzero(labels)
        if fg.size:
            centre = np.unravel_index(fg[rng.integers(fg.size)], shape)
            start = [int(c) - p // 2 for c, p in zip(centre, patch_shape)]
    if start is None:
        start = [int(rng.integers(0, s - p + 1)) if s >= p else -((p - s) // 2)
                 for s, p in zip(shape, patch_shape)]
    return _crop_padded(image, start, patch_shape), _crop_padded(labels, start, patch_shape)


def region_targets(labels: np.ndarray, n_heads: int) -> list[np.ndarray]:
    """Region masks ``(3, ...)`` at full resolution and each deep-supervision scale."""
    regions = labels_to_regions(LabelMap(labels, Geometry(labels.shape))).stack()
    out = [regions]
    for h in range(1, n_heads):
        f = 0.5**h
        out.append(np.stack([resample(r, f, mode="nearest") for r in regions]))
    return out


def _prepare(dataset: Sequence[Case]) -> list[Case]:
    return [Case(c.case_id, normalize_image(c.image), c.labels, c.meta) for c in dataset]


def train(model: SegNet, dataset: Sequence[Case], optimizer: OptimizerConfig = OptimizerConfig(),
          loss_config: LossConfig = LossConfig(), augmentation: AugmentationConfig | None = None,
          steps: int = 100, seed: int = 0, batch_size: int = 2, foreground_bias: float = 0.5,
          phase: str = "train") -> tuple[SegNet, TrainingLog]:
    """Run ``steps`` SGD steps on patches sampled from ``dataset``.

    The poly schedule spans exactly ``steps``. Images are z-normalized per
    channel before sampling. Raises :class:`NonFiniteLossError` on a NaN/Inf loss.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    tlog = TrainingLog(phase, dataset_shapes=[c.geometry.shape for c in dataset])
    opt = NesterovSGD(model, replace(optimizer, total_steps=steps))
    tlog.state = opt.state
    if steps <= 0:
        return model, tlog
    cases = _prepare(dataset)
    augmentation = augmentation or AugmentationConfig.disabled()
    rng = philox(seed, 3)
    patch = model.config.patch_shape
    n_heads = len(model.heads)
    dtype = next(model.parameters()).dtype
    model.train()
    for step in range(steps):
        images, targets = [], [[] for _ in range(n_heads)]
        for _ in range(batch_size):
            case = cases[int(rng.integers(len(cases)))]
            img, lab = sample_patch(case, patch, foreground_bias, rng)
            img, lab = augment(img, lab, augmentation, rng)
            images.append(img)
            for h, t in enumerate(region_targets(lab, n_heads)):
                targets[h].append(t)
        x = torch.from_numpy(np.stack(images)).to(dtype)
        ys = [torch.from_numpy(np.stack(t)).to(dtype) for t in targets]

        lr = opt.lr_at(step)
        opt.zero_grad()
        terms = combined_loss_terms(model(x), ys, loss_config)
        loss = terms.total.item()
        if not np.isfinite(loss):
            raise NonFiniteLossError(step, loss)
        terms.total.backward()
        opt.step(lr)
        tlog.rows.append({"step": step, "lr": lr, "loss": loss, "dice_term": terms.dice_term.item(),
                          "bce_term": terms.bce_term.item(), "dice": terms.dice.item()})
        if step % 50 == 0:
            log.debug("%s step %d lr %.5f loss %.4f", phase, step, lr, loss)
    return model, tlog


def fine_tune(checkpoint: Checkpoint, dataset: Sequence[Case], optimizer: OptimizerConfig = OptimizerConfig(),
              steps: int = 100, expected_config: SegNetConfig | None = None, **kwargs) -> tuple[SegNet, TrainingLog]:
    """Continue training from a checkpoint with fresh momentum and a restarted poly schedule."""
    if expected_config is not None and checkpoint.config != expected_config.to_dict():
        raise CheckpointError("checkpoint config does not match the requested model config")
    model = to_model(checkpoint)
    kwargs.setdefault("phase", "finetune")
    return train(model, dataset, optimizer, steps=steps, **kwargs)


@dataclass
class StrategySpec:
    kind: str
    target: str
    pretrain: str | None = None
    sr_model: str | None = None
    pretrain_steps: int = 100
    target_steps: int = 100
    pretrain_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    target_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 2
    foreground_bias: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.kind == "S_GLI_to_SSA" and not self.pretrain:
            raise ValueError("S_GLI_to_SSA needs a pretrain dataset")
        if self.kind == "S_srSSA" and not self.sr_model:
            raise ValueError("S_srSSA needs a super-resolution model")


@dataclass
class StrategyResult:
    kind: str
    checkpoints: dict[str, Checkpoint]
    logs: dict[str, list[TrainingLog]]


def default_variants(**overrides) -> dict[str, SegNetConfig]:
    return {"baseline": baseline_config(**overrides), "expanded": expanded_config(**overrides)}


def run_strategy(spec: StrategySpec, datasets: dict[str, Sequence[Case]], sr_models: dict[str, SRNet] | None = None,
                 variants: dict[str, SegNetConfig] | None = None, loss_config: LossConfig = LossConfig(),
                 augmentation: AugmentationConfig | None = None) -> StrategyResult:
    """Train the original and the larger network under one data-utilization strategy.

    S_GLI_to_SSA pretrains on ``spec.pretrain`` then fine-tunes on ``spec.target``;
    S_SSA trains on the target only; S_srSSA super-resolves the target set and
    trains on the enhanced volumes.
    """
    sr_models = sr_models or {}
    variants = variants or default_variants()
    if spec.target not in datasets:
        raise KeyError(f"target dataset {spec.target!r} not registered")
    target = list(datasets[spec.target])
    if spec.kind == "S_GLI_to_SSA" and spec.pretrain not in datasets:
        raise KeyError(f"pretrain dataset {spec.pretrain!r} not registered")
    if spec.kind == "S_srSSA":
        if spec.sr_model not in sr_models:
            raise KeyError(f"super-resolution model {spec.sr_model!r} not registered")
        target = [sr_enhance_case(sr_models[spec.sr_model], c) for c in target]

    common = dict(loss_config=loss_config, augmentation=augmentation, batch_size=spec.batch_size,
                  foreground_bias=spec.foreground_bias, seed=spec.seed)
    checkpoints, logs = {}, {}
    for i, (name, cfg) in enumerate(variants.items()):
        model = build(cfg, init_seed=spec.seed * 1000 + i)
        phases = []
        if spec.kind == "S_GLI_to_SSA":
            model, plog = train(model, datasets[spec.pretrain], spec.pretrain_optimizer,
                                steps=spec.pretrain_steps, phase="pretrain", **common)
            phases.append(plog)
            model, flog = fine_tune(from_model(model, plog.state), target, spec.target_optimizer,
                                    steps=spec.target_steps, **common)
            phases.append(flog)
        else:
            model, tlog = train(model, target, spec.target_optimizer, steps=spec.target_steps, **common)
            phases.append(tlog)
        rows = [dict(r, phase=p.phase) for p in phases for r in p.rows]
        tags = {"strategy": spec.kind, "variant": name, "phases": [p.phase for p in phases]}
        checkpoints[name] = from_model(model, phases[-1].state, tags, rows)
        logs[name] = phases
    return StrategyResult(spec.kind, checkpoints, logs)
