"""Evaluation metrics (Dice, HD95) and Table-1 style aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import REGIONS
from .volume import LabelMap, labels_to_regions

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)
CSV_FIELDS = ("case_id", "dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt")


def dice_score(pred: np.ndarray, gt: np.ndarray, empty_value: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return float(empty_value)
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background or on the volume edge."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError("boundary expects a 3D mask")
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~eroded


def nearest_rank(values: np.ndarray, percent: int = 95) -> float:
    n = len(values)
    k = (percent * n + 99) // 100  # ceil(percent * n / 100) in integers
    return float(np.sort(values)[max(k, 1) - 1])


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    # nearest dst-boundary voxel via the exact EDT feature transform, then the
    # Euclidean length recomputed from integer offsets
    _, idx = ndimage.distance_transform_edt(~dst, sampling=spacing, return_indices=True)
    pts = np.argwhere(src)
    near = idx[:, pts[:, 0], pts[:, 1], pts[:, 2]].T
    d = (pts - near).astype(np.float64)
    sx, sy, sz = spacing
    return np.sqrt((d[:, 0] * sx) ** 2 + (d[:, 1] * sy) ** 2 + (d[:, 2] * sz) ** 2)


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0), empty_penalty: float | None = None) -> float:
    """Symmetric 95th-percentile Hausdorff distance between mask surfaces, in mm.

    Both masks empty gives 0. Exactly one empty gives ``empty_penalty``, which
    defaults to the image diagonal in mm.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    spacing = tuple(float(s) for s in spacing)
    has_p, has_g = bool(pred.any()), bool(gt.any())
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        if empty_penalty is not None:
            return float(empty_penalty)
        return float(math.sqrt(sum((n * s) ** 2 for n, s in zip(pred.shape, spacing))))
    bp, bg = boundary(pred), boundary(gt)
    return max(nearest_rank(_directed_distances(bp, bg, spacing)),
               nearest_rank(_directed_distances(bg, bp, spacing)))


@dataclass
class CaseMetrics:
    case_id: str
    dice: tuple[float, float, float]
    hd95: tuple[float, float, float]

    def __post_init__(self):
        self.dice = tuple(float(d) for d in self.dice)
        self.hd95 = tuple(float(h) for h in self.hd95)
        if len(self.dice) != 3 or len(self.hd95) != 3:
            raise ValueError("need one dice and one hd95 value per region")
        if not all(0.0 <= d <= 1.0 for d in self.dice):
            raise ValueError(f"dice out of [0, 1]: {self.dice}")
        if not all(h >= 0.0 for h in self.hd95):
            raise ValueError(f"negative hd95: {self.hd95}")

    def row(self) -> dict:
        out = {"case_id": self.case_id}
        for r, d, h in zip(REGIONS, self.dice, self.hd95):
            out[f"dice_{r}"] = d
            out[f"hd95_{r}"] = h
        return out


def evaluate_case(case_id: str, pred: LabelMap, gt: LabelMap, empty_penalty: float | None = None) -> CaseMetrics:
    if pred.labels.shape != gt.labels.shape:
        raise ValueError(f"{case_id}: prediction shape {pred.labels.shape} != reference {gt.labels.shape}")
    p, g = labels_to_regions(pred), labels_to_regions(gt)
    spacing = gt.geometry.spacing
    dice = [dice_score(a, b) for a, b in zip(p.stack(), g.stack())]
    dist = [hd95(a, b, spacing, empty_penalty) for a, b in zip(p.stack(), g.stack())]
    return CaseMetrics(case_id, tuple(dice), tuple(dist))


@dataclass
class EvalReport:
    """Per-region means over cases, with the Mean column averaging the three regions."""

    dice: tuple[float, float, float]
    hd95: tuple[float, float, float]
    n_cases: int

    @property
    def dice_mean(self) -> float:
        return sum(self.dice) / 3.0

    @property
    def hd95_mean(self) -> float:
        return sum(self.hd95) / 3.0

    def row(self) -> list[float]:
        return [*self.dice, self.dice_mean, *self.hd95, self.hd95_mean]


def aggregate_report(cases: Sequence[CaseMetrics]) -> EvalReport:
    if not cases:
        raise ValueError("cannot aggregate an empty list of case metrics")
    dice = np.array([c.dice for c in cases], dtype=np.float64)
    dist = np.array([c.hd95 for c in cases], dtype=np.float64)
    return EvalReport(tuple(float(x) for x in dice.mean(axis=0)),
                      tuple(float(x) for x in dist.mean(axis=0)), len(cases))


TABLE_HEADER = ["Data Utilization", "Dice ET", "Dice TC", "Dice WT", "Dice Mean",
                "HD95 ET", "HD95 TC", "HD95 WT", "HD95 Mean"]


def format_table(reports: dict[str, EvalReport], digits: int = 3) -> str:
    """Fixed-width text table with one row per named report."""
    width = max([len(TABLE_HEADER[0])] + [len(k) for k in reports])
    lines = [f"{TABLE_HEADER[0]:<{width}} | " + " ".join(f"{h:>9}" for h in TABLE_HEADER[1:5])
             + " | " + " ".join(f"{h:>9}" for h in TABLE_HEADER[5:])]
    lines.append("-" * len(lines[0]))
    for name, rep in reports.items():
        vals = [f"{v:>9.{digits}f}" for v in rep.row()]
        lines.append(f"{name:<{width}} | " + " ".join(vals[:4]) + " | " + " ".join(vals[4:]))
    return "\n".join(lines) + "\n"


def write_table_csv(path, reports: dict[str, EvalReport], digits: int = 3) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        for name, rep in reports.items():
            w.writerow([name] + [f"{v:.{digits}f}" for v in rep.row()])
    return path


def write_metrics_csv(path, cases: Sequence[CaseMetrics]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for c in cases:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in c.row().items()})
    return path


def read_metrics_csv(path) -> list[CaseMetrics]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: expected columns {CSV_FIELDS}, got {reader.fieldnames}")
        return [CaseMetrics(r["case_id"],
                            tuple(float(r[f"dice_{k}"]) for k in REGIONS),
                            tuple(float(r[f"hd95_{k}"]) for k in REGIONS)) for r in reader]
