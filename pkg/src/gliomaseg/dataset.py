"""On-disk datasets: one directory per case plus a ``dataset.json`` manifest.

::

    <root>/dataset.json
    <root>/<case_id>/t1.nii.gz  t1gd.nii.gz  t2.nii.gz  flair.nii.gz  seg.nii.gz
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import MODALITIES
from .volume import Case, MultiModalVolume, load_labels, load_volume, save_labels, save_volume

MANIFEST = "dataset.json"


class DataError(Exception):
    """Missing or inconsistent dataset content."""


def write_case(root, case: Case) -> dict:
    d = Path(root) / case.case_id
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, ch in zip(MODALITIES, case.image.channels):
        save_volume(d / f"{name}.nii.gz", ch, case.image.geometry)
        files[name] = f"{case.case_id}/{name}.nii.gz"
    if case.labels is not None:
        save_labels(d / "seg.nii.gz", case.labels)
        files["seg"] = f"{case.case_id}/seg.nii.gz"
    return {"case_id": case.case_id, "files": files, "shape": list(case.geometry.shape),
            "spacing": list(case.geometry.spacing)}


def write_dataset(root, cases, extra: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = [write_case(root, c) for c in cases]
    return write_manifest(root, entries, extra)


def write_manifest(root, entries: list[dict], extra: dict | None = None) -> Path:
    path = Path(root) / MANIFEST
    path.write_text(json.dumps({"cases": entries, **(extra or {})}, indent=1, sort_keys=True) + "\n")
    return path


def read_case(root, case_id: str, files: dict | None = None) -> Case:
    root = Path(root)
    files = files or {m: f"{case_id}/{m}.nii.gz" for m in (*MODALITIES, "seg")}
    channels, geometry = [], None
    for name in MODALITIES:
        if name not in files:
            raise DataError(f"{case_id}: no {name} file listed")
        arr, geo = load_volume(root / files[name])
        if geometry is not None and geo != geometry:
            raise DataError(f"{case_id}: geometry mismatch ({name} {geo} vs {geometry})")
        geometry = geo
        channels.append(arr.astype(np.float32))
    labels = None
    seg = files.get("seg")
    if seg and (root / seg).is_file():
        labels = load_labels(root / seg)
        if labels.geometry != geometry:
            raise DataError(f"{case_id}: geometry mismatch (seg {labels.geometry} vs {geometry})")
    return Case(case_id, MultiModalVolume(np.stack(channels), geometry), labels)


def list_cases(root) -> list[tuple[str, dict | None]]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    manifest = root / MANIFEST
    if manifest.is_file():
        return [(e["case_id"], e["files"]) for e in json.loads(manifest.read_text())["cases"]]
    return [(d.name, None) for d in sorted(root.iterdir()) if d.is_dir() and (d / "flair.nii.gz").is_file()]


def read_dataset(root) -> list[Case]:
    return [read_case(root, cid, files) for cid, files in list_cases(root)]
