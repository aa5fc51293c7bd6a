"""Versioned checkpoint archive shared by segmentation and super-resolution models.

Layout (a zip file with fixed timestamps, so equal content gives equal bytes)::

    meta.json       format_version, kind ("seg" | "sr"), config, tags, step,
                    log_digest, and an index of tensors
    params.bin      parameter/buffer payloads, little-endian, concatenated
    optimizer.bin   momentum velocities, little-endian float32, concatenated

Each index entry is ``{"name", "shape", "dtype", "offset", "nbytes"}``.
Floating tensors are stored as float32; integer buffers as int64.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .optim import SGDState
from .segnet import SegNet, SegNetConfig, build
from .srnet import SRNet, SRNetConfig, build_sr

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    parameters: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    tags: dict = field(default_factory=dict)
    log_digest: str = ""
    format_version: int = FORMAT_VERSION


def _config_of(model) -> tuple[str, dict]:
    if isinstance(model, SegNet):
        return "seg", model.config.to_dict()
    if isinstance(model, SRNet):
        return "sr", model.config.to_dict()
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu()
    if a.is_floating_point():
        return a.to(torch.float32).numpy().copy()
    return a.to(torch.int64).numpy().copy()


def log_digest(rows) -> str:
    text = "\n".join(",".join(str(r[k]) for k in sorted(r)) for r in rows)
    return hashlib.sha256(text.encode()).hexdigest()


def from_model(model, state: SGDState | None = None, tags: dict | None = None, log_rows=None) -> Checkpoint:
    kind, config = _config_of(model)
    params = {k: _to_numpy(v) for k, v in model.state_dict().items()}
    vel = {k: _to_numpy(v) for k, v in (state.velocities if state else {}).items()}
    return Checkpoint(kind, config, params, vel, state.step if state else 0, dict(tags or {}),
                      log_digest(log_rows) if log_rows else "")


def to_model(ckpt: Checkpoint, dtype: torch.dtype = torch.float32):
    """Rebuild the model from the stored config and load parameters, checking every shape."""
    if ckpt.kind == "seg":
        cfg = dict(ckpt.config)
        cfg["patch_shape"] = tuple(cfg["patch_shape"])
        model = build(SegNetConfig(**cfg))
    elif ckpt.kind == "sr":
        model = build_sr(SRNetConfig(**ckpt.config))
    else:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    expected = model.state_dict()
    if set(expected) != set(ckpt.parameters):
        missing = sorted(set(expected) - set(ckpt.parameters))
        extra = sorted(set(ckpt.parameters) - set(expected))
        raise CheckpointError(f"parameter names differ from config: missing={missing} extra={extra}")
    for name, t in expected.items():
        if tuple(t.shape) != ckpt.parameters[name].shape:
            raise CheckpointError(f"{name}: stored shape {ckpt.parameters[name].shape} != config shape {tuple(t.shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.parameters.items()})
    return model.to(dtype)


def _pack(tensors: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    index, buf, offset = [], io.BytesIO(), 0
    for name in sorted(tensors):
        a = tensors[name]
        dt = "float32" if np.issubdtype(a.dtype, np.floating) else "int64"
        raw = np.ascontiguousarray(a, dtype=np.dtype(dt).newbyteorder("<")).tobytes()
        index.append({"name": name, "shape": list(a.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        buf.write(raw)
        offset += len(raw)
    return index, buf.getvalue()


def _unpack(index: list[dict], raw: bytes) -> dict[str, np.ndarray]:
    out = {}
    for e in index:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{e['name']}: truncated payload")
        a = np.frombuffer(chunk, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        out[e["name"]] = a.reshape(e["shape"]).astype(e["dtype"])
    return out


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    p_index, p_raw = _pack(ckpt.parameters)
    v_index, v_raw = _pack(ckpt.velocities)
    meta = {
        "format_version": ckpt.format_version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "tags": ckpt.tags,
        "step": ckpt.step,
        "log_digest": ckpt.log_digest,
        "parameters": p_index,
        "velocities": v_index,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        _write_member(zf, "params.bin", p_raw)
        _write_member(zf, "optimizer.bin", v_raw)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            p_raw = zf.read("params.bin")
            v_raw = zf.read("optimizer.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint archive ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return Checkpoint(meta["kind"], meta["config"], _unpack(meta["parameters"], p_raw),
                      _unpack(meta["velocities"], v_raw), meta["step"], meta["tags"],
                      meta["log_digest"], meta["format_version"])
