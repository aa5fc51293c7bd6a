"""20-layer residual CNN for 2x volumetric super-resolution.

The network predicts a residual that is added to the trilinear 2x interpolation
of the input, so an all-zero network reproduces plain interpolation exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .optim import NesterovSGD, OptimizerConfig
from .phantom import philox
from .volume import Case, Geometry, MultiModalVolume, resample, resample_labels


@dataclass(frozen=True)
class SRNetConfig:
    filters: int = 32
    blocks: int = 3
    layers_per_block: int = 6
    kernel: int = 3
    scale_factor: int = 2
    conv_layers: int = 20
    zero_init_final: bool = True

    def __post_init__(self):
        if self.conv_layers != 1 + self.blocks * self.layers_per_block + 1:
            raise ValueError(
                f"{self.conv_layers} conv layers inconsistent with entry + {self.blocks}x{self.layers_per_block} + final"
            )
        if self.scale_factor != 2:
            raise ValueError("only 2x super-resolution is supported")
        if self.filters < 1 or self.kernel % 2 == 0:
            raise ValueError("filters must be >= 1 and kernel odd")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class SRNet(nn.Module):
    """entry conv+ReLU -> 3 blocks of 6 conv+ReLU, each wrapped by a short skip -> 1-filter conv."""

    def __init__(self, config: SRNetConfig):
        super().__init__()
        self.config = config
        f, k = config.filters, config.kernel

        def conv(cin, cout):
            return nn.Conv3d(cin, cout, k, padding=k // 2)

        self.entry = conv(1, f)
        self.blocks = nn.ModuleList(
            nn.Sequential(*[m for _ in range(config.layers_per_block) for m in (conv(f, f), nn.ReLU())])
            for _ in range(config.blocks)
        )
        self.final = conv(f, 1)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.entry(x))
        for block in self.blocks:
            h = block(h) + h
        return self.final(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Input is the interpolated volume; output adds the learned residual (long skip)."""
        return x + self.residual(x)


def count_convs(model: nn.Module) -> int:
    return sum(isinstance(m, nn.Conv3d) for m in model.modules())


def build_sr(config: SRNetConfig = SRNetConfig(), init_seed: int = 0) -> SRNet:
    model = SRNet(config)
    gen = torch.Generator().manual_seed(int(init_seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv3d):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()
        if config.zero_init_final:
            model.final.weight.zero_()
    return model


def interpolate2x(volume: np.ndarray) -> np.ndarray:
    return resample(np.asarray(volume, dtype=np.float32), 2, mode="trilinear")


def upscale(model: SRNet, volume: np.ndarray, geometry: Geometry | None = None) -> tuple[np.ndarray, Geometry]:
    """Super-resolve a scalar volume: trilinear 2x plus the network residual."""
    volume = np.asarray(volume, dtype=np.float32)
    geometry = geometry or Geometry(volume.shape)
    interp = interpolate2x(volume)
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        res = model.residual(torch.from_numpy(interp).to(dtype)[None, None])[0, 0]
    out = interp + res.to(torch.float32).numpy()
    return out, geometry.scaled(2)


def sr_enhance_case(model: SRNet, case: Case) -> Case:
    """Upscale every modality through the network; labels follow by nearest-neighbour 2x."""
    channels = []
    for ch in case.image.channels:
        out, geometry = upscale(model, ch, case.image.geometry)
        channels.append(out)
    image = MultiModalVolume(np.stack(channels), geometry)
    labels = resample_labels(case.labels, 2) if case.labels is not None else None
    meta = dict(case.meta, super_resolved=True)
    return Case(case.case_id, image, labels, meta)


def sr_train(model: SRNet, pairs, optimizer: OptimizerConfig | None = None, epochs: int = 1,
             batch_size: int = 4, seed: int = 0) -> tuple[SRNet, list[dict]]:
    """Fit the residual by MSE between ``upscale`` output and the HR volume.

    ``optimizer.total_steps`` is overridden by the actual step count so the poly
    schedule spans the whole run. Returns the model and a per-step log.
    """
    for i, (lr_vol, hr_vol) in enumerate(pairs):
        if tuple(np.shape(hr_vol)) != tuple(2 * s for s in np.shape(lr_vol)):
            raise ValueError(f"pair {i}: HR shape {np.shape(hr_vol)} is not 2x LR shape {np.shape(lr_vol)}")
    log: list[dict] = []
    if epochs <= 0 or not pairs:
        return model, log
    dtype = next(model.parameters()).dtype
    inputs = [torch.from_numpy(interpolate2x(lr)).to(dtype) for lr, _ in pairs]
    targets = [torch.from_numpy(np.asarray(hr, dtype=np.float32)).to(dtype) for _, hr in pairs]
    n_batches = -(-len(pairs) // batch_size)
    opt_cfg = replace(optimizer or OptimizerConfig(), total_steps=epochs * n_batches)
    opt = NesterovSGD(model, opt_cfg)
    rng = philox(seed, 2)
    model.train()
    step = 0
    for _epoch in range(epochs):
        order = rng.permutation(len(pairs))
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            shapes = {tuple(inputs[i].shape) for i in idx}
            if len(shapes) != 1:
                raise ValueError(f"mixed shapes in one SR batch: {shapes}")
            x = torch.stack([inputs[i] for i in idx])[:, None]
            y = torch.stack([targets[i] for i in idx])[:, None]
            lr = opt.lr_at(step)
            opt.zero_grad()
            loss = torch.mean((model(x) - y) ** 2)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite SR loss at step {step}")
            loss.backward()
            opt.step(lr)
            log.append({"step": step, "lr": lr, "loss": loss.item()})
            step += 1
    return model, log
