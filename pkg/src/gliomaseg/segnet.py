"""3D U-Net for overlapping tumour regions: the baseline variant and the expanded group-norm variant."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    levels: int = 3
    base_filters: int = 8
    max_filters: int = 320
    encoder_multiplier: int = 1
    norm: str = "batch"
    group_count: int = 32
    in_channels: int = 4
    out_channels: int = 3
    leaky_slope: float = 0.01
    deep_supervision_heads: int | None = None
    patch_shape: tuple[int, int, int] = (32, 32, 32)
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(p) for p in self.patch_shape))
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        # the decoder emits levels - 1 feature maps; head 0 sits on the full-resolution one
        if not 0 <= self.ds_heads <= self.levels - 2:
            raise ValueError(f"deep_supervision_heads must be in [0, {self.levels - 2}]")
        if self.encoder_multiplier not in (1, 2):
            raise ValueError("encoder_multiplier must be 1 or 2")
        if self.norm not in ("batch", "group"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.base_filters < 1 or self.max_filters < 1:
            raise ValueError("filter counts must be positive")
        if len(self.patch_shape) != 3:
            raise ValueError("patch_shape needs 3 entries")
        if self.norm == "group":
            for c in set(channel_plan(self)) | set(decoder_plan(self)):
                if c % min(self.group_count, c):
                    raise ValueError(f"{c} channels not divisible by {min(self.group_count, c)} groups")

    @property
    def ds_heads(self) -> int:
        """Deep-supervision head count; unset means one head per level except the two coarsest."""
        if self.deep_supervision_heads is None:
            return max(self.levels - 2, 0)
        return self.deep_supervision_heads

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def baseline_config(**overrides) -> SegNetConfig:
    """The original network: batch norm, cap 320."""
    return replace(SegNetConfig(), **overrides)


def expanded_config(**overrides) -> SegNetConfig:
    """The larger network: doubled encoder width, cap 512, group norm with 32 groups."""
    base = SegNetConfig(encoder_multiplier=2, max_filters=512, norm="group", group_count=32)
    return replace(base, **overrides)


def channel_plan(config: SegNetConfig) -> list[int]:
    return [min(config.base_filters * config.encoder_multiplier * 2**i, config.max_filters)
            for i in range(config.levels)]


def decoder_plan(config: SegNetConfig) -> list[int]:
    """Decoder widths per level; the decoder never uses the encoder multiplier."""
    return [min(config.base_filters * 2**i, config.max_filters) for i in range(config.levels)]


def group_normalize(x: torch.Tensor, groups: int, eps: float = 1e-5,
                    scale: torch.Tensor | None = None, shift: torch.Tensor | None = None) -> torch.Tensor:
    """Normalize ``(N, C, *spatial)`` to zero mean / unit variance within each (sample, channel group)."""
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    g = x.reshape(n, groups, -1)
    mean = g.mean(dim=-1, keepdim=True)
    var = ((g - mean) ** 2).mean(dim=-1, keepdim=True)
    y = ((g - mean) / torch.sqrt(var + eps)).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if scale is not None:
        y = y * scale.reshape(bshape)
    if shift is not None:
        y = y + shift.reshape(bshape)
    return y


class GroupNorm3d(nn.Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_normalize(x, self.groups, self.eps, self.weight, self.bias)


def _norm(config: SegNetConfig, channels: int) -> nn.Module:
    if config.norm == "group":
        return GroupNorm3d(channels, min(config.group_count, channels), config.norm_eps)
    return nn.BatchNorm3d(channels, eps=config.norm_eps)


class ConvBlock(nn.Sequential):
    """Two rounds of conv -> norm -> LeakyReLU; the first conv carries the stride."""

    def __init__(self, config: SegNetConfig, cin: int, cout: int, stride: int = 1):
        layers = []
        for i in range(2):
            layers += [
                nn.Conv3d(cin if i == 0 else cout, cout, 3, stride=stride if i == 0 else 1,
                          padding=1, bias=False),
                _norm(config, cout),
                nn.LeakyReLU(config.leaky_slope),
            ]
        super().__init__(*layers)


class SegNet(nn.Module):
    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        enc, dec = channel_plan(config), decoder_plan(config)
        self.encoder = nn.ModuleList()
        cin = config.in_channels
        for i, c in enumerate(enc):
            self.encoder.append(ConvBlock(config, cin, c, stride=1 if i == 0 else 2))
            cin = c
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        below = enc[-1]
        for i in range(config.levels - 2, -1, -1):
            self.upsample.append(nn.ConvTranspose3d(below, dec[i], 2, stride=2))
            self.decoder.append(ConvBlock(config, dec[i] + enc[i], dec[i]))
            below = dec[i]
        # heads[0] at full resolution, heads[h] at 1/2^h
        self.heads = nn.ModuleList(
            nn.Conv3d(dec[h], config.out_channels, 1) for h in range(config.ds_heads + 1)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        x = skips.pop()
        decoded = []
        for up, stage in zip(self.upsample, self.decoder):
            x = stage(torch.cat([up(x), skips.pop()], dim=1))
            decoded.append(x)
        decoded.reverse()  # full resolution first
        return [torch.sigmoid(head(decoded[h])) for h, head in enumerate(self.heads)]


def init_parameters(model: nn.Module, seed: int, leaky_slope: float = 0.01) -> None:
    """He fan-in normal init for conv weights, zero biases, unit norm scales."""
    gen = torch.Generator().manual_seed(int(seed))
    gain2 = 2.0 / (1.0 + leaky_slope**2)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (gain2 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (GroupNorm3d, nn.BatchNorm3d)):
                m.weight.fill_(1.0)
                m.bias.zero_()


def build(config: SegNetConfig, init_seed: int = 0) -> SegNet:
    step = 2 ** (config.levels - 1)
    if any(p % step for p in config.patch_shape):
        raise ShapeError(f"patch {config.patch_shape} not divisible by {step} for {config.levels} levels")
    model = SegNet(config)
    init_parameters(model, init_seed, config.leaky_slope)
    return model


def forward(model: SegNet, patch: torch.Tensor) -> list[torch.Tensor]:
    """Run a ``(4, D, H, W)`` patch or a ``(B, 4, D, H, W)`` batch; returns one tensor per head."""
    cfg = model.config
    single = patch.ndim == 4
    x = patch.unsqueeze(0) if single else patch
    if x.ndim != 5 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.patch_shape:
        raise ShapeError(f"expected (B, {cfg.in_channels}, {cfg.patch_shape}) input, got {tuple(patch.shape)}")
    outs = model(x)
    return [o[0] for o in outs] if single else outs


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
