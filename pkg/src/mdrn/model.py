"""MDRN: nested degradation/reconstruction denoiser built from MSAG groups."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError


@dataclass
class ModelConfig:
    levels: int = 3
    msab_per_msag: int = 8
    channels: int = 64
    image_channels: int = 1
    dilation_rates: tuple[int, int] = (1, 2)
    shuffle_groups: int = 2
    global_residual: bool = True
    # None resolves to every reconstruction node on level 0: [1, ..., levels]
    tap_indices: list[int] | None = field(default=None)

    def __post_init__(self):
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        if self.tap_indices is None:
            self.tap_indices = list(range(1, self.levels + 1))
        self.tap_indices = [int(i) for i in self.tap_indices]
        self.validate()

    def validate(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.msab_per_msag < 1:
            raise ConfigError(f"msab_per_msag must be >= 1, got {self.msab_per_msag}")
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be even and >= 2, got {self.channels}")
        if self.shuffle_groups < 1 or self.channels % self.shuffle_groups:
            raise ConfigError(
                f"channels ({self.channels}) not divisible by shuffle_groups ({self.shuffle_groups})"
            )
        if self.image_channels not in (1, 3):
            raise ConfigError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if len(self.dilation_rates) != 2 or min(self.dilation_rates) < 1:
            raise ConfigError(f"dilation_rates must be two positive ints, got {self.dilation_rates}")
        taps = self.tap_indices
        if any(i < 1 or i > self.levels for i in taps):
            raise ConfigError(f"tap_indices {taps} outside 1..{self.levels}")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"tap_indices {taps} must be strictly increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ForwardTrace(NamedTuple):
    output: torch.Tensor
    taps: list[torch.Tensor]


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"cannot shuffle {c} channels into {groups} groups")
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


def shuffle_permutation(channels: int, groups: int) -> list[int]:
    """Source channel for each output position of channel_shuffle."""
    per = channels // groups
    return [g * per + k for k in range(per) for g in range(groups)]


class MSAB(nn.Module):
    """Multi-scale aggregation block.

    1x1 conv, split into two halves, one dilated 3x3 conv per half, concat,
    channel shuffle, 1x1 fusion, residual add.
    """

    def __init__(self, channels: int, dilation_rates=(1, 2), shuffle_groups: int = 2):
        super().__init__()
        half = channels // 2
        d1, d2 = dilation_rates
        self.channels = channels
        self.shuffle_groups = shuffle_groups
        self.reduce = nn.Conv2d(channels, channels, 1)
        self.branch_a = nn.Conv2d(half, half, 3, padding=d1, dilation=d1)
        self.branch_b = nn.Conv2d(half, half, 3, padding=d2, dilation=d2)
        self.fuse = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(f"MSAB expects {self.channels} channels, got {x.shape[1]}")
        t = F.relu(self.reduce(x))
        a, b = torch.chunk(t, 2, dim=1)
        t = torch.cat([F.relu(self.branch_a(a)), F.relu(self.branch_b(b))], dim=1)
        t = channel_shuffle(t, self.shuffle_groups)
        return x + self.fuse(t)


class MSAG(nn.Module):
    """1x1 fusion over the concatenated inputs, N MSABs, long skip from the fused feature."""

    def __init__(self, n_inputs: int, channels: int, n_blocks: int, dilation_rates=(1, 2), shuffle_groups=2):
        super().__init__()
        self.n_inputs = n_inputs
        self.fuse = nn.Conv2d(n_inputs * channels, channels, 1)
        self.blocks = nn.Sequential(
            *[MSAB(channels, dilation_rates, shuffle_groups) for _ in range(n_blocks)]
        )

    @property
    def in_channels(self) -> int:
        return self.fuse.in_channels

    def forward(self, inputs: list[torch.Tensor]) -> torch.Tensor:
        if not inputs:
            raise ValueError("MSAG needs at least one input")
        size = inputs[0].shape[-2:]
        if any(t.shape[-2:] != size for t in inputs):
            raise ValueError(f"MSAG inputs disagree on spatial size: {[tuple(t.shape) for t in inputs]}")
        x = torch.cat(inputs, dim=1) if len(inputs) > 1 else inputs[0]
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"MSAG fusion expects {self.in_channels} channels, got {x.shape[1]}")
        fused = self.fuse(x)
        return fused + self.blocks(fused)


RESIDUAL_INIT_SCALE = 0.1


def _key(level: int, index: int) -> str:
    return f"{level}_{index}"


class MDRN(nn.Module):
    """Inverted pyramid of MSAGs.

    Node (j, 0) is the backbone at level j, fed by a strided 2x2 conv from
    (j-1, 0). Node (j, i) for i >= 1 takes every earlier node on level j plus
    a transposed-conv upsample of (j+1, i-1). Level 0 ends in node
    (0, levels), whose 3x3 tail conv produces the image (or the correction
    added to the input when global_residual is set).
    """

    def __init__(self, config: ModelConfig | None = None, seed: int | None = None, init: bool = True):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        c, L = cfg.channels, cfg.levels
        self.head = nn.Conv2d(cfg.image_channels, c, 3, padding=1)
        self.down = nn.ModuleList([nn.Conv2d(c, c, 2, stride=2) for _ in range(L)])
        self.up = nn.ModuleDict()
        self.nodes = nn.ModuleDict()
        for j in range(L + 1):
            for i in range(L - j + 1):
                self.nodes[_key(j, i)] = MSAG(
                    i + 1, c, cfg.msab_per_msag, cfg.dilation_rates, cfg.shuffle_groups
                )
                if i >= 1:
                    # upsamples (j+1, i-1) for consumption by (j, i)
                    self.up[_key(j, i)] = nn.ConvTranspose2d(c, c, 2, stride=2)
        self.tail = nn.Conv2d(c, cfg.image_channels, 3, padding=1)
        if init:
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = None):
        """Fan-in normal init, zero biases.

        Convs followed by ReLU use gain sqrt(2), linear ones gain 1. The last
        conv of every MSAB residual branch and the tail are further scaled by
        RESIDUAL_INIT_SCALE; without it activations grow geometrically along
        the stacked residual blocks.
        """
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        linear = {id(self.tail)} | {id(m.fuse) for m in self.modules() if isinstance(m, (MSAB, MSAG))}
        damped = {id(self.tail)} | {id(m.fuse) for m in self.modules() if isinstance(m, MSAB)}
        for m in self.modules():
            if not isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                continue
            kh, kw = m.kernel_size
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.in_channels * kh * kw // (m.stride[0] * m.stride[1])
            else:
                fan_in = m.in_channels // m.groups * kh * kw
            std = math.sqrt((1.0 if id(m) in linear else 2.0) / fan_in)
            if id(m) in damped:
                std *= RESIDUAL_INIT_SCALE
            with torch.no_grad():
                w = torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype)
                m.weight.copy_(w * std)
                m.bias.zero_()

    def node(self, level: int, index: int) -> MSAG:
        return self.nodes[_key(level, index)]

    def describe_nodes(self) -> list[tuple[int, int, int]]:
        """(level, index, fusion input channels) for every node."""
        out = []
        L = self.config.levels
        for j in range(L + 1):
            for i in range(L - j + 1):
                out.append((j, i, self.node(j, i).in_channels))
        return out

    def check_input(self, y: torch.Tensor):
        if y.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(y.shape)}")
        if y.shape[1] != self.config.image_channels:
            raise ConfigError(
                f"model expects {self.config.image_channels} image channels, got {y.shape[1]}"
            )
        m = 2 ** self.config.levels
        h, w = y.shape[-2:]
        if h % m or w % m:
            raise ValueError(f"spatial size {h}x{w} not divisible by {m}; pad before calling")

    def trace(self, y: torch.Tensor) -> ForwardTrace:
        self.check_input(y)
        L = self.config.levels
        x: dict[tuple[int, int], torch.Tensor] = {}
        x[0, 0] = self.node(0, 0)([F.relu(self.head(y))])
        for j in range(1, L + 1):
            x[j, 0] = self.node(j, 0)([F.relu(self.down[j - 1](x[j - 1, 0]))])
        for i in range(1, L + 1):
            for j in range(L - i + 1):
                up = F.relu(self.up[_key(j, i)](x[j + 1, i - 1]))
                x[j, i] = self.node(j, i)([x[j, k] for k in range(i)] + [up])
        out = self.tail(x[0, L])
        if self.config.global_residual:
            out = y + out
        return ForwardTrace(out, [x[0, i] for i in self.config.tap_indices])

    def forward(self, y):
        return self.trace(y).output


def count_parameters(config: ModelConfig | nn.Module) -> int:
    if isinstance(config, nn.Module):
        return sum(p.numel() for p in config.parameters())
    with torch.device("meta"):
        model = MDRN(config, init=False)
    return sum(p.numel() for p in model.parameters())


def parameter_formula(config: ModelConfig) -> int:
    """Closed-form parameter count; see docs/parameters.md."""
    c, n, L, ic = config.channels, config.msab_per_msag, config.levels, config.image_channels
    nodes = (L + 1) * (L + 2) // 2
    ups = L * (L + 1) // 2
    fusion_inputs = (L + 1) * (L + 2) * (L + 3) // 6
    msab = (13 * c * c) // 2 + 3 * c
    sampling = 4 * c * c + c
    return (
        nodes * n * msab
        + fusion_inputs * c * c + nodes * c
        + (L + ups) * sampling
        + 9 * ic * c + c
        + 9 * c * ic + ic
    )
