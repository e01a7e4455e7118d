"""Same-resolution restoration network built from residual dense blocks.

The network is head conv + LeakyReLU, a chain of residual-in-residual
dense blocks, and a zero-initialized tail conv, wrapped in a global
input skip and a clip to [0, 1]. Because the tail starts at zero, a
freshly built network is an exact identity, so an untrained model can
be dropped into the pipeline without changing anything.

All convolutions are 3x3, stride 1, zero padding 1, so any frame size
is preserved.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ShapeMismatchError
from .frames import FRAME_DTYPE, check_frame


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    base_width: int = 64
    growth: int = 32
    num_rrdb: int = 3
    dense_layers_per_block: int = 5
    dense_blocks_per_rrdb: int = 3
    residual_scale: float = 0.2
    leaky_slope: float = 0.2

    def validate(self) -> None:
        for name in (
            "in_channels",
            "base_width",
            "growth",
            "dense_layers_per_block",
            "dense_blocks_per_rrdb",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be an integer >= 1, got {value!r}")
        if not isinstance(self.num_rrdb, int) or self.num_rrdb < 0:
            raise ConfigurationError(f"num_rrdb must be an integer >= 0, got {self.num_rrdb!r}")
        if not 0.0 < self.residual_scale <= 1.0:
            raise ConfigurationError(
                f"residual_scale must lie in (0, 1], got {self.residual_scale!r}"
            )
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigurationError(
                f"leaky_slope must lie in [0, 1), got {self.leaky_slope!r}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(config: NetConfig) -> int:
    """Number of scalar parameters a network built from ``config`` holds."""
    config.validate()
    w, g, kk = config.base_width, config.growth, 9
    block = 0
    for k in range(config.dense_layers_per_block - 1):
        block += (w + k * g) * g * kk + g
    last_in = w + (config.dense_layers_per_block - 1) * g
    block += last_in * w * kk + w
    head = config.in_channels * w * kk + w
    tail = w * config.in_channels * kk + config.in_channels
    return head + tail + config.num_rrdb * config.dense_blocks_per_rrdb * block


class DenseBlock(nn.Module):
    """Five-layer (by default) dense block with a scaled residual.

    Layer k sees the block input concatenated with all previous layer
    outputs. Every layer but the last emits ``growth`` channels through
    a LeakyReLU; the last emits ``width`` channels with no activation
    and is added back onto the input after scaling.
    """

    def __init__(self, width: int, growth: int, n_layers: int,
                 residual_scale: float, leaky_slope: float):
        super().__init__()
        self.residual_scale = residual_scale
        self.width = width
        convs = []
        for k in range(n_layers):
            in_ch = width + k * growth
            out_ch = width if k == n_layers - 1 else growth
            convs.append(nn.Conv2d(in_ch, out_ch, 3, 1, 1))
        self.convs = nn.ModuleList(convs)
        self.lrelu = nn.LeakyReLU(leaky_slope)

    def forward(self, x):
        feats = [x]
        y = x
        for k, conv in enumerate(self.convs):
            y = conv(torch.cat(feats, dim=1) if len(feats) > 1 else x)
            if k < len(self.convs) - 1:
                y = self.lrelu(y)
                feats.append(y)
        return x + self.residual_scale * y


class RRDB(nn.Module):
    """Chain of dense blocks with an outer scaled residual.

    The outer connection adds ``residual_scale`` times the chain's
    correction (chain output minus input) back onto the input, so a
    block with all-zero weights is an exact identity at both nesting
    levels.
    """

    def __init__(self, width: int, growth: int, n_blocks: int, n_layers: int,
                 residual_scale: float, leaky_slope: float):
        super().__init__()
        self.residual_scale = residual_scale
        self.blocks = nn.ModuleList(
            DenseBlock(width, growth, n_layers, residual_scale, leaky_slope)
            for _ in range(n_blocks)
        )

    def forward(self, x):
        h = x
        for block in self.blocks:
            h = block(h)
        return x + self.residual_scale * (h - x)


class PostProcNet(nn.Module):
    """Restoration network: head conv, RRDB chain, tail conv, global skip."""

    def __init__(self, config: NetConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.head = nn.Conv2d(config.in_channels, config.base_width, 3, 1, 1)
        self.body = nn.ModuleList(
            RRDB(
                config.base_width,
                config.growth,
                config.dense_blocks_per_rrdb,
                config.dense_layers_per_block,
                config.residual_scale,
                config.leaky_slope,
            )
            for _ in range(config.num_rrdb)
        )
        self.tail = nn.Conv2d(config.base_width, config.in_channels, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(config.leaky_slope)

    def forward(self, x):
        if x.shape[-3] != self.config.in_channels:
            raise ShapeMismatchError(
                f"expected {self.config.in_channels} input channels, got {x.shape[-3]}"
            )
        h = self.lrelu(self.head(x))
        for rrdb in self.body:
            h = rrdb(h)
        r = self.tail(h)
        return torch.clamp(x + r, 0.0, 1.0)


def build_network(config: NetConfig, seed: int) -> PostProcNet:
    """Construct a network with seeded init and an exactly-zero tail conv.

    Non-tail kernels are drawn uniformly from +-0.1*sqrt(1/fan_in);
    biases start at zero. The zero tail makes the fresh network an
    identity, which is the right starting point when the input is
    already a decoded frame.
    """
    net = PostProcNet(config)
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.startswith("tail.") or p.ndim == 1:
                p.zero_()
            else:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                bound = 0.1 * math.sqrt(1.0 / fan_in)
                p.uniform_(-bound, bound, generator=gen)
    return net


def _as_nchw(x, channels: int):
    """Accept a torch tensor (C,H,W)/(N,C,H,W) and normalize to 4-d."""
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x))
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeMismatchError(
            f"expected {channels} channels in a (N, C, H, W) tensor, got shape {tuple(x.shape)}"
        )
    return x, squeeze


def dense_block_forward(block: DenseBlock, x):
    """Run one dense block on a (C,H,W) or (N,C,H,W) tensor."""
    t, squeeze = _as_nchw(x, block.width)
    out = block(t)
    return out.squeeze(0) if squeeze else out


def rrdb_forward(rrdb: RRDB, x):
    """Run one residual-in-residual block on a (C,H,W) or (N,C,H,W) tensor."""
    width = rrdb.blocks[0].width
    t, squeeze = _as_nchw(x, width)
    out = rrdb(t)
    return out.squeeze(0) if squeeze else out


def frame_to_tensor(frame: np.ndarray) -> torch.Tensor:
    """(H, W, 3) numpy frame to a (1, 3, H, W) torch tensor, same dtype."""
    return torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1).unsqueeze(0)


def tensor_to_frame(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor back to a (H, W, C) numpy frame."""
    if t.ndim == 4:
        t = t.squeeze(0)
    return np.ascontiguousarray(t.detach().permute(1, 2, 0).cpu().numpy())


def forward(net: PostProcNet, frame: np.ndarray) -> np.ndarray:
    """Restore one frame. Shape and value range are preserved."""
    f = check_frame(frame)
    if f.shape[2] != net.config.in_channels:
        raise ShapeMismatchError(
            f"frame has {f.shape[2]} channels, network expects {net.config.in_channels}"
        )
    with torch.no_grad():
        out = net(frame_to_tensor(f))
    return tensor_to_frame(out).astype(FRAME_DTYPE, copy=False)
