"""Small U-Net baselines (2D and 3D) sized near the ConvLSTM model's parameter count.

Both take the same ``(batch, 11, H, W)`` slice windows as the main model
through :meth:`logits`. Unet2D looks only at the centre slice; Unet3D treats
the window as a depth stack and returns its centre-slice output. Pooling is
in-plane only, so the depth dimension may be any size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .network import kaiming_init_
from .preprocess import CONTEXT_RADIUS


@dataclass
class UnetConfig:
    num_classes: int = 3
    in_channels: int = 1
    base: int = 24
    depth: int = 2
    leaky_slope: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)


def _double_conv(conv, bn, cin, cout, slope):
    return nn.Sequential(
        conv(cin, cout, 3, padding=1, bias=False), bn(cout), nn.LeakyReLU(slope),
        conv(cout, cout, 3, padding=1, bias=False), bn(cout), nn.LeakyReLU(slope),
    )


class _Unet(nn.Module):
    conv = nn.Conv2d
    bn = nn.BatchNorm2d
    pool_kernel = 2
    up_mode = "bilinear"

    def __init__(self, config: UnetConfig | None = None):
        super().__init__()
        cfg = config or UnetConfig()
        self.config = cfg
        widths = [cfg.base * 2 ** i for i in range(cfg.depth + 1)]
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.down.append(_double_conv(self.conv, self.bn, cin, w, cfg.leaky_slope))
            cin = w
        self.up = nn.ModuleList(
            _double_conv(self.conv, self.bn, widths[i + 1] + widths[i], widths[i], cfg.leaky_slope)
            for i in reversed(range(cfg.depth))
        )
        self.final = self.conv(widths[0], cfg.num_classes, 1)

    def _pool(self, x):
        raise NotImplementedError

    def forward(self, x):
        factor = 2 ** self.config.depth
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} must be divisible by {factor}")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x if i == 0 else self._pool(x))
            skips.append(x)
        x = skips.pop()
        for block in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[2:], mode=self.up_mode, align_corners=False)
            x = block(torch.cat([skip, x], dim=1))
        return self.final(x)


class Unet2D(_Unet):
    def _pool(self, x):
        return F.max_pool2d(x, 2)

    def logits(self, window):
        return self.forward(window[:, CONTEXT_RADIUS:CONTEXT_RADIUS + 1])


class Unet3D(_Unet):
    conv = nn.Conv3d
    bn = nn.BatchNorm3d
    up_mode = "trilinear"

    def _pool(self, x):
        return F.max_pool3d(x, (1, 2, 2))

    def logits(self, window):
        return self.forward(window.unsqueeze(1))[:, :, CONTEXT_RADIUS]


DEFAULT_BASE = {"unet2d": 24, "unet3d": 14}


def build_unet(kind: str, config: UnetConfig | None = None, seed: int = 0) -> _Unet:
    classes = {"unet2d": Unet2D, "unet3d": Unet3D}
    if kind not in classes:
        raise ValueError(f"unknown baseline {kind!r}")
    cfg = config or UnetConfig(base=DEFAULT_BASE[kind])
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = classes[kind](cfg)
        kaiming_init_(net, cfg.leaky_slope)
    finally:
        torch.random.set_rng_state(state)
    return net


def unet2d_forward(slices: torch.Tensor, params: Unet2D) -> torch.Tensor:
    """(batch, 1, H, W) -> (batch, classes, H, W)."""
    return params(slices)


def unet3d_forward(chunk: torch.Tensor, params: Unet3D) -> torch.Tensor:
    """(batch, 1, D, H, W) -> (batch, classes, D, H, W)."""
    return params(chunk)
