"""Dual-branch segmentation network.

The main branch runs the target slice through a dense block and a
segmentation head. The attention branch feeds all 11 window slices, bottom
to top, through a ConvLSTM; its final hidden state drives a second
segmentation head and a sigmoid attention head. The two logit maps are
merged per pixel as ``s_out = s_main * alpha + s_attn * (1 - alpha)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import CONTEXT_RADIUS, WINDOW_LEN, SliceWindow


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class NetworkConfig:
    num_classes: int = 3
    in_channels: int = 1
    window_len: int = WINDOW_LEN
    dense_layers: int = 4
    dense_growth: int = 16
    lstm_hidden: int = 32
    head_channels: int = 64
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.window_len != 2 * CONTEXT_RADIUS + 1:
            raise ValueError(f"window_len must be {2 * CONTEXT_RADIUS + 1}, got {self.window_len}")
        for f in fields(self):
            if f.name != "leaky_slope" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.leaky_slope < 0:
            raise ValueError("leaky_slope must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class ForwardOutput(NamedTuple):
    s_main: torch.Tensor
    s_attn: torch.Tensor
    alpha: torch.Tensor
    s_out: torch.Tensor


def _check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite activations in {where}")
    return t


def conv_lstm_step(x, state, weight, bias):
    """One ConvLSTM update without peepholes.

    ``weight`` maps the concatenation ``[x, h]`` to the four gate
    pre-activations stacked as (input, forget, output, candidate).
    """
    _check_finite(x, "conv_lstm input")
    h, c = state
    gates = F.conv2d(torch.cat([x, h], dim=1), weight, bias, padding=weight.shape[-1] // 2)
    i, f, o, g = gates.chunk(4, dim=1)
    i, f, o, g = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o), torch.tanh(g)
    c_next = f * c + i * g
    h_next = o * torch.tanh(c_next)
    return h_next, c_next


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden: int, kernel_size: int = 3):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel_size, padding=kernel_size // 2)

    def init_state(self, x):
        b, _, h, w = x.shape
        z = x.new_zeros(b, self.hidden, h, w)
        return z, z.clone()

    def forward(self, x, state=None):
        if state is None:
            state = self.init_state(x)
        return conv_lstm_step(x, state, self.gates.weight, self.gates.bias)


class DenseBlock(nn.Module):
    """Concatenative block; each layer is BN -> LeakyReLU -> 3x3 conv."""

    def __init__(self, in_channels: int, layers: int, growth: int, slope: float):
        super().__init__()
        self.layers = nn.ModuleList()
        ch = in_channels
        for _ in range(layers):
            self.layers.append(nn.Sequential(
                nn.BatchNorm2d(ch),
                nn.LeakyReLU(slope),
                nn.Conv2d(ch, growth, 3, padding=1, bias=False),
            ))
            ch += growth
        self.out_channels = ch

    def forward(self, x):
        feats = x
        for layer in self.layers:
            feats = torch.cat([feats, layer(feats)], dim=1)
        return feats


class SegHead(nn.Module):
    """Two (3x3 conv, BN, LeakyReLU) blocks then a 1x1 conv."""

    def __init__(self, in_channels: int, width: int, out_channels: int, slope: float):
        super().__init__()
        self.in_channels = in_channels
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(slope),
            nn.Conv2d(width, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(slope),
        )
        self.final = nn.Conv2d(width, out_channels, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"head expects {self.in_channels} channels, got {x.shape[1]}")
        return self.final(self.body(x))


class AttentionHead(SegHead):
    def __init__(self, in_channels: int, width: int, slope: float):
        super().__init__(in_channels, width, 1, slope)

    def forward(self, x):
        return torch.sigmoid(super().forward(x))


class ConvLstmAttentionNet(nn.Module):
    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        cfg = config or NetworkConfig()
        self.config = cfg
        slope = cfg.leaky_slope
        self.dense = DenseBlock(cfg.in_channels, cfg.dense_layers, cfg.dense_growth, slope)
        self.main_head = SegHead(self.dense.out_channels, cfg.head_channels, cfg.num_classes, slope)
        self.stem = nn.Conv2d(cfg.in_channels, cfg.lstm_hidden, 1)
        self.lstm = ConvLSTMCell(cfg.lstm_hidden, cfg.lstm_hidden)
        self.attn_seg_head = SegHead(cfg.lstm_hidden, cfg.head_channels, cfg.num_classes, slope)
        self.attn_head = AttentionHead(cfg.lstm_hidden, cfg.head_channels, slope)

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        """``x``: (batch, window_len, H, W) normalized slices, target slice in the middle."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.window_len:
            raise ValueError(f"expected (batch, {cfg.window_len}, H, W), got {tuple(x.shape)}")
        _check_finite(x, "input")
        b, t, h, w = x.shape
        centre = x[:, CONTEXT_RADIUS:CONTEXT_RADIUS + 1]

        s_main = _check_finite(self.main_head(self.dense(centre)), "main_head")

        seq = self.stem(x.reshape(b * t, 1, h, w)).reshape(b, t, -1, h, w)
        state = self.lstm.init_state(seq[:, 0])
        for step in range(t):
            state = self.lstm(seq[:, step], state)
        hidden = _check_finite(state[0], "conv_lstm")

        s_attn = _check_finite(self.attn_seg_head(hidden), "attn_seg_head")
        alpha = _check_finite(self.attn_head(hidden), "attn_head")
        s_out = s_main * alpha + s_attn * (1 - alpha)
        return ForwardOutput(s_main, s_attn, alpha, s_out)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).s_out


def kaiming_init_(module: nn.Module, slope: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, a=slope, mode="fan_in", nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()


def init_params(config: NetworkConfig | None = None, seed: int = 0,
                pretrained_dense: dict | None = None) -> ConvLstmAttentionNet:
    """Build a network with Kaiming (fan-in, LeakyReLU gain) weights, zero biases.

    ``pretrained_dense`` optionally replaces the dense block's state dict.
    """
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = ConvLstmAttentionNet(config)
        kaiming_init_(net, net.config.leaky_slope)
    finally:
        torch.random.set_rng_state(gen_state)
    if pretrained_dense is not None:
        own = net.dense.state_dict()
        for name, tensor in pretrained_dense.items():
            if name not in own or tuple(own[name].shape) != tuple(tensor.shape):
                raise ValueError(f"pretrained dense tensor {name!r} does not match the configured block")
        net.dense.load_state_dict(pretrained_dense)
    return net


def window_tensor(window, dtype=torch.float32) -> torch.Tensor:
    if isinstance(window, SliceWindow):
        window = window.pixels
    if isinstance(window, np.ndarray):
        window = torch.from_numpy(np.ascontiguousarray(window))
    x = window.to(dtype)
    return x.unsqueeze(0) if x.ndim == 3 else x


def forward(window, params: ConvLstmAttentionNet, mode: str = "eval") -> ForwardOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = next(params.parameters()).dtype
    params.train(mode == "train")
    x = window_tensor(window, dtype)
    if mode == "eval":
        with torch.no_grad():
            return params(x)
    return params(x)


def decode(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties resolve to the lower class code."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    return np.argmax(logits, axis=-3).astype(np.uint8)


def predict_slice(window, params: ConvLstmAttentionNet) -> np.ndarray:
    return decode(forward(window, params, "eval").s_out)[0]
