"""Parameterized building blocks over the engine ops."""

from __future__ import annotations

import torch
from torch import nn

from . import engine
from .engine import Tensor


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_in, n_out))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return engine.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return engine.layer_norm(x, self.weight, self.bias, self.eps)


class Conv3d(nn.Module):
    """Channels-first 3D convolution, ``[B,Cin,H,W,D] -> [B,Cout,H',W',D']``."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, pad: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(c_out, c_in, kernel, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride, self.pad = stride, pad

    def forward(self, x: Tensor) -> Tensor:
        return engine.conv3d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose3d(nn.Module):
    """Transposed convolution; weight stored in the forward-conv layout ``[Cin,Cout,k,k,k]``."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, pad: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(c_in, c_out, kernel, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride, self.pad = stride, pad

    def forward(self, x: Tensor) -> Tensor:
        return engine.conv_transpose3d(x, self.weight, self.bias, self.stride, self.pad)


class ConvGeluNorm(nn.Module):
    """Convolution followed by GELU and a layer norm over channels."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, pad: int):
        super().__init__()
        self.conv = Conv3d(c_in, c_out, kernel, stride, pad)
        self.norm = LayerNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        y = engine.gelu(self.conv(x))
        return channels_first(self.norm(channels_last(y)))


def channels_last(x: Tensor) -> Tensor:
    return x.permute(0, 2, 3, 4, 1)


def channels_first(x: Tensor) -> Tensor:
    return x.permute(0, 4, 1, 2, 3)


def _fan_in(owner: nn.Module, p) -> int:
    if isinstance(owner, Linear):
        return p.shape[0]
    if isinstance(owner, ConvTranspose3d):
        # each output voxel sees (k/stride)^3 taps per input channel
        return max(1, p.shape[0] * p[0, 0].numel() // owner.stride**3)
    return p[0].numel()


def init_weights(module: nn.Module, seed: int, std: float = 0.02,
                 transformer_keys: tuple[str, ...] = (".attn.", ".mlp.", "abs_pos")) -> None:
    """Seeded initialization.

    Weights whose name contains one of ``transformer_keys`` get a truncated
    normal with ``std``; other weights (convolutions, resampling, fusion, head)
    get a fan-in scaled truncated normal so the un-normalized resampling chain
    keeps unit gain. Biases and relative-bias tables start at zero, norm
    scales at one.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
        with torch.no_grad():
            if isinstance(owner, LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf in ("bias", "rel_bias_table"):
                p.zero_()
            elif any(k in "." + name for k in transformer_keys):
                engine.trunc_normal_(p, std=std, generator=gen)
            else:
                engine.trunc_normal_(p, std=(2.0 / _fan_in(owner, p)) ** 0.5, generator=gen)
