"""Inductive-biased window attention and the paired 3D transformer block."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import engine
from .config import ConfigError
from .engine import Tensor
from .layers import LayerNorm, Linear
from .windowing import (
    WindowConfig,
    build_padding_mask,
    build_rel_pos_index,
    build_shift_mask,
    cyclic_shift,
    gather_bias,
    merge_windows,
    partition_windows,
)

POSITION_MODES = ("absolute_only", "relative_only", "inductive_biased")


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    mode: str = "inductive_biased"
    window: WindowConfig = field(default_factory=WindowConfig)

    def __post_init__(self):
        if self.mode not in POSITION_MODES:
            raise ConfigError(f"unknown position mode {self.mode!r}; expected one of {POSITION_MODES}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def uses_absolute(self) -> bool:
        return self.mode in ("absolute_only", "inductive_biased")

    @property
    def uses_relative(self) -> bool:
        return self.mode in ("relative_only", "inductive_biased")


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
              mask: Tensor | None = None, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d) + bias + mask) v`` over the last two axes."""
    logits = engine.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = logits + mask
    weights = engine.softmax_lastdim(logits)
    out = engine.matmul(weights, v)
    return (out, weights) if return_weights else out


class IBMSA(nn.Module):
    """Multi-head self-attention over windows with the selected position encoding."""

    def __init__(self, cfg: AttentionConfig, with_absolute: bool = True):
        super().__init__()
        self.cfg = cfg
        P = cfg.window.tokens
        self.qkv = Linear(cfg.dim, 3 * cfg.dim)
        self.proj = Linear(cfg.dim, cfg.dim)
        self.rel_index = build_rel_pos_index(cfg.window)
        if cfg.uses_relative:
            self.rel_bias_table = nn.Parameter(torch.zeros(self.rel_index.table_size, cfg.heads))
        else:
            self.rel_bias_table = None
        if cfg.uses_absolute and with_absolute:
            self.abs_pos = nn.Parameter(torch.zeros(P, cfg.dim))
        else:
            self.abs_pos = None

    def relative_bias(self) -> Tensor | None:
        if self.rel_bias_table is None:
            return None
        return gather_bias(self.rel_bias_table, self.rel_index)

    def forward(self, ws: Tensor, mask: Tensor | None = None) -> Tensor:
        """``ws`` is ``[B*N, P, C]``; ``mask`` broadcasts to ``[B*N, heads, P, P]``."""
        Bn, P, C = ws.shape
        if C != self.cfg.dim:
            raise ConfigError(f"token dim {C} does not match attention dim {self.cfg.dim}")
        if self.abs_pos is not None:
            ws = ws + self.abs_pos
        h, d = self.cfg.heads, self.cfg.head_dim
        qkv = self.qkv(ws).reshape(Bn, P, 3, h, d).permute(2, 0, 3, 1, 4)
        bias = self.relative_bias()
        out = attention(qkv[0], qkv[1], qkv[2], bias, mask)
        out = out.transpose(1, 2).reshape(Bn, P, C)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = Linear(dim, ratio * dim)
        self.fc2 = Linear(ratio * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(engine.gelu(self.fc1(x)))


def _pad_to_window(t: Tensor, window) -> tuple[Tensor, tuple[int, int, int]]:
    grid = tuple(t.shape[1:4])
    pads = [(-g) % s for g, s in zip(grid, window)]
    if any(pads):
        t = F.pad(t, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
    return t, grid


class SwinBlock(nn.Module):
    """Pre-norm attention and MLP sub-blocks, each with a residual."""

    def __init__(self, cfg: AttentionConfig, shifted: bool, mlp_ratio: int = 4,
                 with_absolute: bool = True):
        super().__init__()
        self.cfg = cfg
        self.shifted = shifted and any(cfg.window.shift)
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = IBMSA(cfg, with_absolute)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = MLP(cfg.dim, mlp_ratio)

    def window_attention(self, x: Tensor) -> Tensor:
        """Windowed (optionally shifted) attention over a ``[B,h,w,d,C]`` grid."""
        wcfg = self.cfg.window
        B = x.shape[0]
        x, valid = _pad_to_window(x, wcfg.window)
        grid = tuple(x.shape[1:4])
        if self.shifted:
            x = cyclic_shift(x, wcfg.shift)
        mask = None
        if self.shifted or valid != grid:
            mask = build_shift_mask(grid, wcfg, self.shifted).to(x.dtype)  # [N,P,P]
            if valid != grid:
                mask = mask + build_padding_mask(valid, grid, wcfg, self.shifted).to(x.dtype)
            mask = mask.unsqueeze(1).repeat(B, 1, 1, 1)  # [B*N,1,P,P]
        ws = self.attn(partition_windows(x, wcfg), mask)
        x = merge_windows(ws, grid, wcfg)
        if self.shifted:
            x = cyclic_shift(x, tuple(-s for s in wcfg.shift))
        return x[:, : valid[0], : valid[1], : valid[2]]

    def forward(self, t: Tensor) -> Tensor:
        t = t + self.window_attention(self.norm1(t))
        return t + self.mlp(self.norm2(t))


class TransformerBlockPair(nn.Module):
    """Regular-window block followed by a shifted-window block."""

    def __init__(self, cfg: AttentionConfig, mlp_ratio: int = 4, absolute_in: tuple[bool, bool] = (True, True)):
        super().__init__()
        self.regular = SwinBlock(cfg, False, mlp_ratio, absolute_in[0])
        self.shifted = SwinBlock(cfg, True, mlp_ratio, absolute_in[1])

    def forward(self, t: Tensor) -> Tensor:
        return self.shifted(self.regular(t))
