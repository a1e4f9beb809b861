"""U-shaped window-attention segmentation network for volumetric patches."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import engine
from .attention import AttentionConfig, TransformerBlockPair
from .config import ModelConfig
from .engine import ShapeError, Tensor
from .layers import (
    ConvGeluNorm,
    ConvTranspose3d,
    Conv3d,
    Linear,
    channels_first,
    channels_last,
    init_weights,
)
from .windowing import WindowConfig

LEVELS = 3


@dataclass(frozen=True)
class StagePlan:
    grids: tuple[tuple[int, int, int], ...]  # encoder levels then bottleneck
    channels: tuple[int, ...]
    encoder_pairs: tuple[int, int, int]
    decoder_pairs: tuple[int, int, int]
    skips: tuple[tuple[int, int], ...]  # (encoder level, decoder level)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "StagePlan":
        g = tuple(p // 4 for p in cfg.patch)
        grids = tuple(tuple(x // 2**lvl for x in g) for lvl in range(LEVELS + 1))
        channels = tuple(cfg.embed_dim * 2**lvl for lvl in range(LEVELS + 1))
        pairs = cfg.stage_pairs()
        return cls(grids, channels, pairs, pairs, tuple((i, i) for i in range(LEVELS)))


class PatchEmbed(nn.Module):
    """Two stride-2 convolutions (each + GELU + LN) and a linear projection.

    ``[B,1,H,W,D] -> [B,H/4,W/4,D/4,C]``.
    """

    def __init__(self, dim: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = ConvGeluNorm(1, dim // 2, kernel, 2, pad)
        self.conv2 = ConvGeluNorm(dim // 2, dim, kernel, 2, pad)
        self.proj = Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        if any(s % 4 for s in x.shape[2:]):
            raise ShapeError(f"patch extents {tuple(x.shape[2:])} must be divisible by 4")
        return self.proj(channels_last(self.conv2(self.conv1(x))))


def _check_even(t: Tensor) -> None:
    if any(s % 2 for s in t.shape[1:4]):
        raise ShapeError(f"cannot halve token grid {tuple(t.shape[1:4])}: odd extent")


class ConvDownsample(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = ConvGeluNorm(dim, 2 * dim, 2, 2, 0)

    def forward(self, t: Tensor) -> Tensor:
        _check_even(t)
        return channels_last(self.block(channels_first(t)))


class PatchMerge3D(nn.Module):
    """Concatenate each 2x2x2 neighbourhood (8C) and project to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduce = Linear(8 * dim, 2 * dim)

    def forward(self, t: Tensor) -> Tensor:
        _check_even(t)
        B, h, w, d, C = t.shape
        x = t.reshape(B, h // 2, 2, w // 2, 2, d // 2, 2, C).permute(0, 1, 3, 5, 2, 4, 6, 7)
        return self.reduce(x.reshape(B, h // 2, w // 2, d // 2, 8 * C))


class TransposedConvUpsample(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.up = ConvTranspose3d(dim, dim // 2, 2, 2, 0)

    def forward(self, t: Tensor) -> Tensor:
        return channels_last(self.up(channels_first(t)))


class TrilinearUpsample(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.reduce = Linear(dim, dim // 2)

    def forward(self, t: Tensor) -> Tensor:
        x = F.interpolate(channels_first(t), scale_factor=2, mode="trilinear", align_corners=False)
        return self.reduce(channels_last(x))


class PatchExpand(nn.Module):
    """Project to 4C and unfold into a 2x2x2 neighbourhood of C/2 tokens."""

    def __init__(self, dim: int):
        super().__init__()
        self.expand = Linear(dim, 4 * dim)

    def forward(self, t: Tensor) -> Tensor:
        B, h, w, d, C = t.shape
        x = self.expand(t).reshape(B, h, w, d, 2, 2, 2, C // 2)
        x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
        return x.reshape(B, 2 * h, 2 * w, 2 * d, C // 2)


DOWNSAMPLERS = {"conv_stride2": ConvDownsample, "patch_merge_3d": PatchMerge3D}
UPSAMPLERS = {
    "transposed_conv": TransposedConvUpsample,
    "trilinear": TrilinearUpsample,
    "patch_expand": PatchExpand,
}


def downsample(mode: str, dim: int) -> nn.Module:
    return DOWNSAMPLERS[mode](dim)


def upsample(mode: str, dim: int) -> nn.Module:
    return UPSAMPLERS[mode](dim)


class LocalFeaturePath(nn.Module):
    """Full-resolution large-kernel convolutions, ``[B,1,H,W,D] -> [B,c,H,W,D]``."""

    def __init__(self, channels: int = 16, kernel: int = 5):
        super().__init__()
        pad = kernel // 2
        self.conv1 = ConvGeluNorm(1, channels, kernel, 1, pad)
        self.conv2 = ConvGeluNorm(channels, channels, kernel, 1, pad)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class IBIMHAVNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.plan = plan = StagePlan.from_config(cfg)
        wcfg = WindowConfig(cfg.window)
        first_abs = [True]

        def pairs(n: int, level: int) -> nn.ModuleList:
            acfg = AttentionConfig(plan.channels[level], cfg.heads[level], cfg.position, wcfg)
            out = nn.ModuleList()
            for _ in range(n):
                if cfg.abs_every_block:
                    absolute = (True, True)
                else:
                    absolute = (first_abs[0], False)
                    first_abs[0] = False
                out.append(TransformerBlockPair(acfg, cfg.mlp_ratio, absolute))
            return out

        self.embed = PatchEmbed(cfg.embed_dim, cfg.embed_kernel)
        self.encoder = nn.ModuleList(pairs(n, lvl) for lvl, n in enumerate(plan.encoder_pairs))
        self.down = nn.ModuleList(
            downsample(cfg.downsample, plan.channels[lvl]) for lvl in range(LEVELS)
        )
        self.bottleneck = pairs(1, LEVELS)
        self.up = nn.ModuleList(
            upsample(cfg.upsample, plan.channels[lvl + 1]) for lvl in range(LEVELS)
        )
        self.fuse = nn.ModuleList(
            Linear(2 * plan.channels[lvl], plan.channels[lvl]) for lvl in range(LEVELS)
        )
        self.decoder = nn.ModuleList(pairs(n, lvl) for lvl, n in enumerate(plan.decoder_pairs))
        C = cfg.embed_dim
        self.final_up = nn.ModuleList([upsample(cfg.upsample, C), upsample(cfg.upsample, C // 2)])
        self.local = LocalFeaturePath(cfg.local_channels, cfg.local_kernel) if cfg.local_path else None
        head_in = C // 4 + (cfg.local_channels if cfg.local_path else 0)
        self.head = Conv3d(head_in, cfg.num_classes, 1)
        init_weights(self, cfg.seed)

    def logits(self, x: Tensor) -> Tensor:
        """``[B,1,H,W,D]`` -> class logits ``[B,2,H,W,D]``; channel 0 is vessel."""
        if tuple(x.shape[2:]) != self.cfg.patch or x.shape[1] != 1:
            raise ShapeError(
                f"input {tuple(x.shape)} does not match configured patch [B,1,{self.cfg.patch}]"
            )
        t = self.embed(x)
        skips = []
        for lvl in range(LEVELS):
            for blk in self.encoder[lvl]:
                t = blk(t)
            skips.append(t)
            t = self.down[lvl](t)
        for blk in self.bottleneck:
            t = blk(t)
        for lvl in reversed(range(LEVELS)):
            t = self.up[lvl](t)
            t = self.fuse[lvl](torch.cat([t, skips[lvl]], dim=-1))
            for blk in self.decoder[lvl]:
                t = blk(t)
        for up in self.final_up:
            t = up(t)
        feats = channels_first(t)
        if self.local is not None:
            feats = torch.cat([feats, self.local(x)], dim=1)
        return self.head(feats)

    def forward(self, x: Tensor) -> Tensor:
        """Per-voxel class probabilities ``[B,2,H,W,D]``."""
        return probabilities(self.logits(x))


def probabilities(logits: Tensor) -> Tensor:
    return channels_first(engine.softmax_lastdim(channels_last(logits)))


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_model(model: IBIMHAVNet, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "model_config.json").write_text(json.dumps(model.cfg.to_dict(), indent=1))
    engine.save_tensors(dict(model.named_parameters()), directory / "params.json")


def load_model(directory: str | Path) -> IBIMHAVNet:
    directory = Path(directory)
    cfg = ModelConfig(**json.loads((directory / "model_config.json").read_text()))
    model = IBIMHAVNet(cfg)
    tensors = engine.load_tensors(directory / "params.json")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise ValueError(f"checkpoint {directory} lacks parameter {name}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.copy_(tensors[name])
    return model
