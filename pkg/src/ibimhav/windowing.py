"""3D window partitioning, cyclic shift, shift masks and relative-position indexing.

Token grids are laid out ``[B, h, w, d, C]``. Windows and the tokens inside a
window are both enumerated in raster order (first axis slowest).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .engine import ShapeError, Tensor

MASK_VALUE = -1e4

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class WindowConfig:
    window: Triple = (4, 4, 4)
    shift: Triple = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if any(s < 1 for s in self.window):
            raise ValueError(f"window extents must be >= 1, got {self.window}")
        if self.shift is None:
            object.__setattr__(self, "shift", tuple(s // 2 for s in self.window))

    @property
    def tokens(self) -> int:
        s = self.window
        return s[0] * s[1] * s[2]


@dataclass(frozen=True)
class RelPosIndex:
    table_size: int
    index_map: np.ndarray  # [P, P] int64


def _check_divisible(grid: Triple, window: Triple) -> None:
    if any(g % s for g, s in zip(grid, window)):
        raise ShapeError(
            f"token grid {tuple(grid)} is not divisible by window {tuple(window)}; "
            "pad the grid to a multiple of the window (adaptive resize) first"
        )


def window_count(grid: Triple, window: Triple) -> int:
    _check_divisible(grid, window)
    return int(np.prod([g // s for g, s in zip(grid, window)]))


def partition_windows(t: Tensor, cfg: WindowConfig) -> Tensor:
    """``[B,h,w,d,C]`` -> ``[B*N, P, C]``."""
    B, h, w, d, C = t.shape
    sh, sw, sd = cfg.window
    _check_divisible((h, w, d), cfg.window)
    x = t.reshape(B, h // sh, sh, w // sw, sw, d // sd, sd, C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(-1, sh * sw * sd, C)


def merge_windows(ws: Tensor, grid: Triple, cfg: WindowConfig) -> Tensor:
    """Inverse of :func:`partition_windows`; returns ``[B,h,w,d,C]``."""
    h, w, d = grid
    sh, sw, sd = cfg.window
    _check_divisible(grid, cfg.window)
    n_per = (h // sh) * (w // sw) * (d // sd)
    if ws.shape[1] != sh * sw * sd or ws.shape[0] % n_per:
        raise ShapeError(
            f"cannot merge windows {tuple(ws.shape)} into grid {tuple(grid)} with window {cfg.window}"
        )
    B = ws.shape[0] // n_per
    C = ws.shape[-1]
    x = ws.reshape(B, h // sh, w // sw, d // sd, sh, sw, sd, C)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(B, h, w, d, C)


def cyclic_shift(t: Tensor, offsets: Triple) -> Tensor:
    """Toroidal roll of the grid axes; content moves by ``-offset``."""
    if not any(offsets):
        return t
    return torch.roll(t, shifts=tuple(-o for o in offsets), dims=(1, 2, 3))


def _segment_ids(n: int, size: int, shift: int) -> np.ndarray:
    # region id along one axis of the rolled grid
    ids = np.zeros(n, dtype=np.int64)
    if shift:
        ids[n - size : n - shift] = 1
        ids[n - shift :] = 2
    return ids


@lru_cache(maxsize=64)
def _shift_mask_np(grid: Triple, window: Triple, shift: Triple) -> np.ndarray:
    h, w, d = grid
    ih = _segment_ids(h, window[0], shift[0])
    iw = _segment_ids(w, window[1], shift[1])
    idd = _segment_ids(d, window[2], shift[2])
    region = ih[:, None, None] * 9 + iw[None, :, None] * 3 + idd[None, None, :]
    r = torch.from_numpy(region).reshape(1, h, w, d, 1)
    rw = partition_windows(r, WindowConfig(window, shift))[..., 0].numpy()  # [N, P]
    same = rw[:, :, None] == rw[:, None, :]
    return np.where(same, 0.0, MASK_VALUE)


def build_shift_mask(grid: Triple, cfg: WindowConfig, shifted: bool = True) -> Tensor:
    """Per-window additive mask ``[N, P, P]`` for the shifted configuration.

    Zero for token pairs that come from the same region before the roll,
    ``MASK_VALUE`` otherwise. The unshifted configuration is all zeros.
    """
    grid = tuple(int(g) for g in grid)
    _check_divisible(grid, cfg.window)
    if not shifted or not any(cfg.shift):
        n = window_count(grid, cfg.window)
        return torch.zeros(n, cfg.tokens, cfg.tokens)
    return torch.from_numpy(_shift_mask_np(grid, tuple(cfg.window), tuple(cfg.shift))).to(
        torch.get_default_dtype()
    )


def build_padding_mask(valid: Triple, grid: Triple, cfg: WindowConfig, shifted: bool) -> Tensor:
    """Additive ``[N, 1, P]`` mask hiding zero-padded tokens from every query."""
    pad = torch.ones(1, *grid, 1)
    pad[:, : valid[0], : valid[1], : valid[2]] = 0
    if shifted:
        pad = cyclic_shift(pad, cfg.shift)
    pw = partition_windows(pad, cfg)[..., 0]  # [N, P]
    return (pw * MASK_VALUE).unsqueeze(1)


def build_rel_pos_index(cfg: WindowConfig) -> RelPosIndex:
    """Map each token pair of a window to its displacement slot in the bias table.

    Entry ``[i, j]`` encodes ``coord(j) - coord(i)`` with each axis offset by
    ``S - 1`` so that it indexes a ``(2S_H-1)(2S_W-1)(2S_D-1)`` table.
    """
    sh, sw, sd = cfg.window
    coords = np.stack(np.meshgrid(np.arange(sh), np.arange(sw), np.arange(sd), indexing="ij"))
    coords = coords.reshape(3, -1)
    rel = coords[:, None, :] - coords[:, :, None]  # [3, P(i), P(j)] = c_j - c_i
    rel[0] += sh - 1
    rel[1] += sw - 1
    rel[2] += sd - 1
    nw, nd = 2 * sw - 1, 2 * sd - 1
    index = (rel[0] * nw + rel[1]) * nd + rel[2]
    return RelPosIndex((2 * sh - 1) * nw * nd, index.astype(np.int64))


def gather_bias(table: Tensor, idx: RelPosIndex) -> Tensor:
    """``table`` is ``[T, heads]``; returns the per-head bias ``[heads, P, P]``."""
    if table.shape[0] != idx.table_size:
        raise RuntimeError(
            f"bias table has {table.shape[0]} rows but index expects {idx.table_size}"
        )
    im = torch.from_numpy(idx.index_map)
    if im.numel() and (int(im.min()) < 0 or int(im.max()) >= idx.table_size):
        raise RuntimeError("relative position index out of range")
    P = im.shape[0]
    b = table[im.reshape(-1)].reshape(P, P, -1)
    return b.permute(2, 0, 1)
