"""Analytical attention cost model and window counting."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass


def _positive(*vals: int) -> None:
    for v in vals:
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"dimensions must be positive integers, got {v!r}")


def flops_msa(h: int, w: int, d: int, C: int) -> int:
    """Global self-attention: ``4 L C^2 + 2 L^2 C`` with ``L = h w d``."""
    _positive(h, w, d, C)
    L = h * w * d
    return 4 * L * C * C + 2 * L * L * C


def flops_ibmsa(h: int, w: int, d: int, C: int, sh: int, sw: int, sd: int) -> int:
    """Window self-attention: ``4 L C^2 + 2 (S_H S_W S_D) L C``."""
    _positive(h, w, d, C, sh, sw, sd)
    L = h * w * d
    return 4 * L * C * C + 2 * sh * sw * sd * L * C


def window_counts(grid, window, shift=None) -> tuple[int, int, int]:
    """(regular, naive shifted, batched shifted) window counts."""
    _positive(*grid, *window)
    if any(g % s for g, s in zip(grid, window)):
        raise ValueError(f"grid {tuple(grid)} is not divisible by window {tuple(window)}")
    shift = tuple(s // 2 for s in window) if shift is None else tuple(shift)
    per_axis = [g // s for g, s in zip(grid, window)]
    regular = math.prod(per_axis)
    naive = math.prod(n + 1 if sh else n for n, sh in zip(per_axis, shift))
    return regular, naive, regular


@dataclass
class CostReport:
    grid: tuple[int, int, int]
    dim: int
    window: tuple[int, int, int]
    flops_msa: int
    flops_ibmsa: int
    ratio: float
    windows_regular: int
    windows_naive_shifted: int
    windows_batched_shifted: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def table(self) -> str:
        rows = [
            ("grid (h,w,d)", "x".join(map(str, self.grid))),
            ("channels C", str(self.dim)),
            ("window", "x".join(map(str, self.window))),
            ("global MSA", f"{self.flops_msa:,}"),
            ("window IB-MSA", f"{self.flops_ibmsa:,}"),
            ("ratio", f"{self.ratio:.6f}"),
            ("reduction", f"{100 * (1 - self.ratio):.2f}%"),
            ("windows regular/naive/batched",
             f"{self.windows_regular}/{self.windows_naive_shifted}/{self.windows_batched_shifted}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def cost_report(grid, dim: int, window) -> CostReport:
    grid, window = tuple(grid), tuple(window)
    msa = flops_msa(*grid, dim)
    ib = flops_ibmsa(*grid, dim, *window)
    reg, naive, batched = window_counts(grid, window)
    return CostReport(grid, dim, window, msa, ib, ib / msa, reg, naive, batched)
