"""Dense tensor operations with reverse-mode gradients.

The ops here are thin, shape-checked wrappers over :mod:`torch` so the rest of
the package has one place that defines conventions (weight layouts,
cross-correlation convolutions, exact-erf GELU) and one place that tallies
multiply-accumulates for the cost model.
"""

from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

DTYPES = {"f32": torch.float32, "f64": torch.float64}
_NP_DTYPES = {"f32": "<f4", "f64": "<f8"}


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check meets non-finite values."""


# ---------------------------------------------------------------------------
# multiply-accumulate tally
# ---------------------------------------------------------------------------

_mac_tally: list[int] | None = None


@contextlib.contextmanager
def count_macs() -> Iterator[list[int]]:
    """Tally multiply-accumulates of ``linear`` and ``matmul`` inside the block.

    Yields a one-element list whose entry is the running total.
    """
    global _mac_tally
    outer = _mac_tally
    _mac_tally = [0]
    try:
        yield _mac_tally
    finally:
        inner = _mac_tally[0]
        _mac_tally = outer
        if outer is not None:
            outer[0] += inner


def _tally(n: int) -> None:
    if _mac_tally is not None:
        _mac_tally[0] += int(n)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` on the last axis. ``w`` is laid out ``[in, out]``."""
    if w.dim() != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"linear: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)}"
        )
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {tuple(b.shape)} does not match weight {tuple(w.shape)}")
    _tally(x.numel() // w.shape[0] * w.shape[0] * w.shape[1])
    y = x @ w
    return y + b if b is not None else y


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product, counted toward the multiply-accumulate tally."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    out = a @ b
    _tally(out.numel() * a.shape[-1])
    return out


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x, approximate="none")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: affine {tuple(gamma.shape)} does not match channels {x.shape[-1]}"
        )
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return xc / torch.sqrt(var + eps) * gamma + beta


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def _conv_operands(x: Tensor, w: Tensor) -> tuple[Tensor, bool]:
    if w.dim() != 5:
        raise ShapeError(f"conv weight must be 5-D, got {tuple(w.shape)}")
    if x.dim() == 4:
        return x.unsqueeze(0), True
    if x.dim() == 5:
        return x, False
    raise ShapeError(f"conv input must be [C,H,W,D] or [B,C,H,W,D], got {tuple(x.shape)}")


def conv3d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Cross-correlation. ``x`` is ``[C,H,W,D]`` or batched, ``w`` is ``[Cout,Cin,k,k,k]``."""
    xb, squeeze = _conv_operands(x, w)
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    for n, k in zip(xb.shape[2:], w.shape[2:]):
        if n + 2 * pad < k:
            raise ShapeError(
                f"conv3d: kernel {tuple(w.shape[2:])} larger than padded input "
                f"{tuple(s + 2 * pad for s in xb.shape[2:])}"
            )
    y = F.conv3d(xb, w, b, stride=stride, padding=pad)
    return y[0] if squeeze else y


def conv_transpose3d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Adjoint of :func:`conv3d` for the same ``w`` (``[Cout,Cin,k,k,k]`` of the forward conv).

    The result has ``Cin`` channels and extent ``(n-1)*stride - 2*pad + k``.
    """
    xb, squeeze = _conv_operands(x, w)
    if xb.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    for n, k in zip(xb.shape[2:], w.shape[2:]):
        if (n - 1) * stride - 2 * pad + k < 1:
            raise ShapeError(f"conv_transpose3d: empty output for extent {n}, kernel {k}")
    y = F.conv_transpose3d(xb, w, b, stride=stride, padding=pad)
    return y[0] if squeeze else y


def conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# precision and init
# ---------------------------------------------------------------------------


def set_precision(name: str) -> None:
    """Select the default floating dtype: ``"f32"`` for training, ``"f64"`` for checks."""
    torch.set_default_dtype(DTYPES[name])


def trunc_normal_(t: Tensor, std: float = 0.02, generator: torch.Generator | None = None) -> Tensor:
    return torch.nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)


def set_threads(n: int) -> None:
    torch.set_num_threads(n)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-4,
    floor: float = 1e-5,
) -> float:
    """Worst relative error between autograd and central differences.

    ``f`` is called with ``x`` when ``x`` is a single tensor, otherwise with no
    arguments (the tensors are perturbed in place, e.g. module parameters).
    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    single = isinstance(x, Tensor)
    leaves = [x] if single else list(x)
    for t in leaves:
        if t.dtype != torch.float64:
            raise GradCheckError(f"grad_check needs float64 tensors, got {t.dtype}")

    def call() -> Tensor:
        return f(leaves[0]) if single else f()  # type: ignore[call-arg]

    for t in leaves:
        t.grad = None
        t.requires_grad_(True)
    out = call()
    if out.numel() != 1:
        raise GradCheckError(f"grad_check: function must return a scalar, got {tuple(out.shape)}")
    if not torch.isfinite(out):
        raise GradCheckError(f"grad_check: non-finite function value {out.item()}")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, a in zip(leaves, analytic):
            a = torch.zeros_like(t) if a is None else a
            if not torch.isfinite(a).all():
                raise GradCheckError("grad_check: non-finite analytic gradient")
            flat = t.view(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = call().item()
                flat[i] = orig - step
                fm = call().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise GradCheckError(f"grad_check: non-finite value at entry {i}")
                num = (fp - fm) / (2 * step)
                ana = a_flat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: manifest.json + little-endian blob
# ---------------------------------------------------------------------------


def save_tensors(tensors: dict[str, Tensor], manifest_path: str | Path) -> None:
    """Write ``tensors`` as a JSON manifest plus a raw ``.bin`` blob beside it."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, t in tensors.items():
            t = t.detach().cpu()
            if t.dtype == torch.float32:
                dtype = "f32"
            elif t.dtype == torch.float64:
                dtype = "f64"
            else:
                raise TypeError(f"unsupported dtype {t.dtype} for {name}")
            raw = t.numpy().astype(_NP_DTYPES[dtype], copy=False).tobytes(order="C")
            fh.write(raw)
            entries.append(
                {"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset}
            )
            offset += len(raw)
    manifest = {"blob": blob_path.name, "tensors": entries}
    manifest_path.write_text(json.dumps(manifest, indent=1))


def load_tensors(manifest_path: str | Path) -> dict[str, Tensor]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_NP_DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + n * dt.itemsize
        if end > len(blob):
            raise ValueError(f"{manifest_path}: tensor {e['name']} overruns blob at byte {end}")
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out
