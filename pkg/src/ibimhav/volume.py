"""Volumes, the RVOL file format, preprocessing, augmentation and patch grids."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .engine import ShapeError

HU_RANGE = (-50.0, 250.0)
TARGET_EXTENTS = (256, 256, 192)
ROTATIONS = {"none": 0.0, "rot60": 60.0, "rot270": 270.0}
MAX_TRANSLATION = 25

_RVOL_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    """Malformed RVOL file."""


class DegenerateError(ValueError):
    """Input has no usable content (empty ROI, constant intensities)."""


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.values.ndim != 3:
            raise ShapeError(f"volume must be 3-D, got shape {self.values.shape}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_values(self, values: np.ndarray) -> "Volume":
        return Volume(values, self.spacing)

    def is_mask(self) -> bool:
        return bool(np.isin(self.values, (0, 1)).all())


@dataclass
class CaseRecord:
    image: Volume
    liver_mask: Volume
    vessel_mask: Volume
    case_id: str = "case"

    def __post_init__(self):
        vols = (self.image, self.liver_mask, self.vessel_mask)
        if len({v.extents for v in vols}) != 1 or len({v.spacing for v in vols}) != 1:
            raise ShapeError(
                f"case {self.case_id}: image/liver/vessel extents or spacing differ: "
                f"{[(v.extents, v.spacing) for v in vols]}"
            )


# ---------------------------------------------------------------------------
# RVOL I/O
# ---------------------------------------------------------------------------


def save_volume(v: Volume, path: str | Path, dtype: str | None = None) -> None:
    """Write ``RVOL1 H W D sx sy sz dtype\\n`` then little-endian x-fastest scalars."""
    if dtype is None:
        dtype = "u8" if v.values.dtype in (np.uint8, np.bool_) else "f32"
    if dtype not in _RVOL_DTYPES:
        raise FormatError(f"unsupported RVOL dtype {dtype!r}")
    H, W, D = v.extents
    sx, sy, sz = (repr(s) for s in v.spacing)
    header = f"RVOL1 {H} {W} {D} {sx} {sy} {sz} {dtype}\n".encode("ascii")
    payload = np.asarray(v.values).astype(_RVOL_DTYPES[dtype]).ravel(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path: str | Path) -> Volume:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: no header line terminator (byte 0..{len(data)})")
    try:
        fields = data[:nl].decode("ascii").split()
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: non-ASCII header at byte {e.start}") from None
    if len(fields) != 8 or fields[0] != "RVOL1":
        raise FormatError(f"{path}: malformed header at byte 0: {data[:nl]!r}")
    try:
        H, W, D = (int(f) for f in fields[1:4])
        spacing = tuple(float(f) for f in fields[4:7])
    except ValueError:
        raise FormatError(f"{path}: malformed header at byte 0: {data[:nl]!r}") from None
    dtype = fields[7]
    if dtype not in _RVOL_DTYPES:
        raise FormatError(f"{path}: unknown dtype {dtype!r} in header")
    if min(H, W, D) < 1:
        raise FormatError(f"{path}: non-positive extents {(H, W, D)}")
    dt = _RVOL_DTYPES[dtype]
    expected = H * W * D * dt.itemsize
    payload = data[nl + 1 :]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes from byte {nl + 1} but header "
            f"{(H, W, D)} {dtype} needs {expected}"
        )
    arr = np.frombuffer(payload, dtype=dt).reshape((H, W, D), order="F")
    values = arr.astype(np.uint8) if dtype == "u8" else arr.astype(np.float64)
    try:
        return Volume(values, spacing)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def clamp_hu(v: Volume, lo: float = HU_RANGE[0], hi: float = HU_RANGE[1]) -> Volume:
    if not lo < hi:
        raise ValueError(f"clamp range must satisfy lo < hi, got [{lo}, {hi}]")
    return v.with_values(np.clip(v.values, lo, hi))


def bounding_box(mask: np.ndarray) -> tuple[slice, slice, slice]:
    idx = np.nonzero(mask)
    if idx[0].size == 0:
        raise DegenerateError("liver mask is empty; cannot crop a region of interest")
    return tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)


def _sample_coords(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel aligned source coordinate for each output index
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_linear(values: np.ndarray, target) -> np.ndarray:
    if tuple(values.shape) == tuple(target):
        return values.astype(np.float64, copy=True)
    axes = [_sample_coords(n, t) for n, t in zip(values.shape, target)]
    grid = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(values.astype(np.float64), grid, order=1, mode="nearest")


def resize_nearest(values: np.ndarray, target) -> np.ndarray:
    idx = [
        np.clip(np.floor((np.arange(t) + 0.5) * (n / t)).astype(np.int64), 0, n - 1)
        for n, t in zip(values.shape, target)
    ]
    return values[np.ix_(*idx)]


def crop_resize_roi(c: CaseRecord, target=TARGET_EXTENTS) -> CaseRecord:
    """Crop to the liver bounding box and resize to ``target``.

    Spacing is rescaled so physical size is preserved.
    """
    box = bounding_box(c.liver_mask.values)
    img = c.image.values[box]
    liver = c.liver_mask.values[box]
    vessel = c.vessel_mask.values[box]
    spacing = tuple(
        s * n / t for s, n, t in zip(c.image.spacing, img.shape, target)
    )
    return CaseRecord(
        Volume(resize_linear(img, target), spacing),
        Volume(resize_nearest(liver, target), spacing),
        Volume(resize_nearest(vessel, target), spacing),
        c.case_id,
    )


def supplement_vessel_mask(vessel: Volume, liver: Volume) -> Volume:
    """Training label: the full vessel mask, including voxels outside the liver."""
    if vessel.extents != liver.extents:
        raise ShapeError(f"vessel {vessel.extents} and liver {liver.extents} extents differ")
    return vessel.with_values((vessel.values > 0).astype(np.uint8))


def restrict_to_liver(vessel: Volume, liver: Volume) -> Volume:
    """Vessel voxels inside the liver only (the unsupplemented ground truth)."""
    if vessel.extents != liver.extents:
        raise ShapeError(f"vessel {vessel.extents} and liver {liver.extents} extents differ")
    return vessel.with_values(((vessel.values > 0) & (liver.values > 0)).astype(np.uint8))


def normalize_zscore(v: Volume) -> Volume:
    x = v.values.astype(np.float64)
    mu = x.mean()
    sd = x.std()
    if not sd > 0:
        raise DegenerateError("cannot normalize a constant volume")
    return v.with_values((x - mu) / sd)


def preprocess_case(
    c: CaseRecord, target=TARGET_EXTENTS, hu_range=HU_RANGE
) -> tuple[CaseRecord, Volume]:
    """Crop/resize, clamp, supplement, normalize.

    Returns the processed case (vessel mask supplemented) and the liver-restricted
    vessel mask for evaluation.
    """
    c = crop_resize_roi(c, target)
    image = clamp_hu(c.image, *hu_range)
    label = supplement_vessel_mask(c.vessel_mask, c.liver_mask)
    truth = restrict_to_liver(c.vessel_mask, c.liver_mask)
    image = normalize_zscore(image)
    liver = c.liver_mask.with_values((c.liver_mask.values > 0).astype(np.uint8))
    return CaseRecord(image, liver, label, c.case_id), truth


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _shift_fill(x: np.ndarray, tx: int, ty: int, fill) -> np.ndarray:
    out = np.full_like(x, fill)
    H, W = x.shape[:2]
    src_x = slice(max(0, -tx), min(H, H - tx))
    dst_x = slice(max(0, tx), min(H, H + tx))
    src_y = slice(max(0, -ty), min(W, W - ty))
    dst_y = slice(max(0, ty), min(W, W + ty))
    if src_x.start < src_x.stop and src_y.start < src_y.stop:
        out[dst_x, dst_y] = x[src_x, src_y]
    return out


def rotate_volume(v: Volume, angle: float, is_mask: bool) -> Volume:
    """In-plane rotation about the axial (third) axis, keeping extents."""
    if angle % 360 == 0:
        return v.with_values(v.values.copy())
    if is_mask:
        out = ndimage.rotate(v.values.astype(np.uint8), angle, axes=(0, 1), reshape=False,
                             order=0, mode="constant", cval=0)
        return v.with_values((out > 0).astype(np.uint8))
    fill = float(v.values.min())
    out = ndimage.rotate(v.values.astype(np.float64), angle, axes=(0, 1), reshape=False,
                         order=1, mode="constant", cval=fill)
    return v.with_values(out)


def augment_case(
    c: CaseRecord,
    mode: str | float = "none",
    translate: tuple[int, int] | None = (0, 0),
    seed: int = 0,
) -> CaseRecord:
    """Rotate about the axial axis then translate in-plane by whole voxels.

    ``mode`` is one of ``none``/``rot60``/``rot270`` or an angle in degrees.
    ``translate=None`` draws a translation in ``[-25, 25]`` from ``seed``.
    """
    angle = ROTATIONS[mode] if isinstance(mode, str) else float(mode)
    if translate is None:
        rng = np.random.default_rng(seed)
        translate = tuple(int(t) for t in rng.integers(-MAX_TRANSLATION, MAX_TRANSLATION + 1, 2))
    tx, ty = (int(t) for t in translate)
    if abs(tx) > MAX_TRANSLATION or abs(ty) > MAX_TRANSLATION:
        raise ValueError(f"translation {translate} outside +/-{MAX_TRANSLATION} voxels")
    image = rotate_volume(c.image, angle, is_mask=False)
    liver = rotate_volume(c.liver_mask, angle, is_mask=True)
    vessel = rotate_volume(c.vessel_mask, angle, is_mask=True)
    fill = float(c.image.values.min())
    image = image.with_values(_shift_fill(image.values, tx, ty, fill))
    liver = liver.with_values(_shift_fill(liver.values, tx, ty, 0))
    vessel = vessel.with_values(_shift_fill(vessel.values, tx, ty, 0))
    return CaseRecord(image, liver, vessel, c.case_id)


# ---------------------------------------------------------------------------
# patch grid
# ---------------------------------------------------------------------------


def axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    """Origins ``0, stride, ...`` with the last one moved to ``extent - patch``.

    The last regular origin is replaced by the boundary origin when the
    previous patch still reaches it, otherwise the boundary origin is appended.
    """
    if patch > extent:
        raise ShapeError(f"patch {patch} exceeds volume extent {extent}")
    if stride < 1 or (stride > patch and patch < extent):
        raise ValueError(f"stride {stride} must lie in [1, patch={patch}] to cover every voxel")
    last = extent - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        if len(origins) > 1 and origins[-2] + patch >= last:
            origins[-1] = last
        else:
            origins.append(last)
    return origins


def sliding_window_grid(extents, patch=(128, 128, 96), stride: int = 24) -> list[tuple[int, int, int]]:
    if len(extents) != 3 or len(patch) != 3:
        raise ShapeError("extents and patch must be 3-D")
    per_axis = [axis_origins(e, p, stride) for e, p in zip(extents, patch)]
    return [(x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]]


def random_crop_origin(extents, patch, rng: np.random.Generator) -> tuple[int, int, int]:
    if any(p > e for p, e in zip(patch, extents)):
        raise ShapeError(f"crop {tuple(patch)} exceeds extents {tuple(extents)}")
    return tuple(int(rng.integers(0, e - p + 1)) for e, p in zip(extents, patch))


def crop(values: np.ndarray, origin, patch) -> np.ndarray:
    return values[tuple(slice(o, o + p) for o, p in zip(origin, patch))]

