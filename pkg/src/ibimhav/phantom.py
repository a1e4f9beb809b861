"""Synthetic branching-tube phantoms standing in for contrast CT liver cases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import CaseRecord, Volume


@dataclass
class PhantomSpec:
    extents: tuple[int, int, int] = (32, 32, 32)
    tubes: int = 3
    radius_range: tuple[float, float] = (1.5, 3.0)
    segments: int = 3
    branches: int = 1
    liver_hu: float = 100.0
    outside_hu: float = -100.0
    contrast: float = 120.0
    noise: float = 15.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(self.extents)
        self.spacing = tuple(self.spacing)
        if min(self.radius_range) < 1:
            raise ValueError(f"tube radii must be >= 1 voxel, got {self.radius_range}")
        if self.tubes < 0 or self.segments < 1:
            raise ValueError("tubes must be >= 0 and segments >= 1")


def _voxel_centers(shape) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"), -1)


def sweep_segment(shape, p0, p1, r0: float, r1: float, centers=None) -> np.ndarray:
    """Voxels within the linearly varying radius of segment ``p0 -> p1``."""
    c = _voxel_centers(shape) if centers is None else centers
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    seg = p1 - p0
    L2 = float(seg @ seg)
    if L2 == 0:
        t = np.zeros(shape)
    else:
        t = np.clip(((c - p0) @ seg) / L2, 0.0, 1.0)
    closest = p0 + t[..., None] * seg
    dist = np.linalg.norm(c - closest, axis=-1)
    return dist <= r0 + (r1 - r0) * t


def ellipsoid(shape, center, semi_axes) -> np.ndarray:
    c = _voxel_centers(shape)
    q = ((c - np.asarray(center)) / np.asarray(semi_axes)) ** 2
    return q.sum(-1) <= 1.0


def _random_direction(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def generate_phantom(spec: PhantomSpec, case_id: str | None = None) -> CaseRecord:
    rng = np.random.default_rng(spec.seed)
    shape = spec.extents
    ext = np.asarray(shape, dtype=np.float64)
    center = (ext - 1) / 2
    centers = _voxel_centers(shape)
    liver = ellipsoid(shape, center, 0.42 * ext)
    vessel = np.zeros(shape, dtype=bool)
    step = ext.min() / (spec.segments + 1)
    rmin, rmax = spec.radius_range

    def grow(start, direction, radius, n_seg):
        p = start
        d = direction
        joints = []
        for _ in range(n_seg):
            d = d + 0.6 * _random_direction(rng)
            d /= np.linalg.norm(d)
            q = np.clip(p + step * d, 0, ext - 1)
            r_end = max(rmin, radius * rng.uniform(0.75, 1.0))
            vessel[...] |= sweep_segment(shape, p, q, radius, r_end, centers)
            joints.append((q, d, r_end))
            p, radius = q, r_end
        return joints

    for _ in range(spec.tubes):
        start = center + rng.uniform(-0.3, 0.3, 3) * ext
        joints = grow(start, _random_direction(rng), rng.uniform(rmin, rmax), spec.segments)
        for _ in range(spec.branches):
            q, d, r = joints[int(rng.integers(len(joints)))]
            side = np.cross(d, _random_direction(rng))
            side /= np.linalg.norm(side) + 1e-12
            grow(q, side, max(rmin, 0.8 * r), max(1, spec.segments - 1))

    image = np.where(liver, spec.liver_hu, spec.outside_hu)
    image = image + spec.contrast * vessel + rng.normal(0.0, spec.noise, shape)
    cid = case_id or f"phantom{spec.seed}"
    return CaseRecord(
        Volume(image.astype(np.float64), spec.spacing),
        Volume(liver.astype(np.uint8), spec.spacing),
        Volume(vessel.astype(np.uint8), spec.spacing),
        cid,
    )
