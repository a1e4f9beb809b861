"""Connected-component filtering and morphological closing of binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume

MIN_COMPONENT_MM3 = 180.0


@dataclass
class ComponentLabeling:
    labels: np.ndarray  # int32, 0 = background, components 1..K
    sizes: np.ndarray  # voxels per component, index k-1 for label k
    spacing: tuple[float, float, float]

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: Volume, connectivity: int = 26) -> ComponentLabeling:
    """Label foreground components; labels follow raster order of each component's first voxel."""
    labels, k = ndimage.label(mask.values > 0, structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return ComponentLabeling(labels.astype(np.int32), sizes, mask.spacing)


def filter_small(labeling: ComponentLabeling, min_volume_mm3: float = MIN_COMPONENT_MM3) -> Volume:
    """Keep components whose physical volume is at least ``min_volume_mm3``."""
    sx, sy, sz = labeling.spacing
    keep = labeling.sizes * (sx * sy * sz) >= min_volume_mm3
    lut = np.concatenate([[False], keep])
    return Volume(lut[labeling.labels].astype(np.uint8), labeling.spacing)


def remove_small_components(mask: Volume, min_volume_mm3: float = MIN_COMPONENT_MM3,
                            connectivity: int = 26) -> Volume:
    return filter_small(connected_components(mask, connectivity), min_volume_mm3)


def morph_close(mask: Volume, radius: int = 1) -> Volume:
    """Dilation then erosion with a ``(2r+1)^3`` cube; the volume border is not treated as background."""
    if radius < 1:
        return mask.with_values((mask.values > 0).astype(np.uint8))
    pad = 2 * radius
    x = np.pad(mask.values > 0, pad, mode="constant")
    se = np.ones((2 * radius + 1,) * 3, dtype=bool)
    x = ndimage.binary_dilation(x, structure=se)
    x = ndimage.binary_erosion(x, structure=se, border_value=1)
    inner = tuple(slice(pad, -pad) for _ in range(3))
    return mask.with_values(x[inner].astype(np.uint8))
