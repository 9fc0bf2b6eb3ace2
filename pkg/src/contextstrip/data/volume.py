"""In-memory volumes, intensity normalization and coronal slice sampling.

The coronal axis is the second voxel axis (Y) of the stored grid, so a
coronal slice of an X,Y,Z volume is ``grid[:, y, :]`` with H = X and W = Z.
NIfTI orientation matrices are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ..losses import class_presence_labels

CORONAL_AXIS = 1


@dataclass
class Volume:
    intensities: np.ndarray  # X,Y,Z float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mask: Optional[np.ndarray] = None  # X,Y,Z uint8 in {0,1}
    subject_id: str = "subject"

    def __post_init__(self):
        self.intensities = np.ascontiguousarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3:
            raise ValueError(f"{self.subject_id}: intensities must be 3-D, got shape {self.intensities.shape}")
        if not np.isfinite(self.intensities).all():
            raise ValueError(f"{self.subject_id}: intensities contain non-finite values")
        if len(self.spacing) != 3:
            raise ValueError(f"{self.subject_id}: spacing needs 3 entries, got {self.spacing}")
        # stored as float32 on disk; keep the in-memory value identical
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != self.intensities.shape:
                raise ValueError(f"{self.subject_id}: mask extents {mask.shape} != intensity extents "
                                 f"{self.intensities.shape}")
            if not np.isin(mask, (0, 1)).all():
                raise ValueError(f"{self.subject_id}: mask labels must be 0 or 1")
            self.mask = np.ascontiguousarray(mask, dtype=np.uint8)

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape)

    @property
    def coronal_count(self) -> int:
        return self.intensities.shape[CORONAL_AXIS]


def normalize_volume(volume: Volume, low: float = 1.0, high: float = 99.0) -> Volume:
    """Clip to the [low, high] percentiles, then rescale linearly to [0, 1]."""
    data = volume.intensities.astype(np.float64)
    lo, hi = np.percentile(data, [low, high])
    if hi <= lo:
        scaled = np.zeros_like(data)
    else:
        scaled = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return Volume(scaled.astype(np.float32), volume.spacing, volume.mask, volume.subject_id)


def resize_inplane(volume: Volume, size: int) -> Volume:
    """Resample the two non-coronal axes to ``size`` voxels: bilinear for
    intensities, nearest neighbour for the mask. Spacing is adjusted to match."""
    x, _, z = volume.extents
    if (x, z) == (size, size):
        return volume
    factors = (size / x, 1.0, size / z)
    intensities = ndimage.zoom(volume.intensities, factors, order=1, mode="nearest", grid_mode=True)
    mask = None
    if volume.mask is not None:
        mask = ndimage.zoom(volume.mask, factors, order=0, mode="nearest", grid_mode=True)
    sx, sy, sz = volume.spacing
    return Volume(intensities, (sx * x / size, sy, sz * z / size), mask, volume.subject_id)


def prepare_volume(volume: Volume, input_hw: int) -> Volume:
    return resize_inplane(normalize_volume(volume), input_hw)


@dataclass
class SamplePair:
    slice: np.ndarray  # 1,H,W
    subvol: np.ndarray  # D,H,W
    mask_slice: Optional[np.ndarray]  # H,W
    y: Optional[np.ndarray]  # C
    provenance: tuple[str, int] = field(default=("", 0))


def subvolume_indices(index: int, depth: int, count: int) -> np.ndarray:
    """Coronal indices index - ceil(D/2) + 1 ... index + floor(D/2), clamped to the volume."""
    start = index - (depth + 1) // 2 + 1
    return np.clip(np.arange(start, start + depth), 0, count - 1)


def center_position(depth: int) -> int:
    return (depth + 1) // 2 - 1


def sample_training_pair(volume: Volume, coronal_index: int, depth: int, classes: int = 2) -> SamplePair:
    """The coronal slice at ``coronal_index`` and the D-slice neighbourhood around it."""
    count = volume.coronal_count
    if not 0 <= coronal_index < count:
        raise IndexError(f"{volume.subject_id}: coronal index {coronal_index} outside [0, {count})")
    if depth < 1:
        raise ValueError(f"sub-volume depth must be >= 1, got {depth}")
    grid = np.moveaxis(volume.intensities, CORONAL_AXIS, 0)  # Y,X,Z view
    subvol = grid[subvolume_indices(coronal_index, depth, count)]
    slice_ = grid[coronal_index][None]
    mask_slice = y = None
    if volume.mask is not None:
        mask_slice = np.moveaxis(volume.mask, CORONAL_AXIS, 0)[coronal_index]
        y = class_presence_labels(mask_slice, classes)
    return SamplePair(np.ascontiguousarray(slice_), np.ascontiguousarray(subvol),
                      None if mask_slice is None else np.ascontiguousarray(mask_slice), y,
                      (volume.subject_id, int(coronal_index)))


def stack_pairs(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Batch arrays: slices N,1,H,W; subvolumes N,D,H,W; labels N,H,W; presence N,C."""
    slices = np.stack([p.slice for p in pairs])
    subvols = np.stack([p.subvol for p in pairs])
    if any(p.mask_slice is None for p in pairs):
        return slices, subvols, None, None
    return slices, subvols, np.stack([p.mask_slice for p in pairs]), np.stack([p.y for p in pairs])
