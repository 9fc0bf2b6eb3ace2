"""Synthetic head phantoms with a known brain mask.

Layers from the centre outwards, all sharing one randomly posed ellipsoid
frame: textured brain, a dark fluid gap, a bright skull shell, and a scalp
layer with blobs. Two families draw their parameters from disjoint ranges so
one can serve as an out-of-distribution test set for the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volume import Volume

MIN_EXTENT = 32
NOISE_SIGMA = 0.03


@dataclass(frozen=True)
class PhantomFamily:
    semi_axes: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]  # at extent 64
    brain: tuple[float, float]
    texture: tuple[float, float]  # amplitude of the smooth brain texture
    fluid: tuple[float, float]
    skull: tuple[float, float]
    scalp: tuple[float, float]
    skull_inner: float = 1.12  # shell radii as multiples of the brain ellipsoid
    skull_outer: float = 1.25
    scalp_outer: float = 1.35
    max_angle: float = 0.25  # radians about each axis
    max_offset: float = 2.0  # voxels at extent 64


FAMILIES = {
    "A": PhantomFamily(
        semi_axes=((15.0, 20.0), (17.0, 22.0), (14.0, 19.0)),
        brain=(0.6, 0.8), texture=(0.03, 0.06), fluid=(0.15, 0.25), skull=(0.85, 1.0), scalp=(0.3, 0.5),
    ),
    "B": PhantomFamily(
        semi_axes=((20.5, 22.0), (22.5, 24.0), (19.5, 21.0)),
        brain=(0.45, 0.58), texture=(0.07, 0.1), fluid=(0.26, 0.34), skull=(0.7, 0.84), scalp=(0.52, 0.65),
        skull_inner=1.08, skull_outer=1.18, scalp_outer=1.26,
    ),
}


def generate_phantom(seed: int, extent: int = 64, family: str = "A", subject_id: str | None = None) -> Volume:
    """Deterministic phantom of ``extent``^3 voxels (1 mm isotropic) for ``seed``."""
    if extent < MIN_EXTENT:
        raise ValueError(f"phantom extent must be >= {MIN_EXTENT}, got {extent}")
    if family not in FAMILIES:
        raise ValueError(f"unknown phantom family {family!r}; choose from {sorted(FAMILIES)}")
    fam = FAMILIES[family]
    rng = np.random.Generator(np.random.Philox(seed))
    scale = extent / 64.0

    def draw(bounds):
        return rng.uniform(*bounds)

    axes = np.array([draw(b) for b in fam.semi_axes]) * scale
    rotation = Rotation.from_euler("xyz", rng.uniform(-fam.max_angle, fam.max_angle, size=3)).as_matrix()
    centre = (extent - 1) / 2.0 + rng.uniform(-fam.max_offset, fam.max_offset, size=3) * scale
    brain_level, texture_amp = draw(fam.brain), draw(fam.texture)
    fluid_level, skull_level, scalp_level = draw(fam.fluid), draw(fam.skull), draw(fam.scalp)

    grid = np.stack(np.meshgrid(*(np.arange(extent, dtype=np.float64),) * 3, indexing="ij"), axis=-1)
    local = (grid - centre) @ rotation  # coordinates in the ellipsoid frame
    radius = np.sqrt(((local / axes) ** 2).sum(axis=-1))  # 1 on the brain surface

    texture = ndimage.gaussian_filter(rng.standard_normal((extent,) * 3), sigma=3.0 * scale, mode="wrap")
    texture /= texture.std() + 1e-12

    brain = radius <= 1.0
    image = np.zeros((extent,) * 3)
    image[brain] = brain_level + texture_amp * texture[brain]
    image[(radius > 1.0) & (radius < fam.skull_inner)] = fluid_level
    image[(radius >= fam.skull_inner) & (radius < fam.skull_outer)] = skull_level
    scalp = (radius >= fam.skull_outer) & (radius < fam.scalp_outer)
    image[scalp] = scalp_level

    # a few soft blobs riding on the scalp
    blobs = np.zeros_like(image)
    for _ in range(int(rng.integers(3, 7))):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        at = centre + rotation @ (direction * axes * (fam.skull_outer + fam.scalp_outer) / 2.0)
        width = rng.uniform(2.0, 4.0) * scale
        blobs += rng.uniform(0.1, 0.25) * np.exp(-((grid - at) ** 2).sum(axis=-1) / (2.0 * width ** 2))
    image[scalp] += blobs[scalp]

    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    sid = subject_id if subject_id is not None else f"ph{family}_{seed:04d}"
    return Volume(image.astype(np.float32), (1.0, 1.0, 1.0), brain.astype(np.uint8), sid)
