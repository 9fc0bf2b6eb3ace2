"""On-disk dataset layout: ``<root>/<subject_id>/t1.nii`` plus an optional ``mask.nii``."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence

from .nifti import read_mask, read_nifti, write_nifti
from .phantom import generate_phantom
from .volume import Volume

IMAGE_NAME = "t1.nii"
MASK_NAME = "mask.nii"


def _find(directory: Path, name: str) -> Optional[Path]:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    return None


def subject_ids(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    return sorted(p.name for p in root.iterdir() if p.is_dir() and _find(p, IMAGE_NAME))


def load_subject(root, subject_id: str) -> Volume:
    directory = Path(root) / subject_id
    image = _find(directory, IMAGE_NAME)
    if image is None:
        raise FileNotFoundError(f"{directory}: no {IMAGE_NAME}[.gz]")
    volume = read_nifti(image, subject_id=subject_id)
    mask = _find(directory, MASK_NAME)
    if mask is not None:
        volume = Volume(volume.intensities, volume.spacing, read_mask(mask), subject_id)
    return volume


def load_dataset(root, ids: Optional[Sequence[str]] = None) -> list[Volume]:
    return [load_subject(root, sid) for sid in (ids if ids is not None else subject_ids(root))]


def save_subject(volume: Volume, root, compress: bool = False) -> Path:
    directory = Path(root) / volume.subject_id
    directory.mkdir(parents=True, exist_ok=True)
    suffix = ".gz" if compress else ""
    write_nifti(volume, directory / (IMAGE_NAME + suffix))
    if volume.mask is not None:
        write_nifti(volume, directory / (MASK_NAME + suffix), as_mask=True)
    return directory


def phantom_volumes(count: int, extent: int = 64, seed: int = 0, family: str = "A") -> Iterable[Volume]:
    for i in range(count):
        yield generate_phantom(seed + i, extent, family)


def write_phantom_dataset(root, count: int, extent: int = 64, seed: int = 0, family: str = "A") -> list[str]:
    ids = []
    for volume in phantom_volumes(count, extent, seed, family):
        save_subject(volume, root)
        ids.append(volume.subject_id)
    return ids
