"""NIfTI-1 single-file (.nii / .nii.gz) and header/image pair (.hdr/.img) I/O."""

from __future__ import annotations

import gzip
from pathlib import Path
from typing import Optional

import numpy as np

from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI-1 header layout, in file order
_FIELDS = [
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
    ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
]


def header_dtype(byteorder: str = "<") -> np.dtype:
    return np.dtype([(f[0], byteorder + f[1], *f[2:]) for f in _FIELDS])


assert header_dtype().itemsize == HEADER_SIZE

# datatype code -> (numpy kind, bitpix)
DATATYPES = {2: ("u1", 8), 4: ("i2", 16), 512: ("u2", 16), 16: ("f4", 32)}
_NAMES = {1: "binary", 8: "int32", 32: "complex64", 64: "float64", 128: "rgb24", 256: "int8",
          768: "uint32", 1024: "int64", 1280: "uint64", 1536: "float128", 1792: "complex128"}


class NiftiError(ValueError):
    pass


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_header(raw: bytes, path: Path) -> tuple[np.void, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype(order))[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            return hdr, order
    raise NiftiError(f"{path}: sizeof_hdr is not 348 in either byte order")


def read_nifti(path, subject_id: Optional[str] = None) -> Volume:
    """Read a 3-D NIfTI-1 volume. Scaling (scl_slope/scl_inter) is applied when set."""
    path = Path(path)
    raw = _read_bytes(path)
    hdr, order = _parse_header(raw, path)
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic == b"n+1":
        data_bytes, start = raw, int(hdr["vox_offset"])
    elif magic == b"ni1":
        data_bytes, start = _read_bytes(_image_path(path)), 0
    else:
        raise NiftiError(f"{path}: bad magic {magic!r}, expected b'n+1' or b'ni1'")

    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: dim[0]={ndim} out of range")
    if ndim < 3 or any(d > 1 for d in dim[4:ndim + 1]):
        raise NiftiError(f"{path}: only 3-D volumes are supported, got dim={dim[:ndim + 1]}")
    extents = tuple(dim[1:4])
    if min(extents) <= 0:
        raise NiftiError(f"{path}: non-positive extents {extents}")

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        name = _NAMES.get(code, "unknown")
        raise NiftiError(f"{path}: unsupported datatype {code} ({name}); supported: uint8, int16, uint16, float32")
    kind, _ = DATATYPES[code]
    dtype = np.dtype(order + kind)
    count = int(np.prod(extents))
    end = start + count * dtype.itemsize
    if len(data_bytes) < end:
        raise NiftiError(f"{path}: truncated data section, need {end} bytes, have {len(data_bytes)}")
    data = np.frombuffer(data_bytes[start:end], dtype=dtype).reshape(extents, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    values = data.astype(np.float32)
    if np.isfinite(slope) and slope != 0.0 and (slope != 1.0 or inter != 0.0):
        values = (values * np.float32(slope) + np.float32(inter)).astype(np.float32)
    spacing = tuple(float(s) for s in hdr["pixdim"][1:4])
    sid = subject_id if subject_id is not None else _stem(path)
    return Volume(np.ascontiguousarray(values), spacing, None, sid)


def read_mask(path) -> np.ndarray:
    """Read a label volume and check that it is binary."""
    values = read_nifti(path).intensities
    labels = np.rint(values)
    if not np.array_equal(labels, values) or not np.isin(labels, (0, 1)).all():
        raise NiftiError(f"{path}: mask labels must be 0 or 1")
    return labels.astype(np.uint8)


def write_nifti(volume: Volume, path, as_mask: bool = False, byteorder: str = "<") -> None:
    """Write intensities as float32, or with ``as_mask`` the mask as uint8.

    A ``.gz`` suffix selects gzip compression. ``byteorder`` (``"<"`` or
    ``">"``) exists mainly to produce opposite-endian fixtures.
    """
    if byteorder not in ("<", ">"):
        raise ValueError(f"byteorder must be '<' or '>', got {byteorder!r}")
    if as_mask:
        if volume.mask is None:
            raise ValueError(f"volume {volume.subject_id} has no mask to write")
        data, code = volume.mask.astype(np.uint8), 2
    else:
        data, code = volume.intensities.astype(np.float32), 16
    kind, bitpix = DATATYPES[code]

    hdr = np.zeros((), dtype=header_dtype(byteorder))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *data.shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = bitpix
    hdr["pixdim"] = [1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["descrip"] = volume.subject_id.encode("ascii", "replace")[:79]
    hdr["magic"] = b"n+1"
    payload = b"".join([
        hdr.tobytes(),
        b"\x00" * (VOX_OFFSET - HEADER_SIZE),  # empty extension flag
        np.asarray(data, dtype=byteorder + kind).tobytes(order="F"),
    ])
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def _image_path(header_path: Path) -> Path:
    name = header_path.name
    for hdr_ext, img_ext in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if name.endswith(hdr_ext):
            return header_path.with_name(name[: -len(hdr_ext)] + img_ext)
    raise NiftiError(f"{header_path}: magic 'ni1' needs a .hdr file with a matching .img")


def _stem(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii", ".hdr.gz", ".hdr"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem
