"""Volumetric image I/O and intensity normalization.

Supports a minimal single-file NIfTI-1 subset (``.nii``) and a raw float32
payload with a JSON sidecar (``.f32raw`` + ``.json``).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import (
    ArgumentError,
    DatatypeError,
    HeaderSizeError,
    MagicError,
    NonFinitePayloadError,
    TruncatedPayloadError,
    VolumeFormatError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"
RAW_SUFFIX = ".f32raw"

# Field layout of the 348-byte NIfTI-1 header.
HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == NIFTI_HEADER_SIZE

# datatype code -> (numpy type, bitpix)
SUPPORTED_DATATYPES = {
    2: (np.uint8, 8),
    4: (np.int16, 16),
    16: (np.float32, 32),
}


@dataclass
class Volume:
    """A 3D scalar image.

    ``data`` is indexed ``[x, y, z]``; on disk voxels are stored x-fastest.
    """

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ArgumentError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ArgumentError(f"spacing must be three positive reals, got {self.spacing}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.size != int(np.prod(self.dims)):
            raise ArgumentError(
                f"data holds {data.size} voxels, dims {self.dims} need {int(np.prod(self.dims))}"
            )
        # flat input is taken as x-fastest
        self.data = data.reshape(self.dims, order="F" if data.ndim == 1 else "C")
        self.validate()

    @classmethod
    def from_array(cls, array, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        array = np.asarray(array, dtype=np.float32)
        return cls(dims=array.shape, spacing=spacing, data=array)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ArgumentError("data: volume contains non-finite voxel values")

    def flat(self) -> np.ndarray:
        """Voxels in x-fastest order."""
        return self.data.ravel(order="F")


def load_volume(path: PathLike) -> Volume:
    path = Path(path)
    if path.suffix == ".nii":
        return _load_nifti(path)
    if path.suffix == RAW_SUFFIX:
        return _load_raw(path)
    raise ArgumentError(f"unsupported volume extension '{path.suffix}' ({path})")


def save_volume(volume: Volume, path: PathLike) -> None:
    path = Path(path)
    if path.suffix not in (".nii", RAW_SUFFIX):
        raise ArgumentError(f"unsupported volume extension '{path.suffix}' ({path})")
    volume.validate()
    if path.suffix == RAW_SUFFIX:
        _save_raw(volume, path)
    else:
        _save_nifti(volume, path)


def normalize_intensity(volume: Volume) -> Volume:
    """Linear map of the volume's range onto [0, 255]; constant volumes become zeros."""
    arr = volume.data.astype(np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        out = (arr - lo) * (255.0 / (hi - lo))
    else:
        out = np.zeros_like(arr)
    return Volume(dims=volume.dims, spacing=volume.spacing, data=out.astype(np.float32))


def _check_finite(data: np.ndarray, path: Path) -> None:
    bad = int(np.count_nonzero(~np.isfinite(data)))
    if bad:
        raise NonFinitePayloadError("data", f"{path.name} holds {bad} non-finite voxel values")


def _detect_byte_order(raw: bytes) -> str:
    for order in ("<", ">"):
        if int(np.frombuffer(raw[:4], dtype=f"{order}i4")[0]) == NIFTI_HEADER_SIZE:
            return order
    found = int(np.frombuffer(raw[:4], dtype="<i4")[0])
    raise HeaderSizeError("sizeof_hdr", f"expected 348 in either byte order, read {found}")


def _load_nifti(path: Path) -> Volume:
    raw = path.read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise HeaderSizeError("sizeof_hdr", f"file holds {len(raw)} bytes, header needs 348")
    order = _detect_byte_order(raw)
    hdr = np.frombuffer(raw[:NIFTI_HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]

    if bytes(hdr["magic"]).ljust(4, b"\x00") != NIFTI_MAGIC:
        raise MagicError("magic", f"expected b'n+1\\x00', read {bytes(hdr['magic'])!r}")

    dim = [int(d) for d in hdr["dim"]]
    if dim[0] not in (3, 4):
        raise VolumeFormatError("dim", f"dim[0] must be 3 or 4, read {dim[0]}")
    if dim[0] == 4 and dim[4] > 1:
        raise VolumeFormatError("dim", f"4-D volumes with dim[4]={dim[4]} are not supported")
    dims = tuple(dim[1:4])
    if min(dims) < 1:
        raise VolumeFormatError("dim", f"spatial dims must be positive, read {dims}")

    code = int(hdr["datatype"])
    if code not in SUPPORTED_DATATYPES:
        raise DatatypeError("datatype", f"unsupported datatype code {code}")
    np_type, _ = SUPPORTED_DATATYPES[code]
    dtype = np.dtype(np_type).newbyteorder(order)

    offset = int(hdr["vox_offset"])
    if offset < NIFTI_VOX_OFFSET:
        raise VolumeFormatError("vox_offset", f"must be >= 352, read {offset}")
    count = int(np.prod(dims))
    needed = offset + count * dtype.itemsize
    if len(raw) < needed:
        raise TruncatedPayloadError(
            "vox_offset", f"payload truncated: need {needed} bytes, file holds {len(raw)}"
        )

    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and not (slope == 1.0 and inter == 0.0):
        values = values.astype(np.float64) * slope + inter
    data = np.asarray(values, dtype=np.float32).reshape(dims, order="F")
    _check_finite(data, path)

    pixdim = [float(p) for p in hdr["pixdim"][1:4]]
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim)
    logger.debug("loaded %s dims=%s datatype=%d order=%s", path, dims, code, order)
    return Volume(dims=dims, spacing=spacing, data=data)


def _save_nifti(volume: Volume, path: Path) -> None:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = NIFTI_HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *volume.dims, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, *volume.spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = float(NIFTI_VOX_OFFSET)
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["magic"] = NIFTI_MAGIC
    payload = volume.flat().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * (NIFTI_VOX_OFFSET - NIFTI_HEADER_SIZE))
        fh.write(payload)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _load_raw(path: Path) -> Volume:
    meta = json.loads(_sidecar(path).read_text())
    dims = tuple(int(d) for d in meta["dims"])
    spacing = tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0)))
    raw = path.read_bytes()
    count = int(np.prod(dims))
    if len(raw) < 4 * count:
        raise TruncatedPayloadError("dims", f"payload holds {len(raw) // 4} voxels, dims need {count}")
    data = np.frombuffer(raw, dtype="<f4", count=count).reshape(dims, order="F")
    _check_finite(data, path)
    return Volume(dims=dims, spacing=spacing, data=data)


def _save_raw(volume: Volume, path: Path) -> None:
    path.write_bytes(volume.flat().astype("<f4").tobytes())
    _sidecar(path).write_text(
        json.dumps({"dims": list(volume.dims), "spacing": list(volume.spacing)}, indent=2)
    )
