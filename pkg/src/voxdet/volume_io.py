"""Reading and writing single-file NIfTI-1 volumes.

Only the ``n+1`` single-file flavour is supported, optionally gzip-wrapped.
Header fields are decoded with a numpy structured dtype laid out exactly like
the 348-byte NIfTI-1 header; orientation fields are parsed but not applied,
boxes live in voxel index space.
"""

from __future__ import annotations

import enum
import gzip
import io
import os
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

_HEADER_FIELDS = [
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

HEADER_DTYPE_LE = np.dtype([(f[0], "<" + f[1], *f[2:]) if f[1][0] != "S" else f for f in _HEADER_FIELDS])
HEADER_DTYPE_BE = HEADER_DTYPE_LE.newbyteorder(">")
assert HEADER_DTYPE_LE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy base type
DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}


class NiftiError(Exception):
    """Base class for NIfTI decoding failures."""


class BadMagic(NiftiError):
    pass


class HeaderOnlyFile(NiftiError):
    pass


class AmbiguousHeader(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    def __init__(self, code):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


class IoFailure(NiftiError, OSError):
    pass


class Modality(str, enum.Enum):
    CT = "CT"
    MR = "MR"
    UNKNOWN = "UNKNOWN"


class Endianness(str, enum.Enum):
    LITTLE = "<"
    BIG = ">"


@dataclass
class Volume:
    """A scalar 3-D scan indexed ``data[x, y, z]``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    modality: Modality = Modality.UNKNOWN
    header: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        self.modality = Modality(self.modality)

    @property
    def source_dims(self):
        return tuple(int(n) for n in self.data.shape)


@dataclass
class NiftiHeader:
    dim: tuple
    datatype: int
    pixdim: tuple
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes
    descrip: str = ""
    endianness: Endianness = Endianness.LITTLE
    qform_code: int = 0
    sform_code: int = 0


def detect_endianness(raw_header: bytes) -> Endianness:
    """Pick the byte order under which ``dim[0]`` is a sane rank (1..7)."""
    if len(raw_header) < HEADER_SIZE:
        raise TruncatedData(f"header needs {HEADER_SIZE} bytes, got {len(raw_header)}")
    little = int.from_bytes(raw_header[40:42], "little", signed=True)
    if 1 <= little <= 7:
        return Endianness.LITTLE
    big = int.from_bytes(raw_header[40:42], "big", signed=True)
    if 1 <= big <= 7:
        return Endianness.BIG
    raise AmbiguousHeader(f"dim[0] is {little} (LE) / {big} (BE); neither is in 1..7")


def parse_header(raw_header: bytes) -> NiftiHeader:
    order = detect_endianness(raw_header)
    dtype = HEADER_DTYPE_LE if order is Endianness.LITTLE else HEADER_DTYPE_BE
    rec = np.frombuffer(raw_header[:HEADER_SIZE], dtype=dtype, count=1)[0]
    magic = bytes(raw_header[344:348])
    if magic == MAGIC_PAIR:
        raise HeaderOnlyFile("'ni1' header/image pairs are not supported; convert to a single .nii file")
    if magic != MAGIC_SINGLE:
        raise BadMagic(f"unrecognised NIfTI magic {magic!r}")
    return NiftiHeader(
        dim=tuple(int(d) for d in rec["dim"]),
        datatype=int(rec["datatype"]),
        pixdim=tuple(float(p) for p in rec["pixdim"]),
        scl_slope=float(rec["scl_slope"]),
        scl_inter=float(rec["scl_inter"]),
        vox_offset=float(rec["vox_offset"]),
        magic=magic,
        descrip=rec["descrip"].decode("ascii", "replace"),
        endianness=order,
        qform_code=int(rec["qform_code"]),
        sform_code=int(rec["sform_code"]),
    )


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedData(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _modality_from_descrip(descrip: str) -> Modality:
    for token in descrip.split():
        if token.startswith("modality="):
            try:
                return Modality(token.split("=", 1)[1].upper())
            except ValueError:
                break
    return Modality.UNKNOWN


def read_nifti(path, modality=None) -> Volume:
    """Load a ``.nii`` / ``.nii.gz`` file as a float64 :class:`Volume`.

    Intensities are rescaled by ``scl_slope``/``scl_inter`` when the slope is
    nonzero. Dimensions past the third must be singleton.
    """
    raw = _read_bytes(path)
    hdr = parse_header(raw)
    rank = hdr.dim[0]
    shape = list(hdr.dim[1 : rank + 1]) + [1] * max(0, 3 - rank)
    if any(n < 1 for n in shape):
        raise NiftiError(f"non-positive dimension in {hdr.dim}")
    if any(n != 1 for n in shape[3:]):
        raise NiftiError(f"only 3-D volumes are supported, got dim {hdr.dim}")
    shape = shape[:3]
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatype(hdr.datatype)
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.endianness.value)

    offset = int(hdr.vox_offset)
    count = int(np.prod(shape))
    need = offset + count * dtype.itemsize
    if offset < HEADER_SIZE or len(raw) < need:
        raise TruncatedData(f"payload needs {need} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # NIfTI stores voxels with x varying fastest
    data = flat.reshape(shape, order="F").astype(np.float64)
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        data = data * hdr.scl_slope + hdr.scl_inter

    spacing = tuple(abs(p) if p > 0 else 1.0 for p in hdr.pixdim[1:4])
    if modality is None:
        modality = _modality_from_descrip(hdr.descrip)
    return Volume(data=data, spacing=spacing, modality=modality, header=hdr.__dict__.copy())


def encode_nifti(vol: Volume) -> bytes:
    """Serialise ``vol`` as an uncompressed single-file NIfTI-1 byte string (float32)."""
    hdr = np.zeros(1, dtype=HEADER_DTYPE_LE)[0]
    nx, ny, nz = vol.source_dims
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, nx, ny, nz, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = SINGLE_FILE_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["descrip"] = f"voxdet modality={vol.modality.value}".encode("ascii")
    hdr["qform_code"] = 0
    hdr["sform_code"] = 1
    hdr["srow_x"] = [vol.spacing[0], 0, 0, 0]
    hdr["srow_y"] = [0, vol.spacing[1], 0, 0]
    hdr["srow_z"] = [0, 0, vol.spacing[2], 0]
    hdr["magic"] = MAGIC_SINGLE
    payload = np.asarray(vol.data, dtype="<f4").tobytes(order="F")
    return hdr.tobytes() + b"\x00" * (SINGLE_FILE_OFFSET - HEADER_SIZE) + payload


def write_nifti(vol: Volume, path) -> None:
    """Write ``vol`` to ``path``; a ``.gz`` suffix selects gzip wrapping.

    The gzip member carries no timestamp or filename, so identical volumes
    produce identical files.
    """
    blob = encode_nifti(vol)
    path = os.fspath(path)
    try:
        if path.endswith(".gz"):
            buf = io.BytesIO()
            with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0, compresslevel=6) as gz:
                gz.write(blob)
            blob = buf.getvalue()
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def is_nifti_path(path) -> bool:
    name = os.fspath(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")


def scan_basename(path) -> str:
    name = os.path.basename(os.fspath(path))
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return os.path.splitext(name)[0]
