"""Reader and writer for single-file NIfTI-1 label and probability volumes.

Only the subset needed for segmentation maps is supported: ``n+1`` magic,
3D data, datatypes uint8/int16/uint16/float32, plain or gzip-compressed.
"""

from __future__ import annotations

import gzip
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import DEFAULT_LABELS, LabelVolume, Spacing

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"

DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    512: np.dtype("u2"),
    16: np.dtype("f4"),
}
MAX_VOXELS = 2**31 - 1


class NiftiError(Exception):
    """Base class for NIfTI format problems."""


class NiftiHeaderError(NiftiError):
    pass


class NiftiMagicError(NiftiError):
    pass


class NiftiDatatypeError(NiftiError):
    pass


class NiftiLabelValueError(NiftiError):
    pass


class NiftiDimsOverflowError(NiftiError):
    pass


class NiftiTruncatedError(NiftiError):
    pass


class ProbabilityRangeError(NiftiError):
    pass


class VolumeMismatchError(ValueError):
    pass


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple[float, float, float]
    srow: tuple[tuple[float, ...], ...]
    magic: bytes
    endian: str

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.dim[1], self.dim[2], self.dim[3])

    @property
    def spacing(self) -> Spacing:
        return Spacing(*(float(p) for p in self.pixdim[1:4]))


@dataclass
class ProbabilityVolume:
    """Per-class softmax probabilities on a shared grid, channels ordered ET, ED, Cavity."""

    channels: np.ndarray  # (3, nx, ny, nz) float64
    spacing: Spacing
    classes: tuple[str, ...] = ("et", "ed", "cavity")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.channels.shape[1:])


def _open(path):
    with open(path, "rb") as fh:
        lead = fh.read(2)
    if lead == GZIP_MAGIC:
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n: int, path) -> bytes:
    try:
        data = fh.read(n)
    except (OSError, EOFError) as exc:
        raise NiftiTruncatedError(f"{path}: corrupt gzip stream ({exc})") from exc
    return data


def _load(path) -> tuple[NiftiHeader, bytes]:
    """Header plus the bytes up to the end of the declared payload, nothing more."""
    with _open(path) as fh:
        raw = _read_exact(fh, HEADER_SIZE, path)
        hdr = parse_header(raw)
        _validate_geometry(hdr, path)
        itemsize = DATATYPES[hdr.datatype].itemsize
        needed = int(hdr.vox_offset) + hdr.dim[1] * hdr.dim[2] * hdr.dim[3] * itemsize
        raw += _read_exact(fh, needed - HEADER_SIZE, path)
    return hdr, raw


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise NiftiTruncatedError(f"file has {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header")
    endian = "<"
    dim0 = struct.unpack_from("<h", raw, 40)[0]
    if not 1 <= dim0 <= 7:
        endian = ">"
        dim0 = struct.unpack_from(">h", raw, 40)[0]
        if not 1 <= dim0 <= 7:
            raise NiftiHeaderError(f"dim[0] is {dim0} in either byte order")
    sizeof_hdr = struct.unpack_from(endian + "i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiHeaderError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise NiftiMagicError(f"unsupported magic {magic!r}; only single-file 'n+1' is accepted")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)
    qform_code, sform_code = struct.unpack_from(endian + "2h", raw, 252)
    quatern = struct.unpack_from(endian + "3f", raw, 256)
    srow = tuple(struct.unpack_from(endian + "4f", raw, 280 + 16 * r) for r in range(3))
    return NiftiHeader(
        sizeof_hdr, tuple(dim), datatype, bitpix, tuple(pixdim), vox_offset,
        scl_slope, scl_inter, qform_code, sform_code, tuple(quatern), srow, magic, endian,
    )


def _validate_geometry(hdr: NiftiHeader, path) -> None:
    ndim = hdr.dim[0]
    if ndim < 3:
        raise NiftiHeaderError(f"{path}: expected a 3D volume, dim[0]={ndim}")
    # trailing singleton dimensions are tolerated
    if any(d != 1 for d in hdr.dim[4 : ndim + 1]):
        raise NiftiHeaderError(f"{path}: only 3D volumes are supported, dim={hdr.dim}")
    if any(d < 1 for d in hdr.dim[1:4]):
        raise NiftiHeaderError(f"{path}: dimensions must be >= 1, dim={hdr.dim}")
    n = int(hdr.dim[1]) * int(hdr.dim[2]) * int(hdr.dim[3])
    if n > MAX_VOXELS:
        raise NiftiDimsOverflowError(f"{path}: {n} voxels exceeds the supported maximum")
    if any(not (p > 0 and np.isfinite(p)) for p in hdr.pixdim[1:4]):
        raise NiftiHeaderError(f"{path}: pixdim[1..3] must be positive, got {hdr.pixdim[1:4]}")
    if hdr.datatype not in DATATYPES:
        raise NiftiDatatypeError(f"{path}: unsupported datatype code {hdr.datatype}")
    if hdr.bitpix != DATATYPES[hdr.datatype].itemsize * 8:
        raise NiftiHeaderError(f"{path}: bitpix {hdr.bitpix} does not match datatype {hdr.datatype}")
    if hdr.vox_offset < HEADER_SIZE:
        raise NiftiHeaderError(f"{path}: vox_offset {hdr.vox_offset} lies inside the header")


def _slice_axis_check(hdr: NiftiHeader, path) -> None:
    if hdr.sform_code > 0:
        rows = np.array([r[:3] for r in hdr.srow], dtype=float)
    elif hdr.qform_code > 0:
        b, c, d = hdr.quatern
        a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        rows = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ])
    else:
        return
    if not np.any(rows):
        return
    # voxel axis that contributes most to world z
    if int(np.argmax(np.abs(rows[2]))) != 2:
        warnings.warn(
            f"{path}: the third voxel axis is not the superior-inferior axis; "
            "measurements still use the third axis as the slice axis",
            stacklevel=3,
        )


def _read_payload(raw: bytes, hdr: NiftiHeader, path) -> np.ndarray:
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.endian)
    shape = hdr.shape
    nbytes = shape[0] * shape[1] * shape[2] * dtype.itemsize
    offset = int(hdr.vox_offset)
    if len(raw) < offset + nbytes:
        raise NiftiTruncatedError(
            f"{path}: payload needs {nbytes} bytes at offset {offset}, file has {max(0, len(raw) - offset)}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=shape[0] * shape[1] * shape[2], offset=offset)
    return flat.reshape(shape, order="F").astype(dtype.newbyteorder("="))


def read_header(path) -> NiftiHeader:
    with _open(path) as fh:
        return parse_header(_read_exact(fh, HEADER_SIZE, path))


def read_label_volume(path, label_semantics: dict[str, int] | None = None) -> LabelVolume:
    hdr, raw = _load(path)
    if hdr.scl_slope not in (0.0, 1.0) or hdr.scl_inter != 0.0:
        raise NiftiLabelValueError(
            f"{path}: label volumes must be unscaled (scl_slope={hdr.scl_slope}, scl_inter={hdr.scl_inter})"
        )
    _slice_axis_check(hdr, path)
    data = _read_payload(raw, hdr, path)
    if data.dtype.kind == "f":
        if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
            raise NiftiLabelValueError(f"{path}: label file contains non-integer values")
    if data.size and (data.min() < 0 or data.max() > 255):
        raise NiftiLabelValueError(f"{path}: label values must lie in 0..255")
    labels = np.ascontiguousarray(data.astype(np.uint8))
    semantics = dict(DEFAULT_LABELS if label_semantics is None else label_semantics)
    try:
        return LabelVolume(labels, hdr.spacing, semantics)
    except ValueError as exc:
        raise NiftiLabelValueError(f"{path}: {exc}") from exc


def _read_float_volume(path) -> tuple[np.ndarray, NiftiHeader]:
    hdr, raw = _load(path)
    data = _read_payload(raw, hdr, path).astype(np.float64)
    if hdr.scl_slope not in (0.0, 1.0) or hdr.scl_inter != 0.0:
        data = data * hdr.scl_slope + hdr.scl_inter
    return data, hdr


PROBABILITY_SLACK = 1e-6


def read_probability_volume(paths, classes=("et", "ed", "cavity")) -> ProbabilityVolume:
    paths = list(paths)
    if len(paths) != len(classes):
        raise VolumeMismatchError(f"expected {len(classes)} probability files, got {len(paths)}")
    channels = []
    ref = None
    for path in paths:
        data, hdr = _read_float_volume(path)
        if ref is None:
            ref = hdr
        else:
            if hdr.shape != ref.shape:
                raise VolumeMismatchError(f"{path}: dims {hdr.shape} differ from {ref.shape}")
            a = np.array(hdr.pixdim[1:4], dtype=float)
            b = np.array(ref.pixdim[1:4], dtype=float)
            if np.any(np.abs(a - b) > 1e-5 * np.abs(b)):
                raise VolumeMismatchError(f"{path}: pixdim {tuple(a)} differs from {tuple(b)}")
        if not np.all(np.isfinite(data)):
            raise ProbabilityRangeError(f"{path}: non-finite probabilities")
        lo, hi = float(data.min()), float(data.max())
        if lo < -PROBABILITY_SLACK or hi > 1.0 + PROBABILITY_SLACK:
            raise ProbabilityRangeError(f"{path}: probabilities outside [0, 1] (min {lo}, max {hi})")
        channels.append(np.clip(data, 0.0, 1.0))
    return ProbabilityVolume(np.stack(channels), ref.spacing, tuple(classes))


def build_header(shape, spacing: Spacing, datatype: int = 2) -> bytes:
    """Deterministic 348-byte header plus a zeroed 4-byte extension flag."""
    dtype = DATATYPES[datatype]
    buf = bytearray(DEFAULT_VOX_OFFSET)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, shape[0], shape[1], shape[2], 1, 1, 1, 1)
    struct.pack_into("<2h", buf, 70, datatype, dtype.itemsize * 8)
    struct.pack_into("<8f", buf, 76, 1.0, spacing.dx, spacing.dy, spacing.dz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", buf, 108, float(DEFAULT_VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", buf, 123, 10 | 8)  # xyzt_units: mm, s
    struct.pack_into("<2h", buf, 252, 0, 1)  # qform_code, sform_code
    for r, row in enumerate(
        ((spacing.dx, 0.0, 0.0, 0.0), (0.0, spacing.dy, 0.0, 0.0), (0.0, 0.0, spacing.dz, 0.0))
    ):
        struct.pack_into("<4f", buf, 280 + 16 * r, *row)
    buf[344:348] = b"n+1\x00"
    return bytes(buf)


def _write_bytes(data: bytes, path) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_label_volume(volume: LabelVolume, path) -> None:
    labels = np.asarray(volume.labels)
    if labels.ndim != 3 or min(labels.shape) < 1:
        raise ValueError(f"cannot write a volume with dims {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("labels do not fit uint8")
    header = build_header(labels.shape, volume.spacing, 2)
    payload = np.asarray(labels, dtype="<u1").tobytes(order="F")
    _write_bytes(header + payload, path)


def write_float_volume(data: np.ndarray, spacing: Spacing, path) -> None:
    data = np.asarray(data)
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"cannot write a volume with dims {data.shape}")
    header = build_header(data.shape, spacing, 16)
    _write_bytes(header + np.asarray(data, dtype="<f4").tobytes(order="F"), path)
