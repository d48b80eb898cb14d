"""Single-file NIfTI-1 reading and writing (``.nii`` and ``.nii.gz``)."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadHeaderSize,
    BadMagic,
    DegenerateAffine,
    MultiChannelUnsupported,
    TruncatedData,
    UnsupportedDatatype,
)
from .volume import Volume

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352

# datatype code -> (numpy dtype char, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
    64: ("f8", 64),
}

# (name, struct format) in on-disk order; 348 bytes total
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(f for _, f in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


@dataclass
class NiftiHeader:
    sizeof_hdr: int = HEADER_SIZE
    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype: int = 16
    bitpix: int = 32
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    vox_offset: float = float(SINGLE_FILE_OFFSET)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    qform_code: int = 0
    sform_code: int = 0
    quatern_b: float = 0.0
    quatern_c: float = 0.0
    quatern_d: float = 0.0
    qoffset_x: float = 0.0
    qoffset_y: float = 0.0
    qoffset_z: float = 0.0
    srow_x: tuple = (1.0, 0.0, 0.0, 0.0)
    srow_y: tuple = (0.0, 1.0, 0.0, 0.0)
    srow_z: tuple = (0.0, 0.0, 1.0, 0.0)
    magic: bytes = b"n+1\x00"
    xyzt_units: int = 2  # millimetres
    descrip: bytes = b""
    endian: str = "<"
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple:
        return tuple(int(d) for d in self.dim[1 : self.dim[0] + 1])


def _unpack(raw: bytes, endian: str) -> dict:
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    out, pos = {}, 0
    for name, fmt in _FIELDS:
        count = int(fmt[:-1]) if fmt[:-1].isdigit() and fmt[-1] != "s" else 1
        if count > 1:
            out[name] = tuple(values[pos : pos + count])
        else:
            out[name] = values[pos]
        pos += count
    return out


def _pack(fields: dict, endian: str) -> bytes:
    flat = []
    for name, fmt in _FIELDS:
        v = fields[name]
        if isinstance(v, tuple):
            flat.extend(v)
        else:
            flat.append(v)
    return struct.pack(endian + _FORMAT, *flat)


def maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise BadHeaderSize(f"stream is {len(raw)} bytes, shorter than a {HEADER_SIZE}-byte header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        if struct.unpack("<i", raw[:4])[0] == 540 or struct.unpack(">i", raw[:4])[0] == 540:
            raise BadHeaderSize("NIfTI-2 streams are not supported")
        raise BadHeaderSize("sizeof_hdr is not 348 in either byte order")
    f = _unpack(raw, endian)
    if f["magic"] == b"ni1\x00":
        raise BadMagic("hdr/img pairs are not supported; use single-file .nii")
    if f["magic"] != b"n+1\x00":
        raise BadMagic(f"unexpected magic {f['magic']!r}")
    if not 1 <= f["dim"][0] <= 7:
        raise BadHeaderSize(f"dim[0]={f['dim'][0]} outside 1..7")
    if f["datatype"] not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {f['datatype']} is not supported")
    if f["bitpix"] != DATATYPES[f["datatype"]][1]:
        raise UnsupportedDatatype(f"bitpix {f['bitpix']} inconsistent with datatype {f['datatype']}")
    if f["vox_offset"] < SINGLE_FILE_OFFSET:
        raise BadHeaderSize(f"vox_offset {f['vox_offset']} below {SINGLE_FILE_OFFSET}")

    own = {fl.name for fl in NiftiHeader.__dataclass_fields__.values()}
    kwargs = {k: v for k, v in f.items() if k in own}
    extra = {k: v for k, v in f.items() if k not in own}
    return NiftiHeader(**kwargs, endian=endian, extra=extra)


def quaternion_affine(h: NiftiHeader) -> np.ndarray:
    b, c, d = (float(v) for v in (h.quatern_b, h.quatern_c, h.quatern_d))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if h.pixdim[0] < 0 else 1.0
    scale = np.array([h.pixdim[1], h.pixdim[2], h.pixdim[3] * qfac], dtype=np.float64)
    out = np.zeros((3, 4))
    out[:, :3] = rot * scale
    out[:, 3] = (h.qoffset_x, h.qoffset_y, h.qoffset_z)
    return out


def decode_affine(h: NiftiHeader) -> np.ndarray:
    """Voxel-to-mm 3x4 affine. sform wins over qform, which wins over pixdim scaling."""
    if h.sform_code > 0:
        affine = np.array([h.srow_x, h.srow_y, h.srow_z], dtype=np.float64)
    elif h.qform_code > 0:
        affine = quaternion_affine(h)
    else:
        affine = np.zeros((3, 4))
        affine[:, :3] = np.diag(np.asarray(h.pixdim[1:4], dtype=np.float64))
    if abs(np.linalg.det(affine[:, :3])) < 1e-12:
        raise DegenerateAffine("voxel-to-mm matrix is singular")
    return affine


def read_nifti(data: bytes) -> tuple[NiftiHeader, Volume]:
    raw = maybe_gunzip(bytes(data))
    h = parse_header(raw)
    dims = list(h.shape)
    if any(d < 1 for d in dims):
        raise BadHeaderSize(f"non-positive dimension in {dims}")
    char, bitpix = DATATYPES[h.datatype]
    count = int(np.prod(dims))
    start = int(h.vox_offset)
    need = start + count * bitpix // 8
    if len(raw) < need:
        raise TruncatedData(f"need {need} bytes, stream holds {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.dtype(h.endian + char), count=count, offset=start)
    spatial = (dims + [1, 1, 1])[:3]
    channels = int(np.prod(dims[3:])) if len(dims) > 3 else 1
    # x varies fastest on disk
    arr = arr.reshape(spatial + [channels], order="F")
    values = np.moveaxis(arr, 3, 0).astype(np.float64)
    if h.scl_slope != 0 and np.isfinite(h.scl_slope):
        values = values * h.scl_slope + h.scl_inter
    spacing = tuple(abs(float(p)) if p else 1.0 for p in h.pixdim[1:4])
    return h, Volume(values.astype(np.float32), spacing, decode_affine(h))


def encode_nifti(
    values: np.ndarray,
    affine: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    datatype: int = 16,
    scl_slope: float = 1.0,
    scl_inter: float = 0.0,
    template: Optional[NiftiHeader] = None,
    endian: str = "<",
) -> bytes:
    """Encode a 3D array; values are stored as given (already in raw units)."""
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} is not supported")
    values = np.asarray(values)
    if values.ndim != 3:
        raise MultiChannelUnsupported(f"expected a single 3D channel, got shape {values.shape}")
    char, bitpix = DATATYPES[datatype]
    affine = np.asarray(affine, dtype=np.float64).reshape(3, 4)
    h = template if template is not None else NiftiHeader()
    fields = {name: None for name, _ in _FIELDS}
    fields.update(h.extra)
    fields.update(
        sizeof_hdr=HEADER_SIZE,
        data_type=b"",
        db_name=b"",
        extents=0,
        session_error=0,
        regular=b"r",
        dim_info=0,
        dim=(3, *values.shape, 1, 1, 1, 1),
        intent_p1=0.0, intent_p2=0.0, intent_p3=0.0, intent_code=0,
        datatype=datatype,
        bitpix=bitpix,
        slice_start=0,
        pixdim=(1.0, *(float(s) for s in spacing), 0.0, 0.0, 0.0, 0.0),
        vox_offset=float(SINGLE_FILE_OFFSET),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        slice_end=0, slice_code=0,
        xyzt_units=h.xyzt_units,
        cal_max=0.0, cal_min=0.0, slice_duration=0.0, toffset=0.0, glmax=0, glmin=0,
        descrip=bytes(h.descrip)[:80],
        aux_file=b"",
        qform_code=0,
        sform_code=1,
        quatern_b=0.0, quatern_c=0.0, quatern_d=0.0,
        qoffset_x=0.0, qoffset_y=0.0, qoffset_z=0.0,
        srow_x=tuple(affine[0]),
        srow_y=tuple(affine[1]),
        srow_z=tuple(affine[2]),
        intent_name=b"",
        magic=b"n+1\x00",
    )
    header = _pack(fields, endian)
    payload = np.asarray(values, dtype=np.dtype(endian + char)).tobytes(order="F")
    return header + b"\x00" * (SINGLE_FILE_OFFSET - HEADER_SIZE) + payload


def write_nifti(volume: Volume, template: Optional[NiftiHeader] = None) -> bytes:
    """float32 NIfTI-1 stream with slope 1, intercept 0 and sform from the volume affine."""
    if volume.channels != 1:
        raise MultiChannelUnsupported(f"volume has {volume.channels} channels")
    if not np.all(np.isfinite(volume.data)):
        raise ValueError("cannot write non-finite voxels")
    return encode_nifti(volume.data[0], volume.affine, volume.spacing, template=template)


def load(path) -> Volume:
    return read_nifti(Path(path).read_bytes())[1]


def save(volume: Volume, path, template: Optional[NiftiHeader] = None) -> None:
    path = Path(path)
    data = write_nifti(volume, template)
    if path.suffix == ".gz":
        # mtime pinned so identical volumes give identical files
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


__all__ = [
    "NiftiHeader", "read_nifti", "write_nifti", "encode_nifti", "decode_affine",
    "parse_header", "load", "save", "DATATYPES",
]
