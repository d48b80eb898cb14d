"""Physical-space volume handling: cropping, resampling and intensity normalization."""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DuplicatePatient,
    GridMismatch,
    MissingColumn,
    NoOverlap,
    NonFiniteInput,
    NonNumericCoordinate,
    ZeroVariance,
)

CROP_MM = 144.0
TARGET_SPACING_MM = 1.0
CT_CLIP = 1024.0

BBOX_COLUMNS = ("PatientID", "x1", "y1", "z1", "x2", "y2", "z2")


@dataclass
class Volume:
    """Multi-channel 3D scalar field.

    ``data`` has shape (C, X, Y, Z); ``affine`` is a 3x4 matrix mapping voxel
    indices (i, j, k) to millimetres.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(3, 4))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (C, X, Y, Z), got {data.shape}")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(3, 4)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.affine.copy())


@dataclass(frozen=True)
class BoundingBoxMM:
    patient_id: str
    x1: float
    y1: float
    z1: float
    x2: float
    y2: float
    z2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1 and self.z2 > self.z1):
            raise NonNumericCoordinate(f"{self.patient_id}: bounding box corners are not ordered")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.z1])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x2, self.y2, self.z2])

    @property
    def extents(self) -> tuple:
        return tuple(float(v) for v in self.upper - self.lower)


_CENTER_RE = re.compile(r"^[A-Za-z]+")


def center_of(patient_id: str, pattern: str | None = None) -> str:
    """Center id of a patient: the leading alphabetic prefix, or the first group of ``pattern``."""
    if pattern:
        m = re.match(pattern, patient_id)
        if m is None:
            raise ValueError(f"center pattern {pattern!r} does not match {patient_id!r}")
        return m.group(1) if m.groups() else m.group(0)
    m = _CENTER_RE.match(patient_id)
    if m is None:
        raise ValueError(f"patient id {patient_id!r} has no alphabetic center prefix")
    return m.group(0)


@dataclass
class PatientCase:
    patient_id: str
    center_id: str
    ct_path: str
    pet_path: str
    mask_path: Optional[str]
    bbox: BoundingBoxMM

    def __post_init__(self):
        if not self.center_id:
            raise ValueError(f"{self.patient_id}: empty center id")


def parse_bbox_csv(text: str) -> list[BoundingBoxMM]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MissingColumn("bounding-box CSV has no header row") from None
    missing = [c for c in BBOX_COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"bounding-box CSV lacks column(s): {', '.join(missing)}")
    index = {c: header.index(c) for c in BBOX_COLUMNS}

    boxes, seen = [], set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        pid = row[index["PatientID"]].strip()
        if pid in seen:
            raise DuplicatePatient(f"patient {pid} appears twice (line {lineno})")
        seen.add(pid)
        coords = []
        for name in BBOX_COLUMNS[1:]:
            cell = row[index[name]].strip() if index[name] < len(row) else ""
            try:
                value = float(cell)
            except ValueError:
                raise NonNumericCoordinate(f"{pid}: {name}={cell!r} is not a number (line {lineno})") from None
            if not np.isfinite(value):
                raise NonNumericCoordinate(f"{pid}: {name}={cell!r} is not finite (line {lineno})")
            coords.append(value)
        boxes.append(BoundingBoxMM(pid, *coords))
    return boxes


def format_bbox_csv(boxes: Sequence[BoundingBoxMM]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(BBOX_COLUMNS)
    for b in boxes:
        w.writerow([b.patient_id, *(repr(float(v)) for v in (b.x1, b.y1, b.z1, b.x2, b.y2, b.z2))])
    return out.getvalue()


# ---------------------------------------------------------------------------
# sampling

def sample_trilinear(data: np.ndarray, coords: np.ndarray, fill: float) -> np.ndarray:
    """Trilinear interpolation of a 3D array at continuous voxel coordinates.

    ``coords`` has shape (3, ...). Points outside [0, n-1] on any axis get ``fill``.
    """
    shape = np.array(data.shape)
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[1:]
    c = coords.reshape(3, -1)
    # lattice points that land a hair outside through rounding are still inside
    tol = 1e-6
    inside = np.all((c >= -tol) & (c <= (shape[:, None] - 1) + tol), axis=0)
    c = np.clip(c, 0, shape[:, None] - 1)
    lo = np.floor(c).astype(np.intp)
    lo = np.minimum(lo, np.maximum(shape[:, None] - 2, 0))
    frac = c - lo
    hi = np.minimum(lo + 1, shape[:, None] - 1)

    src = data.astype(np.float64, copy=False)
    result = np.zeros(c.shape[1], dtype=np.float64)
    for dx in (0, 1):
        ix = hi[0] if dx else lo[0]
        wx = frac[0] if dx else 1.0 - frac[0]
        for dy in (0, 1):
            iy = hi[1] if dy else lo[1]
            wy = frac[1] if dy else 1.0 - frac[1]
            for dz in (0, 1):
                iz = hi[2] if dz else lo[2]
                wz = frac[2] if dz else 1.0 - frac[2]
                result += wx * wy * wz * src[ix, iy, iz]
    result[~inside] = fill
    return result.reshape(out_shape)


def sample_nearest(data: np.ndarray, coords: np.ndarray, fill: float) -> np.ndarray:
    shape = np.array(data.shape)
    c = np.asarray(coords, dtype=np.float64).reshape(3, -1)
    idx = np.floor(c + 0.5).astype(np.intp)
    inside = np.all((idx >= 0) & (idx <= shape[:, None] - 1), axis=0)
    idx = np.clip(idx, 0, shape[:, None] - 1)
    result = data[idx[0], idx[1], idx[2]].astype(np.float64)
    result[~inside] = fill
    return result.reshape(np.asarray(coords).shape[1:])


def sample_volume(data: np.ndarray, coords: np.ndarray, interp: str, fill: float) -> np.ndarray:
    if interp == "trilinear":
        return sample_trilinear(data, coords, fill)
    if interp == "nearest":
        return sample_nearest(data, coords, fill)
    raise ValueError(f"unknown interpolation {interp!r}")


def fill_value(data: np.ndarray, interp: str) -> float:
    """Out-of-bounds value: source minimum for images, 0 for masks."""
    return 0.0 if interp == "nearest" else float(np.min(data))


def voxel_to_mm(affine: np.ndarray, ijk: np.ndarray) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.float64)
    shift = affine[:, 3].reshape((3,) + (1,) * (ijk.ndim - 1))
    return np.tensordot(affine[:, :3], ijk, axes=1) + shift


def mm_to_voxel(affine: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(affine[:, :3])
    xyz = np.asarray(xyz, dtype=np.float64)
    shift = affine[:, 3].reshape((3,) + (1,) * (xyz.ndim - 1))
    return np.tensordot(inv, xyz - shift, axes=1)


def crop_resample(
    volume: Volume,
    bbox: BoundingBoxMM,
    interp: str = "trilinear",
    shape: Sequence[int] = (144, 144, 144),
    spacing: float = TARGET_SPACING_MM,
) -> Volume:
    """Crop to ``bbox`` and resample onto an isotropic grid in one interpolation pass.

    Output voxel (0,0,0) is centred at ``bbox.lower + spacing/2``. Every target
    voxel centre is mapped through the inverse source affine and sampled.
    """
    shape = tuple(int(n) for n in shape)
    src_shape = np.array(volume.shape)
    corners = np.array([[i, j, k] for i in (0, src_shape[0] - 1) for j in (0, src_shape[1] - 1)
                        for k in (0, src_shape[2] - 1)], dtype=np.float64).T
    mm = voxel_to_mm(volume.affine, corners)
    half = np.abs(volume.affine[:, :3]).sum(axis=1) / 2
    src_lo, src_hi = mm.min(axis=1) - half, mm.max(axis=1) + half
    if np.any(bbox.upper <= src_lo) or np.any(bbox.lower >= src_hi):
        raise NoOverlap(f"{bbox.patient_id}: bounding box does not intersect the scan")

    axes = [bbox.lower[a] + spacing * (np.arange(shape[a]) + 0.5) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"))
    src = mm_to_voxel(volume.affine, grid)
    del grid

    out = np.empty((volume.channels,) + shape, dtype=np.float32)
    for ch in range(volume.channels):
        chan = volume.data[ch]
        out[ch] = sample_volume(chan, src, interp, fill_value(chan, interp))
    affine = np.zeros((3, 4))
    affine[:, :3] = np.eye(3) * spacing
    affine[:, 3] = bbox.lower + spacing / 2
    return Volume(out, (spacing,) * 3, affine)


def _check_finite(volume: Volume):
    if not np.all(np.isfinite(volume.data)):
        raise NonFiniteInput("volume contains NaN or infinite values")


def normalize_ct(volume: Volume) -> Volume:
    _check_finite(volume)
    data = np.clip(volume.data.astype(np.float32), -CT_CLIP, CT_CLIP) / np.float32(CT_CLIP)
    return volume.with_data(data)


def normalize_pet_zscore(volume: Volume) -> Volume:
    _check_finite(volume)
    if volume.data.size < 2:
        raise ZeroVariance("z-score needs at least two voxels")
    values = volume.data.astype(np.float64)
    mean = values.mean()
    std = values.std()
    if not std > 0:
        raise ZeroVariance("PET region has zero variance")
    return volume.with_data(((values - mean) / std).astype(np.float32))


def stack_modalities(ct: Volume, pet: Volume) -> Volume:
    """Two-channel input volume: channel 0 is CT, channel 1 is PET."""
    if ct.shape != pet.shape:
        raise GridMismatch(f"CT grid {ct.shape} differs from PET grid {pet.shape}")
    if not np.allclose(ct.spacing, pet.spacing, atol=1e-6) or not np.allclose(ct.affine, pet.affine, atol=1e-6):
        raise GridMismatch("CT and PET spacing/affine differ")
    data = np.concatenate([ct.data, pet.data], axis=0).astype(np.float32)
    return Volume(data, ct.spacing, ct.affine.copy())
