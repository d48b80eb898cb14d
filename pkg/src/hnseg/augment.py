"""Seeded volumetric augmentations: mirroring, axial rotation, zoom, PET gamma, elastic warp.

All randomness comes from a generator keyed by (seed, sample index, epoch),
so results do not depend on loading order or worker count.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AngleOutOfRange, ConfigError, GridTooSmall, NegativeInput
from .volume import fill_value, sample_volume

CODES = ("MR", "RT", "ZM", "GC", "ED")
PET_CHANNEL = 1

# column headers of the augmentation ablation, accepted verbatim
TABLE1_PIPELINES = (
    "NA",
    "MR,RT",
    "MR,RT,ZM",
    "MR,RT,GC",
    "MR,RT,ED",
    "MR,RT,ZM,GC",
    "MR,RT,ZM,GC,ED",
    "MR,RT,GC,ED",
)
BEST_PIPELINE = "MR,RT,GC,ED"


@dataclass
class Sample:
    """Image channels (0 = CT, 1 = raw PET) and an optional binary mask on the same grid."""

    image: np.ndarray
    mask: Optional[np.ndarray] = None
    spacing: tuple = (1.0, 1.0, 1.0)

    def copy(self) -> "Sample":
        return Sample(self.image.copy(), None if self.mask is None else self.mask.copy(), self.spacing)


def parse_pipeline(name: str) -> tuple:
    """'NA' -> (); 'MR,RT' -> ('MR', 'RT'). Codes are returned in application order."""
    text = name.strip()
    if text.upper() in ("NA", ""):
        return ()
    codes = [c.strip().upper() for c in text.split(",") if c.strip()]
    unknown = [c for c in codes if c not in CODES]
    if unknown:
        raise ConfigError(f"unknown augmentation code(s) {unknown}; expected a subset of {CODES} or NA")
    if len(set(codes)) != len(codes):
        raise ConfigError(f"duplicate augmentation code in {name!r}")
    return tuple(c for c in CODES if c in codes)


@dataclass
class AugmentSpec:
    enabled: tuple = ()
    probability: dict = field(default_factory=lambda: {c: 0.5 for c in CODES})
    rotation_range: tuple = (-45.0, 45.0)
    zoom_factor: float = 1.25
    gamma_range: tuple = (0.5, 2.0)
    elastic_grid: int = 4
    elastic_sigma_mm: float = 4.0
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if isinstance(self.enabled, str):
            self.label = self.label or self.enabled
            self.enabled = parse_pipeline(self.enabled)
        self.enabled = tuple(c for c in CODES if c in self.enabled)
        if not self.label:
            self.label = ",".join(self.enabled) or "NA"
        probs = {c: 0.5 for c in CODES}
        probs.update(self.probability)
        self.probability = probs
        if any(not 0.0 <= p <= 1.0 for p in probs.values()):
            raise ConfigError(f"augmentation probabilities must lie in [0, 1]: {probs}")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ConfigError(f"gamma range {self.gamma_range} must be positive and ordered")
        if not self.zoom_factor > 1:
            raise ConfigError(f"zoom factor {self.zoom_factor} must exceed 1")
        a, b = self.rotation_range
        if not -45.0 <= a <= b <= 45.0:
            raise ConfigError(f"rotation range {self.rotation_range} must lie within [-45, 45]")
        if self.elastic_grid < 2 or self.elastic_sigma_mm < 0:
            raise ConfigError("elastic grid must be >= 2 and sigma >= 0")

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "AugmentSpec":
        return cls(enabled=parse_pipeline(name), label=name.strip(), **kwargs)


# ---------------------------------------------------------------------------
# geometric helpers

def _resample(sample: Sample, coords: np.ndarray) -> Sample:
    """Sample every image channel (trilinear) and the mask (nearest) at the same coordinates."""
    image = np.empty((sample.image.shape[0],) + coords.shape[1:], dtype=np.float32)
    for ch in range(sample.image.shape[0]):
        chan = sample.image[ch]
        image[ch] = sample_volume(chan, coords, "trilinear", fill_value(chan, "trilinear"))
    mask = None
    if sample.mask is not None:
        mask = sample_volume(sample.mask, coords, "nearest", 0.0).astype(sample.mask.dtype)
    return Sample(image, mask, sample.spacing)


def _index_grid(shape) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"))


def mirror_lr(sample: Sample) -> Sample:
    """Flip along the first spatial (left-right) axis."""
    image = np.ascontiguousarray(sample.image[:, ::-1])
    mask = None if sample.mask is None else np.ascontiguousarray(sample.mask[::-1])
    return Sample(image, mask, sample.spacing)


def rotate_axial(sample: Sample, angle_deg: float) -> Sample:
    """Rotate about the z axis through the volume centre."""
    if not -45.0 <= angle_deg <= 45.0:
        raise AngleOutOfRange(f"rotation angle {angle_deg} outside [-45, 45]")
    if angle_deg == 0:
        return sample.copy()
    shape = sample.image.shape[1:]
    grid = _index_grid(shape)
    cx, cy = (shape[0] - 1) / 2, (shape[1] - 1) / 2
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    dx, dy = grid[0] - cx, grid[1] - cy
    # inverse map: output voxel pulls from the source rotated by -angle
    grid[0] = c * dx + s * dy + cx
    grid[1] = -s * dx + c * dy + cy
    return _resample(sample, grid)


def zoom_crop(sample: Sample, rng: np.random.Generator, factor: float = 1.25) -> Sample:
    """Random sub-cube of edge round(n / factor), resized back to the full grid.

    Resizing maps the corner voxel centres of the sub-cube onto those of the output.
    """
    shape = sample.image.shape[1:]
    crop = [int(round(n / factor)) for n in shape]
    if min(crop) < 2:
        raise GridTooSmall(f"grid {shape} too small to zoom by {factor}")
    corner = [int(rng.integers(0, n - m + 1)) for n, m in zip(shape, crop)]
    axes = [corner[a] + np.arange(shape[a]) * ((crop[a] - 1) / (shape[a] - 1)) for a in range(3)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return _resample(sample, coords)


def gamma_pet(sample: Sample, gamma: float) -> Sample:
    """v -> v_max (v / v_max)^gamma on the raw PET channel only."""
    if gamma <= 0:
        raise ConfigError(f"gamma {gamma} must be positive")
    pet = sample.image[PET_CHANNEL]
    if np.any(pet < 0):
        raise NegativeInput("gamma correction needs non-negative raw PET values")
    out = sample.copy()
    vmax = float(pet.max())
    if gamma == 1 or vmax == 0:
        return out
    out.image[PET_CHANNEL] = (vmax * (pet.astype(np.float64) / vmax) ** gamma).astype(np.float32)
    return out


def elastic_deform(sample: Sample, rng, sigma_mm: float = 4.0, grid: int = 4) -> Sample:
    """Warp by a smooth displacement field.

    Per-axis displacements are drawn i.i.d. N(0, sigma_mm) on a ``grid``^3
    control lattice spanning the volume corners, upsampled trilinearly and
    added to the sampling coordinates.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    control = rng.normal(0.0, 1.0, size=(3, grid, grid, grid)) * sigma_mm
    if sigma_mm == 0:
        return sample.copy()
    shape = sample.image.shape[1:]
    axes = [np.arange(n) * ((grid - 1) / max(n - 1, 1)) for n in shape]
    at = np.stack(np.meshgrid(*axes, indexing="ij"))
    coords = _index_grid(shape)
    for a in range(3):
        coords[a] += sample_volume(control[a], at, "trilinear", 0.0) / sample.spacing[a]
    return _resample(sample, coords)


def augment_rng(seed: int, sample_index: int, epoch: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, sample, epoch)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, sample_index, epoch])))


def draw_plan(spec: AugmentSpec, sample_index: int, epoch: int = 0) -> list:
    """Which augmentations fire for a key, with their parameters, in application order.

    Every enabled augmentation consumes the same number of draws whether or not
    it fires, so the plan for one code never depends on another's gate.
    """
    rng = augment_rng(spec.seed, sample_index, epoch)
    plan = []
    for code in spec.enabled:
        fire = rng.random() < spec.probability[code]
        u = rng.random()
        sub_seed = int(rng.integers(0, 2 ** 63))
        if not fire:
            continue
        if code == "RT":
            lo, hi = spec.rotation_range
            plan.append((code, lo + (hi - lo) * u))
        elif code == "GC":
            lo, hi = np.log(spec.gamma_range[0]), np.log(spec.gamma_range[1])
            plan.append((code, float(np.exp(lo + (hi - lo) * u))))
        else:
            plan.append((code, sub_seed))
    return plan


def apply_pipeline(sample: Sample, spec: AugmentSpec, sample_index: int, epoch: int = 0) -> Sample:
    out = sample
    for code, param in draw_plan(spec, sample_index, epoch):
        if code == "MR":
            out = mirror_lr(out)
        elif code == "RT":
            out = rotate_axial(out, param)
        elif code == "ZM":
            out = zoom_crop(out, np.random.default_rng(param), spec.zoom_factor)
        elif code == "GC":
            out = gamma_pet(out, param)
        elif code == "ED":
            out = elastic_deform(out, np.random.default_rng(param), spec.elastic_sigma_mm, spec.elastic_grid)
    return out if out is not sample else sample.copy()


__all__ = [
    "Sample", "AugmentSpec", "TABLE1_PIPELINES", "BEST_PIPELINE", "CODES", "parse_pipeline",
    "mirror_lr", "rotate_axial", "zoom_crop", "gamma_pet", "elastic_deform", "apply_pipeline",
    "draw_plan", "augment_rng",
]
