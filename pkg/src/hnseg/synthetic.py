"""Synthetic PET/CT cases for tests, demos and the overfit experiment.

PET is a bright sphere over a noisy background, CT a linear ramp, and the
mask the sphere itself.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import nifti_io
from .augment import Sample
from .volume import BoundingBoxMM, Volume, format_bbox_csv


def sphere_mask(n: int, radius: float, center=None) -> np.ndarray:
    c = np.full(3, (n - 1) / 2) if center is None else np.asarray(center, dtype=np.float64)
    idx = np.indices((n, n, n), dtype=np.float64)
    r2 = sum((idx[a] - c[a]) ** 2 for a in range(3))
    return (r2 <= radius ** 2).astype(np.uint8)


def synthetic_sample(n: int = 48, radius: float | None = None, seed: int = 0, noise: float = 0.1) -> Sample:
    """Two-channel sample on an n^3 grid: CT ramp in [-1, 1], raw PET sphere + noise."""
    rng = np.random.default_rng(seed)
    radius = n / 5 if radius is None else radius
    center = (n - 1) / 2 + rng.uniform(-n / 10, n / 10, size=3)
    mask = sphere_mask(n, radius, center)
    ramp = np.linspace(-1.0, 1.0, n, dtype=np.float32)
    ct = np.broadcast_to(ramp[:, None, None], (n, n, n)).astype(np.float32)
    pet = 1.0 + 4.0 * mask + noise * np.abs(rng.standard_normal((n, n, n)))
    return Sample(np.stack([ct, pet.astype(np.float32)]), mask, (1.0, 1.0, 1.0))


def write_raw_case(root, patient_id: str, n: int = 40, spacing: float = 4.0, seed: int = 0,
                   with_mask: bool = True) -> BoundingBoxMM:
    """Write <id>_ct/_pt/_gtvt NIfTI files of a coarse scan and return a box centred on the lesion.

    The box spans the whole scan's central 144 mm so any crop grid lands inside.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    origin = rng.uniform(-20, 20, size=3)
    affine = np.zeros((3, 4))
    affine[:, :3] = np.eye(3) * spacing
    affine[:, 3] = origin
    mask = sphere_mask(n, n / 6)
    idx = np.indices((n, n, n), dtype=np.float64)
    hu = (idx[2] - n / 2) * 60.0 - 200.0
    pet = 1.0 + 6.0 * mask + 0.2 * np.abs(rng.standard_normal((n, n, n)))
    sp = (spacing,) * 3
    nifti_io.save(Volume(hu.astype(np.float32), sp, affine), root / f"{patient_id}_ct.nii.gz")
    nifti_io.save(Volume(pet.astype(np.float32), sp, affine), root / f"{patient_id}_pt.nii.gz")
    if with_mask:
        nifti_io.save(Volume(mask.astype(np.float32), sp, affine), root / f"{patient_id}_gtvt.nii.gz")
    centre = origin + spacing * (n - 1) / 2
    lo, hi = centre - 72.0, centre + 72.0
    return BoundingBoxMM(patient_id, *lo, *hi)


def write_raw_dataset(root, counts: dict, n: int = 40, spacing: float = 4.0) -> str:
    """One raw case per (center, k); returns the bounding-box CSV text (also written to root/bbox.csv)."""
    boxes = []
    seed = 0
    for center, k in counts.items():
        for i in range(k):
            boxes.append(write_raw_case(root, f"{center}{i + 1:03d}", n, spacing, seed))
            seed += 1
    text = format_bbox_csv(boxes)
    (Path(root) / "bbox.csv").write_text(text)
    return text
