"""Dataset manifest, leave-one-center-out folds, AdamW training and fold evaluation."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nifti_io, unetr
from .augment import Sample, apply_pipeline
from .config import TrainConfig
from .errors import BboxWithoutFiles, MissingFile, NonFiniteLoss, ShapeMismatch, SingleCenter
from .metrics import MetricRow, MetricsReport, aggregate, binarize, combined_loss, dsc, evaluate_case
from .volume import (
    CROP_MM,
    BoundingBoxMM,
    PatientCase,
    Volume,
    center_of,
    crop_resample,
    normalize_ct,
    normalize_pet_zscore,
    parse_bbox_csv,
)

log = logging.getLogger(__name__)

SUFFIXES = {"ct": "_ct", "pet": "_pt", "mask": "_gtvt"}
EXTENSIONS = (".nii.gz", ".nii")
MANIFEST_COLUMNS = ("patient_id", "center_id", "ct_path", "pet_path", "mask_path",
                    "x1", "y1", "z1", "x2", "y2", "z2")
LOG_COLUMNS = ("epoch", "train_loss", "val_dsc")


# ---------------------------------------------------------------------------
# manifest and folds

@dataclass
class DatasetManifest:
    cases: list
    root: str = ""

    @property
    def centers(self) -> dict:
        counts: dict = {}
        for c in self.cases:
            counts[c.center_id] = counts.get(c.center_id, 0) + 1
        return dict(sorted(counts.items()))

    def case(self, patient_id: str) -> PatientCase:
        for c in self.cases:
            if c.patient_id == patient_id:
                return c
        raise KeyError(patient_id)

    def index_of(self, patient_id: str) -> int:
        return [c.patient_id for c in self.cases].index(patient_id)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for c in self.cases:
            b = c.bbox
            w.writerow([c.patient_id, c.center_id, c.ct_path, c.pet_path, c.mask_path or "",
                        *(repr(float(v)) for v in (b.x1, b.y1, b.z1, b.x2, b.y2, b.z2))])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str, root: str = "") -> "DatasetManifest":
        reader = csv.DictReader(io.StringIO(text))
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise MissingFile(f"manifest lacks column(s) {missing}")
        cases = []
        for r in reader:
            bbox = BoundingBoxMM(r["patient_id"], *(float(r[k]) for k in ("x1", "y1", "z1", "x2", "y2", "z2")))
            cases.append(PatientCase(r["patient_id"], r["center_id"], r["ct_path"], r["pet_path"],
                                     r["mask_path"] or None, bbox))
        return cls(cases, root)


def find_file(root: Path, patient_id: str, kind: str) -> Optional[Path]:
    for ext in EXTENSIONS:
        p = root / f"{patient_id}{SUFFIXES[kind]}{ext}"
        if p.exists():
            return p
    return None


def build_manifest(root, bbox_csv: str, center_pattern: str = "") -> DatasetManifest:
    """One case per bounding-box row; files are ``<id>_ct``, ``<id>_pt`` and optional ``<id>_gtvt``.

    ``bbox_csv`` is the CSV text. All problems are collected before raising so
    the error lists every affected patient.
    """
    root = Path(root)
    cases, missing, orphan = [], [], []
    for box in parse_bbox_csv(bbox_csv):
        ct = find_file(root, box.patient_id, "ct")
        pet = find_file(root, box.patient_id, "pet")
        mask = find_file(root, box.patient_id, "mask")
        if ct is None and pet is None:
            orphan.append(box.patient_id)
            continue
        if ct is None or pet is None:
            missing.append(f"{box.patient_id} ({'CT' if ct is None else 'PET'})")
            continue
        cases.append(PatientCase(box.patient_id, center_of(box.patient_id, center_pattern or None),
                                 str(ct), str(pet), str(mask) if mask else None, box))
    if orphan:
        err = BboxWithoutFiles(f"bounding box without any image files: {', '.join(orphan + missing)}")
        err.patients = orphan + missing
        raise err
    if missing:
        err = MissingFile(f"missing image file(s): {', '.join(missing)}")
        err.patients = missing
        raise err
    return DatasetManifest(cases, str(root))


@dataclass
class FoldSpec:
    fold_id: str
    train_ids: list
    val_ids: list

    def check(self, manifest: DatasetManifest) -> None:
        """Disjoint, exhaustive, and validation = exactly the held-out center."""
        train, val = set(self.train_ids), set(self.val_ids)
        assert not train & val, "train and validation overlap"
        assert train | val == {c.patient_id for c in manifest.cases}, "fold does not cover the manifest"
        assert val == {c.patient_id for c in manifest.cases if c.center_id == self.fold_id}


def split_leave_one_center_out(manifest: DatasetManifest) -> list[FoldSpec]:
    centers = sorted(manifest.centers)
    if len(centers) < 2:
        raise SingleCenter(f"leave-one-center-out needs at least two centers, got {centers}")
    folds = []
    for center in centers:
        val = [c.patient_id for c in manifest.cases if c.center_id == center]
        train = [c.patient_id for c in manifest.cases if c.center_id != center]
        folds.append(FoldSpec(center, train, val))
    return folds


# ---------------------------------------------------------------------------
# optimizer

def optimizer_step(params: dict, grads: dict, moments: dict, cfg: TrainConfig, t: int) -> tuple[dict, dict]:
    """One AdamW update with bias correction and decoupled weight decay.

    ``moments`` maps name -> (m, v). Returns new (params, moments).
    """
    if t < 1:
        raise ValueError("step counter starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_moments = {}, {}
    for name, w in params.items():
        g = grads[name]
        m, v = moments.get(name, (np.zeros_like(w), np.zeros_like(w)))
        if g.shape != w.shape or m.shape != w.shape:
            raise ShapeMismatch(f"{name}: param {w.shape}, grad {g.shape}, moment {m.shape}")
        dt = w.dtype.type
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))
        decay = 0.0 if unetr.is_no_decay(name) else cfg.weight_decay
        if decay:
            update = update + dt(decay) * w
        new_params[name] = w - dt(cfg.learning_rate) * update
        new_moments[name] = (m, v)
    return new_params, new_moments


# ---------------------------------------------------------------------------
# preprocessing and data

def grid_spacing(grid: int, extent_mm: float = CROP_MM) -> float:
    return extent_mm / grid


def preprocess_case(case: PatientCase, grid: int = 144) -> tuple[Volume, Volume, Optional[Volume]]:
    """Crop/resample CT, PET and mask onto the case's box; CT is normalized, PET kept raw.

    PET z-scoring happens after augmentation because gamma correction needs raw uptake values.
    """
    shape = (grid,) * 3
    spacing = grid_spacing(grid)
    ct = crop_resample(nifti_io.load(case.ct_path), case.bbox, "trilinear", shape, spacing)
    pet = crop_resample(nifti_io.load(case.pet_path), case.bbox, "trilinear", shape, spacing)
    mask = None
    if case.mask_path:
        mask = crop_resample(nifti_io.load(case.mask_path), case.bbox, "nearest", shape, spacing)
        mask = mask.with_data((mask.data > 0.5).astype(np.float32))
    return normalize_ct(ct), pet, mask


def load_sample(case: PatientCase) -> Sample:
    """Preprocessed case files -> Sample (CT normalized, PET raw, mask binary)."""
    ct = nifti_io.load(case.ct_path)
    pet = nifti_io.load(case.pet_path)
    if ct.shape != pet.shape:
        raise ShapeMismatch(f"{case.patient_id}: CT {ct.shape} vs PET {pet.shape}")
    mask = None
    if case.mask_path:
        mask = (nifti_io.load(case.mask_path).data[0] > 0.5).astype(np.uint8)
    image = np.concatenate([ct.data, pet.data], axis=0).astype(np.float32)
    return Sample(image, mask, ct.spacing)


def network_input(sample: Sample) -> np.ndarray:
    """Final (2, S, S, S) input: CT as stored, PET z-scored over the region."""
    pet = normalize_pet_zscore(Volume(sample.image[1:2])).data
    return np.concatenate([sample.image[0:1], pet], axis=0).astype(np.float32)


def file_digest(paths: Sequence) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p:
            h.update(Path(p).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training

@dataclass
class CheckpointRecord:
    """Everything needed to resume a fold bit-exactly."""

    epoch: int
    step: int
    params: dict
    moments: dict
    best_params: dict
    best_dsc: float = -math.inf
    history: list = field(default_factory=list)
    fold_id: str = ""
    config: Optional[dict] = None

    def to_bytes(self) -> bytes:
        named = {f"param/{k}": v for k, v in self.params.items()}
        for k, (m, v) in self.moments.items():
            named[f"m/{k}"] = m
            named[f"v/{k}"] = v
        named.update({f"best/{k}": v for k, v in self.best_params.items()})
        meta = {
            "format": "train-state",
            "epoch": self.epoch,
            "step": self.step,
            "best_dsc": self.best_dsc if math.isfinite(self.best_dsc) else None,
            "history": self.history,
            "fold_id": self.fold_id,
            "train_config": self.config,
            "config": (self.config or {}).get("model"),
        }
        return ad.save_tensors(named, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CheckpointRecord":
        named, meta = ad.load_tensors(blob)
        params = {k[6:]: v for k, v in named.items() if k.startswith("param/")}
        moments = {k: (named[f"m/{k}"], named[f"v/{k}"]) for k in params if f"m/{k}" in named}
        best = {k[5:]: v for k, v in named.items() if k.startswith("best/")}
        best_dsc = meta["best_dsc"] if meta["best_dsc"] is not None else -math.inf
        return cls(meta["epoch"], meta["step"], params, moments, best, best_dsc,
                   [tuple(r) for r in meta["history"]], meta["fold_id"], meta["train_config"])


def train_loss_step(params: dict, samples: Sequence[tuple[int, Sample]], cfg: TrainConfig, epoch: int):
    """Mean combined loss over a batch and its gradients (one tape per sample, summed)."""
    T = unetr.as_tensors(params, requires_grad=True)
    losses = []
    for index, sample in samples:
        aug = apply_pipeline(sample, cfg.augment, index, epoch)
        x = network_input(aug)
        gt = aug.mask[None].astype(np.float32)
        rng = None
        if cfg.model.dropout > 0:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, epoch, 1]))
        with ad.Tape() as tape:
            prob = ad.sigmoid(unetr.forward(x, T, cfg.model, rng=rng))
            loss = combined_loss(prob, gt, cfg.loss)
        ad.backward(tape, loss)
        losses.append(float(loss.data))
    n = len(samples)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) / np.float32(n) for k, t in T.items()}
    return float(np.mean(losses)), grads


def predict_probs(params: dict, sample: Sample, model: unetr.UnetrConfig) -> np.ndarray:
    return unetr.predict(network_input(sample), params, model)[0]


def evaluate_samples(params: dict, samples: dict, manifest: DatasetManifest, ids, model, fold_id="") -> list:
    rows = []
    for pid in ids:
        s = samples[pid]
        if s.mask is None:
            continue
        pred = binarize(predict_probs(params, s, model))
        rows.append(evaluate_case(pred, s.mask, pid, manifest.case(pid).center_id, fold_id))
    return rows


def batches(order: Sequence, size: int) -> list:
    """Consecutive chunks; the last partial chunk is kept."""
    return [list(order[i : i + size]) for i in range(0, len(order), size)]


def shuffle_order(ids: Sequence, seed: int, epoch: int) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 7]))
    return [ids[i] for i in rng.permutation(len(ids))]


def train_fold(
    fold: FoldSpec,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir=None,
    resume: Optional[CheckpointRecord] = None,
    stop_after_epoch: Optional[int] = None,
    samples: Optional[dict] = None,
    on_epoch: Optional[Callable] = None,
) -> tuple[CheckpointRecord, MetricsReport]:
    """Train on the fold's training cases, select the best epoch by validation DSC.

    ``stop_after_epoch`` simulates an interruption: the loop returns the state
    after that epoch without the final evaluation (report is None).
    """
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if samples is None:
        samples = {pid: load_sample(manifest.case(pid)) for pid in list(fold.train_ids) + list(fold.val_ids)}
    index = {c.patient_id: i for i, c in enumerate(manifest.cases)}
    for pid in fold.train_ids:
        if samples[pid].mask is None:
            raise MissingFile(f"training case {pid} has no mask")
    aug = replace(cfg.augment, seed=cfg.seed)
    run_cfg = replace(cfg, augment=aug)

    if resume is None:
        params = unetr.init_params(cfg.model, cfg.seed)
        state = CheckpointRecord(0, 0, params, {}, {k: v.copy() for k, v in params.items()},
                                 fold_id=fold.fold_id, config=cfg.to_dict())
    else:
        state = resume

    for epoch in range(state.epoch, cfg.epochs):
        epoch_losses = []
        order = shuffle_order(list(fold.train_ids), cfg.seed, epoch)
        for b, batch in enumerate(batches(order, cfg.batch_size)):
            loss, grads = train_loss_step(state.params, [(index[p], samples[p]) for p in batch], run_cfg, epoch)
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            state.step += 1
            state.params, state.moments = optimizer_step(state.params, grads, state.moments, cfg, state.step)
            epoch_losses.append(loss)
        rows = evaluate_samples(state.params, samples, manifest, fold.val_ids, cfg.model, fold.fold_id)
        val = float(np.mean([r.dsc for r in rows])) if rows else float("nan")
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        state.history.append((epoch + 1, train_loss, val))
        if rows and val > state.best_dsc:
            state.best_dsc = val
            state.best_params = {k: v.copy() for k, v in state.params.items()}
        state.epoch = epoch + 1
        log.info("fold %s epoch %d loss %.5f val_dsc %.4f", fold.fold_id, epoch + 1, train_loss, val)
        if on_epoch:
            on_epoch(state)
        if out and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            (out / "last.ckpt").write_bytes(state.to_bytes())
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch and state.epoch < cfg.epochs:
            return state, None

    final = state.best_params if math.isfinite(state.best_dsc) else state.params
    rows = evaluate_samples(final, samples, manifest, fold.val_ids, cfg.model, fold.fold_id)
    report = aggregate(rows, fold.fold_id) if rows else MetricsReport([], fold_id=fold.fold_id)
    if out:
        (out / "last.ckpt").write_bytes(state.to_bytes())
        (out / "best.ckpt").write_bytes(unetr.checkpoint_bytes(
            final, cfg.model, {"fold_id": fold.fold_id, "best_dsc": state.best_dsc if rows else None}))
        (out / "loss_log.csv").write_text(format_loss_log(state.history))
        (out / "metrics.csv").write_text(report.rows_csv())
        if rows:
            (out / "summary.csv").write_text(report.summary_csv())
    return state, report


def format_loss_log(history) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for epoch, loss, val in history:
        w.writerow([epoch, repr(float(loss)), repr(float(val))])
    return out.getvalue()


def cross_validate(manifest: DatasetManifest, cfg: TrainConfig, out_dir=None,
                   samples: Optional[dict] = None) -> tuple[list, MetricsReport]:
    """Train every leave-one-center-out fold; summary is mean +- std of per-fold means."""
    folds = split_leave_one_center_out(manifest)
    if samples is None:
        samples = {c.patient_id: load_sample(c) for c in manifest.cases}
    reports, all_rows = [], []
    for fold in folds:
        sub = Path(out_dir) / f"fold_{fold.fold_id}" if out_dir else None
        _, report = train_fold(fold, manifest, cfg, sub, samples=samples)
        reports.append(report)
        all_rows.extend(report.rows)
    summary = aggregate(all_rows, "all")
    if out_dir:
        out = Path(out_dir)
        (out / "metrics.csv").write_text(summary.rows_csv())
        (out / "summary.csv").write_text(summary.summary_csv())
    return reports, summary


def predict_case(case: PatientCase, checkpoint: bytes) -> tuple[Volume, Volume]:
    """Raw case -> (binary mask, probability) volumes on the crop grid with the crop's affine."""
    params, model, _ = unetr.load_checkpoint(checkpoint)
    ct, pet, _ = preprocess_case(case, model.img_size)
    sample = Sample(np.concatenate([ct.data, pet.data]), None, ct.spacing)
    prob = predict_probs(params, sample, model)
    mask = binarize(prob).astype(np.float32)
    return ct.with_data(mask[None]), ct.with_data(prob[None].astype(np.float32))
