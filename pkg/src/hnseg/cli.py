"""Command line entry point: ``hnseg <subcommand> ...``.

Exit codes: 0 success, 2 input errors, 3 numerical failures, 4 config errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nifti_io, pipeline
from .augment import Sample, apply_pipeline
from .config import TrainConfig, apply_overrides, format_config, parse_config
from .errors import ConfigError, EmptyInput, GridMismatch, HnsegError, MissingFile, UnpairedPatient
from .metrics import aggregate, evaluate_case
from .volume import PatientCase, Volume, center_of

log = logging.getLogger("hnseg")

STATE_FILE = "preprocess_state.json"
MANIFEST_FILE = "manifest.csv"
REPORT_FILE = "run_report.json"
PRED_GRAY, GT_GRAY = 255, 128
_ID_RE = re.compile(r"^(?P<pid>.+?)(?:_(?:pred|gtvt|mask|seg))?\.nii(?:\.gz)?$")


def load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text())
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "augment", None) is not None:
        overrides.append(f"augment.pipeline={args.augment}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"epochs={args.epochs}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# preprocess

def case_digest(case: PatientCase, grid: int) -> str:
    h = hashlib.sha256(f"{grid}|{case.bbox}".encode())
    h.update(pipeline.file_digest([case.ct_path, case.pet_path, case.mask_path]).encode())
    return h.hexdigest()


def cmd_preprocess(args) -> int:
    cfg = load_config(args)
    grid = args.grid or cfg.model.img_size
    bbox_path = Path(args.bbox) if args.bbox else Path(args.data_root) / "bbox.csv"
    if not bbox_path.exists():
        raise MissingFile(f"bounding-box CSV not found: {bbox_path}")
    manifest = pipeline.build_manifest(args.data_root, bbox_path.read_text(), cfg.center_pattern)
    if not manifest.cases:
        raise EmptyInput(f"no cases listed in {bbox_path}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / STATE_FILE
    state = json.loads(state_path.read_text()) if state_path.exists() else {}
    done, skipped, cases = 0, 0, []
    for case in manifest.cases:
        names = [f"{case.patient_id}_ct.nii.gz", f"{case.patient_id}_pt.nii.gz"]
        if case.mask_path:
            names.append(f"{case.patient_id}_gtvt.nii.gz")
        digest = case_digest(case, grid)
        if state.get(case.patient_id) == digest and all((out / n).exists() for n in names):
            skipped += 1
        else:
            ct, pet, mask = pipeline.preprocess_case(case, grid)
            for vol, name in zip((ct, pet, mask), names):
                nifti_io.save(vol, out / name)
            state[case.patient_id] = digest
            done += 1
        cases.append(PatientCase(case.patient_id, case.center_id, names[0], names[1],
                                 names[2] if case.mask_path else None, case.bbox))
    (out / MANIFEST_FILE).write_text(pipeline.DatasetManifest(cases).to_csv())
    write_json(state_path, state)
    print(f"preprocessed {done} case(s), {skipped} up to date, grid {grid}^3 -> {out}")
    return 0


def load_manifest(data_dir) -> pipeline.DatasetManifest:
    """Manifest written by ``preprocess``; relative paths resolve against its directory."""
    root = Path(data_dir)
    path = root / MANIFEST_FILE
    if not path.exists():
        raise MissingFile(f"no {MANIFEST_FILE} in {root}; run preprocess first")
    manifest = pipeline.DatasetManifest.from_csv(path.read_text(), str(root))
    for c in manifest.cases:
        c.ct_path = str(root / c.ct_path)
        c.pet_path = str(root / c.pet_path)
        c.mask_path = str(root / c.mask_path) if c.mask_path else None
    return manifest


def load_samples(manifest, cfg: TrainConfig) -> dict:
    samples = {c.patient_id: pipeline.load_sample(c) for c in manifest.cases}
    want = (cfg.model.img_size,) * 3
    for pid, s in samples.items():
        if s.image.shape[1:] != want:
            raise ConfigError(f"{pid}: preprocessed grid {s.image.shape[1:]} does not match model.img_size {want}")
    return samples


# ---------------------------------------------------------------------------
# training

def run_report(cfg: TrainConfig, command: str, **extra) -> dict:
    return {"command": command, "augment_pipeline": cfg.augment.label,
            "augment_enabled": list(cfg.augment.enabled), "config": cfg.to_dict(), **extra}


def cmd_train(args) -> int:
    cfg = load_config(args)
    manifest = load_manifest(args.data)
    folds = {f.fold_id: f for f in pipeline.split_leave_one_center_out(manifest)}
    if args.fold not in folds:
        raise ConfigError(f"unknown fold {args.fold!r}; centers are {sorted(folds)}")
    fold = folds[args.fold]
    samples = load_samples(manifest, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    resume = pipeline.CheckpointRecord.from_bytes(Path(args.resume).read_bytes()) if args.resume else None
    state, report = pipeline.train_fold(fold, manifest, cfg, out, resume=resume, samples=samples)
    summary = {m: list(v) for m, v in report.summary.items()}
    write_json(out / REPORT_FILE, run_report(cfg, "train", fold=fold.fold_id, epochs_run=state.epoch,
                                             train_ids=fold.train_ids, val_ids=fold.val_ids, summary=summary))
    if summary:
        print(f"fold {fold.fold_id}: dsc {summary['dsc'][0]:.4f}")
    return 0


def cmd_cv(args) -> int:
    cfg = load_config(args)
    manifest = load_manifest(args.data)
    samples = load_samples(manifest, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    _, summary = pipeline.cross_validate(manifest, cfg, out, samples=samples)
    write_json(out / REPORT_FILE, run_report(
        cfg, "cv", folds=sorted(manifest.centers),
        summary={m: list(v) for m, v in summary.summary.items()}))
    mean, std = summary.summary["dsc"]
    print(f"cross-validated dsc {mean:.4f} +- {std:.4f} over {len(summary.fold_stats)} folds")
    return 0


# ---------------------------------------------------------------------------
# evaluation and prediction

def index_masks(directory) -> dict:
    found = {}
    for p in sorted(Path(directory).iterdir()):
        if p.name.endswith((f"_prob.nii", "_prob.nii.gz", "_ct.nii", "_ct.nii.gz", "_pt.nii", "_pt.nii.gz")):
            continue
        m = _ID_RE.match(p.name)
        if m:
            found[m.group("pid")] = p
    return found


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    preds, gts = index_masks(args.pred), index_masks(args.gt)
    unpaired = sorted(set(preds) ^ set(gts))
    if unpaired:
        raise UnpairedPatient(f"unpaired patient(s): {', '.join(unpaired)}")
    if not preds:
        raise EmptyInput("no masks found")
    rows = []
    for pid in sorted(preds):
        pred = nifti_io.load(preds[pid]).data[0] > 0.5
        gt = nifti_io.load(gts[pid]).data[0] > 0.5
        if pred.shape != gt.shape:
            raise GridMismatch(f"{pid}: prediction grid {pred.shape} vs ground truth {gt.shape}")
        rows.append(evaluate_case(pred, gt, pid, center_of(pid, cfg.center_pattern or None)))
    report = aggregate(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.rows_csv())
    (out / "summary.csv").write_text(report.summary_csv())
    print(f"evaluated {len(rows)} case(s): dsc {report.summary['dsc'][0]:.4f}")
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(args)
    bbox_path = Path(args.bbox) if args.bbox else Path(args.data_root) / "bbox.csv"
    if not bbox_path.exists():
        raise MissingFile(f"bounding-box CSV not found: {bbox_path}")
    manifest = pipeline.build_manifest(args.data_root, bbox_path.read_text(), cfg.center_pattern)
    blob = Path(args.checkpoint).read_bytes()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in manifest.cases:
        mask, prob = pipeline.predict_case(case, blob)
        nifti_io.save(mask, out / f"{case.patient_id}_pred.nii.gz")
        nifti_io.save(prob, out / f"{case.patient_id}_prob.nii.gz")
    print(f"predicted {len(manifest.cases)} case(s) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# images

def to_gray(slice2d: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (constant slices map to 0)."""
    s = slice2d.astype(np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi <= lo:
        return np.zeros(s.shape, dtype=np.uint8)
    return np.round((s - lo) / (hi - lo) * 255).astype(np.uint8)


def contour(mask2d: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the image border counts as outside)."""
    m = np.pad(mask2d.astype(bool), 1)
    inner = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def render_slice(image2d, pred2d=None, gt2d=None) -> np.ndarray:
    """Grayscale slice with the ground-truth contour at GT_GRAY and the prediction contour at 255.

    Arrays are indexed (x, y); the result is (rows = y, cols = x).
    """
    gray = to_gray(image2d)
    if gt2d is not None:
        gray[contour(gt2d)] = GT_GRAY
    if pred2d is not None:
        gray[contour(pred2d)] = PRED_GRAY
    return gray.T.copy()


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)


def overlay_slices(image, pred, gt, patient: str, out: Path, k: int = 0) -> list:
    nz = image.shape[2]
    mid = nz // 2
    written = []
    for z in range(max(0, mid - k), min(nz, mid + k + 1)):
        pix = render_slice(image[:, :, z],
                           None if pred is None else pred[:, :, z] > 0.5,
                           None if gt is None else gt[:, :, z] > 0.5)
        path = out / f"{patient}_z{z}.pgm"
        write_pgm(path, pix)
        written.append(path)
    return written


def cmd_overlay(args) -> int:
    image = nifti_io.load(args.image).data[args.channel]
    pred = nifti_io.load(args.mask).data[0]
    gt = nifti_io.load(args.gt).data[0] if args.gt else None
    for other, name in ((pred, "mask"), (gt, "ground truth")):
        if other is not None and other.shape != image.shape:
            raise GridMismatch(f"{name} grid {other.shape} differs from image grid {image.shape}")
    patient = args.patient or _ID_RE.match(Path(args.mask).name).group("pid")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = overlay_slices(image, pred, gt, patient, out, args.slices)
    print(f"wrote {len(written)} slice(s) -> {out}")
    return 0


def cmd_augment_preview(args) -> int:
    cfg = load_config(args)
    manifest = load_manifest(args.data)
    pid = args.patient or manifest.cases[0].patient_id
    try:
        case = manifest.case(pid)
    except KeyError:
        raise MissingFile(f"patient {pid!r} not in manifest") from None
    sample = pipeline.load_sample(case)
    spec = replace(cfg.augment, seed=cfg.seed)
    index = manifest.index_of(pid)
    aug = apply_pipeline(sample, spec, index, args.epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ref = nifti_io.load(case.ct_path)
    for ch, tag in ((0, "ct"), (1, "pt")):
        nifti_io.save(ref.with_data(aug.image[ch][None]), out / f"{pid}_aug_{tag}.nii.gz")
    if aug.mask is not None:
        nifti_io.save(ref.with_data(aug.mask[None].astype(np.float32)), out / f"{pid}_aug_gtvt.nii.gz")
    overlay_slices(aug.image[1], aug.mask, None, f"{pid}_aug", out)
    write_json(out / REPORT_FILE, run_report(cfg, "augment-preview", patient=pid, sample_index=index,
                                             epoch=args.epoch))
    print(f"augmented {pid} with {cfg.augment.label} -> {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hnseg", description="PET/CT tumour segmentation with UNETR")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training=False):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        if training:
            p.add_argument("--augment", help="augmentation pipeline, e.g. NA or MR,RT,GC,ED")
            p.add_argument("--epochs", type=int)
        return p

    p = common(sub.add_parser("preprocess", help="crop, resample and normalize raw cases"))
    p.add_argument("--data-root", required=True)
    p.add_argument("--bbox", help="bounding-box CSV (default <data-root>/bbox.csv)")
    p.add_argument("--grid", type=int, help="voxels per axis over the 144 mm crop (default model.img_size)")
    p.set_defaults(func=cmd_preprocess)

    p = common(sub.add_parser("train", help="train one leave-one-center-out fold"), training=True)
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.add_argument("--fold", required=True, help="held-out center id")
    p.add_argument("--resume", help="resume from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("cv", help="train and evaluate every fold"), training=True)
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.set_defaults(func=cmd_cv)

    p = common(sub.add_parser("evaluate", help="score predicted masks against ground truth"))
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("predict", help="segment raw cases with a checkpoint"))
    p.add_argument("--data-root", required=True)
    p.add_argument("--bbox")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_predict)

    p = common(sub.add_parser("overlay", help="write axial PGM slices with mask contours"))
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--gt")
    p.add_argument("--patient")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--slices", type=int, default=0, help="also write +-k slices around the middle")
    p.set_defaults(func=cmd_overlay)

    p = common(sub.add_parser("augment-preview", help="apply the augmentation pipeline to one case"),
               training=True)
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.add_argument("--patient")
    p.add_argument("--epoch", type=int, default=0)
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except HnsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
