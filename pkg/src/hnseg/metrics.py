"""Training objective (soft dice + focal) and overlap metrics (DSC, precision, recall)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, _record, add, as_tensor, op, scale
from .errors import ConfigError, EmptyInput, ShapeMismatch

PROB_CLAMP = 1e-7
METRICS = ("dsc", "precision", "recall")
ROW_COLUMNS = ("patient_id", "center_id", "dsc", "precision", "recall")
SUMMARY_COLUMNS = ("fold", "metric", "mean", "std")


@dataclass
class LossConfig:
    dice_eps: float = 1e-5
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    dice_weight: float = 1.0
    focal_weight: float = 1.0

    def __post_init__(self):
        values = (self.dice_eps, self.focal_gamma, self.focal_alpha, self.dice_weight, self.focal_weight)
        if any(v < 0 for v in values):
            raise ConfigError(f"loss settings must be non-negative: {self}")
        if self.dice_weight == 0 and self.focal_weight == 0:
            raise ConfigError("dice_weight and focal_weight cannot both be zero")


def _pair(prob, gt) -> tuple[Tensor, np.ndarray]:
    p = as_tensor(prob)
    g = np.asarray(gt).astype(p.dtype)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    return p, g


@op
def soft_dice_loss(prob, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)."""
    p, g = _pair(prob, gt)
    eps = cfg.dice_eps
    inter = float(np.sum(p.data * g, dtype=np.float64))
    denom = float(np.sum(p.data, dtype=np.float64) + np.sum(g, dtype=np.float64)) + eps
    loss = 1.0 - (2.0 * inter + eps) / denom

    def back(grad):
        d = -(2.0 * g * denom - (2.0 * inter + eps)) / denom ** 2
        return ((grad * d).astype(p.dtype),)

    return _record(np.asarray(loss, dtype=p.dtype), (p,), back)


@op
def focal_loss(prob, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean over voxels of -alpha (1 - p_t)^gamma log(p_t)."""
    p, g = _pair(prob, gt)
    alpha, gamma = cfg.focal_alpha, cfg.focal_gamma
    raw = p.data.astype(np.float64)
    c = np.clip(raw, PROB_CLAMP, 1 - PROB_CLAMP)
    pos = g > 0.5
    pt = np.where(pos, c, 1 - c)
    log_pt = np.log(pt)
    one_minus = 1 - pt
    loss = float(np.mean(-alpha * one_minus ** gamma * log_pt))
    n = raw.size

    def back(grad):
        dpt = one_minus ** gamma / pt
        if gamma != 0:
            dpt = dpt - gamma * one_minus ** (gamma - 1) * log_pt
        d = -alpha * dpt * np.where(pos, 1.0, -1.0)
        d = np.where((raw > PROB_CLAMP) & (raw < 1 - PROB_CLAMP), d, 0.0) / n
        return ((grad * d).astype(p.dtype),)

    return _record(np.asarray(loss, dtype=p.dtype), (p,), back)


def combined_loss(prob, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """dice_weight * soft dice + focal_weight * focal."""
    p = as_tensor(prob)
    total = None
    for weight, fn in ((cfg.dice_weight, soft_dice_loss), (cfg.focal_weight, focal_loss)):
        if weight:
            part = scale(fn(p, gt, cfg), weight)
            total = part if total is None else add(total, part)
    return total


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where prob > threshold (strict), else 0."""
    data = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (data > threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# overlap metrics

def confusion(pred, gt) -> tuple[int, int, int]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def dsc(pred, gt) -> float:
    tp, fp, fn = confusion(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def precision(pred, gt) -> float:
    tp, fp, fn = confusion(pred, gt)
    if tp + fp == 0:
        return 1.0 if fn == 0 else 0.0
    return tp / (tp + fp)


def recall(pred, gt) -> float:
    tp, fp, fn = confusion(pred, gt)
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


@dataclass
class MetricRow:
    patient_id: str
    center_id: str
    dsc: float
    precision: float
    recall: float
    fold: str = ""


def evaluate_case(pred, gt, patient_id: str, center_id: str, fold: str = "") -> MetricRow:
    return MetricRow(patient_id, center_id, dsc(pred, gt), precision(pred, gt), recall(pred, gt), fold)


@dataclass
class MetricsReport:
    """Per-patient rows, per-fold mean/std over patients and the cross-fold summary.

    The summary is the mean and population std of the per-fold means.
    """

    rows: list
    fold_stats: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    fold_id: str = ""

    def rows_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(ROW_COLUMNS)
        for r in self.rows:
            w.writerow([r.patient_id, r.center_id, repr(r.dsc), repr(r.precision), repr(r.recall)])
        return out.getvalue()

    def summary_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for fold, stats in self.fold_stats.items():
            for m in METRICS:
                w.writerow([fold, m, repr(stats[m][0]), repr(stats[m][1])])
        if len(self.fold_stats) > 1:
            for m in METRICS:
                w.writerow(["all", m, repr(self.summary[m][0]), repr(self.summary[m][1])])
        return out.getvalue()


def aggregate(rows: Sequence[MetricRow], fold_id: str = "") -> MetricsReport:
    rows = list(rows)
    if not rows:
        raise EmptyInput("no metric rows to aggregate")
    by_fold: dict = {}
    for r in rows:
        by_fold.setdefault(r.fold or fold_id or "all", []).append(r)
    fold_stats = {}
    for fold, group in by_fold.items():
        fold_stats[fold] = {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in group], dtype=np.float64)
            fold_stats[fold][m] = (float(vals.mean()), float(vals.std()))
    summary = {}
    for m in METRICS:
        means = np.array([fold_stats[f][m][0] for f in fold_stats])
        summary[m] = (float(means.mean()), float(means.std()))
    return MetricsReport(rows, fold_stats, summary, fold_id)


def parse_rows_csv(text: str, fold: str = "") -> list[MetricRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != ROW_COLUMNS:
        raise ValueError(f"metrics CSV columns must be {ROW_COLUMNS}, got {reader.fieldnames}")
    return [MetricRow(r["patient_id"], r["center_id"], float(r["dsc"]), float(r["precision"]),
                      float(r["recall"]), fold) for r in reader]
