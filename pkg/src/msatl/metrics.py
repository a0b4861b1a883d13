"""Pixel confusion counts and overlap scores.

Degenerate conventions: when prediction and ground truth are both empty every
score is 1.0; an empty ground truth with a non-empty prediction scores 0.0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import torch

METRICS = ("iou", "dice", "f2", "f05")


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def iou(c: ConfusionCounts, exclude_tp: bool = False) -> float:
    """Jaccard index tp / (tp + fp + fn).

    ``exclude_tp=True`` evaluates tp / (fp + fn) instead, the variant with TP
    missing from the denominator; it is unbounded and kept for audits only.
    """
    if exclude_tp:
        denom = c.fp + c.fn
        if denom == 0:
            return math.inf if c.tp else 1.0
        return c.tp / denom
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def f_beta(c: ConfusionCounts, beta: float) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    denom = (1 + b2) * c.tp + b2 * c.fn + c.fp
    if denom == 0:
        return 1.0
    return (1 + b2) * c.tp / denom


def dice(c: ConfusionCounts) -> float:
    return f_beta(c, 1.0)


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return 1.0 if denom == 0 else c.tp / denom


def recall(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


@dataclass(frozen=True)
class ImageScores:
    sample_id: str
    iou: float
    dice: float
    f2: float
    f05: float

    @classmethod
    def from_counts(cls, sample_id: str, c: ConfusionCounts) -> "ImageScores":
        return cls(sample_id, iou(c), dice(c), f_beta(c, 2.0), f_beta(c, 0.5))


def aggregate(per_image: Iterable[ImageScores], ddof: int = 0) -> dict[str, tuple[float, float]]:
    """Mean and std per metric in percent, summed in sample_id order."""
    rows = sorted(per_image, key=lambda s: s.sample_id)
    out = {}
    for name in METRICS:
        values = np.array([getattr(r, name) for r in rows], dtype=np.float64) * 100.0
        if values.size == 0:
            out[name] = (math.nan, math.nan)
            continue
        std = float(values.std(ddof=ddof)) if values.size > ddof else 0.0
        out[name] = (float(values.mean()), std)
    return out


@dataclass
class MetricReport:
    per_image: list[ImageScores]
    ddof: int = 0
    aggregate: dict[str, tuple[float, float]] = field(init=False)

    def __post_init__(self):
        self.per_image = sorted(self.per_image, key=lambda s: s.sample_id)
        self.aggregate = aggregate(self.per_image, self.ddof)

    def mean(self, metric: str) -> float:
        return self.aggregate[metric][0]

    def std(self, metric: str) -> float:
        return self.aggregate[metric][1]

    def format(self, metric: str) -> str:
        m, s = self.aggregate[metric]
        return f"{m:.3f}±{s:.3f}"

    def to_csv(self, path) -> Path:
        """Per-image rows at full precision, then a 3-decimal aggregate block."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", *METRICS])
            for r in self.per_image:
                w.writerow([r.sample_id, *(repr(float(getattr(r, m)) * 100.0) for m in METRICS)])
            w.writerow([])
            w.writerow(["aggregate", *METRICS])
            w.writerow(["mean", *(f"{self.aggregate[m][0]:.3f}" for m in METRICS)])
            w.writerow(["std", *(f"{self.aggregate[m][1]:.3f}" for m in METRICS)])
        return path

    @classmethod
    def from_csv(cls, path, ddof: int = 0) -> "MetricReport":
        rows = []
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["sample_id", *METRICS]:
                raise ValueError(f"{path}: unexpected header {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    break
                try:
                    values = [float(v) / 100.0 for v in row[1:]]
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
                rows.append(ImageScores(row[0], *values))
        return cls(rows, ddof)


@torch.no_grad()
def evaluate(model, dataset, batch_size: int = 16, ddof: int = 0) -> MetricReport:
    """Score every sample of a fully labeled dataset with the fused target predictor."""
    from .network import predict

    samples = sorted(dataset.samples, key=lambda s: s.sample_id)
    for s in samples:
        if not s.labeled or s.mask is None:
            raise ValueError(f"evaluation set contains unlabeled sample {s.sample_id}")
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk])).unsqueeze(1)
        preds = predict(model, images).numpy()
        for s, p in zip(chunk, preds):
            scores.append(ImageScores.from_counts(s.sample_id, confusion(p, s.mask)))
    return MetricReport(scores, ddof)
