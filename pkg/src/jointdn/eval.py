"""Image-quality and task metrics, blob detection, and metrics tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WINDOW = 8
THRESHOLD = 0.5
MIN_AREA = 4

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window``×``window`` uniform windows, stride 1."""
    a, b = _pair(a, b, "ssim")
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ValueError(f"ssim: expected a single 2-D image, got shape {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"ssim: image {a.shape} smaller than the {window}×{window} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a, mu_b = wa.mean(axis=(2, 3)), wb.mean(axis=(2, 3))
    var_a = wa.var(axis=(2, 3))
    var_b = wb.var(axis=(2, 3))
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def iou(pred_mask, label) -> float:
    a, b = _pair(pred_mask, label, "iou")
    a, b = a >= THRESHOLD, b >= THRESHOLD
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass(frozen=True, order=True)
class DetectionBox:
    min_row: int
    min_col: int
    max_row: int
    max_col: int

    @property
    def area(self) -> int:
        return (self.max_row - self.min_row + 1) * (self.max_col - self.min_col + 1)


def detect_blobs(mask, min_area: int = MIN_AREA) -> list[DetectionBox]:
    """Bounding boxes of 4-connected foreground components with >= min_area pixels."""
    if min_area < 1:
        raise ValueError(f"min_area must be >= 1, got {min_area}")
    m = np.squeeze(np.asarray(getattr(mask, "values", mask))) >= THRESHOLD
    if m.ndim != 2:
        raise ValueError(f"detect_blobs: expected a 2-D mask, got shape {m.shape}")
    labels, count = ndimage.label(m, structure=_FOUR_CONNECTED)
    if count == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=count + 1)
    boxes = []
    for comp, sl in enumerate(ndimage.find_objects(labels), start=1):
        if areas[comp] >= min_area:
            boxes.append(DetectionBox(sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1))
    return sorted(boxes)


def box_iou(a: DetectionBox, b: DetectionBox) -> float:
    h = min(a.max_row, b.max_row) - max(a.min_row, b.min_row) + 1
    w = min(a.max_col, b.max_col) - max(a.min_col, b.min_col) + 1
    inter = max(h, 0) * max(w, 0)
    return inter / (a.area + b.area - inter)


def _greedy_match(pred: Sequence[DetectionBox], truth: Sequence[DetectionBox],
                  min_iou: float) -> list[tuple[float, int, int]]:
    """One-to-one matches in descending box-IoU order, keeping IoU >= min_iou."""
    pairs = sorted(
        ((box_iou(p, t), i, j) for i, p in enumerate(pred) for j, t in enumerate(truth)),
        key=lambda x: (-x[0], x[1], x[2]),
    )
    used_p, used_t, out = set(), set(), []
    for score, i, j in pairs:
        if score < min_iou or score == 0.0:
            break
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        out.append((score, i, j))
    return out


def detection_f1(pred: Sequence[DetectionBox], truth: Sequence[DetectionBox],
                 iou_thresh: float = 0.5) -> tuple[float, float, float]:
    """Greedy one-to-one matching by descending box IoU; returns (P, R, F1)."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    tp = len(_greedy_match(pred, truth, iou_thresh))
    precision = tp / len(pred) if pred else 0.0
    recall = tp / len(truth) if truth else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def detection_iou(pred: Sequence[DetectionBox], truth: Sequence[DetectionBox]) -> float:
    """Box IoU of a detection set against ground truth.

    Boxes are matched greedily (any overlap); the score is the summed IoU of
    the matches over the number of matches plus unmatched boxes on either
    side. Both sets empty gives 1.0.
    """
    if not pred and not truth:
        return 1.0
    matches = _greedy_match(pred, truth, 0.0)
    denom = len(pred) + len(truth) - len(matches)
    return math.fsum(m[0] for m in matches) / denom


# ---------------------------------------------------------------- tables

@dataclass
class MetricsRecord:
    image_id: int | str
    psnr: float | None = None
    ssim: float | None = None
    iou: float | None = None
    f1: float | None = None

    FIELDS = ("psnr", "ssim", "iou", "f1")

    def row(self) -> list[str]:
        return [str(self.image_id)] + ["" if getattr(self, f) is None else repr(float(getattr(self, f)))
                                       for f in self.FIELDS]


def mean_record(records: Sequence[MetricsRecord]) -> MetricsRecord:
    out = MetricsRecord("mean")
    for f in MetricsRecord.FIELDS:
        vals = [getattr(r, f) for r in records if getattr(r, f) is not None]
        setattr(out, f, math.fsum(vals) / len(vals) if vals else None)
    return out


def write_metrics_csv(records: Sequence[MetricsRecord], path: str | Path) -> MetricsRecord:
    summary = mean_record(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", *MetricsRecord.FIELDS])
        for r in records:
            w.writerow(r.row())
        w.writerow(summary.row())
    return summary


def read_metrics_csv(path: str | Path) -> tuple[list[MetricsRecord], MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))

    def rec(d):
        return MetricsRecord(d["image_id"], *[float(d[f]) if d[f] else None for f in MetricsRecord.FIELDS])

    return [rec(d) for d in rows[:-1]], rec(rows[-1])


def score_image(image_id, denoised: np.ndarray, clean: np.ndarray | None, prob: np.ndarray | None,
                label: np.ndarray | None, min_area: int = MIN_AREA) -> MetricsRecord:
    rec = MetricsRecord(image_id)
    if clean is not None:
        rec.psnr = psnr(denoised, clean)
        rec.ssim = ssim(denoised, clean)
    if prob is not None and label is not None:
        found, truth = detect_blobs(prob, min_area), detect_blobs(label, min_area)
        rec.iou = detection_iou(found, truth)
        _, _, rec.f1 = detection_f1(found, truth)
    return rec


def evaluate_dataset(denoise_fn: Callable[[np.ndarray], np.ndarray],
                     segment_fn: Callable[[np.ndarray], np.ndarray] | None,
                     samples: Sequence, out_csv: str | Path | None = None,
                     min_area: int = MIN_AREA) -> tuple[MetricsRecord, list[MetricsRecord]]:
    """Score every sample; PSNR/SSIM need ``clean``, IoU/F1 need a label.

    ``denoise_fn`` and ``segment_fn`` map an H×W image to an H×W image
    (eval-mode network wrappers, or any substitute detector front end).
    """
    if not len(samples):
        raise ValueError("evaluate_dataset: empty test set")
    records = []
    for i, s in enumerate(samples):
        den = denoise_fn(s.noisy)
        prob = segment_fn(den) if segment_fn is not None and s.label is not None else None
        records.append(score_image(s.meta.get("index", i), den, s.clean, prob, s.label, min_area))
    summary = write_metrics_csv(records, out_csv) if out_csv is not None else mean_record(records)
    return summary, records
