"""Segmentation and volume-level detection metrics, reports, slice exports.

Voxel metrics are micro-aggregated: intersection/size counts are summed over
all evaluated volumes before any ratio is formed, so evaluating a union of
volume sets equals merging their count statistics.  Hard Dice and IoU use
the conventions 1.0 when prediction and truth are both empty and 0.0 when
exactly one is empty; the "overall" Dice is the micro Dice over all voxels
and classes (equal to overall accuracy for single-label voxels) and the
defect mean averages classes 1..4.

Volume-level detection is one-vs-rest per defect class: a volume's score for
class c is the number of voxels argmax-predicted as c (its mean softmax
probability is logged alongside); the deployment operating point is
score > 0, and AUC comes from the rank statistic with half credit for ties,
which matches the trapezoidal area under the swept ROC.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CLASS_NAMES, GRID_N, N_CLASSES

DEFECT_CLASSES = (1, 2, 3, 4)

CLASS_COLORS = ("#f2f1ec", "#f5a623", "#d0021b", "#7b2d8b", "#f0d230",
                "#7f8c8d")
ERROR_COLOR = "#c0392b"
OK_COLOR = "#ffffff"


class EvaluationError(ValueError):
    """Raised on malformed inputs to the evaluator."""


# ---------------------------------------------------------------------------
# Hard overlap metrics
# ---------------------------------------------------------------------------

def dice(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    """Hard Dice 2|P∩T|/(|P|+|T|); both empty -> 1.0, one empty -> 0.0."""
    if pred.shape != truth.shape:
        raise EvaluationError("prediction/truth shape mismatch")
    p = pred == cls
    t = truth == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def iou(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    """Hard IoU |P∩T|/|P∪T|; both empty -> 1.0, one empty -> 0.0."""
    if pred.shape != truth.shape:
        raise EvaluationError("prediction/truth shape mismatch")
    p = pred == cls
    t = truth == cls
    union = int(np.logical_or(p, t).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, t).sum()) / union


@dataclass
class SegMetrics:
    dice: np.ndarray                 # per class, from aggregated counts
    iou: np.ndarray
    overall_accuracy: float
    overall_dice_micro: float
    defect_mean_dice: float
    defect_mean_iou: float
    confusion: np.ndarray            # 6x6 row-normalized
    confusion_counts: np.ndarray     # 6x6 raw voxel counts
    absent_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": {
                CLASS_NAMES[c]: {"dice": float(self.dice[c]),
                                 "iou": float(self.iou[c])}
                for c in range(N_CLASSES)
            },
            "overall_accuracy": self.overall_accuracy,
            "overall_dice_micro": self.overall_dice_micro,
            "defect_mean_dice": self.defect_mean_dice,
            "defect_mean_iou": self.defect_mean_iou,
            "confusion_row_normalized": self.confusion.tolist(),
            "confusion_counts": self.confusion_counts.astype(int).tolist(),
            "absent_classes": self.absent_classes,
        }


def confusion_counts(preds, truths) -> np.ndarray:
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for pred, truth in zip(preds, truths):
        flat = truth.astype(np.int64).ravel() * N_CLASSES \
            + pred.astype(np.int64).ravel()
        counts += np.bincount(flat, minlength=N_CLASSES * N_CLASSES).reshape(
            N_CLASSES, N_CLASSES)
    return counts


def confusion_matrix(preds, truths) -> np.ndarray:
    """Row-normalized confusion; rows of absent true classes stay zero."""
    counts = confusion_counts(preds, truths)
    out = np.zeros_like(counts, dtype=np.float64)
    for i in range(N_CLASSES):
        row_sum = counts[i].sum()
        if row_sum > 0:
            out[i] = counts[i] / row_sum
    return out


def segmentation_metrics(preds, truths) -> SegMetrics:
    """Aggregate voxel metrics over aligned prediction/truth lists."""
    preds = list(preds)
    truths = list(truths)
    if len(preds) != len(truths) or not preds:
        raise EvaluationError("need equal, non-empty prediction/truth lists")
    counts = confusion_counts(preds, truths)
    total = counts.sum()
    correct = np.trace(counts)
    true_n = counts.sum(axis=1)
    pred_n = counts.sum(axis=0)
    inter = np.diag(counts)
    dice_v = np.zeros(N_CLASSES)
    iou_v = np.zeros(N_CLASSES)
    for c in range(N_CLASSES):
        denom = true_n[c] + pred_n[c]
        union = denom - inter[c]
        dice_v[c] = 1.0 if denom == 0 else 2.0 * inter[c] / denom
        iou_v[c] = 1.0 if union == 0 else inter[c] / union
    norm = np.zeros((N_CLASSES, N_CLASSES))
    for i in range(N_CLASSES):
        if true_n[i] > 0:
            norm[i] = counts[i] / true_n[i]
    absent = [CLASS_NAMES[c] for c in range(N_CLASSES) if true_n[c] == 0]
    return SegMetrics(
        dice=dice_v, iou=iou_v,
        overall_accuracy=float(correct / total),
        overall_dice_micro=float(2.0 * correct / (2.0 * total)),
        defect_mean_dice=float(dice_v[list(DEFECT_CLASSES)].mean()),
        defect_mean_iou=float(iou_v[list(DEFECT_CLASSES)].mean()),
        confusion=norm, confusion_counts=counts, absent_classes=absent)


# ---------------------------------------------------------------------------
# Volume-level detection
# ---------------------------------------------------------------------------

def volume_score(probs: np.ndarray, cls: int) -> tuple[float, float]:
    """(argmax voxel count, mean class probability) for one volume.

    probs is the softmax output [6, 20, 20, 20]; the count feeds the ROC and
    threshold metrics, the mean probability is logged alongside.
    """
    pred = np.argmax(probs, axis=0)
    return float((pred == cls).sum()), float(probs[cls].mean())


def auc_mann_whitney(scores, labels) -> float:
    """Rank AUC with half credit for ties (pairwise definition)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("AUC needs at least one positive and one negative")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) by sweeping 'score >= t' over distinct scores,
    anchored at (0, 0); ends at (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs at least one positive and one negative")
    points = [(0.0, 0.0, float("inf"))]
    for t in sorted(set(scores.tolist()), reverse=True):
        hit = scores >= t
        tpr = float((hit & labels).sum() / n_pos)
        fpr = float((hit & ~labels).sum() / n_neg)
        points.append((fpr, tpr, t))
    return points


def roc_auc_trapezoid(points) -> float:
    area = 0.0
    for (f0, t0, _), (f1, t1, _) in zip(points[:-1], points[1:]):
        area += (f1 - f0) * (t0 + t1) / 2.0
    return area


@dataclass
class DetectionMetrics:
    cls: int
    sensitivity: float
    specificity: float
    precision: float
    auc: float
    roc: list
    threshold: float
    n_positive: int
    n_negative: int

    def to_dict(self) -> dict:
        return {"class": CLASS_NAMES[self.cls],
                "sensitivity": self.sensitivity,
                "specificity": self.specificity,
                "precision": self.precision, "auc": self.auc,
                "threshold": self.threshold,
                "n_positive": self.n_positive,
                "n_negative": self.n_negative}


def detection_metrics(scores, labels, cls: int,
                      threshold: float = 0.0) -> DetectionMetrics:
    """One-vs-rest detection at the 'any voxel predicted' operating point."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    predicted = scores > threshold
    tp = int((predicted & labels).sum())
    fp = int((predicted & ~labels).sum())
    fn = int((~predicted & labels).sum())
    tn = int((~predicted & ~labels).sum())
    return DetectionMetrics(
        cls=cls,
        sensitivity=tp / (tp + fn) if tp + fn else 0.0,
        specificity=tn / (tn + fp) if tn + fp else 0.0,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        auc=auc_mann_whitney(scores, labels),
        roc=roc_points(scores, labels),
        threshold=threshold,
        n_positive=int(labels.sum()),
        n_negative=int((~labels).sum()))


# ---------------------------------------------------------------------------
# Whole-model evaluation
# ---------------------------------------------------------------------------

def _softmax_np(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class EvaluationReport:
    seg: SegMetrics
    detection: dict                 # class name -> DetectionMetrics
    timing_ms: list
    volume_indices: list
    volume_classes: list
    volume_scores: dict             # class name -> list of per-volume scores
    volume_mean_probs: dict
    predictions: list = field(default_factory=list)

    def timing_summary(self) -> dict:
        arr = np.asarray(self.timing_ms)
        return {"mean_ms": float(arr.mean()), "std_ms": float(arr.std()),
                "n": int(arr.size)}

    def to_dict(self) -> dict:
        # Timing stays out of this structure (and out of metrics.json):
        # wall-clock numbers would break byte-level reproducibility.
        return {
            "n_volumes": len(self.volume_indices),
            "volume_indices": self.volume_indices,
            "volume_classes": self.volume_classes,
            "voxel": self.seg.to_dict(),
            "detection": {name: m.to_dict()
                          for name, m in sorted(self.detection.items())},
            "volume_scores": self.volume_scores,
            "volume_mean_probs": self.volume_mean_probs,
        }


def evaluate_volumes(model, samples, keep_predictions: bool = True
                     ) -> EvaluationReport:
    """Eval-mode forward over VolumeSamples; aggregates all reported metrics."""
    preds = []
    truths = []
    timing = []
    scores = {CLASS_NAMES[c]: [] for c in DEFECT_CLASSES}
    mean_probs = {CLASS_NAMES[c]: [] for c in DEFECT_CLASSES}
    classes = []
    indices = []
    for s in samples:
        t0 = time.perf_counter()
        out = model.forward(s.stream1, s.stream2, training=False)
        timing.append((time.perf_counter() - t0) * 1000.0)
        probs = _softmax_np(out.logits.data, axis=0)
        pred = np.argmax(probs, axis=0).astype(np.uint8)
        preds.append(pred)
        truths.append(s.labels)
        for c in DEFECT_CLASSES:
            cnt, mp = volume_score(probs, c)
            scores[CLASS_NAMES[c]].append(cnt)
            mean_probs[CLASS_NAMES[c]].append(mp)
        classes.append(s.defect_class)
        indices.append(s.index)
    seg = segmentation_metrics(preds, truths)
    detection = {}
    for c in DEFECT_CLASSES:
        name = CLASS_NAMES[c]
        labels = [cls == name for cls in classes]
        if any(labels) and not all(labels):
            detection[name] = detection_metrics(scores[name], labels, c)
    return EvaluationReport(seg=seg, detection=detection, timing_ms=timing,
                            volume_indices=indices, volume_classes=classes,
                            volume_scores=scores, volume_mean_probs=mean_probs,
                            predictions=preds if keep_predictions else [])


def evaluate_predictions(preds, truths, classes=None) -> EvaluationReport:
    """Metrics for externally supplied label predictions (oracle bypass)."""
    preds = list(preds)
    truths = list(truths)
    seg = segmentation_metrics(preds, truths)
    detection = {}
    scores = {CLASS_NAMES[c]: [float((p == c).sum()) for p in preds]
              for c in DEFECT_CLASSES}
    if classes is not None:
        for c in DEFECT_CLASSES:
            name = CLASS_NAMES[c]
            labels = [cls == name for cls in classes]
            if any(labels) and not all(labels):
                detection[name] = detection_metrics(scores[name], labels, c)
    return EvaluationReport(seg=seg, detection=detection, timing_ms=[0.0],
                            volume_indices=list(range(len(preds))),
                            volume_classes=list(classes or []),
                            volume_scores=scores, volume_mean_probs={},
                            predictions=preds)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_report(report: EvaluationReport, out_dir: str | Path) -> None:
    """metrics.json, per_class.csv, confusion.csv, roc_<class>.csv,
    timing.csv.  Slice SVGs are written separately via export_slices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "per_class.csv", "w") as fh:
        fh.write("class,dice,iou\n")
        for c in range(N_CLASSES):
            fh.write(f"{CLASS_NAMES[c]},{report.seg.dice[c]:.9g},"
                     f"{report.seg.iou[c]:.9g}\n")
    with open(out_dir / "confusion.csv", "w") as fh:
        fh.write("true\\pred," + ",".join(CLASS_NAMES) + "\n")
        for i in range(N_CLASSES):
            row = ",".join(f"{report.seg.confusion[i, j]:.9g}"
                           for j in range(N_CLASSES))
            fh.write(f"{CLASS_NAMES[i]},{row}\n")
    for name, det in report.detection.items():
        with open(out_dir / f"roc_{name}.csv", "w") as fh:
            fh.write("fpr,tpr,threshold\n")
            for fpr, tpr, thr in det.roc:
                fh.write(f"{fpr:.9g},{tpr:.9g},{thr:.9g}\n")
    with open(out_dir / "timing.csv", "w") as fh:
        fh.write("volume_index,forward_ms\n")
        for idx, ms in zip(report.volume_indices, report.timing_ms):
            fh.write(f"{idx},{ms:.6g}\n")


def export_slices(pred: np.ndarray, truth: np.ndarray, z_indices,
                  out_dir: str | Path, tag: str = "vol") -> list[Path]:
    """Three-panel SVG (truth, prediction, error mask) per z slice."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in z_indices:
        if not 0 <= z < GRID_N:
            raise EvaluationError(f"slice index {z} outside the grid")
        path = out_dir / f"{tag}_z{z:02d}.svg"
        path.write_text(_slice_svg(pred[:, :, z], truth[:, :, z], z))
        paths.append(path)
    return paths


def _slice_svg(pred2d: np.ndarray, truth2d: np.ndarray, z: int) -> str:
    cell = 10
    pad = 12
    panel = GRID_N * cell
    width = 3 * panel + 4 * pad
    height = panel + 2 * pad + 14
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{pad}" y="{pad}" font-size="10" font-family="monospace">'
        f'z={z}  truth | prediction | errors</text>',
    ]

    def panel_rects(values, x0, colors):
        rects = []
        for i in range(GRID_N):
            for j in range(GRID_N):
                color = colors(values[i, j])
                x = x0 + i * cell
                y = pad + 8 + (GRID_N - 1 - j) * cell
                rects.append(f'<rect x="{x}" y="{y}" width="{cell}" '
                             f'height="{cell}" fill="{color}"/>')
        return rects

    parts += panel_rects(truth2d, pad, lambda v: CLASS_COLORS[int(v)])
    parts += panel_rects(pred2d, 2 * pad + panel,
                         lambda v: CLASS_COLORS[int(v)])
    err = (pred2d != truth2d)
    parts += panel_rects(err, 3 * pad + 2 * panel,
                         lambda v: ERROR_COLOR if v else OK_COLOR)
    parts.append("</svg>")
    return "\n".join(parts)


def error_pixel_count(svg_text: str) -> int:
    """Number of error-colored cells in an exported slice SVG."""
    return svg_text.count(f'fill="{ERROR_COLOR}"')
