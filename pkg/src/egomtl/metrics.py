"""Evaluation metrics: top-k, mean class accuracy, many-hot precision/recall, AAE, AUC."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from egomtl.errors import ContractError, DimensionError, UndefinedMetricError

logger = logging.getLogger(__name__)

__all__ = [
    "topk_accuracy",
    "mean_class_accuracy",
    "many_hot_classes",
    "many_hot_precision_recall",
    "aae",
    "auc_saliency",
    "mean_normalized_error",
    "point_to_cell",
    "ClassificationMetrics",
    "CoordinateMetrics",
    "MetricsReport",
]


def _label_rank(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """0-based rank of each true label; ties go to the lower class id."""
    true = logits[np.arange(len(labels)), labels][:, None]
    ids = np.arange(logits.shape[1])[None, :]
    ahead = (logits > true) | ((logits == true) & (ids < labels[:, None]))
    return ahead.sum(axis=1)


def topk_accuracy(logits, labels, k: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise UndefinedMetricError("top-k accuracy of an empty set")
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    if not 1 <= k <= logits.shape[1]:
        raise ContractError(f"k={k} must lie in [1, {logits.shape[1]}]")
    return float((_label_rank(logits, labels) < k).mean())


def predictions_from_logits(logits) -> np.ndarray:
    # argmax already resolves ties to the lowest index
    return np.asarray(logits).argmax(axis=1)


def mean_class_accuracy(predictions, labels, num_classes: Optional[int] = None) -> float:
    """Unweighted mean over classes of per-class recall.

    Classes in ``range(num_classes)`` with no labelled sample are left out of
    the mean and reported through a logged warning.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UndefinedMetricError("mean class accuracy of an empty set")
    present = np.unique(labels)
    if num_classes is not None:
        absent = num_classes - present.size
        if absent:
            logger.warning("mean class accuracy: %d of %d classes have no samples", absent, num_classes)
    recalls = [(predictions[labels == c] == c).mean() for c in present]
    return float(np.mean(recalls))


def many_hot_classes(train_class_counts, threshold: int = 100, pair_table=None,
                     component_counts=None) -> list[int]:
    """Classes with more than ``threshold`` training instances.

    For composed classes pass ``pair_table`` (class -> (verb, noun)) and
    ``component_counts`` ((verb counts, noun counts)): a composed class is
    many-hot when both components are and it has at least one instance.
    """
    counts = np.asarray(train_class_counts)
    if pair_table is None:
        return [int(c) for c in np.flatnonzero(counts > threshold)]
    if component_counts is None:
        raise ContractError("composed many-hot classes need component counts")
    vc, nc = (np.asarray(c) for c in component_counts)
    return [int(a) for a, (v, n) in enumerate(pair_table)
            if vc[v] > threshold and nc[n] > threshold and counts[a] >= 1]


def many_hot_precision_recall(predictions, labels, train_class_counts, threshold: int = 100,
                              pair_table=None, component_counts=None) -> tuple[float, float, list[int]]:
    """Macro precision and recall restricted to many-hot classes.

    Samples whose true class is not many-hot are dropped before counting.
    A class with no predictions (or no samples) scores zero for that ratio.
    """
    classes = many_hot_classes(train_class_counts, threshold, pair_table, component_counts)
    if not classes:
        raise UndefinedMetricError(f"no class has more than {threshold} training instances")
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    keep = np.isin(labels, classes)
    predictions, labels = predictions[keep], labels[keep]
    precision, recall = [], []
    for c in classes:
        tp = np.sum((predictions == c) & (labels == c))
        npred = np.sum(predictions == c)
        ntrue = np.sum(labels == c)
        precision.append(tp / npred if npred else 0.0)
        recall.append(tp / ntrue if ntrue else 0.0)
    return float(np.mean(precision)), float(np.mean(recall)), classes


def _rays(points: np.ndarray, fov_deg: float, aspect: float) -> np.ndarray:
    half = np.tan(np.deg2rad(fov_deg) / 2.0)
    return np.stack([points[..., 0] * half, points[..., 1] * half * aspect, np.ones(points.shape[:-1])], axis=-1)


def aae(pred_points, gt_points, valid_mask=None, fov_deg: float = 60.0, aspect: float = 1.0) -> float:
    """Average angle in degrees between predicted and true viewing rays.

    Points are normalized image coordinates; ``fov_deg`` is the horizontal
    field of view of a pinhole camera and ``aspect`` is height / width.
    """
    if not 0 < fov_deg < 180:
        raise ContractError(f"fov_deg must lie in (0, 180), got {fov_deg}")
    pred = np.asarray(pred_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise DimensionError(f"point arrays {pred.shape} and {gt.shape} must match and end in 2")
    valid = np.ones(pred.shape[:-1], bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if not valid.any():
        raise UndefinedMetricError("AAE needs at least one valid frame")
    a = _rays(pred[valid], fov_deg, aspect)
    b = _rays(gt[valid], fov_deg, aspect)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = (a * b).sum(axis=-1)
    return float(np.degrees(np.arctan2(cross, dot)).mean())


def mean_normalized_error(pred_points, gt_points, valid_mask=None) -> float:
    pred = np.asarray(pred_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    valid = np.ones(pred.shape[:-1], bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if not valid.any():
        raise UndefinedMetricError("mean error needs at least one valid frame")
    return float(np.linalg.norm(pred[valid] - gt[valid], axis=-1).mean())


def point_to_cell(points, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of the grid cell containing each normalized point."""
    points = np.asarray(points, dtype=np.float64)
    col = np.clip(np.floor((points[..., 0] + 1.0) * 0.5 * n), 0, n - 1).astype(np.int64)
    row = np.clip(np.floor((points[..., 1] + 1.0) * 0.5 * m), 0, m - 1).astype(np.int64)
    return row, col


def auc_saliency(heatmaps, gt_points, valid_mask=None) -> float:
    """Mean per-frame ROC area ranking the ground-truth cell against all others.

    ``heatmaps`` is ``[N, m, n]`` and ``gt_points`` ``[N, 2]``. With one
    positive the area equals the fraction of negative cells scored below the
    positive, ties counting one half.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    if hm.ndim != 3 or gt.shape != (hm.shape[0], 2):
        raise DimensionError(f"expected heatmaps [N,m,n] and points [N,2], got {hm.shape}, {gt.shape}")
    valid = np.ones(hm.shape[0], bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if not valid.any():
        raise UndefinedMetricError("AUC needs at least one valid frame")
    hm, gt = hm[valid], gt[valid]
    N, m, n = hm.shape
    row, col = point_to_cell(gt, m, n)
    pos = hm[np.arange(N), row, col][:, None]
    flat = hm.reshape(N, -1)
    below = (flat < pos).sum(axis=1)
    ties = (flat == pos).sum(axis=1) - 1  # exclude the positive itself
    return float(((below + 0.5 * ties) / (m * n - 1)).mean())


@dataclass
class ClassificationMetrics:
    top1: float
    top5: float
    mean_class_accuracy: float
    many_hot_precision: Optional[float] = None
    many_hot_recall: Optional[float] = None
    many_hot_classes: Optional[list] = None
    num_samples: int = 0


@dataclass
class CoordinateMetrics:
    aae_degrees: float
    auc: float
    mean_normalized_error: float
    evaluated_frames: int
    skipped_frames: int


@dataclass
class MetricsReport:
    classification: dict = field(default_factory=dict)
    coordinate: dict = field(default_factory=dict)
    split: str = ""

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "classification": {k: asdict(v) for k, v in self.classification.items()},
            "coordinate": {k: asdict(v) for k, v in self.coordinate.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls({k: ClassificationMetrics(**v) for k, v in d["classification"].items()},
                   {k: CoordinateMetrics(**v) for k, v in d["coordinate"].items()},
                   d.get("split", ""))

    def csv_row(self, run: str = "") -> tuple[str, str]:
        """Header and one data row flattening every scalar in the report."""
        cols, vals = ["run", "split"], [run, self.split]
        for name, m in self.classification.items():
            for key in ("top1", "top5", "mean_class_accuracy", "many_hot_precision", "many_hot_recall"):
                cols.append(f"{name}.{key}")
                vals.append(getattr(m, key))
        for name, m in self.coordinate.items():
            for key in ("aae_degrees", "auc", "mean_normalized_error", "evaluated_frames", "skipped_frames"):
                cols.append(f"{name}.{key}")
                vals.append(getattr(m, key))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerow(["" if v is None else v for v in vals])
        header, row = buf.getvalue().splitlines()
        return header, row
