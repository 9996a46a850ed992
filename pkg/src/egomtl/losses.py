"""Per-task losses and the equal-weight multitask objective."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from egomtl import ops
from egomtl.dsnt import CoordLossConfig, coord_loss, normalize_heatmap
from egomtl.errors import DimensionError, SupervisionError
from egomtl.tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = ["Batch", "LossReport", "cross_entropy", "total_loss", "align_track"]


@dataclass
class Batch:
    """One minibatch.

    ``clips`` is ``[B, 3, T, H, W]``. ``labels`` maps classification task
    names to ``[B]`` class ids. ``tracks`` maps coordinate task names to
    ``(points [B, T, P, 2], valid [B, T, P])`` at input frame rate.
    """

    clips: np.ndarray
    labels: dict = field(default_factory=dict)
    tracks: dict = field(default_factory=dict)
    clip_ids: Optional[list] = None

    def __len__(self) -> int:
        return self.clips.shape[0]


@dataclass
class LossReport:
    per_task: "OrderedDict[str, Tensor]"
    total: Tensor
    skipped: list = field(default_factory=list)
    outputs: Optional[dict] = None

    def values(self) -> dict:
        return {k: float(v.item()) for k, v in self.per_task.items()}


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy needs logits [B,K] and labels [B], got {logits.shape}, {labels.shape}")
    K = logits.shape[1]
    bad = np.flatnonzero((labels < 0) | (labels >= K))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"label {labels[i]} of sample {i} is outside [0, {K})")
    return ops.mean(ops.neg(ops.pick(ops.log_softmax(logits, -1), labels.astype(np.int64))))


def align_track(points: np.ndarray, valid: np.ndarray, l: int) -> tuple[np.ndarray, np.ndarray]:
    """Pool per-frame tracks ``[B, T, P, 2]`` onto ``l`` heatmap frames.

    Input frame ``f`` belongs to heatmap frame ``f * l // T``. A heatmap frame
    is supervised by the mean of its valid input frames and is valid when
    at least one is. Output is in loss layout ``[B, P, l, 2]``, ``[B, P, l]``.
    """
    points = np.asarray(points, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    B, T, P, _ = points.shape
    group = np.arange(T) * l // T
    acc = np.zeros((B, l, P, 2))
    cnt = np.zeros((B, l, P))
    w = valid.astype(np.float64)
    np.add.at(acc, (slice(None), group), np.where(valid[..., None], points, 0.0) * w[..., None])
    np.add.at(cnt, (slice(None), group), w)
    out_valid = cnt > 0
    out = np.where(out_valid[..., None], acc / np.maximum(cnt, 1)[..., None], 0.0)
    return out.transpose(0, 2, 1, 3), out_valid.transpose(0, 2, 1)


def total_loss(batch: Batch, model, task_set=None, coord_cfg: CoordLossConfig = CoordLossConfig(),
               mode: str = "train", keep_outputs: bool = False) -> LossReport:
    """Unweighted sum of every task's loss on one batch.

    Coordinate tasks whose batch has no valid frame are skipped and listed
    in ``LossReport.skipped``.
    """
    task_set = task_set or model.task_set
    feats, outputs = model.forward(batch.clips, mode, task_set.names)
    l = feats.shape[2]
    per_task: "OrderedDict[str, Tensor]" = OrderedDict()
    skipped = []
    for spec in task_set.tasks:
        out = outputs[spec.name]
        if spec.kind == "classification":
            labels = batch.labels.get(spec.name)
            if labels is None:
                raise SupervisionError(f"batch has no labels for classification task {spec.name!r}")
            per_task[spec.name] = cross_entropy(out, labels)
        else:
            if spec.name not in batch.tracks:
                raise SupervisionError(f"batch has no coordinate track for task {spec.name!r}")
            pts, val = align_track(*batch.tracks[spec.name], l)
            if not val.any():
                skipped.append(spec.name)
                logger.debug("skipping %s: no valid frames in batch", spec.name)
                continue
            hm = normalize_heatmap(out)
            outputs[spec.name] = hm
            per_task[spec.name] = coord_loss(hm, pts, val, coord_cfg)
    terms = list(per_task.values())
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = ops.add(total, t)
    else:
        total = Tensor(np.zeros(()))
    return LossReport(per_task, total, skipped, outputs if keep_outputs else None)
