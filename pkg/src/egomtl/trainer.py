"""Training recipe: clip sampling, augmentation, cyclical LR, Nesterov SGD, early stopping."""
from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from egomtl import metrics as M
from egomtl.dsnt import CoordLossConfig, dsnt, normalize_heatmap
from egomtl.errors import ConfigurationError, NonFiniteLossError, StateError
from egomtl.losses import Batch, total_loss
from egomtl.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "cyclical_lr",
    "sgd_nesterov_step",
    "sample_training_clip",
    "sample_eval_clip",
    "augment",
    "bilinear_resize",
    "make_batch",
    "evaluate",
    "fit",
    "FitResult",
    "TASK_LABEL_FIELDS",
]

TASK_LABEL_FIELDS = {"A": "action", "V": "verb", "N": "noun"}
TASK_TRACK_FIELDS = {"G": "gaze", "H": "hands"}


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    max_lr: float = 5e-3
    cycle_epochs: float = 20
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    epochs: int = 30
    clip_len: int = 16
    window_len: int = 16
    train_scale: int = 37
    crop_size: int = 32
    seed: int = 0
    main_task: str = "A"
    eval_batch_size: int = 32
    bn_refresh_batches: int = 30  # frozen-weight train-mode passes before each val eval; 0 disables

    def __post_init__(self):
        if not 0 < self.base_lr <= self.max_lr:
            raise ConfigurationError("need 0 < base_lr <= max_lr")
        if not self.cycle_epochs > 0:
            raise ConfigurationError("cycle_epochs must be positive")
        if self.clip_len > self.window_len:
            raise ConfigurationError("clip_len must not exceed window_len")
        if self.crop_size > self.train_scale:
            raise ConfigurationError("crop_size must not exceed train_scale")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.bn_refresh_batches < 0:
            raise ConfigurationError("bn_refresh_batches must be >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """The full-size recipe: 60 epochs, batch 32, 16 of 32 frames, 256 -> 224 crops."""
        base = dict(batch_size=32, epochs=60, clip_len=16, window_len=32, train_scale=256, crop_size=224)
        base.update(overrides)
        return cls(**base)


# -- schedule and optimizer ------------------------------------------------------

def cyclical_lr(epoch_progress: float, cfg: TrainConfig) -> float:
    """Triangular wave: base -> max over half a cycle, then back to base."""
    half = cfg.cycle_epochs / 2.0
    pos = math.fmod(max(epoch_progress, 0.0), cfg.cycle_epochs)
    frac = pos / half if pos <= half else (cfg.cycle_epochs - pos) / half
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * frac


@dataclass
class OptimizerState:
    velocity: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def sgd_nesterov_step(params: "dict[str, Tensor]", state: OptimizerState, lr: float,
                      momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """In-place Nesterov SGD update; gradients are left for the caller to zero.

    ``g = grad + wd * p;  v = mu * v + g;  p -= lr * (g + mu * v)``
    """
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise StateError(f"velocity for {name} has shape {v.shape}, parameter has {p.shape}")
        dt = p.dtype.type
        g = p.grad + dt(weight_decay) * p.data
        v = dt(momentum) * v + g
        p.data = p.data - dt(lr) * (g + dt(momentum) * v)
        state.velocity[name] = v


# -- temporal sampling -----------------------------------------------------------

def _strided(start: int, segment_len: int, clip_len: int, window_len: int) -> np.ndarray:
    idx = start + np.floor(np.arange(clip_len) * (window_len / clip_len)).astype(np.int64)
    return np.minimum(idx, segment_len - 1)


def sample_training_clip(segment_len: int, clip_len: int = 16, window_len: int = 32,
                         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if segment_len < 1:
        raise ConfigurationError("segment must have at least one frame")
    rng = rng if rng is not None else np.random.default_rng()
    start = int(rng.integers(0, max(0, segment_len - window_len) + 1))
    return _strided(start, segment_len, clip_len, window_len)


def sample_eval_clip(segment_len: int, clip_len: int = 16, window_len: int = 32) -> np.ndarray:
    if segment_len < 1:
        raise ConfigurationError("segment must have at least one frame")
    start = max(0, int(math.floor(segment_len / 2 + 0.5)) - window_len // 2)
    return _strided(start, segment_len, clip_len, window_len)


# -- spatial augmentation ----------------------------------------------------------

@lru_cache(maxsize=32)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    R = np.zeros((n_out, n_in))
    R[np.arange(n_out), i0] += 1 - w
    R[np.arange(n_out), i1] += w
    return R.astype(np.float32)


def bilinear_resize(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize ``[T, H, W, C]`` frames with half-pixel-centred bilinear sampling."""
    T, H, W, C = frames.shape
    if (H, W) == (height, width):
        return frames
    ry, rx = _resize_matrix(H, height), _resize_matrix(W, width)
    out = np.einsum("sh,thwc->tswc", ry, frames, optimize=True)
    return np.einsum("rw,tswc->tsrc", rx, out, optimize=True).astype(frames.dtype)


def augment(frames: np.ndarray, coords: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
            rng: Optional[np.random.Generator] = None, mode: str = "train"):
    """Resize to ``train_scale``, then random (train) or centre (eval) crop.

    ``coords`` is a sequence of ``(points [..., 2], valid [...])`` pairs in
    normalized frame coordinates; each is mapped through the same transform
    and points falling outside the crop are marked invalid.
    """
    T, H, W, C = frames.shape
    S, crop = cfg.train_scale, cfg.crop_size
    if crop > S:
        raise ConfigurationError(f"crop {crop} larger than scaled frame {S}")
    scaled = bilinear_resize(frames, S, S)
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        oy, ox = (int(v) for v in rng.integers(0, S - crop + 1, size=2))
    elif mode == "eval":
        oy = ox = (S - crop) // 2
    else:
        raise ConfigurationError(f"unknown augmentation mode {mode!r}")
    out = scaled[:, oy:oy + crop, ox:ox + crop]
    mapped = []
    for pts, val in coords:
        pts = np.asarray(pts, dtype=np.float64)
        u = (pts[..., 0] + 1) * W / 2 * (S / W) - ox
        v = (pts[..., 1] + 1) * H / 2 * (S / H) - oy
        new = np.stack([2 * u / crop - 1, 2 * v / crop - 1], axis=-1)
        inside = (np.abs(new) <= 1).all(axis=-1)
        mapped.append((new, np.asarray(val, bool) & inside))
    return out, mapped


def make_batch(samples: Sequence, cfg: TrainConfig, task_names: Sequence[str],
               rng: Optional[np.random.Generator] = None, mode: str = "train") -> Batch:
    clips, tracks = [], {n: ([], []) for n in task_names if n in TASK_TRACK_FIELDS}
    for s in samples:
        T = s.clip.shape[0]
        if mode == "train":
            idx = sample_training_clip(T, cfg.clip_len, cfg.window_len, rng)
        else:
            idx = sample_eval_clip(T, cfg.clip_len, cfg.window_len)
        names = list(tracks)
        coords = [(getattr(s, TASK_TRACK_FIELDS[n]).points[idx], getattr(s, TASK_TRACK_FIELDS[n]).valid[idx])
                  for n in names]
        frames, mapped = augment(s.clip[idx], coords, cfg, rng, mode)
        clips.append(frames)
        for n, (p, v) in zip(names, mapped):
            tracks[n][0].append(p)
            tracks[n][1].append(v)
    clip_arr = np.ascontiguousarray(np.stack(clips).transpose(0, 4, 1, 2, 3), dtype=np.float32)
    labels = {n: np.array([getattr(s, TASK_LABEL_FIELDS[n]) for s in samples], dtype=np.int64)
              for n in task_names if n in TASK_LABEL_FIELDS}
    return Batch(clip_arr, labels, {n: (np.stack(p), np.stack(v)) for n, (p, v) in tracks.items()},
                 [s.clip_id for s in samples])


# -- evaluation --------------------------------------------------------------------

@dataclass
class EvalOptions:
    fov_deg: float = 60.0
    many_hot_threshold: int = 100
    train_class_counts: Optional[dict] = None  # task -> counts on the training split
    pair_table: Optional[tuple] = None


def run_inference(model, samples: Sequence, cfg: TrainConfig) -> dict:
    """Eval-mode outputs over ``samples`` in fixed order.

    Returns ``{task: array}``: logits ``[N, K]`` for classification tasks and
    ``(heatmaps [N, P, l, m, n], coords [N, P, l, 2], gt points, gt valid)``
    for coordinate tasks, ground truth at input frame rate.
    """
    names = model.task_set.names
    out = {n: [] for n in names}
    for i in range(0, len(samples), cfg.eval_batch_size):
        batch = make_batch(samples[i:i + cfg.eval_batch_size], cfg, names, mode="eval")
        _, outputs = model.predict(batch.clips)
        for n in names:
            o = outputs[n]
            if model.heads[n].kind == "classification":
                out[n].append(o.data)
            else:
                with no_grad():
                    hm = normalize_heatmap(o)
                    c = dsnt(hm)
                pts, val = batch.tracks[n]
                out[n].append((hm.values.data, c.data, pts, val))
    res = {}
    for n in names:
        if model.heads[n].kind == "classification":
            res[n] = np.concatenate(out[n])
        else:
            res[n] = tuple(np.concatenate([o[j] for o in out[n]]) for j in range(4))
    return res


def coordinate_metrics(heatmaps, coords, gt_points, gt_valid, fov_deg: float = 60.0) -> M.CoordinateMetrics:
    """Score per-frame predictions; heatmap frame ``t`` covers input frames ``f * l // T == t``."""
    N, P, l = coords.shape[:3]
    T = gt_points.shape[1]
    t_of_f = np.arange(T) * l // T
    pred = coords[:, :, t_of_f].transpose(0, 2, 1, 3)  # [N, T, P, 2]
    hms = heatmaps[:, :, t_of_f].transpose(0, 2, 1, 3, 4)  # [N, T, P, m, n]
    valid = np.asarray(gt_valid, bool)
    total = valid.size
    evaluated = int(valid.sum())
    if evaluated == 0:
        return M.CoordinateMetrics(float("nan"), float("nan"), float("nan"), 0, total)
    return M.CoordinateMetrics(
        aae_degrees=M.aae(pred, gt_points, valid, fov_deg),
        auc=M.auc_saliency(hms.reshape(-1, *hms.shape[-2:]), gt_points.reshape(-1, 2), valid.reshape(-1)),
        mean_normalized_error=M.mean_normalized_error(pred, gt_points, valid),
        evaluated_frames=evaluated,
        skipped_frames=total - evaluated,
    )


def evaluate(model, samples: Sequence, cfg: TrainConfig, opts: Optional[EvalOptions] = None,
             split: str = "") -> M.MetricsReport:
    opts = opts or EvalOptions()
    raw = run_inference(model, samples, cfg)
    report = M.MetricsReport(split=split)
    for name, head in model.heads.items():
        if head.kind == "classification":
            logits = raw[name]
            labels = np.array([getattr(s, TASK_LABEL_FIELDS[name]) for s in samples])
            K = logits.shape[1]
            preds = M.predictions_from_logits(logits)
            cm = M.ClassificationMetrics(
                top1=M.topk_accuracy(logits, labels, 1),
                top5=M.topk_accuracy(logits, labels, min(5, K)),
                mean_class_accuracy=M.mean_class_accuracy(preds, labels, K),
                num_samples=len(labels),
            )
            counts = (opts.train_class_counts or {}).get(name)
            if counts is not None:
                pair = None
                comp = None
                if name == "A" and opts.pair_table is not None:
                    pair = opts.pair_table
                    comp = (opts.train_class_counts["V"], opts.train_class_counts["N"])
                try:
                    p, r, cls = M.many_hot_precision_recall(preds, labels, counts, opts.many_hot_threshold,
                                                            pair, comp)
                    cm.many_hot_precision, cm.many_hot_recall, cm.many_hot_classes = p, r, cls
                except M.UndefinedMetricError:
                    logger.info("task %s: no many-hot classes at threshold %d", name, opts.many_hot_threshold)
            report.classification[name] = cm
        else:
            report.coordinate[name] = coordinate_metrics(*raw[name], fov_deg=opts.fov_deg)
    return report


def train_class_counts(samples: Sequence) -> dict:
    out = {}
    for task, fld in TASK_LABEL_FIELDS.items():
        vals = [getattr(s, fld) for s in samples]
        out[task] = np.bincount(vals, minlength=max(vals) + 1 if vals else 0)
    return out


# -- training loop ---------------------------------------------------------------------

@dataclass
class FitResult:
    best_state: "OrderedDict[str, np.ndarray]"
    best_velocity: "OrderedDict[str, np.ndarray]"
    best_epoch: int
    best_metric: float
    log: list


def refresh_batch_stats(model, samples: Sequence, cfg: TrainConfig, epoch: int) -> None:
    """Re-estimate BN running stats with the weights frozen.

    During high-lr epochs the running averages trail the moving weights; a
    few no-grad train-mode passes at the end of the epoch catch them up.
    Draws come from a dedicated stream so the training shuffle is unchanged.
    """
    if cfg.bn_refresh_batches == 0 or not samples:
        return
    rng = np.random.default_rng([cfg.seed, 2, epoch])
    n = min(cfg.batch_size, len(samples))
    for _ in range(cfg.bn_refresh_batches):
        picks = rng.choice(len(samples), n, replace=False)
        batch = make_batch([samples[j] for j in picks], cfg, [], rng, "train")
        with no_grad():
            model.forward_shared(batch.clips, mode="train")


def fit(model, dataset, cfg: TrainConfig, coord_cfg: CoordLossConfig = CoordLossConfig(),
        eval_opts: Optional[EvalOptions] = None,
        on_record: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Train ``model`` on ``dataset.split('train')``, selecting the best epoch on val.

    Every step and epoch record is appended to ``FitResult.log`` and passed
    to ``on_record`` (e.g. a JSON-lines writer).
    """
    train = dataset.split("train")
    val = dataset.split("val")
    main = cfg.main_task
    if main not in model.heads or model.heads[main].kind != "classification":
        raise ConfigurationError(f"main task {main!r} must be a classification head of the model")
    if eval_opts is None:
        eval_opts = EvalOptions(train_class_counts=train_class_counts(train),
                                pair_table=getattr(dataset, "pair_table", None))
    names = model.task_set.names
    params = model.named_parameters()
    opt = OptimizerState()
    rng = np.random.default_rng([cfg.seed, 1])
    log: list = []

    def emit(rec):
        log.append(rec)
        if on_record is not None:
            on_record(rec)

    best = FitResult(model.state_dict(), OrderedDict(), -1, -math.inf, log)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cyclical_lr(epoch, cfg)
        order = rng.permutation(len(train))
        sums: dict = {}
        nsteps = 0
        for i in range(0, len(order), cfg.batch_size):
            batch = make_batch([train[j] for j in order[i:i + cfg.batch_size]], cfg, names, rng, "train")
            model.zero_grad()
            report = total_loss(batch, model, coord_cfg=coord_cfg, mode="train")
            losses = report.values()
            total = float(report.total.item())
            if not math.isfinite(total):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}: {losses}")
            backward(report.total)
            sgd_nesterov_step(params, opt, lr, cfg.momentum, cfg.weight_decay)
            emit({"type": "step", "epoch": epoch, "step": step, "lr": lr, "losses": losses,
                  "total": total, "skipped": report.skipped})
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            nsteps += 1
            step += 1
        model.zero_grad()
        refresh_batch_stats(model, train, cfg, epoch)
        val_report = evaluate(model, val, cfg, eval_opts, split="val")
        metric = val_report.classification[main].top1
        emit({"type": "epoch", "epoch": epoch, "lr": lr,
              "train_loss": {k: v / nsteps for k, v in sums.items()},
              "val": val_report.to_dict(), "val_main_top1": metric})
        logger.info("epoch %d lr %.2e train %s val %s top1 %.4f", epoch, lr,
                    {k: round(v / nsteps, 4) for k, v in sums.items()}, main, metric)
        if metric > best.best_metric:
            best = FitResult(OrderedDict((k, v.copy()) for k, v in model.state_dict().items()),
                             OrderedDict((k, v.copy()) for k, v in opt.velocity.items()),
                             epoch, metric, log)
    return best
