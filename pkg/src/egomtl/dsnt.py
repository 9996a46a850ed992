"""Differentiable spatial-to-numerical transform (DSNT) and its coordinate loss.

Heatmaps are laid out ``[B, P, l, m, n]``: batch, point, frame, rows, columns.
Coordinates are ``(x, y)`` in normalized units, x growing to the right and
y growing downwards, with pixel centres at ``(2j - n - 1) / n``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from egomtl import ops
from egomtl.errors import ConfigurationError, ContractError, DimensionError, EmptySupervisionError
from egomtl.tensor import Tensor

__all__ = [
    "HeatmapStack",
    "CoordinateGrid",
    "CoordinateTrack",
    "CoordLossConfig",
    "normalize_heatmap",
    "coordinate_grid",
    "dsnt",
    "gaussian_target",
    "gaussian_targets",
    "js_divergence",
    "coord_loss",
    "coord_loss_terms",
]


@dataclass
class HeatmapStack:
    values: Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.values.ndim != 5:
            raise DimensionError(f"heatmap stack must be [B,P,l,m,n], got {self.values.shape}")
        if self.values.shape[-1] < 2 or self.values.shape[-2] < 2:
            raise DimensionError(f"heatmaps need m,n >= 2, got {self.values.shape[-2:]}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]


@dataclass(frozen=True)
class CoordinateGrid:
    X: np.ndarray
    Y: np.ndarray


@dataclass
class CoordinateTrack:
    """Per-frame points of one sample: ``points[l, P, 2]`` and ``valid[l, P]``."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[-1] != 2 or self.valid.shape != self.points.shape[:2]:
            raise DimensionError(f"track needs points [l,P,2] and valid [l,P], got "
                                 f"{self.points.shape} and {self.valid.shape}")
        pts = self.points[self.valid]
        if pts.size and (not np.all(np.isfinite(pts)) or np.abs(pts).max() > 1):
            raise ContractError("valid track entries must be finite and within [-1, 1]")

    @staticmethod
    def batch(tracks: Sequence["CoordinateTrack"]) -> tuple[np.ndarray, np.ndarray]:
        """Stack tracks into loss layout: points ``[B,P,l,2]``, valid ``[B,P,l]``."""
        pts = np.stack([t.points for t in tracks]).transpose(0, 2, 1, 3)
        val = np.stack([t.valid for t in tracks]).transpose(0, 2, 1)
        return pts, val


@dataclass(frozen=True)
class CoordLossConfig:
    lam: float = 0.5
    sigma: Optional[float] = None  # None -> one cell width, 2 / max(m, n)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")

    def sigma_for(self, m: int, n: int) -> float:
        return self.sigma if self.sigma is not None else 2.0 / max(m, n)


def coordinate_grid(m: int, n: int) -> CoordinateGrid:
    if m < 2 or n < 2:
        raise DimensionError(f"coordinate grid needs m,n >= 2, got {(m, n)}")
    xs = (2.0 * np.arange(1, n + 1) - n - 1) / n
    ys = (2.0 * np.arange(1, m + 1) - m - 1) / m
    return CoordinateGrid(X=np.tile(xs, (m, 1)), Y=np.tile(ys[:, None], (1, n)))


def normalize_heatmap(raw: HeatmapStack) -> HeatmapStack:
    if raw.normalized:
        raise ContractError("heatmap stack is already normalized")
    return HeatmapStack(ops.softmax(raw.values, axes=(-2, -1)), normalized=True)


def dsnt(hm: HeatmapStack) -> Tensor:
    """Expected ``(x, y)`` of each normalized heatmap; returns ``[B, P, l, 2]``."""
    if not hm.normalized:
        raise ContractError("dsnt expects a softmax-normalized heatmap stack")
    z = hm.values
    grid = coordinate_grid(*hm.grid_shape)
    X = grid.X.astype(z.dtype)
    Y = grid.Y.astype(z.dtype)
    out = np.stack([(z.data * X).sum(axis=(-2, -1)), (z.data * Y).sum(axis=(-2, -1))], axis=-1)

    def bw(g):
        return (g[..., 0, None, None] * X + g[..., 1, None, None] * Y,)

    return Tensor._from_op(out, "dsnt", (z,), bw)


def gaussian_targets(points: np.ndarray, sigma: float, m: int, n: int) -> np.ndarray:
    """Rasterize an isotropic Gaussian around each point of ``points[..., 2]``.

    Returns ``[..., m, n]`` distributions, each summing to one.
    """
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    points = np.asarray(points, dtype=np.float64)
    grid = coordinate_grid(m, n)
    dx = grid.X - points[..., 0, None, None]
    dy = grid.Y - points[..., 1, None, None]
    logit = -(dx * dx + dy * dy) / (2.0 * sigma * sigma)
    logit -= logit.max(axis=(-2, -1), keepdims=True)
    dens = np.exp(logit)
    return dens / dens.sum(axis=(-2, -1), keepdims=True)


def gaussian_target(c_gt, sigma: float, m: int, n: int) -> np.ndarray:
    c_gt = np.asarray(c_gt, dtype=np.float64)
    if c_gt.shape != (2,) or np.abs(c_gt).max() > 1:
        raise ContractError(f"target centre must be an (x, y) pair in [-1, 1], got {c_gt}")
    return gaussian_targets(c_gt, sigma, m, n)


def _xlogx(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0, a * np.log(np.where(a > 0, a, 1)), 0)


def js_divergence(p, q, axes=None) -> Tensor:
    """Jensen-Shannon divergence (natural log) reduced over ``axes``.

    ``p`` may be a tensor and is differentiated through; ``q`` is a constant.
    """
    if not isinstance(p, Tensor):
        p = Tensor(p)
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=p.dtype)
    if q.shape != p.shape:
        raise DimensionError(f"js_divergence shapes differ: {p.shape} vs {q.shape}")
    if (p.data < 0).any() or (q < 0).any():
        raise ContractError("js_divergence needs nonnegative distributions")
    axes = tuple(range(p.ndim)) if axes is None else ops._norm_axes(axes, p.ndim)
    pd = p.data
    mid = 0.5 * (pd + q)
    val = (0.5 * _xlogx(pd) + 0.5 * _xlogx(q) - _xlogx(mid)).sum(axis=axes)
    tiny = np.finfo(p.dtype).tiny

    def bw(g):
        d = 0.5 * (np.log(np.maximum(pd, tiny)) - np.log(np.maximum(mid, tiny)))
        return (d * np.expand_dims(g, axes),)

    return Tensor._from_op(np.asarray(val, dtype=p.dtype), "js_divergence", (p,), bw)


def coord_loss_terms(hm: HeatmapStack, gt_points: np.ndarray, gt_valid: np.ndarray,
                     sigma: Optional[float] = None) -> tuple[Tensor, Tensor]:
    """Mask-aware means of the Euclidean and Jensen-Shannon terms.

    ``gt_points`` is ``[B,P,l,2]`` and ``gt_valid`` is ``[B,P,l]``; invalid
    entries may hold anything (including NaN) and receive no gradient.
    """
    if not hm.normalized:
        raise ContractError("coord_loss expects a softmax-normalized heatmap stack")
    B, P, L, m, n = hm.values.shape
    gt_points = np.asarray(gt_points, dtype=np.float64)
    gt_valid = np.asarray(gt_valid, dtype=bool)
    if gt_points.shape != (B, P, L, 2) or gt_valid.shape != (B, P, L):
        raise DimensionError(f"ground truth {gt_points.shape}/{gt_valid.shape} not aligned with heatmaps {hm.values.shape}")
    count = int(gt_valid.sum())
    if count == 0:
        raise EmptySupervisionError("no valid coordinate supervision in this batch")
    if sigma is None:
        sigma = CoordLossConfig().sigma_for(m, n)
    safe = np.where(gt_valid[..., None], gt_points, 0.0)

    coords = dsnt(hm)
    diff = ops.add(coords, -safe)
    dist = ops.euclidean_norm(ops.reshape(ops.masked_select(diff, np.broadcast_to(gt_valid[..., None], diff.shape)),
                                          (count, 2)), axis=-1)
    targets = gaussian_targets(safe, sigma, m, n)
    js = ops.masked_select(js_divergence(hm.values, targets, axes=(-2, -1)), gt_valid)
    return ops.mean(dist), ops.mean(js)


def coord_loss(hm: HeatmapStack, gt_points: np.ndarray, gt_valid: np.ndarray,
               cfg: CoordLossConfig = CoordLossConfig()) -> Tensor:
    """``lam * L_euc + (1 - lam) * L_js`` averaged over valid (point, frame) entries."""
    sigma = cfg.sigma_for(*hm.grid_shape)
    euc, reg = coord_loss_terms(hm, gt_points, gt_valid, sigma)
    return ops.add(ops.scalar_mul(euc, cfg.lam), ops.scalar_mul(reg, 1.0 - cfg.lam))
