"""Synthetic egocentric-style clips with verb/noun/action labels, hands and gaze.

A clip shows one "active" object whose appearance encodes the noun and whose
motion pattern encodes the verb, flanked by two hand markers. An optional
distractor object draws from the same nouns but has no hands; it is static
by default and can be given a random verb motion of its own.
Gaze follows the active object's centroid with Gaussian jitter; a fraction
of gaze frames is marked invalid.

Coordinates are normalized so that pixel column ``j`` has its centre at
``x = (2j + 1) / W - 1``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from egomtl.dsnt import CoordinateTrack
from egomtl.errors import ConfigurationError
from egomtl.serialization import read_clip, write_clip

__all__ = [
    "DEFAULT_ACTION_PAIRS",
    "VERB_NAMES",
    "SynthConfig",
    "AnnotatedSample",
    "Dataset",
    "generate_dataset",
    "generate_sample",
    "render_frame",
    "verb_trajectory",
    "nearest_template_verb",
    "gaze_error_floor",
    "save_dataset",
    "load_dataset",
]

VERB_NAMES = ("sweep-horizontal", "sweep-vertical", "orbit", "approach", "shake")
SHAPES = ("square", "disk", "diamond")
COLORS = (
    (0.90, 0.15, 0.10),
    (0.10, 0.30, 0.95),
    (0.15, 0.80, 0.20),
    (0.95, 0.85, 0.10),
)
HAND_COLOR = (1.0, 0.78, 0.62)

DEFAULT_ACTION_PAIRS = (
    (0, 0), (0, 1), (0, 5),
    (1, 1), (1, 2),
    (2, 2), (2, 3), (2, 0),
    (3, 3), (3, 4),
    (4, 4), (4, 5),
)

SWEEP_AMPLITUDE = 0.25
ORBIT_RADIUS = 0.25
SHAKE_AMPLITUDE = 0.1
SHAKE_CYCLES = 4
MARGIN = 0.75  # every rendered centre stays within [-MARGIN, MARGIN]
BASE_RADIUS = 3.5  # object half-size in pixels at REFERENCE_SIZE
HAND_RADIUS = 2.0
REFERENCE_SIZE = 32  # pixel sizes scale with frame_size / REFERENCE_SIZE


@dataclass(frozen=True)
class SynthConfig:
    num_clips: int = 2000
    frames_per_clip: int = 16
    frame_size: int = 32
    num_verbs: int = 5
    num_nouns: int = 6
    valid_action_pairs: tuple = DEFAULT_ACTION_PAIRS
    coord_jitter_sigma: float = 0.05
    gaze_invalid_fraction: float = 0.15
    distractor_prob: float = 1.0
    distractor_motion: bool = False  # distractor follows a random verb trajectory of its own
    class_weights: Optional[tuple] = None  # sampling weight per action; uniform if None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "valid_action_pairs", tuple(tuple(int(v) for v in p) for p in self.valid_action_pairs))
        if self.frame_size < 16:
            raise ConfigurationError(f"frame_size must be >= 16, got {self.frame_size}")
        if self.frames_per_clip < 2:
            raise ConfigurationError("need at least two frames per clip")
        if not 1 <= self.num_verbs <= len(VERB_NAMES):
            raise ConfigurationError(f"num_verbs must be in [1, {len(VERB_NAMES)}]")
        if not 1 <= self.num_nouns <= len(SHAPES) * len(COLORS):
            raise ConfigurationError(f"num_nouns must be in [1, {len(SHAPES) * len(COLORS)}]")
        pairs = self.valid_action_pairs
        if not pairs:
            raise ConfigurationError("valid_action_pairs is empty")
        if len(set(pairs)) != len(pairs):
            raise ConfigurationError("valid_action_pairs has duplicates")
        for v, n in pairs:
            if not (0 <= v < self.num_verbs and 0 <= n < self.num_nouns):
                raise ConfigurationError(f"pair {(v, n)} outside {self.num_verbs} verbs x {self.num_nouns} nouns")
        if {v for v, _ in pairs} != set(range(self.num_verbs)):
            raise ConfigurationError("every verb must appear in at least one action pair")
        if {n for _, n in pairs} != set(range(self.num_nouns)):
            raise ConfigurationError("every noun must appear in at least one action pair")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.shape != (len(pairs),) or (w < 0).any() or w.sum() <= 0:
                raise ConfigurationError("class_weights needs one nonnegative weight per action pair")
        if not 0 <= self.gaze_invalid_fraction < 1:
            raise ConfigurationError("gaze_invalid_fraction must lie in [0, 1)")
        if self.coord_jitter_sigma < 0:
            raise ConfigurationError("coord_jitter_sigma must be nonnegative")

    @property
    def num_actions(self) -> int:
        return len(self.valid_action_pairs)

    def action_probabilities(self) -> np.ndarray:
        if self.class_weights is None:
            return np.full(self.num_actions, 1.0 / self.num_actions)
        w = np.asarray(self.class_weights, dtype=float)
        return w / w.sum()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["valid_action_pairs"] = [list(p) for p in self.valid_action_pairs]
        d["class_weights"] = None if self.class_weights is None else list(self.class_weights)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class AnnotatedSample:
    clip: np.ndarray  # [T, H, W, 3] in [0, 1]
    verb: int
    noun: int
    action: int
    hands: CoordinateTrack  # P = 2 (left, right)
    gaze: CoordinateTrack  # P = 1
    clip_id: str
    centroid: np.ndarray = field(repr=False, default=None)  # [T, 2] noise-free object centre


@dataclass
class Dataset:
    samples: list
    splits: dict  # split name -> list of clip ids
    config: SynthConfig

    def __post_init__(self):
        self._by_id = {s.clip_id: s for s in self.samples}

    def split(self, name: str) -> list:
        return [self._by_id[c] for c in self.splits[name]]

    @property
    def pair_table(self) -> tuple:
        return self.config.valid_action_pairs

    def class_counts(self, split: str, task: str) -> np.ndarray:
        size = {"action": self.config.num_actions, "verb": self.config.num_verbs, "noun": self.config.num_nouns}[task]
        return np.bincount([getattr(s, task) for s in self.split(split)], minlength=size)


# -- motion ---------------------------------------------------------------------

def verb_trajectory(verb: int, T: int, phase: float = 0.0, direction: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Centre offsets ``[T, 2]`` (normalized) and object radii ``[T]`` in pixels."""
    t = np.linspace(0.0, 1.0, T)
    rel = np.zeros((T, 2))
    radius = np.full(T, BASE_RADIUS)
    if verb == 0:
        rel[:, 0] = direction * SWEEP_AMPLITUDE * (2 * t - 1)
    elif verb == 1:
        rel[:, 1] = direction * SWEEP_AMPLITUDE * (2 * t - 1)
    elif verb == 2:
        rel[:, 0] = ORBIT_RADIUS * np.cos(2 * np.pi * t + phase)
        rel[:, 1] = ORBIT_RADIUS * np.sin(2 * np.pi * t + phase)
    elif verb == 3:
        radius = BASE_RADIUS * (0.7 + 0.7 * t)
    elif verb == 4:
        rel[:, 0] = SHAKE_AMPLITUDE * np.sin(2 * np.pi * SHAKE_CYCLES * t + phase)
    else:
        raise ConfigurationError(f"unknown verb {verb}")
    return rel, radius


def _template_bank(num_verbs: int, T: int, phases: int = 64):
    bank = []
    for v in range(num_verbs):
        if v in (0, 1):
            for d in (-1, 1):
                bank.append((v, verb_trajectory(v, T, 0.0, d)[0]))
        elif v in (2, 4):
            for ph in np.linspace(0, 2 * np.pi, phases, endpoint=False):
                bank.append((v, verb_trajectory(v, T, ph)[0]))
        else:
            bank.append((v, verb_trajectory(v, T)[0]))
    return bank


def nearest_template_verb(centroid_track: np.ndarray, num_verbs: int = 5) -> int:
    """Classify a centroid track ``[T, 2]`` by its nearest mean-centred verb template."""
    track = np.asarray(centroid_track, dtype=np.float64)
    track = track - track.mean(axis=0)
    best, best_d = -1, np.inf
    for v, tmpl in _template_bank(num_verbs, track.shape[0]):
        d = np.sum((track - (tmpl - tmpl.mean(axis=0))) ** 2)
        if d < best_d:
            best, best_d = v, d
    return best


def gaze_error_floor(sigma: float) -> float:
    """Expected Euclidean error of the noise-free centroid against jittered gaze."""
    return sigma * math.sqrt(math.pi / 2.0)


# -- rendering ---------------------------------------------------------------------

def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.6, size=(4, 4, 1)) + rng.uniform(-0.04, 0.04, size=(4, 4, 3))
    tile = size // 4
    bg = np.kron(coarse, np.ones((tile, tile, 1)))
    if bg.shape[0] != size:
        bg = np.pad(bg, ((0, size - bg.shape[0]), (0, size - bg.shape[1]), (0, 0)), mode="edge")
    bg += rng.normal(0.0, 0.02, size=bg.shape)
    return np.clip(bg, 0.0, 1.0)


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r) -> np.ndarray:
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    return np.abs(dx) + np.abs(dy) <= 1.3 * r


def noun_appearance(noun: int) -> tuple[str, tuple]:
    return SHAPES[noun % len(SHAPES)], COLORS[noun // len(SHAPES)]


def render_frame(state: dict, background: Optional[np.ndarray] = None) -> np.ndarray:
    """Rasterize one frame ``[H, W, 3]``.

    ``state`` holds ``size``, ``objects`` (list of ``(noun, (x, y), radius_px)``,
    drawn in order), ``hands`` (list of ``(x, y)``) and optionally
    ``hand_radius`` in pixels; positions are normalized coordinates. Pixels are filled when their centre lies inside a shape.
    """
    size = state["size"]
    img = np.full((size, size, 3), 0.45) if background is None else background.copy()
    centers = np.arange(size) + 0.5
    px, py = centers[None, :], centers[:, None]
    for noun, (x, y), r in state["objects"]:
        shape, color = noun_appearance(noun)
        cx, cy = (x + 1) * size / 2, (y + 1) * size / 2
        img[_shape_mask(shape, px - cx, py - cy, r)] = color
    hr = state.get("hand_radius", HAND_RADIUS)
    for x, y in state.get("hands", ()):
        cx, cy = (x + 1) * size / 2, (y + 1) * size / 2
        img[_shape_mask("square", px - cx, py - cy, hr)] = HAND_COLOR
    return img


def _render_clip(size: int, background: np.ndarray, noun: int, centre: np.ndarray, radius: np.ndarray,
                 hands: np.ndarray, distractor, hand_radius: float = HAND_RADIUS) -> np.ndarray:
    """Vectorized :func:`render_frame` over all frames."""
    T = centre.shape[0]
    clip = np.broadcast_to(background, (T, size, size, 3)).copy()
    c = np.arange(size) + 0.5
    px, py = c[None, None, :], c[None, :, None]
    if distractor is not None:
        dn, dcentre, dr = distractor
        shape, color = noun_appearance(dn)
        dx = ((dcentre[:, 0] + 1) * size / 2)[:, None, None]
        dy = ((dcentre[:, 1] + 1) * size / 2)[:, None, None]
        clip[_shape_mask(shape, px - dx, py - dy, dr[:, None, None])] = color
    shape, color = noun_appearance(noun)
    cx = ((centre[:, 0] + 1) * size / 2)[:, None, None]
    cy = ((centre[:, 1] + 1) * size / 2)[:, None, None]
    clip[_shape_mask(shape, px - cx, py - cy, radius[:, None, None])] = color
    for h in range(hands.shape[1]):
        hx = ((hands[:, h, 0] + 1) * size / 2)[:, None, None]
        hy = ((hands[:, h, 1] + 1) * size / 2)[:, None, None]
        clip[_shape_mask("square", px - hx, py - hy, hand_radius)] = HAND_COLOR
    return clip.astype(np.float32)


def generate_sample(cfg: SynthConfig, index: int) -> AnnotatedSample:
    """Render clip ``index``; depends only on ``(cfg, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    T, S = cfg.frames_per_clip, cfg.frame_size
    action = int(rng.choice(cfg.num_actions, p=cfg.action_probabilities()))
    verb, noun = cfg.valid_action_pairs[action]
    phase = rng.uniform(0, 2 * np.pi)
    direction = int(rng.choice((-1, 1)))
    rel, radius = verb_trajectory(verb, T, phase, direction)
    scale = S / REFERENCE_SIZE
    radius = radius * scale
    hand_r = HAND_RADIUS * scale

    hand_phase = rng.uniform(0, 2 * np.pi)
    t = np.linspace(0.0, 1.0, T)
    side = (radius + hand_r + scale) * 2 / S  # hand offset, normalized
    wobble = 2 * np.pi * 2 * t + hand_phase
    hand_rel = np.stack([
        np.stack([-side + 0.04 * np.sin(wobble), 0.06 * np.cos(wobble)], axis=-1),
        np.stack([side + 0.04 * np.sin(wobble + np.pi), 0.06 * np.cos(wobble + np.pi)], axis=-1),
    ], axis=1)  # [T, 2, 2]

    lo = -MARGIN - np.minimum(rel[:, None, :] + hand_rel, rel[:, None, :]).min(axis=(0, 1))
    hi = MARGIN - np.maximum(rel[:, None, :] + hand_rel, rel[:, None, :]).max(axis=(0, 1))
    origin = rng.uniform(lo, hi)
    centre = origin + rel
    hands = centre[:, None, :] + hand_rel

    distractor = None
    d_rng = np.random.default_rng([cfg.seed, index, 1])  # own stream: distractor options leave the rest intact
    if d_rng.uniform() < cfg.distractor_prob:
        d_noun = int(d_rng.integers(cfg.num_nouns))
        d_origin = d_rng.uniform(-1.0, 1.0, size=2)
        if cfg.distractor_motion:
            d_rel, d_radius = verb_trajectory(int(d_rng.integers(cfg.num_verbs)), T, d_rng.uniform(0, 2 * np.pi),
                                              int(d_rng.choice((-1, 1))))
        else:
            d_rel, d_radius = np.zeros((T, 2)), np.full(T, BASE_RADIUS)
        lo, hi = -MARGIN - d_rel.min(axis=0), MARGIN - d_rel.max(axis=0)
        d_origin = lo + (d_origin + 1.0) / 2.0 * (hi - lo)
        distractor = (d_noun, d_origin + d_rel, d_radius * scale)

    background = _background(rng, S)
    clip = _render_clip(S, background, noun, centre, radius, hands, distractor, hand_r)

    jitter = rng.normal(0.0, 1.0, size=(T, 2)) * cfg.coord_jitter_sigma
    gaze = np.clip(centre + jitter, -1.0, 1.0)
    gaze_valid = rng.uniform(size=T) >= cfg.gaze_invalid_fraction

    return AnnotatedSample(
        clip=clip, verb=verb, noun=noun, action=action,
        hands=CoordinateTrack(hands, np.ones((T, 2), bool)),
        gaze=CoordinateTrack(gaze[:, None, :], gaze_valid[:, None]),
        clip_id=f"clip{index:06d}", centroid=centre,
    )


def split_ids(ids: Sequence[str], seed: int, ratios=(0.70, 0.15, 0.15)) -> dict:
    """Disjoint train/val/test lists; sizes are ``round(ratio * N)`` with the rest in test."""
    order = np.random.default_rng([seed, 0x5B1]).permutation(len(ids))
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    ids = [ids[i] for i in order]
    return {"train": sorted(ids[:n_train]), "val": sorted(ids[n_train:n_train + n_val]),
            "test": sorted(ids[n_train + n_val:])}


def generate_dataset(cfg: SynthConfig) -> Dataset:
    samples = [generate_sample(cfg, i) for i in range(cfg.num_clips)]
    return Dataset(samples, split_ids([s.clip_id for s in samples], cfg.seed), cfg)


# -- on-disk format -----------------------------------------------------------------

def save_dataset(ds: Dataset, root) -> Path:
    """Write ``index.jsonl``, ``manifest.json`` and one MTLC file per clip."""
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    split_of = {cid: name for name, ids in ds.splits.items() for cid in ids}
    lines = []
    for s in ds.samples:
        rel = f"clips/{s.clip_id}.mtlc"
        write_clip(root / rel, s.clip)
        lines.append(json.dumps({
            "clip_id": s.clip_id,
            "path": rel,
            "verb": s.verb,
            "noun": s.noun,
            "action": s.action,
            "hands": s.hands.points.tolist(),
            "gaze": s.gaze.points[:, 0, :].tolist(),
            "gaze_valid": s.gaze.valid[:, 0].tolist(),
            "centroid": s.centroid.tolist(),
            "split": split_of[s.clip_id],
        }))
    (root / "index.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = {"config": ds.config.to_dict(), "config_hash": ds.config.digest(),
                "num_clips": len(ds.samples),
                "splits": {k: len(v) for k, v in ds.splits.items()},
                "index_sha256": hashlib.sha256((root / "index.jsonl").read_bytes()).hexdigest()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    c = dict(manifest["config"])
    c["valid_action_pairs"] = tuple(tuple(p) for p in c["valid_action_pairs"])
    if c.get("class_weights") is not None:
        c["class_weights"] = tuple(c["class_weights"])
    cfg = SynthConfig(**c)
    samples, splits = [], {"train": [], "val": [], "test": []}
    with open(root / "index.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            T = len(rec["gaze"])
            gaze = np.asarray(rec["gaze"], dtype=np.float64)[:, None, :]
            samples.append(AnnotatedSample(
                clip=read_clip(root / rec["path"]),
                verb=rec["verb"], noun=rec["noun"], action=rec["action"],
                hands=CoordinateTrack(np.asarray(rec["hands"]), np.ones((T, 2), bool)),
                gaze=CoordinateTrack(gaze, np.asarray(rec["gaze_valid"], bool)[:, None]),
                clip_id=rec["clip_id"],
                centroid=np.asarray(rec["centroid"]) if "centroid" in rec else None,
            ))
            splits.setdefault(rec["split"], []).append(rec["clip_id"])
    return Dataset(samples, {k: sorted(v) for k, v in splits.items()}, cfg)
