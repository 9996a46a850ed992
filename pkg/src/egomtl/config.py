"""Run configuration files.

Configs are INI-style UTF-8 text: ``[section]`` headers followed by
``key = value`` lines. Every key is checked against a schema; unknown keys
and malformed values are rejected.

Example::

    [run]
    seed = 0
    tasks = A+H+G
    dataset = data/synth
    out = runs/ahg

    [arch]
    stages = 16@1x2x2, 32@2x2x2, 64@1x1x1

    [train]
    epochs = 30
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

from egomtl.dsnt import CoordLossConfig
from egomtl.errors import ConfigurationError
from egomtl.model import ArchConfig, StageConfig, TaskSet
from egomtl.synthdata import SynthConfig
from egomtl.trainer import TrainConfig

__all__ = ["RunConfig", "load_config", "parse_config", "parse_stages", "parse_pairs"]


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_pairs(s: str) -> tuple:
    """``"0:0, 0:1, 1:2"`` -> ``((0, 0), (0, 1), (1, 2))``."""
    out = []
    for item in s.split(","):
        v, n = item.strip().split(":")
        out.append((int(v), int(n)))
    return tuple(out)


def _triple(s: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in s.split("x"))
    if len(parts) != 3:
        raise ValueError(f"expected TxHxW, got {s!r}")
    return parts


def parse_stages(s: str) -> tuple[StageConfig, ...]:
    """``"16@1x2x2, 32@2x2x2*2"``: channels @ stride, optional ``*blocks``."""
    stages = []
    for item in s.split(","):
        item = item.strip()
        blocks = 1
        if "*" in item:
            item, b = item.split("*")
            blocks = int(b)
        ch, stride = item.split("@")
        stages.append(StageConfig(int(ch), _triple(stride), blocks=blocks))
    return tuple(stages)


def _float_list(s: str) -> tuple:
    return tuple(float(v) for v in s.split(","))


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip().lower() in ("auto", "none", "") else float(s)


SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "run": {"seed": int, "tasks": str, "main_task": str, "dataset": str, "out": str},
    "synth": {"num_clips": int, "frames_per_clip": int, "frame_size": int, "num_verbs": int,
              "num_nouns": int, "valid_action_pairs": parse_pairs, "coord_jitter_sigma": float,
              "gaze_invalid_fraction": float, "distractor_prob": float, "distractor_motion": _bool,
              "class_weights": _float_list, "seed": int},
    "train": {"base_lr": float, "max_lr": float, "cycle_epochs": float, "momentum": float,
              "weight_decay": float, "batch_size": int, "epochs": int, "clip_len": int,
              "window_len": int, "train_scale": int, "crop_size": int, "eval_batch_size": int,
              "seed": int, "bn_refresh_batches": int},
    "arch": {"stages": parse_stages},
    "loss": {"lambda": float, "sigma": _opt_float},
    "metrics": {"fov_deg": float, "many_hot_threshold": int},
    "predict": {"clip": str},
}


@dataclass
class RunConfig:
    seed: int
    synth: SynthConfig
    train: TrainConfig
    arch: ArchConfig
    tasks: str = "A"
    coord: CoordLossConfig = field(default_factory=CoordLossConfig)
    fov_deg: float = 60.0
    many_hot_threshold: int = 100
    dataset_dir: Optional[Path] = None
    out_dir: Optional[Path] = None
    clip_path: Optional[Path] = None
    text: str = ""

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def task_set(self, num_actions: Optional[int] = None, num_verbs: Optional[int] = None,
                 num_nouns: Optional[int] = None) -> TaskSet:
        return TaskSet.parse(self.tasks,
                             num_actions or self.synth.num_actions,
                             num_verbs or self.synth.num_verbs,
                             num_nouns or self.synth.num_nouns,
                             main_task=self.train.main_task)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed),
                       text=self.text + f"\n# seed override: {seed}\n")


def parse_config(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config: {exc}") from exc
    values: dict[str, dict[str, Any]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            try:
                values[section][key] = SCHEMA[section][key](raw)
            except (ValueError, TypeError) as exc:
                raise ConfigurationError(f"[{section}] {key} = {raw!r}: {exc}") from exc

    run = values.get("run", {})
    if "seed" not in run:
        raise ConfigurationError("[run] seed is mandatory")
    seed = run["seed"]
    synth_kw = dict(values.get("synth", {}))
    synth_kw.setdefault("seed", seed)
    train_kw = dict(values.get("train", {}))
    train_kw.setdefault("seed", seed)
    if "main_task" in run:
        train_kw["main_task"] = run["main_task"]
    synth = SynthConfig(**synth_kw)
    train = TrainConfig(**train_kw)
    arch_kw = {"input_frames": train.clip_len, "input_size": (train.crop_size, train.crop_size)}
    if "stages" in values.get("arch", {}):
        arch_kw["stages"] = values["arch"]["stages"]
    arch = ArchConfig(**arch_kw)
    loss = values.get("loss", {})
    coord = CoordLossConfig(lam=loss.get("lambda", 0.5), sigma=loss.get("sigma"))
    met = values.get("metrics", {})
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def path(v):
        return None if v is None else (base / v if not Path(v).is_absolute() else Path(v))

    cfg = RunConfig(seed=seed, synth=synth, train=train, arch=arch, tasks=run.get("tasks", "A"), coord=coord,
                    fov_deg=met.get("fov_deg", 60.0), many_hot_threshold=met.get("many_hot_threshold", 100),
                    dataset_dir=path(run.get("dataset")), out_dir=path(run.get("out")),
                    clip_path=path(values.get("predict", {}).get("clip")), text=text)
    cfg.task_set()  # validates task letters early
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
