"""Shared 3D-CNN feature extractor with task-specific output layers.

The backbone is a stack of stages; each stage opens with a strided
conv-BN-ReLU block and may append residual blocks. Heads only read the
shared feature map, so every head's parameters are disjoint from the
backbone's and from each other's.
"""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from egomtl import ops
from egomtl.dsnt import HeatmapStack
from egomtl.errors import ConfigurationError, DimensionError
from egomtl.tensor import Tensor, no_grad

__all__ = [
    "StageConfig",
    "ArchConfig",
    "TaskSpec",
    "TaskSet",
    "SharedBackbone",
    "TaskHead",
    "MultiTaskModel",
    "build_model",
    "class_activation_map",
    "STANDARD_TASKS",
]

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class StageConfig:
    channels: int
    stride: Triple = (1, 1, 1)
    kernel: Triple = (3, 3, 3)
    blocks: int = 1  # 1 = just the downsampling block; each extra block is residual


@dataclass(frozen=True)
class ArchConfig:
    stages: tuple[StageConfig, ...] = (
        StageConfig(16, (1, 2, 2)),
        StageConfig(32, (2, 2, 2)),
        StageConfig(64, (1, 1, 1)),
    )
    in_channels: int = 3
    input_frames: int = 16
    input_size: tuple[int, int] = (32, 32)

    def feature_shape(self) -> Triple:
        l, m, n = self.input_frames, *self.input_size
        for st in self.stages:
            k, s = st.kernel, st.stride
            l = (l + 2 * (k[0] // 2) - k[0]) // s[0] + 1
            m = (m + 2 * (k[1] // 2) - k[1]) // s[1] + 1
            n = (n + 2 * (k[2] // 2) - k[2]) // s[2] + 1
        return l, m, n

    @property
    def out_channels(self) -> int:
        return self.stages[-1].channels


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # "classification" | "coordinate"
    size: int  # classes or points

    def __post_init__(self):
        if self.kind not in ("classification", "coordinate"):
            raise ConfigurationError(f"task {self.name!r}: unknown kind {self.kind!r}")
        if self.size < 1:
            raise ConfigurationError(f"task {self.name!r}: size must be positive")


# Letters used in run configs: Actions, Verbs, Nouns, Gaze, Hands.
STANDARD_TASKS = {
    "A": ("classification", "num_actions"),
    "V": ("classification", "num_verbs"),
    "N": ("classification", "num_nouns"),
    "G": ("coordinate", 1),
    "H": ("coordinate", 2),
}


@dataclass(frozen=True)
class TaskSet:
    tasks: tuple[TaskSpec, ...]
    main_task: str

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if not names:
            raise ConfigurationError("task set is empty")
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate task names in {names}")
        if self.main_task not in names:
            raise ConfigurationError(f"main task {self.main_task!r} is not one of {names}")

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def __getitem__(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    @classmethod
    def parse(cls, spec: str, num_actions: int, num_verbs: int, num_nouns: int,
              main_task: str = "A") -> "TaskSet":
        """Build a task set from a string such as ``"A+V+N+G+H"``."""
        counts = {"num_actions": num_actions, "num_verbs": num_verbs, "num_nouns": num_nouns}
        tasks = []
        for letter in (s.strip() for s in spec.split("+")):
            if letter not in STANDARD_TASKS:
                raise ConfigurationError(f"unknown task {letter!r}; expected letters from {sorted(STANDARD_TASKS)}")
            kind, size = STANDARD_TASKS[letter]
            tasks.append(TaskSpec(letter, kind, counts[size] if isinstance(size, str) else size))
        return cls(tuple(tasks), main_task)


def _rng_for(seed: int, name: str) -> np.random.Generator:
    # Per-parameter streams: a head's presence never perturbs other initializations.
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _he_kernel(seed: int, name: str, shape: Sequence[int]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (_rng_for(seed, name).standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class _ConvBN:
    def __init__(self, prefix: str, cin: int, cout: int, kernel: Triple, stride: Triple, seed: int):
        self.stride = stride
        self.padding = tuple(k // 2 for k in kernel)
        self.weight = Tensor(_he_kernel(seed, prefix + ".weight", (cout, cin, *kernel)), requires_grad=True,
                             name=prefix + ".weight")
        self.scale = Tensor(np.ones(cout, np.float32), requires_grad=True, name=prefix + ".bn.scale")
        self.shift = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=prefix + ".bn.shift")
        self.running = ops.RunningStats(cout)
        self.prefix = prefix

    def params(self) -> list[Tensor]:
        return [self.weight, self.scale, self.shift]

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = ops.conv3d(x, self.weight, None, self.stride, self.padding)
        return ops.batchnorm3d(y, self.scale, self.shift, mode, self.running)


class SharedBackbone:
    """Shared feature extractor ``[B, 3, T, H, W] -> [B, C, l, m, n]``."""

    def __init__(self, arch: ArchConfig, seed: int):
        if len(arch.stages) < 1:
            raise ConfigurationError("backbone needs at least one stage")
        if arch.input_frames < 4:
            raise ConfigurationError(f"input frame count must be >= 4, got {arch.input_frames}")
        l, m, n = arch.feature_shape()
        if l < 1 or m < 2 or n < 2:
            raise ConfigurationError(f"feature map {(l, m, n)} is smaller than 1x2x2 for input "
                                     f"{arch.input_frames}x{arch.input_size}")
        self.arch = arch
        self.blocks: list[list[_ConvBN]] = []
        cin = arch.in_channels
        for i, st in enumerate(arch.stages):
            stage = [_ConvBN(f"backbone/stage{i}/down", cin, st.channels, st.kernel, st.stride, seed)]
            for j in range(1, st.blocks):
                for half in ("a", "b"):
                    stage.append(_ConvBN(f"backbone/stage{i}/res{j}{half}", st.channels, st.channels,
                                         st.kernel, (1, 1, 1), seed))
            self.blocks.append(stage)
            cin = st.channels

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for stage in self.blocks:
            for blk in stage:
                for p in blk.params():
                    out[p.name] = p
        return out

    def running_stats(self) -> "OrderedDict[str, ops.RunningStats]":
        return OrderedDict((blk.prefix + ".bn", blk.running) for stage in self.blocks for blk in stage)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.arch.in_channels:
            raise DimensionError(f"expected clips [B,{self.arch.in_channels},T,H,W], got {x.shape}")
        for stage in self.blocks:
            x = ops.relu(stage[0](x, mode))
            for a, b in zip(stage[1::2], stage[2::2]):
                x = ops.relu(ops.add(b(ops.relu(a(x, mode)), mode), x))
        return x

    __call__ = forward


class TaskHead:
    """Output layer of one task: pool+linear for classes, 1x1x1 conv for heatmaps."""

    def __init__(self, spec: TaskSpec, in_channels: int, seed: int):
        self.spec = spec
        prefix = f"head/{spec.name}"
        if spec.kind == "classification":
            w = (_rng_for(seed, prefix + "/linear.weight").standard_normal((in_channels, spec.size))
                 * np.sqrt(1.0 / in_channels)).astype(np.float32)
            self.weight = Tensor(w, requires_grad=True, name=prefix + "/linear.weight")
            self.bias = Tensor(np.zeros(spec.size, np.float32), requires_grad=True, name=prefix + "/linear.bias")
        else:
            w = _he_kernel(seed, prefix + "/conv.weight", (spec.size, in_channels, 1, 1, 1))
            self.weight = Tensor(w, requires_grad=True, name=prefix + "/conv.weight")
            self.bias = Tensor(np.zeros(spec.size, np.float32), requires_grad=True, name=prefix + "/conv.bias")

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def kind(self) -> str:
        return self.spec.kind

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict([(self.weight.name, self.weight), (self.bias.name, self.bias)])

    def forward(self, features: Tensor) -> Union[Tensor, HeatmapStack]:
        if features.ndim != 5 or features.shape[1] != self.weight.shape[0 if self.kind == "classification" else 1]:
            raise DimensionError(f"head {self.name!r} got features {features.shape}")
        if self.kind == "classification":
            return classification_forward(self, features)
        return coordinate_forward(self, features)

    __call__ = forward


def classification_forward(head: TaskHead, features: Tensor) -> Tensor:
    return ops.linear(ops.global_avg_pool(features), head.weight, head.bias)


def coordinate_forward(head: TaskHead, features: Tensor) -> HeatmapStack:
    return HeatmapStack(ops.conv3d(features, head.weight, head.bias), normalized=False)


class MultiTaskModel:
    def __init__(self, arch: ArchConfig, task_set: TaskSet, seed: int):
        self.arch = arch
        self.task_set = task_set
        self.seed = seed
        self.backbone = SharedBackbone(arch, seed)
        self.heads: "OrderedDict[str, TaskHead]" = OrderedDict(
            (t.name, TaskHead(t, arch.out_channels, seed)) for t in task_set.tasks)

    # -- parameter bookkeeping ------------------------------------------------
    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = self.backbone.named_parameters()
        for h in self.heads.values():
            out.update(h.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters plus BN running statistics (``<bn>.running_mean/var``)."""
        out = OrderedDict((k, v.data) for k, v in self.named_parameters().items())
        for name, rs in self.backbone.running_stats().items():
            if rs.ready:
                out[name + ".running_mean"] = rs.mean
                out[name + ".running_var"] = rs.var
        return out

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = self.named_parameters()
        stats = self.backbone.running_stats()
        expected = set(params)
        missing = expected - set(state)
        if strict and missing:
            raise ConfigurationError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise DimensionError(f"{k}: stored shape {arr.shape} != model shape {p.shape}")
                p.data = arr.astype(p.dtype).copy()
        for name, rs in stats.items():
            if name + ".running_mean" in state:
                rs.mean = np.asarray(state[name + ".running_mean"]).astype(np.float32).copy()
                rs.var = np.asarray(state[name + ".running_var"]).astype(np.float32).copy()

    def astype(self, dtype) -> "MultiTaskModel":
        """Cast parameters and running statistics in place (64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        for rs in self.backbone.running_stats().values():
            if rs.ready:
                rs.mean = rs.mean.astype(dtype)
                rs.var = rs.var.astype(dtype)
        return self

    # -- forward -------------------------------------------------------------------
    def forward_shared(self, clips, mode: str = "train") -> Tensor:
        x = clips if isinstance(clips, Tensor) else Tensor(clips)
        return self.backbone(x, mode)

    def forward(self, clips, mode: str = "train", tasks: Optional[Iterable[str]] = None):
        """Return ``(features, {task: logits Tensor | raw HeatmapStack})``."""
        feats = self.forward_shared(clips, mode)
        names = self.task_set.names if tasks is None else list(tasks)
        return feats, OrderedDict((n, self.heads[n](feats)) for n in names)

    def predict(self, clips, tasks: Optional[Iterable[str]] = None):
        with no_grad():
            return self.forward(clips, "eval", tasks)


def build_model(arch: ArchConfig, task_set: TaskSet, rng_seed: int) -> MultiTaskModel:
    return MultiTaskModel(arch, task_set, rng_seed)


def class_activation_map(features, head: TaskHead, class_id: int) -> np.ndarray:
    """Class activation maps ``[B, l, m, n]``, min-max scaled per sample to [0, 1]."""
    if head.kind != "classification":
        raise ConfigurationError(f"head {head.name!r} is not a classification head")
    K = head.weight.shape[1]
    if not 0 <= class_id < K:
        raise IndexError(f"class id {class_id} out of range for {K} classes")
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    cam = np.einsum("bkthw,k->bthw", f.astype(np.float64), head.weight.data[:, class_id].astype(np.float64))
    lo = cam.min(axis=(1, 2, 3), keepdims=True)
    span = cam.max(axis=(1, 2, 3), keepdims=True) - lo
    return np.where(span > 0, (cam - lo) / np.where(span > 0, span, 1), 0.0)
