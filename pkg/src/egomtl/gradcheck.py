"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from egomtl.tensor import Tensor, backward


def numerical_grad(f: Callable[[], Tensor], t: Tensor, index: tuple, eps: float = 1e-4) -> float:
    orig = t.data[index].copy()
    t.data[index] = orig + eps
    up = float(f().item())
    t.data[index] = orig - eps
    down = float(f().item())
    t.data[index] = orig
    return (up - down) / (2 * eps)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps vanishing gradients from dividing by ~0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], samples: Optional[int] = None,
                    eps: float = 1e-4, rng: Optional[np.random.Generator] = None) -> list[tuple]:
    """Compare ``backward(f())`` against central differences.

    Checks every entry when ``samples`` is None, else ``samples`` entries
    drawn uniformly over all tensors. Returns ``(tensor index, entry,
    analytic, numeric, relative error)`` tuples.
    """
    for t in tensors:
        t.zero_grad()
    backward(f())
    grads = [t.grad.copy() for t in tensors]
    entries: list[tuple[int, tuple]] = []
    if samples is None:
        for k, t in enumerate(tensors):
            entries += [(k, idx) for idx in np.ndindex(*t.shape)]
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = np.array([t.size for t in tensors], dtype=float)
        for k in rng.choice(len(tensors), size=samples, p=sizes / sizes.sum()):
            flat = int(rng.integers(tensors[k].size))
            entries.append((int(k), np.unravel_index(flat, tensors[k].shape)))
    out = []
    for k, idx in entries:
        num = numerical_grad(f, tensors[k], idx, eps)
        ana = float(grads[k][idx])
        out.append((k, idx, ana, num, relative_error(ana, num)))
    return out
