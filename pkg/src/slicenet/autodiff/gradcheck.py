"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], tensor: Tensor, index, h: float = 1e-5) -> float:
    """d f / d tensor[index] by central differences; ``f`` rebuilds the graph each call."""
    old = tensor.data[index].copy()
    tensor.data[index] = old + h
    up = float(f().data)
    tensor.data[index] = old - h
    down = float(f().data)
    tensor.data[index] = old
    return (up - down) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    scale = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    if diff <= floor:
        return 0.0
    return diff / scale


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], n_samples: int | None = None,
                    rng: np.random.Generator | None = None, h: float = 1e-5) -> float:
    """Return the worst relative error between backprop and finite differences.

    With ``n_samples`` set, entries are drawn at random across all tensors
    (weighted by size); otherwise every entry is checked.
    """
    for t in tensors:
        t.grad = None
    f().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    if n_samples is None:
        picks = [(k, idx) for k, t in enumerate(tensors) for idx in np.ndindex(t.shape)]
    else:
        rng = rng or np.random.default_rng(0)
        sizes = np.array([t.size for t in tensors], dtype=float)
        owners = rng.choice(len(tensors), size=n_samples, p=sizes / sizes.sum())
        picks = [(k, np.unravel_index(rng.integers(tensors[k].size), tensors[k].shape))
                 for k in owners]

    worst = 0.0
    for k, idx in picks:
        num = numeric_grad(f, tensors[k], idx, h)
        worst = max(worst, relative_error(float(analytic[k][idx]), num))
    return worst
