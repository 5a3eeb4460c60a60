"""Central finite differences as the independent gradient oracle."""

from __future__ import annotations

import numpy as np

from markup_pretrain.tensor import Tensor


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-6, coords=None) -> np.ndarray:
    """Central differences at every coordinate, or only at ``coords`` (flat indices)."""
    g = np.zeros_like(arr)
    if coords is None:
        coords = range(arr.size)
    for flat in coords:
        i = np.unravel_index(flat, arr.shape)
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    # the floor keeps exactly-zero gradients (e.g. attention key bias, which
    # softmax shift-invariance cancels) from dividing pure difference noise by ~0
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check(build, inputs: list[Tensor], seed: int = 0, eps: float = 1e-6, max_coords: int | None = None) -> float:
    """Max relative error over ``inputs`` between backward() and finite differences.

    ``build()`` returns a Tensor; it is reduced with a fixed random projection so
    every output element contributes.
    """
    out = build()
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def scalar():
        return float((build().data * proj).sum())

    for t in inputs:
        t.grad = None
    out = build()
    out.backward(proj)
    pick = np.random.default_rng(seed + 1)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            # half from nonzero-gradient coordinates so sparse tables are exercised,
            # half uniform so a wrongly-zero analytic gradient is still caught
            nz = np.flatnonzero(analytic)
            half = min(len(nz), max_coords // 2)
            a = pick.choice(nz, size=half, replace=False) if half else np.zeros(0, dtype=np.int64)
            b = pick.choice(t.data.size, size=max_coords - half, replace=False)
            coords = np.unique(np.concatenate([a, b]))
        numeric = numeric_grad(scalar, t.data, eps, coords)
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)
