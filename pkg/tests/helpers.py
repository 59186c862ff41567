"""Shared test utilities: finite-difference gradient checking and fixtures."""

from __future__ import annotations

import numpy as np

from csna.tensor import Tensor, backward, clear_grads


def numeric_grad(loss_fn, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. one parameter.

    `loss_fn` must rebuild the whole forward pass from the current
    parameter data (and re-create any rng it uses so draws repeat).
    """
    base = param.data.copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        ij = it.multi_index
        param.data = base.copy()
        param.data[ij] = base[ij] + h
        up = loss_fn().item()
        param.data = base.copy()
        param.data[ij] = base[ij] - h
        down = loss_fn().item()
        grad[ij] = (up - down) / (2.0 * h)
        it.iternext()
    param.data = base
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float((np.abs(analytic - numeric) / scale).max())


def gradcheck(loss_fn, params: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    loss = loss_fn()
    clear_grads(params)
    backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        worst = max(worst, max_rel_error(p.grad, numeric_grad(loss_fn, p, h)))
    clear_grads(params)
    return worst


def random_graph_arrays(rng: np.random.Generator, n: int, extra_edges: int):
    """Random connected-ish undirected edge arrays (both directions), no loops."""
    pairs = set()
    for i in range(1, n):
        j = int(rng.integers(0, i))
        pairs.add((j, i))
    while len(pairs) < n - 1 + extra_edges:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        pairs.add((min(i, j), max(i, j)))
    us = np.array([p[0] for p in sorted(pairs)], dtype=np.int64)
    vs = np.array([p[1] for p in sorted(pairs)], dtype=np.int64)
    return np.concatenate([us, vs]), np.concatenate([vs, us])
