"""Feedback policies ``policy(t, env, x) -> actions`` of shape (N, p)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


def grid_index(grid: np.ndarray, t: float) -> int:
    """Index k of the grid cell [t_k, t_{k+1}) containing t (last point maps to K)."""
    k = int(np.searchsorted(grid, t + 1e-12 * max(1.0, abs(t)), side="right")) - 1
    return min(max(k, 0), grid.size - 1)


class Policy:
    def __call__(self, t: float, env, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


@dataclass
class ConstantPolicy(Policy):
    value: float | np.ndarray

    def __call__(self, t, env, x):
        v = np.atleast_1d(np.asarray(self.value, dtype=float))
        return np.broadcast_to(v, (x.shape[0], v.size)).copy()

    def describe(self):
        return {"kind": "constant", "value": np.atleast_1d(self.value).tolist()}


@dataclass
class FunctionPolicy(Policy):
    fn: object

    def __call__(self, t, env, x):
        return np.asarray(self.fn(t, env, x), dtype=float)


@dataclass
class AffinePolicy(Policy):
    """a = c1(t) (x - mean(env)) + c2(t) on a time grid (scalar state and action)."""

    grid: np.ndarray
    c1: np.ndarray
    c2: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.c1 = np.asarray(self.c1, dtype=float)
        self.c2 = np.asarray(self.c2, dtype=float)
        if not (self.grid.shape == self.c1.shape == self.c2.shape):
            raise InvalidInput("affine policy coefficients must live on the grid")

    def __call__(self, t, env, x):
        k = grid_index(self.grid, t)
        return (self.c1[k] * (x[:, :1] - env.m) + self.c2[k]).reshape(-1, 1)

    def describe(self):
        return {"kind": "affine", "grid": self.grid.tolist(), "c1": self.c1.tolist(), "c2": self.c2.tolist()}


@dataclass
class SpikedPolicy(Policy):
    """``alt`` on [start, end), ``base`` elsewhere."""

    base: Policy
    start: float
    end: float
    alt: float | np.ndarray

    def __call__(self, t, env, x):
        a = np.asarray(self.base(t, env, x), dtype=float)
        if self.start <= t < self.end:
            return np.broadcast_to(np.atleast_1d(np.asarray(self.alt, dtype=float)), a.shape).copy()
        return a

    def describe(self):
        return {"kind": "spiked", "start": self.start, "end": self.end,
                "alt": np.atleast_1d(self.alt).tolist(), "base": self.base.describe()}
