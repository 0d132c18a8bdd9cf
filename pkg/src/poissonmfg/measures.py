"""Empirical measures, measure flows and the statistics read off them."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import InvalidInput, InvalidParameter, UnsupportedDimension

SLICE_DIRECTIONS = 64
_SLICE_SEED = 20240517


def _as_atoms(atoms) -> np.ndarray:
    arr = np.asarray(atoms, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise InvalidInput(f"atoms must be a list of points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted particle cloud in R^d.

    ``atoms`` has shape (n, d); ``weights`` has shape (n,) and sums to one.
    Passing ``weights=None`` gives equal weights. Arrays are stored read-only.
    """

    atoms: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        atoms = _as_atoms(self.atoms)
        n = atoms.shape[0]
        if n < 1:
            raise InvalidInput("a measure needs at least one atom")
        if not np.all(np.isfinite(atoms)):
            raise InvalidInput("atoms must be finite")
        if self.weights is None:
            weights = np.full(n, 1.0 / n)
            uniform = True
        else:
            weights = np.asarray(self.weights, dtype=float).reshape(-1)
            if weights.shape[0] != n:
                raise InvalidInput(f"{n} atoms but {weights.shape[0]} weights")
            if np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise InvalidInput("weights must be finite and nonnegative")
            if abs(weights.sum() - 1.0) > 1e-12:
                raise InvalidInput(f"weights sum to {weights.sum()!r}, not 1")
            uniform = bool(np.all(weights == weights[0]))
        atoms = atoms.copy()
        weights = weights.copy()
        atoms.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "uniform", uniform)

    @classmethod
    def point_mass(cls, x) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @cached_property
    def mean(self) -> np.ndarray:
        if self.uniform:
            return self.atoms.mean(axis=0)
        return self.weights @ self.atoms

    def to_csv(self, path) -> None:
        header = [f"x{i}" for i in range(self.dim)] + ["weight"]
        data = np.column_stack([self.atoms, self.weights])
        write_csv(path, header, data)

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        _, data = read_csv(path)
        return cls(data[:, :-1], data[:, -1])

    def __eq__(self, other):
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return np.array_equal(self.atoms, other.atoms) and np.array_equal(self.weights, other.weights)

    __hash__ = None


def truncate(x, r: float):
    """R_r(x): identity inside [-r, r], radial projection onto it outside."""
    if not r > 0:
        raise InvalidParameter(f"truncation radius must be positive, got {r}")
    arr = np.asarray(x, dtype=float)
    out = np.clip(arr, -r, r)
    return float(out) if out.ndim == 0 else out


def mean_of(nu: EmpiricalMeasure) -> np.ndarray:
    return nu.mean


def scalar_mean(nu: EmpiricalMeasure) -> float:
    if nu.dim != 1:
        raise UnsupportedDimension(f"scalar mean needs d = 1, got d = {nu.dim}")
    return float(nu.mean[0])


def truncated_second_moment(nu: EmpiricalMeasure, r: float) -> float:
    """v_r(nu) = int R_r(x)^2 nu(dx), scalar environments only."""
    if nu.dim != 1:
        raise UnsupportedDimension(f"truncated second moment needs d = 1, got d = {nu.dim}")
    sq = truncate(nu.atoms[:, 0], r) ** 2
    if nu.uniform:
        return float(sq.mean())
    return float(nu.weights @ sq)


def moment(nu: EmpiricalMeasure, order: int) -> float:
    """int |x|^order nu(dx) with the Euclidean norm."""
    norms = np.linalg.norm(nu.atoms, axis=1) ** order
    return float(nu.weights @ norms)


def eighth_moment(nu: EmpiricalMeasure) -> float:
    return moment(nu, 8)


def _w2_sq_1d(x1, w1, u1, x2, w2, u2) -> float:
    if u1 and u2 and x1.size == x2.size:
        return float(np.mean((np.sort(x1) - np.sort(x2)) ** 2))
    i1 = np.argsort(x1, kind="stable")
    i2 = np.argsort(x2, kind="stable")
    a, b = x1[i1], x2[i2]
    ca = np.cumsum(w1[i1])
    cb = np.cumsum(w2[i2])
    ca[-1] = cb[-1] = 1.0
    knots = np.unique(np.concatenate([[0.0], ca, cb]))
    lengths = np.diff(knots)
    mids = 0.5 * (knots[:-1] + knots[1:])
    ia = np.minimum(np.searchsorted(ca, mids, side="left"), a.size - 1)
    ib = np.minimum(np.searchsorted(cb, mids, side="left"), b.size - 1)
    return float(np.sum(lengths * (a[ia] - b[ib]) ** 2))


def _slice_directions(d: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([_SLICE_SEED, d])))
    dirs = gen.standard_normal((SLICE_DIRECTIONS, d))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def wasserstein2(nu1: EmpiricalMeasure, nu2: EmpiricalMeasure) -> float:
    """W2 distance: exact quantile coupling for d = 1, sliced W2 for d > 1."""
    if nu1.dim != nu2.dim:
        raise InvalidInput(f"dimension mismatch: {nu1.dim} vs {nu2.dim}")
    if nu1.dim == 1:
        sq = _w2_sq_1d(nu1.atoms[:, 0], nu1.weights, nu1.uniform,
                       nu2.atoms[:, 0], nu2.weights, nu2.uniform)
        return float(np.sqrt(max(sq, 0.0)))
    total = 0.0
    for theta in _slice_directions(nu1.dim):
        total += _w2_sq_1d(nu1.atoms @ theta, nu1.weights, nu1.uniform,
                           nu2.atoms @ theta, nu2.weights, nu2.uniform)
    return float(np.sqrt(max(total / SLICE_DIRECTIONS, 0.0)))


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Piecewise-constant measure-valued path on a time grid.

    ``at(t)`` returns the value at the largest grid point <= t (so mu_t) and
    ``left(t)`` the value at the largest grid point strictly below t (mu_{t-}).
    """

    grid: np.ndarray
    values: tuple

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float).reshape(-1).copy()
        values = tuple(self.values)
        if grid.size < 1 or len(values) != grid.size:
            raise InvalidInput(f"{grid.size} grid points but {len(values)} measures")
        if grid[0] != 0.0:
            raise InvalidInput("a measure flow grid starts at 0")
        if np.any(np.diff(grid) <= 0):
            raise InvalidInput("grid must be strictly increasing")
        dims = {v.dim for v in values}
        if len(dims) != 1:
            raise InvalidInput("all measures in a flow share one dimension")
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid, nu: EmpiricalMeasure) -> "MeasureFlow":
        grid = np.asarray(grid, dtype=float)
        return cls(grid, (nu,) * grid.size)

    @classmethod
    def from_states(cls, grid, states) -> "MeasureFlow":
        """Equal-weight flow from an array of shape (K+1, N, d)."""
        states = np.asarray(states, dtype=float)
        return cls(grid, tuple(EmpiricalMeasure(s) for s in states))

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def dim(self) -> int:
        return self.values[0].dim

    def index_at(self, t: float) -> int:
        return max(int(np.searchsorted(self.grid, t, side="right")) - 1, 0)

    def index_left(self, t: float) -> int:
        return max(int(np.searchsorted(self.grid, t, side="left")) - 1, 0)

    def at(self, t: float) -> EmpiricalMeasure:
        return self.values[self.index_at(t)]

    def left(self, t: float) -> EmpiricalMeasure:
        return self.values[self.index_left(t)]

    def means(self) -> np.ndarray:
        return np.array([v.mean for v in self.values])

    def to_csv(self, path) -> None:
        d = self.dim
        header = ["time"] + [f"x{i}" for i in range(d)] + ["weight"]
        blocks = [np.column_stack([np.full(v.size, t), v.atoms, v.weights])
                  for t, v in zip(self.grid, self.values)]
        write_csv(path, header, np.vstack(blocks))

    @classmethod
    def from_csv(cls, path) -> "MeasureFlow":
        _, data = read_csv(path)
        times = data[:, 0]
        cuts = np.flatnonzero(np.diff(times)) + 1
        grid, values = [], []
        for block in np.split(data, cuts):
            grid.append(block[0, 0])
            values.append(EmpiricalMeasure(block[:, 1:-1], block[:, -1]))
        return cls(np.array(grid), tuple(values))

    def __eq__(self, other):
        if not isinstance(other, MeasureFlow):
            return NotImplemented
        return np.array_equal(self.grid, other.grid) and all(
            a == b for a, b in zip(self.values, other.values))

    __hash__ = None


def flow_distances(flow1: MeasureFlow, flow2: MeasureFlow) -> np.ndarray:
    """W2 between the two flows at every grid point (grids must agree)."""
    if flow1.grid.shape != flow2.grid.shape or not np.allclose(flow1.grid, flow2.grid, rtol=0, atol=1e-12):
        raise InvalidInput("flows live on different grids")
    return np.array([wasserstein2(a, b) for a, b in zip(flow1.values, flow2.values)])


def sup_w2(flow1: MeasureFlow, flow2: MeasureFlow) -> float:
    return float(flow_distances(flow1, flow2).max())


# CSV helpers. Numbers are written with 17 significant digits so that doubles
# round-trip exactly.

def format_number(x) -> str:
    return format(float(x), ".17g")


def write_csv(path, header: Sequence[str], data) -> None:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        if data.size:
            np.savetxt(fh, data, fmt="%.17g", delimiter=",", newline="\r\n")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return header, data
