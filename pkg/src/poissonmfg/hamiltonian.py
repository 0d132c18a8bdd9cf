"""The Hamiltonian, its x-derivatives, its minimiser and Pontryagin checks.

H(nu, x, y, z, u, a) = f + y.b + (z.sigma)_Fr + sum_j sum_r K^(j)(r) u^(j)(r).gamma^(j)(r)

with K the intensity kernel carried by the environment. All functions are
vectorised over N evaluation points.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .jump_sde import Environment, ModelSpec

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class AdjointPoint:
    """Adjoint values at N points.

    ``u`` is either constant in the mark, shape (N, d, l), or a tuple with one
    (N, d, M_j) table per channel over that channel's mark nodes.
    """

    y: np.ndarray
    z: np.ndarray
    u: np.ndarray | tuple
    ytilde: np.ndarray | None = None

    @classmethod
    def zeros(cls, n: int, d: int, k: int, l: int, with_ytilde: bool = False) -> "AdjointPoint":
        return cls(np.zeros((n, d)), np.zeros((n, d, k)), np.zeros((n, d, l)),
                   np.zeros((n, d, d)) if with_ytilde else None)

    def u_at(self, j: int, m: int) -> np.ndarray:
        if isinstance(self.u, tuple):
            return self.u[j][:, :, m]
        return self.u[:, :, j]

    def take(self, idx) -> "AdjointPoint":
        u = tuple(t[idx] for t in self.u) if isinstance(self.u, tuple) else self.u[idx]
        return AdjointPoint(self.y[idx], self.z[idx], u, None if self.ytilde is None else self.ytilde[idx])


def _jump_terms(model: ModelSpec, env: Environment):
    """(channel, node index, mark, kernel mass) for every node with positive mass."""
    for j, kern in enumerate(env.kernel):
        nodes = model.mark_nodes(j)
        for m, w in enumerate(kern):
            if w:
                yield j, m, nodes[m], w


def hamiltonian(model: ModelSpec, env: Environment, x, p: AdjointPoint, a) -> np.ndarray:
    h = model.running_cost(env, x, a) + np.sum(p.y * model.drift(env, x, a), axis=1)
    h = h + np.sum(p.z * model.diffusion(env, x, a), axis=(1, 2))
    for j, m, r, w in _jump_terms(model, env):
        h = h + w * np.sum(p.u_at(j, m) * model.jump(r, env, x, a)[:, :, j], axis=1)
    return h


def hamiltonian_grad_x(model: ModelSpec, env: Environment, x, p: AdjointPoint, a) -> np.ndarray:
    g = model.running_cost_dx(env, x, a) + np.einsum("ni,nim->nm", p.y, model.drift_dx(env, x, a))
    g = g + np.einsum("nik,nikm->nm", p.z, model.diffusion_dx(env, x, a))
    for j, m, r, w in _jump_terms(model, env):
        g = g + w * np.einsum("ni,nim->nm", p.u_at(j, m), model.jump_dx(r, env, x, a)[:, :, j, :])
    return g


def hamiltonian_hess_x(model: ModelSpec, env: Environment, x, p: AdjointPoint, a) -> np.ndarray:
    h = model.running_cost_dxx(env, x, a) + np.einsum("ni,nimq->nmq", p.y, model.drift_dxx(env, x, a))
    h = h + np.einsum("nik,nikmq->nmq", p.z, model.diffusion_dxx(env, x, a))
    for j, m, r, w in _jump_terms(model, env):
        h = h + w * np.einsum("ni,nimq->nmq", p.u_at(j, m), model.jump_dxx(r, env, x, a)[:, :, j, :, :])
    return 0.5 * (h + np.swapaxes(h, 1, 2))


def action_grid(model: ModelSpec, n_points: int) -> np.ndarray:
    """Tensor grid on the action box with about ``n_points`` points, shape (G, p)."""
    per_dim = max(2, int(np.ceil(n_points ** (1.0 / model.action_dim))))
    axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(model.action_low, model.action_high)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _grid_values(model, env, x, p, grid) -> np.ndarray:
    n = x.shape[0]
    return np.stack([hamiltonian(model, env, x, p, np.broadcast_to(g, (n, g.size))) for g in grid], axis=1)


def _golden_1d(model, env, x, p, lo, hi, fixed=None, coord=0):
    """Vectorised golden-section search on coordinate ``coord`` within [lo, hi]."""
    tol = 1e-6 * float(model.action_high[coord] - model.action_low[coord])
    base = np.zeros((x.shape[0], model.action_dim)) if fixed is None else fixed.copy()

    def h_at(v):
        a = base.copy()
        a[:, coord] = v
        return hamiltonian(model, env, x, p, a)

    a, b = lo.copy(), hi.copy()
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    hc, hd = h_at(c), h_at(d)
    while np.max(b - a) > tol:
        left = hc <= hd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - GOLDEN * (b - a)
        new_d = a + GOLDEN * (b - a)
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        h_new = h_at(np.where(left, new_c, new_d))
        hc, hd = np.where(left, h_new, hd), np.where(left, hc, h_new)
        c, d = c_next, d_next
    out = base
    out[:, coord] = 0.5 * (a + b)
    return out


def numeric_minimize(model: ModelSpec, env: Environment, x, p: AdjointPoint, n_grid: int = 41) -> np.ndarray:
    """Grid search refined by golden-section (per coordinate when p > 1)."""
    grid = action_grid(model, n_grid if model.action_dim == 1 else 9 ** model.action_dim)
    vals = _grid_values(model, env, x, p, grid)
    best = grid[np.argmin(vals, axis=1)]
    best_val = vals.min(axis=1)
    sweeps = 1 if model.action_dim == 1 else 3
    a = best.copy()
    for _ in range(sweeps):
        for c in range(model.action_dim):
            lo_c, hi_c = model.action_low[c], model.action_high[c]
            step = (hi_c - lo_c) / (max(2, int(np.ceil(len(grid) ** (1.0 / model.action_dim)))) - 1)
            lo = np.clip(a[:, c] - step, lo_c, hi_c)
            hi = np.clip(a[:, c] + step, lo_c, hi_c)
            a = _golden_1d(model, env, x, p, lo, hi, fixed=a, coord=c)
    refined = hamiltonian(model, env, x, p, a)
    keep = refined <= best_val
    return model.project(np.where(keep[:, None], a, best))


def minimize_hamiltonian(model: ModelSpec, env: Environment, x, p: AdjointPoint, verify: bool = False) -> np.ndarray:
    """argmin over the action box; closed form when the model provides one."""
    closed = model.argmin_hamiltonian(env, x, p)
    if closed is None:
        return numeric_minimize(model, env, x, p)
    closed = model.project(np.asarray(closed, dtype=float).reshape(x.shape[0], model.action_dim))
    if verify:
        excess = minimizer_excess(model, env, x, p, closed)
        if np.max(excess) > 1e-8 * (1.0 + np.max(np.abs(hamiltonian(model, env, x, p, closed)))):
            raise AssertionError(f"closed-form minimiser beaten by grid search by {np.max(excess)!r}")
    return closed


def minimizer_excess(model: ModelSpec, env: Environment, x, p: AdjointPoint, a_hat, n_grid: int = 201) -> np.ndarray:
    """H(a_hat) - min over an action grid; <= 0 when a_hat is a true minimiser."""
    vals = _grid_values(model, env, x, p, action_grid(model, n_grid))
    return hamiltonian(model, env, x, p, a_hat) - vals.min(axis=1)


def pontryagin_gap(model: ModelSpec, env: Environment, x, p: AdjointPoint, a_hat, n_grid: int = 50) -> np.ndarray:
    """min over an action grid of H(a) - H(a_hat); >= 0 when a_hat minimises H."""
    vals = _grid_values(model, env, x, p, action_grid(model, n_grid))
    return vals.min(axis=1) - hamiltonian(model, env, x, p, a_hat)


def extended_pontryagin_lhs(model: ModelSpec, env: Environment, x, p: AdjointPoint, a, a_hat=None) -> np.ndarray:
    """delta H + sum_i dsigma_i.(Yt/2) dsigma_i + sum_j (dgamma_j.(Yt/2) dgamma_j)_lambda.

    ``a_hat`` defaults to the Hamiltonian minimiser at the point.
    """
    if p.ytilde is None:
        raise InvalidInput("the extended condition needs the second-order adjoint")
    a = np.broadcast_to(np.asarray(a, dtype=float), (x.shape[0], model.action_dim))
    if a_hat is None:
        a_hat = minimize_hamiltonian(model, env, x, p)
    half = 0.5 * p.ytilde
    lhs = hamiltonian(model, env, x, p, a) - hamiltonian(model, env, x, p, a_hat)
    ds = model.diffusion(env, x, a) - model.diffusion(env, x, a_hat)
    lhs = lhs + np.einsum("nik,nij,njk->n", ds, half, ds)
    for j, m, r, w in _jump_terms(model, env):
        dg = model.jump(r, env, x, a)[:, :, j] - model.jump(r, env, x, a_hat)[:, :, j]
        lhs = lhs + w * np.einsum("ni,nij,nj->n", dg, half, dg)
    return lhs
