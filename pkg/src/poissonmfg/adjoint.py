"""Regression solvers for the first- and second-order adjoint BSDEs.

Both solvers run backward along a forward ensemble whose particles share the
common noise. Conditional expectations given F_{t_k} are least-squares
projections on polynomials of the centred state X_k - m_k, where m_k is the
mean of the environment at t_k. Since every particle sees the same common
path, the projection is taken cross-sectionally, pathwise in the common noise.

Scheme, for k = K-1, ..., 0 (explicit in the driver):

    C_k   = E_k[Y_{k+1}]
    Z_k   = E_k[(Y_{k+1} - C_k) dW_k] / dt
    U_k   = y_{k+1}(X_k + gamma - common shift) - y_{k+1}(X_k)
    Y_k   = C_k + DH(X_k, C_k, Z_k, U_k, a_k) dt

Here y_{k+1} is the fitted value function at step k+1 and "common shift" is
the cross-particle average jump, which moves the centring mean together with
the state. U therefore measures how a jump changes the adjoint relative to the
population, which is what the jump term of the Hamiltonian integrates.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBasis, UnsupportedModel
from .hamiltonian import AdjointPoint, hamiltonian_grad_x, hamiltonian_hess_x
from .jump_sde import Environment, ModelSpec, ParticleEnsemble
from .rng import stream

SPREAD_EPS = 1e-12


def monomial_exponents(d: int, degree: int) -> list[tuple[int, ...]]:
    exps = [e for e in itertools.product(range(degree + 1), repeat=d) if sum(e) <= degree]
    return sorted(exps, key=lambda e: (sum(e), tuple(-v for v in e)))


@dataclass(eq=False)
class RegressionFit:
    """Per-step polynomial fits of the adjoint processes.

    ``coef[name]`` has shape (K+1, n_basis, width); evaluating at step k for
    states x and centring mean ``center`` gives (N, width).
    """

    grid: np.ndarray
    degree: int
    exponents: list
    centers: np.ndarray  # (K+1, d)
    scales: np.ndarray  # (K+1, d)
    active: np.ndarray  # (K+1, n_basis) bool
    coef: dict

    def design(self, k: int, x: np.ndarray, center=None) -> np.ndarray:
        c = self.centers[k] if center is None else np.asarray(center, dtype=float)
        u = (x - c) / self.scales[k]
        cols = [np.prod(u ** np.array(e), axis=1) for e in self.exponents]
        return np.stack(cols, axis=1)

    def evaluate(self, name: str, k: int, x: np.ndarray, center=None) -> np.ndarray:
        return self.design(k, x, center) @ self.coef[name][k]

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "degree": self.degree,
            "exponents": [list(e) for e in self.exponents],
            "centers": self.centers.tolist(),
            "scales": self.scales.tolist(),
            "active": self.active.tolist(),
            "coefficients": {name: c.tolist() for name, c in self.coef.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RegressionFit":
        return cls(np.asarray(data["grid"], dtype=float), int(data["degree"]),
                   [tuple(e) for e in data["exponents"]], np.asarray(data["centers"], dtype=float),
                   np.asarray(data["scales"], dtype=float), np.asarray(data["active"], dtype=bool),
                   {name: np.asarray(c, dtype=float) for name, c in data["coefficients"].items()})


class _Regressor:
    """Per-step design matrices with degenerate-direction handling."""

    def __init__(self, ensemble: ParticleEnsemble, degree: int):
        self.states = ensemble.states
        K1, N, d = self.states.shape
        self.exponents = monomial_exponents(d, degree)
        self.centers = np.array([env.mean for env in ensemble.envs])
        self.scales = np.ones((K1, d))
        self.active = np.ones((K1, len(self.exponents)), dtype=bool)
        for k in range(K1):
            spread = (self.states[k] - self.centers[k]).std(axis=0)
            flat = spread <= SPREAD_EPS * (1.0 + np.abs(self.centers[k]))
            self.scales[k] = np.where(flat, 1.0, spread)
            for b, e in enumerate(self.exponents):
                if any(e[i] and flat[i] for i in range(d)):
                    self.active[k, b] = False
        self.fit = RegressionFit(ensemble.grid, degree, self.exponents, self.centers, self.scales, self.active, {})
        self._cached_k, self._cached = None, None

    def design(self, k: int) -> np.ndarray:
        # one-entry cache: the backward loop asks for the same step repeatedly
        if self._cached_k != k:
            self._cached_k, self._cached = k, self.fit.design(k, self.states[k])
        return self._cached

    def fit_with(self, coef: dict) -> RegressionFit:
        self.fit.coef = coef
        return self.fit

    def coefficients(self, k: int, target: np.ndarray) -> np.ndarray:
        """Least-squares coefficients (n_basis, width) of ``target`` (N, width)."""
        B = self.design(k)[:, self.active[k]]
        coef, _, rank, _ = np.linalg.lstsq(B, target, rcond=None)
        if rank < B.shape[1]:
            raise DegenerateBasis(f"regression basis is singular at step {k} (rank {rank} < {B.shape[1]})", step=k)
        full = np.zeros((len(self.exponents), target.shape[1]))
        full[self.active[k]] = coef
        return full

    def project(self, k: int, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coef = self.coefficients(k, target)
        return self.design(k) @ coef, coef


@dataclass(eq=False)
class AdjointTrajectory:
    """Grid-aligned adjoint samples per particle.

    First order: Y (K+1, N, d), Z (K+1, N, d, k), U (K+1, N, d, l).
    Second order (matrix valued): Yt (K+1, N, d, d), Zt (K+1, N, d, d, k),
    Ut (K+1, N, d, d, l). The orthogonal martingale parts are identically zero.
    """

    grid: np.ndarray
    Y: np.ndarray | None = None
    Z: np.ndarray | None = None
    U: np.ndarray | None = None
    Yt: np.ndarray | None = None
    Zt: np.ndarray | None = None
    Ut: np.ndarray | None = None
    fit: RegressionFit | None = None
    second_fit: RegressionFit | None = None
    M_zero: bool = True

    def point(self, k: int, idx=slice(None)) -> AdjointPoint:
        yt = None if self.Yt is None else self.Yt[k][idx]
        return AdjointPoint(self.Y[k][idx], self.Z[k][idx], self.U[k][idx], yt)

    def with_second_order(self, second: "AdjointTrajectory") -> "AdjointTrajectory":
        return AdjointTrajectory(self.grid, self.Y, self.Z, self.U, second.Yt, second.Zt, second.Ut,
                                 self.fit, second.second_fit)


def _channel_shifts(model: ModelSpec, env: Environment, x, a):
    """Per channel: list of (node mass, jump at node (N, d))."""
    out = []
    for j, kern in enumerate(env.kernel):
        nodes = model.mark_nodes(j)
        out.append([(w, model.jump(r, env, x, a)[:, :, j]) for r, w in zip(nodes, kern)])
    return out


def _counterfactual_jump(fit: RegressionFit, name: str, k_next: int, x, center, shifts, width: int) -> np.ndarray:
    """Kernel-averaged fitted jump effect per channel, shape (N, width, l)."""
    n = x.shape[0]
    base = fit.evaluate(name, k_next, x, center)
    out = np.zeros((n, width, len(shifts)))
    for j, nodes in enumerate(shifts):
        total = sum(w for w, _ in nodes)
        weights = [w / total for w, _ in nodes] if total > 0 else [1.0 / len(nodes)] * len(nodes)
        for wn, g in zip(weights, nodes):
            gamma = g[1]
            moved = fit.evaluate(name, k_next, x + gamma, center + gamma.mean(axis=0))
            out[:, :, j] += wn * (moved - base)
    return out


def solve_first_order_adjoint(model: ModelSpec, ensemble: ParticleEnsemble, degree: int | None = None,
                              driver=None) -> AdjointTrajectory:
    """Backward regression scheme for (Y, Z, U), with Y_K = Dg(X_K).

    The actions recorded in the ensemble are the ones the driver sees.
    ``driver(k, env, x, point, a)`` overrides D_x H (used for testing).
    """
    degree = model.regression_degree if degree is None else degree
    reg = _Regressor(ensemble, degree)
    X, A, dW, envs, grid = ensemble.states, ensemble.actions, ensemble.dW, ensemble.envs, ensemble.grid
    K1, N, d = X.shape
    k_dim, l = model.noise_dim, model.n_channels
    Y = np.zeros((K1, N, d))
    Z = np.zeros((K1, N, d, k_dim))
    U = np.zeros((K1, N, d, l))
    nb = len(reg.exponents)
    coef = {"Y": np.zeros((K1, nb, d)), "Z": np.zeros((K1, nb, d * k_dim)), "U": np.zeros((K1, nb, d * l))}
    K = K1 - 1
    Y[K] = model.terminal_cost_dx(envs[K], X[K])
    coef["Y"][K] = reg.coefficients(K, Y[K])
    for k in range(K - 1, -1, -1):
        dt = grid[k + 1] - grid[k]
        cont, _ = reg.project(k, Y[k + 1])
        resid = Y[k + 1] - cont
        zc = reg.coefficients(k, (resid[:, :, None] * dW[k][:, None, :]).reshape(N, -1) / dt)
        Z[k] = (reg.design(k) @ zc).reshape(N, d, k_dim)
        shifts = _channel_shifts(model, envs[k], X[k], A[k])
        U[k] = _counterfactual_jump(reg.fit_with(coef), "Y", k + 1, X[k], reg.centers[k], shifts, d) if l else U[k]
        point = AdjointPoint(cont, Z[k], U[k])
        dh = (driver(k, envs[k], X[k], point, A[k]) if driver is not None
              else hamiltonian_grad_x(model, envs[k], X[k], point, A[k]))
        Y[k] = cont + dh * dt
        _finite(Y[k], k)
        coef["Y"][k] = reg.coefficients(k, Y[k])
        coef["Z"][k] = zc
        coef["U"][k] = reg.coefficients(k, U[k].reshape(N, -1))
    Z[K], U[K] = Z[K - 1], U[K - 1]
    coef["Z"][K], coef["U"][K] = coef["Z"][K - 1], coef["U"][K - 1]
    return AdjointTrajectory(grid, Y, Z, U, fit=reg.fit_with(coef))


def solve_second_order_adjoint(model: ModelSpec, ensemble: ParticleEnsemble, first_order: AdjointTrajectory,
                               degree: int | None = None) -> AdjointTrajectory:
    """Matrix BSDE with Yt_K = D^2 g and driver

    B + sum_i S_i + sum_j int G_j K(dr), where
    B   = D^2 H + Db^T Yt + Yt Db,
    S_i = Dsigma_i^T Yt Dsigma_i + Dsigma_i^T Zt_i + Zt_i Dsigma_i,
    G_j = Dgamma_j^T Yt Dgamma_j + Dgamma_j^T Ut_j + Ut_j Dgamma_j.
    """
    degree = model.regression_degree if degree is None else degree
    reg = _Regressor(ensemble, degree)
    X, A, dW, envs, grid = ensemble.states, ensemble.actions, ensemble.dW, ensemble.envs, ensemble.grid
    K1, N, d = X.shape
    k_dim, l = model.noise_dim, model.n_channels
    Yt = np.zeros((K1, N, d, d))
    Zt = np.zeros((K1, N, d, d, k_dim))
    Ut = np.zeros((K1, N, d, d, l))
    nb = len(reg.exponents)
    coef = {"Yt": np.zeros((K1, nb, d * d)), "Zt": np.zeros((K1, nb, d * d * k_dim)),
            "Ut": np.zeros((K1, nb, d * d * l))}
    K = K1 - 1
    Yt[K] = model.terminal_cost_dxx(envs[K], X[K])
    coef["Yt"][K] = reg.coefficients(K, Yt[K].reshape(N, -1))
    for k in range(K - 1, -1, -1):
        dt = grid[k + 1] - grid[k]
        env, x, a = envs[k], X[k], A[k]
        flat_next = Yt[k + 1].reshape(N, -1)
        cont_flat, _ = reg.project(k, flat_next)
        cont = cont_flat.reshape(N, d, d)
        resid = flat_next - cont_flat
        zc = reg.coefficients(k, (resid[:, :, None] * dW[k][:, None, :]).reshape(N, -1) / dt)
        Zt[k] = (reg.design(k) @ zc).reshape(N, d, d, k_dim)
        shifts = _channel_shifts(model, env, x, a)
        if l:
            Ut[k] = _counterfactual_jump(reg.fit_with(coef), "Yt", k + 1, x, reg.centers[k], shifts,
                                         d * d).reshape(N, d, d, l)
        drv = hamiltonian_hess_x(model, env, x, first_order.point(k), a)
        db = model.drift_dx(env, x, a)
        drv = drv + np.swapaxes(db, 1, 2) @ cont + cont @ db
        ds = model.diffusion_dx(env, x, a)  # (N, d, k, d)
        for i in range(k_dim):
            s = ds[:, :, i, :]
            zi = Zt[k][:, :, :, i]
            drv = drv + np.swapaxes(s, 1, 2) @ cont @ s + np.swapaxes(s, 1, 2) @ zi + zi @ s
        for j, kern in enumerate(env.kernel):
            uj = Ut[k][:, :, :, j]
            for r, w in zip(model.mark_nodes(j), kern):
                if w:
                    g = model.jump_dx(r, env, x, a)[:, :, j, :]
                    gt = np.swapaxes(g, 1, 2)
                    drv = drv + w * (gt @ cont @ g + gt @ uj + uj @ g)
        Yt[k] = cont + drv * dt
        _finite(Yt[k], k)
        coef["Yt"][k] = reg.coefficients(k, Yt[k].reshape(N, -1))
        coef["Zt"][k] = zc
        coef["Ut"][k] = reg.coefficients(k, Ut[k].reshape(N, -1))
    Zt[K], Ut[K] = Zt[K - 1], Ut[K - 1]
    coef["Zt"][K], coef["Ut"][K] = coef["Zt"][K - 1], coef["Ut"][K - 1]
    return AdjointTrajectory(grid, Yt=Yt, Zt=Zt, Ut=Ut, second_fit=reg.fit_with(coef))


def _finite(arr, k):
    if not np.all(np.isfinite(arr)):
        from .errors import NumericalBlowup

        bad = np.flatnonzero(~np.all(np.isfinite(arr.reshape(arr.shape[0], -1)), axis=1))
        raise NumericalBlowup(f"non-finite adjoint at step {k}", step=k, particle=int(bad[0]))


# ---------------------------------------------------------------------------
# G-monotonicity


@dataclass(frozen=True)
class MonotonicityReport:
    beta1: float
    beta2: float
    beta3: float
    holds: bool
    worst_violation: float
    sample_count: int
    worst_forward: float = 0.0
    worst_terminal: float = 0.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("beta1", "beta2", "beta3", "holds", "worst_violation",
                                               "sample_count", "worst_forward", "worst_terminal")}


def check_g_monotonicity(model: ModelSpec, sample_count: int, seed: int, box: float = 10.0,
                         intensity_max: float = 10.0, tolerance: float = 1e-9) -> MonotonicityReport:
    """Sampled check of the two monotonicity inequalities with the model's betas.

    Forward:  dA . d(x,y,z,u) + b1|dx|^2 + b2(|dy|^2 + |dz|^2 + lambda|du|^2) <= 0
    Terminal: b3|dx|^2 - dDg . dx <= 0
    Both points share the environment (mean, regime) and the intensity level.
    """
    for name in ("coupled_field", "terminal_gradient", "monotonicity_constants"):
        if not hasattr(model, name):
            raise UnsupportedModel(f"model does not expose {name}")
    b1, b2, b3 = model.monotonicity_constants()
    gen = stream(seed, "monotonicity")
    S = int(sample_count)
    th1 = gen.uniform(-box, box, size=(4, S))
    th2 = gen.uniform(-box, box, size=(4, S))
    m = gen.uniform(-box, box, size=S)
    regimes = list(getattr(model, "monotonicity_regimes", lambda: [None])())
    regime = np.array(regimes, dtype=object)[gen.integers(0, len(regimes), size=S)]
    lam = gen.uniform(0.0, intensity_max, size=S)
    forward = np.empty(S)
    terminal = np.empty(S)
    for reg in regimes:
        sel = np.array([r == reg for r in regime], dtype=bool) if reg is not None else np.ones(S, dtype=bool)
        if not sel.any():
            continue
        A1 = np.array(model.coupled_field(*th1[:, sel], m[sel], reg))
        A2 = np.array(model.coupled_field(*th2[:, sel], m[sel], reg))
        dth = th1[:, sel] - th2[:, sel]
        inner = np.sum((A1 - A2) * dth, axis=0)
        dx, dy, dz, du = dth
        forward[sel] = inner + b1 * dx ** 2 + b2 * (dy ** 2 + dz ** 2 + lam[sel] * du ** 2)
        dg = model.terminal_gradient(th1[0, sel], m[sel], reg) - model.terminal_gradient(th2[0, sel], m[sel], reg)
        terminal[sel] = b3 * dx ** 2 - dg * dx
    wf, wt = float(forward.max()), float(terminal.max())
    worst = max(wf, wt)
    holds = bool(b1 + b2 > 0 and b2 + b3 > 0 and worst <= tolerance)
    return MonotonicityReport(float(b1), float(b2), float(b3), holds, worst, S, wf, wt)
