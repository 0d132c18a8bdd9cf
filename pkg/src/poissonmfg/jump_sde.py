"""Controlled jump-diffusions in a random environment.

Shapes used throughout (N particles, state dim d, Brownian dim k, jump
channels l, action dim p):

* states ``x``: (N, d); actions ``a``: (N, p)
* drift: (N, d); diffusion: (N, d, k); jump at a mark: (N, d, l)
* running cost: (N,); terminal cost: (N,)

Derivatives are taken in x and appended as trailing axes, e.g. ``drift_dx``
is (N, d, d) with ``[n, i, m] = d b_i / d x_m``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable

import numpy as np

from .errors import InvalidInput, InvalidParameter, NumericalBlowup
from .measures import EmpiricalMeasure, MeasureFlow, write_csv
from .point_process import ClosedLoopNoise, FrozenLogNoise, Intensity, MarkedEventLog
from .rng import stream

FD_SCALE = 1e-5


@dataclass(frozen=True, eq=False)
class Environment:
    """What coefficients see of the world at time t.

    ``measure`` is the environment law (mu_t on the grid), ``regime`` the
    current state of a regime-type common noise, and ``kernel`` the per-channel
    intensity kernel K_t over mark nodes.
    """

    measure: EmpiricalMeasure | None
    t: float = 0.0
    regime: Any = None
    kernel: tuple = ()

    @cached_property
    def mean(self) -> np.ndarray:
        return self.measure.mean

    @cached_property
    def m(self) -> float:
        return float(self.measure.mean[0])


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, scale: float = FD_SCALE) -> np.ndarray:
    """Central differences of ``fn`` in x, step ``scale * (1 + |x_m|)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for m in range(x.shape[1]):
        h = scale * (1.0 + np.abs(x[:, m]))
        xp = x.copy()
        xm = x.copy()
        xp[:, m] += h
        xm[:, m] -= h
        diff = np.asarray(fn(xp)) - np.asarray(fn(xm))
        cols.append(diff / (2.0 * h).reshape((-1,) + (1,) * (diff.ndim - 1)))
    return np.stack(cols, axis=-1)


class ModelSpec:
    """Coefficient bundle (b, sigma, gamma, f, g, intensity, action box).

    Subclasses override the coefficient methods; any derivative not supplied
    analytically falls back to central finite differences.
    """

    state_dim = 1
    noise_dim = 1
    action_dim = 1
    horizon = 1.0
    regression_degree = 2
    control_in_diffusion = True
    control_in_jump = True
    intensity: Intensity
    action_low: np.ndarray
    action_high: np.ndarray

    @property
    def n_channels(self) -> int:
        return self.intensity.n_channels

    def mark_nodes(self, j: int) -> np.ndarray:
        return self.intensity.marks[j].nodes

    # coefficients -------------------------------------------------------

    def drift(self, env: Environment, x, a):
        raise NotImplementedError

    def diffusion(self, env: Environment, x, a):
        return np.zeros((x.shape[0], self.state_dim, self.noise_dim))

    def jump(self, r: float, env: Environment, x, a):
        return np.zeros((x.shape[0], self.state_dim, self.n_channels))

    def running_cost(self, env: Environment, x, a):
        return np.zeros(x.shape[0])

    def terminal_cost(self, env: Environment, x):
        return np.zeros(x.shape[0])

    # first derivatives --------------------------------------------------

    def drift_dx(self, env, x, a):
        return fd_jacobian(lambda y: self.drift(env, y, a), x)

    def diffusion_dx(self, env, x, a):
        return fd_jacobian(lambda y: self.diffusion(env, y, a), x)

    def jump_dx(self, r, env, x, a):
        return fd_jacobian(lambda y: self.jump(r, env, y, a), x)

    def running_cost_dx(self, env, x, a):
        return fd_jacobian(lambda y: self.running_cost(env, y, a), x)

    def terminal_cost_dx(self, env, x):
        return fd_jacobian(lambda y: self.terminal_cost(env, y), x)

    # second derivatives -------------------------------------------------

    def drift_dxx(self, env, x, a):
        return fd_jacobian(lambda y: self.drift_dx(env, y, a), x)

    def diffusion_dxx(self, env, x, a):
        return fd_jacobian(lambda y: self.diffusion_dx(env, y, a), x)

    def jump_dxx(self, r, env, x, a):
        return fd_jacobian(lambda y: self.jump_dx(r, env, y, a), x)

    def running_cost_dxx(self, env, x, a):
        return fd_jacobian(lambda y: self.running_cost_dx(env, y, a), x)

    def terminal_cost_dxx(self, env, x):
        return fd_jacobian(lambda y: self.terminal_cost_dx(env, y), x)

    # control ------------------------------------------------------------

    def argmin_hamiltonian(self, env, x, p):
        """Closed-form minimiser of the Hamiltonian, or None if there is none."""
        return None

    def project(self, a) -> np.ndarray:
        return np.clip(a, self.action_low, self.action_high)

    def sample_initial(self, n: int, gen: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def validate(self) -> list[str]:
        return []


class CustomModel(ModelSpec):
    """ModelSpec assembled from callables.

    ``coefficients`` maps names such as ``"drift"`` or ``"running_cost_dx"``
    to functions with the signatures of the corresponding ModelSpec methods.
    Unset coefficients default to zero, unset derivatives to finite differences.
    """

    def __init__(self, intensity: Intensity, action_low, action_high, state_dim: int = 1,
                 noise_dim: int = 1, action_dim: int = 1, horizon: float = 1.0,
                 initial: Callable | None = None, control_in_diffusion: bool = True,
                 control_in_jump: bool = True, regression_degree: int = 2, **coefficients):
        self.intensity = intensity
        self.action_low = np.broadcast_to(np.asarray(action_low, dtype=float), (action_dim,)).copy()
        self.action_high = np.broadcast_to(np.asarray(action_high, dtype=float), (action_dim,)).copy()
        if np.any(self.action_low > self.action_high):
            raise InvalidParameter("empty action box")
        self.state_dim, self.noise_dim, self.action_dim = state_dim, noise_dim, action_dim
        self.horizon = horizon
        self.control_in_diffusion = control_in_diffusion
        self.control_in_jump = control_in_jump
        self.regression_degree = regression_degree
        self._initial = initial
        known = {name for name in dir(ModelSpec) if not name.startswith("_")}
        for name, fn in coefficients.items():
            if name not in known:
                raise InvalidParameter(f"unknown coefficient {name!r}")
            setattr(self, name, fn)

    def drift(self, env, x, a):
        return np.zeros((x.shape[0], self.state_dim))

    def sample_initial(self, n, gen):
        if self._initial is None:
            return np.zeros((n, self.state_dim))
        return np.asarray(self._initial(n, gen), dtype=float).reshape(n, self.state_dim)


# ---------------------------------------------------------------------------
# Euler scheme


def jump_compensation(model: ModelSpec, env: Environment, x, a, masses) -> np.ndarray:
    """sum_j sum_nodes mass_j(node) gamma(node, env, x, a)[:, :, j]."""
    out = np.zeros_like(x)
    for j, mass in enumerate(masses):
        for r, w in zip(model.mark_nodes(j), mass):
            if w:
                out += w * model.jump(r, env, x, a)[:, :, j]
    return out


def apply_jumps(model: ModelSpec, env: Environment, x, a, events) -> np.ndarray:
    for e in events:
        x = x + model.jump(e.mark, env, x, a)[:, :, e.channel - 1]
    return x


def euler_step(model: ModelSpec, env: Environment, x, a, dt: float, dW, events=(), kernel=None,
               step: int | None = None) -> np.ndarray:
    """One compensated Euler step.

    x' = x + b dt + sigma dW + sum_events gamma e_channel - sum_j int gamma K^(j)(dr) dt,
    every coefficient evaluated at the pre-step state. ``kernel`` holds the
    per-channel intensity kernel over mark nodes (rate times Q weight).
    """
    if not dt > 0:
        raise InvalidParameter(f"dt must be positive, got {dt}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    out = x + model.drift(env, x, a) * dt + np.einsum("ndk,nk->nd", model.diffusion(env, x, a), dW)
    if kernel is not None:
        out = out - jump_compensation(model, env, x, a, kernel) * dt
    for e in events:
        out = out + model.jump(e.mark, env, x, a)[:, :, e.channel - 1]
    _check_finite(out, step)
    return out


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.all(np.isfinite(x.reshape(x.shape[0], -1)), axis=1))
        raise NumericalBlowup(f"non-finite state at step {step}, particle {int(bad[0])}",
                              step=step, particle=int(bad[0]))


# ---------------------------------------------------------------------------
# path containers


@dataclass(eq=False)
class ControlledTrajectoryBundle:
    """One controlled path with the noise and environment it was driven by."""

    grid: np.ndarray
    state_path: np.ndarray  # (K+1, d)
    action_path: np.ndarray  # (K+1, p)
    brownian_increments: np.ndarray  # (K, k)
    event_log: MarkedEventLog
    env: MeasureFlow
    envs: tuple = field(repr=False, default=())

    def to_csv(self, path) -> None:
        d, p = self.state_path.shape[1], self.action_path.shape[1]
        header = ["time"] + [f"x{i}" for i in range(d)] + [f"a{i}" for i in range(p)]
        write_csv(path, header, np.column_stack([self.grid, self.state_path, self.action_path]))


@dataclass(eq=False)
class ParticleEnsemble:
    """N paths sharing one event log, on a common grid.

    ``envs[k]`` is the environment the coefficients saw on step k: the
    ensemble's own empirical measure in closed loop, the frozen flow otherwise.
    """

    grid: np.ndarray
    states: np.ndarray  # (K+1, N, d)
    actions: np.ndarray  # (K+1, N, p)
    dW: np.ndarray  # (K, N, k)
    log: MarkedEventLog
    envs: tuple
    closed_loop: bool = True

    @property
    def N(self) -> int:
        return self.states.shape[1]

    @property
    def K(self) -> int:
        return self.grid.size - 1

    @cached_property
    def flow(self) -> MeasureFlow:
        return MeasureFlow.from_states(self.grid, self.states)

    @cached_property
    def env_flow(self) -> MeasureFlow:
        return MeasureFlow(self.grid, tuple(e.measure for e in self.envs))

    def bundle(self, i: int) -> ControlledTrajectoryBundle:
        return ControlledTrajectoryBundle(self.grid, self.states[:, i], self.actions[:, i], self.dW[:, i],
                                          self.log, self.env_flow, self.envs)

    @property
    def bundles(self) -> list[ControlledTrajectoryBundle]:
        return [self.bundle(i) for i in range(self.N)]

    def summary(self) -> np.ndarray:
        """Rows (time, mean..., variance..., W2 to the initial law)."""
        from .measures import wasserstein2

        flow = self.flow
        first = flow.values[0]
        rows = []
        for t, x, nu in zip(self.grid, self.states, flow.values):
            rows.append([t, *x.mean(axis=0), *x.var(axis=0), wasserstein2(nu, first)])
        return np.array(rows)

    def summary_csv(self, path) -> None:
        d = self.states.shape[2]
        header = ["time"] + [f"mean{i}" for i in range(d)] + [f"var{i}" for i in range(d)] + ["w2_to_initial"]
        write_csv(path, header, self.summary())

    def trajectories_csv(self, path) -> None:
        K1, N, d = self.states.shape
        p = self.actions.shape[2]
        t = np.repeat(self.grid, N)
        idx = np.tile(np.arange(N), K1)
        data = np.column_stack([t, idx, self.states.reshape(-1, d), self.actions.reshape(-1, p)])
        header = ["time", "particle"] + [f"x{i}" for i in range(d)] + [f"a{i}" for i in range(p)]
        write_csv(path, header, data)


# ---------------------------------------------------------------------------
# simulation


def uniform_grid(horizon: float, steps: int) -> np.ndarray:
    if steps < 1 or not horizon > 0:
        raise InvalidParameter("need steps >= 1 and a positive horizon")
    return np.linspace(0.0, horizon, steps + 1)


def brownian_increments(seed: int, grid: np.ndarray, n: int, k: int) -> np.ndarray:
    dt = np.diff(grid)
    return stream(seed, "brownian").standard_normal((dt.size, n, k)) * np.sqrt(dt)[:, None, None]


def initial_states(model: ModelSpec, n: int, seed: int, sampler: Callable | None = None) -> np.ndarray:
    gen = stream(seed, "x0")
    x0 = (sampler or model.sample_initial)(n, gen)
    return np.asarray(x0, dtype=float).reshape(n, model.state_dim)


def _bridge(total: np.ndarray, t0: float, t1: float, cuts, gen) -> list[np.ndarray]:
    """Split a Brownian increment over (t0, t1] at interior times ``cuts``."""
    if not cuts:
        return [total]
    pieces = []
    w, t = np.zeros_like(total), t0
    for s in cuts:
        frac = (s - t) / (t1 - t)
        var = (s - t) * (t1 - s) / (t1 - t)
        w_s = w + frac * (total - w) + np.sqrt(max(var, 0.0)) * gen.standard_normal(total.shape)
        pieces.append(w_s - w)
        w, t = w_s, s
    pieces.append(total - w)
    return pieces


def simulate_paths(model: ModelSpec, policy, x0: np.ndarray, grid: np.ndarray, dW: np.ndarray,
                   noise, env_flow: MeasureFlow | None = None, bridge_seed: int = 0) -> ParticleEnsemble:
    """Forward Euler scheme for N particles sharing one common noise driver.

    With ``env_flow=None`` the environment is the particles' own empirical
    measure (conditional McKean-Vlasov in closed loop). Steps are split at the
    common events so jumps land at their exact times; the action is held at its
    grid value over each step.
    """
    x = np.array(x0, dtype=float).reshape(-1, model.state_dim)
    N = x.shape[0]
    K = grid.size - 1
    if dW.shape != (K, N, model.noise_dim):
        raise InvalidInput(f"Brownian increments have shape {dW.shape}, expected {(K, N, model.noise_dim)}")
    aligned = env_flow is not None and env_flow.grid.size == grid.size and np.allclose(env_flow.grid, grid, atol=1e-12)
    if env_flow is not None and env_flow.horizon < grid[-1] - 1e-12:
        raise InvalidInput("environment flow does not cover the simulation horizon")
    gen = stream(bridge_seed, "bridge")
    states = np.empty((K + 1, N, model.state_dim))
    actions = np.empty((K + 1, N, model.action_dim))
    envs = []

    def measure_at(k, x):
        if env_flow is None:
            return EmpiricalMeasure(x)
        return env_flow.values[k] if aligned else env_flow.at(grid[k])

    for k in range(K):
        t0, t1 = grid[k], grid[k + 1]
        measure = measure_at(k, x)
        step = noise.step(t0, t1, measure)
        env = Environment(measure, t0, step.regime, step.kernel)
        a = _act(model, policy, t0, env, x)
        states[k], actions[k] = x, a
        envs.append(env)
        cuts = [s.t1 for s in step.segments[:-1]]
        pieces = _bridge(dW[k], t0, t1, cuts, gen)
        for i, (seg, dw) in enumerate(zip(step.segments, pieces)):
            h = seg.t1 - seg.t0
            seg_env = env if seg.regime == env.regime else dataclasses.replace(env, t=seg.t0, regime=seg.regime)
            if i and env_flow is None:
                # after a common jump the cloud has moved with the particles
                seg_env = dataclasses.replace(seg_env, measure=EmpiricalMeasure(x))
            if h > 0:
                x = (x + model.drift(seg_env, x, a) * h
                     + np.einsum("ndk,nk->nd", model.diffusion(seg_env, x, a), dw)
                     - jump_compensation(model, seg_env, x, a, seg.mass))
            x = apply_jumps(model, seg_env, x, a, seg.events)
        _check_finite(x, k)
    measure = measure_at(K, x)
    kernel, regime = noise.current(grid[K], measure)
    env = Environment(measure, grid[K], regime, kernel)
    states[K], actions[K] = x, _act(model, policy, grid[K], env, x)
    envs.append(env)
    return ParticleEnsemble(np.asarray(grid, dtype=float), states, actions, np.asarray(dW), noise.log(grid[-1]),
                            tuple(envs), closed_loop=env_flow is None)


def _act(model, policy, t, env, x) -> np.ndarray:
    a = np.asarray(policy(t, env, x), dtype=float).reshape(x.shape[0], model.action_dim)
    a = model.project(a)
    assert np.all(a >= model.action_low) and np.all(a <= model.action_high), "action left the action set"
    return a


def simulate_controlled_path(model: ModelSpec, policy, env: MeasureFlow, common_log: MarkedEventLog,
                             seed: int, K_steps: int, x0=None) -> ControlledTrajectoryBundle:
    """Single path against a frozen environment and a given common event log."""
    grid = uniform_grid(env.horizon, K_steps)
    if x0 is None:
        x0 = initial_states(model, 1, seed)
    dW = brownian_increments(seed, grid, 1, model.noise_dim)
    noise = FrozenLogNoise(model.intensity, common_log)
    ens = simulate_paths(model, policy, np.reshape(x0, (1, -1)), grid, dW, noise, env_flow=env, bridge_seed=seed)
    return ens.bundle(0)


def _path_costs(model: ModelSpec, grid, states, actions, envs) -> np.ndarray:
    dt = np.diff(grid)
    total = np.zeros(states.shape[1])
    for k in range(dt.size):
        total += model.running_cost(envs[k], states[k], actions[k]) * dt[k]
    return total + model.terminal_cost(envs[-1], states[-1])


def evaluate_cost(model: ModelSpec, bundle: ControlledTrajectoryBundle) -> float:
    """Left-endpoint running cost plus terminal cost along one path."""
    cost = _path_costs(model, bundle.grid, bundle.state_path[:, None, :], bundle.action_path[:, None, :],
                       bundle.envs)
    return float(cost[0])


def evaluate_costs(model: ModelSpec, ensemble: ParticleEnsemble) -> np.ndarray:
    """Per-particle costs of an ensemble, shape (N,)."""
    return _path_costs(model, ensemble.grid, ensemble.states, ensemble.actions, ensemble.envs)


def closed_loop_noise(model: ModelSpec, seed: int) -> ClosedLoopNoise:
    return ClosedLoopNoise(model.intensity, seed)
