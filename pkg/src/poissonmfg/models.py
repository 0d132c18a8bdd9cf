"""Built-in models: a linear-quadratic game and a regime-switching portfolio.

LQ (scalar, common Hawkes noise N with compensated version N~):

    dX = [b (X - m_t) + a] dt + sigma dW + gamma dN~
    f  = f1/2 (x - m)^2 + f (x - m) a + f2/2 a^2,    g = g/2 (x - m_T)^2

Portfolio (wealth X, regime xi in {1..n} driven by the environment):

    dX = [b0(xi) X + b1(xi) a] dt + sigma a dW
    f  = (x^2 - m^2) f(xi) / T,                      g = (x^2 - m^2) g(xi)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidParameter
from .hamiltonian import AdjointPoint
from .jump_sde import Environment, ModelSpec
from .measures import EmpiricalMeasure, MeasureFlow, truncated_second_moment
from .point_process import (ExpKernel, HawkesIntensity, HawkesParams, Intensity, MarkedEventLog, finite_marks,
                            kernel_config, make_kernel, simulate_marked_process)
from .policies import AffinePolicy
from .rng import stream

# ---------------------------------------------------------------------------
# LQ


@dataclass(frozen=True)
class LqParams:
    b: float = 1.0
    f: float = 1.0
    f1: float = 2.0
    f2: float = 2.0
    g: float = 1.0
    sigma: float = 0.3
    gamma: float = 0.2
    hawkes: HawkesParams = field(default_factory=lambda: HawkesParams(1.0, 0.5, 1.0, ExpKernel(0.5, 1.0)))
    T: float = 1.0
    a_max: float = 50.0
    x0_mean: float = 0.0
    x0_std: float = 0.5

    def __post_init__(self):
        if not self.f2 > 0:
            raise InvalidParameter(f"f2 must be positive, got {self.f2}")
        if not self.T > 0 or not self.a_max > 0 or self.x0_std < 0:
            raise InvalidParameter("need T > 0, a_max > 0 and x0_std >= 0")

    @classmethod
    def from_config(cls, cfg: dict) -> "LqParams":
        known = {"b", "f", "f1", "f2", "g", "sigma", "gamma", "lambda0", "psi1", "psi2", "r", "T",
                 "a_max", "x0_mean", "x0_std"}
        unknown = set(cfg) - known
        if unknown:
            raise InvalidParameter(f"unknown LQ keys: {sorted(unknown)}")
        base = cls()
        hawkes = HawkesParams(float(cfg.get("lambda0", base.hawkes.lambda0)), float(cfg.get("psi1", base.hawkes.psi1)),
                              float(cfg.get("r", base.hawkes.r_trunc)), make_kernel(cfg.get("psi2", kernel_config(base.hawkes.psi2))))
        kw = {k: float(cfg[k]) for k in ("b", "f", "f1", "f2", "g", "sigma", "gamma", "T", "a_max", "x0_mean", "x0_std")
              if k in cfg}
        return cls(hawkes=hawkes, **kw)

    def to_config(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "hawkes"}
        h = self.hawkes
        out.update(lambda0=h.lambda0, psi1=h.psi1, r=h.r_trunc, psi2=kernel_config(h.psi2))
        return out


@dataclass(frozen=True)
class LqValidation:
    ok: bool
    violations: list
    beta1: float
    beta2: float
    beta3: float
    beta1_positive: bool


def lq_betas(p: LqParams) -> tuple[float, float, float]:
    return p.f1 - p.f ** 2 / p.f2 - abs(p.b) / 2, 1.0 / p.f2 - abs(p.b) / 2, p.g


def lq_validate(p: LqParams) -> LqValidation:
    """Check |b| f2 = 2 and f1 f2 > f^2/2 + 1; report the monotonicity constants."""
    violations = []
    if abs(abs(p.b) * p.f2 - 2.0) > 1e-12:
        violations.append(f"|b|f2 = {abs(p.b) * p.f2:g} != 2")
    lhs, rhs = p.f1 * p.f2, p.f ** 2 / 2 + 1
    if not lhs > rhs:
        violations.append(f"f1f2 = {lhs:g} <= f^2/2+1 = {rhs:g}")
    b1, b2, b3 = lq_betas(p)
    return LqValidation(not violations, violations, b1, b2, b3, b1 > 0)


def lq_optimal_control(x, mean, y, p: LqParams, project: bool = True):
    """a = -(f/f2)(x - mean) - y/f2, clipped to [-a_max, a_max]."""
    a = -(p.f / p.f2) * (np.asarray(x, dtype=float) - mean) - np.asarray(y, dtype=float) / p.f2
    if project:
        a = np.clip(a, -p.a_max, p.a_max)
    return float(a) if np.ndim(a) == 0 else a


def _rk4_backward(rhs, terminal: float, grid: np.ndarray) -> np.ndarray:
    out = np.empty(grid.size)
    out[-1] = terminal
    for k in range(grid.size - 1, 0, -1):
        h = grid[k - 1] - grid[k]
        t, y = grid[k], out[k]
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        out[k - 1] = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return out


def lq_riccati_oracle(p: LqParams, grid) -> np.ndarray:
    """p_t with Y_t = p_t (X_t - m_t): p' = -2b p + (f + p)^2/f2 - f1, p_T = g.

    With this ansatz the gap X - m has no jump part (all players jump by the
    same gamma), Z = p sigma and U = 0.
    """
    grid = np.asarray(grid, dtype=float)
    return _rk4_backward(lambda t, y: -2 * p.b * y + (p.f + y) ** 2 / p.f2 - p.f1, p.g, grid)


def lq_second_order_oracle(p: LqParams, grid) -> np.ndarray:
    """Deterministic second-order adjoint: y' = -(f1 + 2 b y), y_T = g."""
    grid = np.asarray(grid, dtype=float)
    return _rk4_backward(lambda t, y: -(p.f1 + 2 * p.b * y), p.g, grid)


def lq_equilibrium_policy(p: LqParams, grid) -> AffinePolicy:
    """Feedback a = -(f + p_t)/f2 (x - m) from the Riccati solution."""
    P = lq_riccati_oracle(p, grid)
    return AffinePolicy(np.asarray(grid, dtype=float), -(p.f + P) / p.f2, np.zeros_like(P))


class LqModel(ModelSpec):
    regression_degree = 1
    interior_minimizer = True
    control_in_diffusion = False
    control_in_jump = False

    def __init__(self, params: LqParams | None = None):
        self.params = params or LqParams()
        p = self.params
        self.horizon = p.T
        self.intensity = HawkesIntensity(p.hawkes, horizon=p.T)
        self.action_low = np.array([-p.a_max])
        self.action_high = np.array([p.a_max])

    def validate(self):
        return lq_validate(self.params).violations

    def drift(self, env, x, a):
        p = self.params
        return p.b * (x - env.m) + a

    def diffusion(self, env, x, a):
        return np.full((x.shape[0], 1, 1), self.params.sigma)

    def jump(self, r, env, x, a):
        return np.full((x.shape[0], 1, 1), self.params.gamma)

    def running_cost(self, env, x, a):
        p = self.params
        d, a = x[:, 0] - env.m, a[:, 0]
        return 0.5 * p.f1 * d ** 2 + p.f * d * a + 0.5 * p.f2 * a ** 2

    def terminal_cost(self, env, x):
        return 0.5 * self.params.g * (x[:, 0] - env.m) ** 2

    def drift_dx(self, env, x, a):
        return np.full((x.shape[0], 1, 1), self.params.b)

    def drift_dxx(self, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1))

    def diffusion_dx(self, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1))

    def diffusion_dxx(self, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1, 1))

    def jump_dx(self, r, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1))

    def jump_dxx(self, r, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1, 1))

    def running_cost_dx(self, env, x, a):
        p = self.params
        return p.f1 * (x - env.m) + p.f * a

    def running_cost_dxx(self, env, x, a):
        return np.full((x.shape[0], 1, 1), self.params.f1)

    def terminal_cost_dx(self, env, x):
        return self.params.g * (x - env.m)

    def terminal_cost_dxx(self, env, x):
        return np.full((x.shape[0], 1, 1), self.params.g)

    def argmin_hamiltonian(self, env, x, p: AdjointPoint):
        return lq_optimal_control(x, env.m, p.y, self.params, project=False)

    def sample_initial(self, n, gen):
        p = self.params
        return p.x0_mean + p.x0_std * gen.standard_normal((n, 1))

    # monotonicity of the coupled forward-backward field
    def coupled_field(self, x, y, z, u, m, regime=None):
        p = self.params
        a = -(p.f * (x - m) + y) / p.f2
        return (-p.f1 * (x - m) - p.f * a - p.b * y, p.b * (x - m) + a,
                np.full_like(x, p.sigma), np.full_like(x, p.gamma))

    def terminal_gradient(self, x, m, regime=None):
        return self.params.g * (x - m)

    def monotonicity_constants(self):
        return lq_betas(self.params)


# ---------------------------------------------------------------------------
# portfolio


@dataclass(frozen=True)
class PortfolioParams:
    n_regimes: int = 2
    b0: tuple = (0.05, 0.1)
    b1: tuple = (0.1, 0.3)
    f: tuple = (1.0, 2.0)
    g: tuple = (1.0, 1.5)
    sigma: float = 0.3
    r_trunc: float = 1.0
    a_lo: float = 0.0
    a_hi: float = 1.0
    T: float = 1.0
    xi0: int = 1
    x0_mean: float = 1.0
    x0_std: float = 0.2
    env_source: str = "constant"

    def __post_init__(self):
        n = int(self.n_regimes)
        if n < 1:
            raise InvalidParameter("need at least one regime")
        for name in ("b0", "b1", "f", "g"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != n:
                raise InvalidParameter(f"{name} needs {n} entries, got {len(vals)}")
            if any(not v > 0 for v in vals):
                raise InvalidParameter(f"{name} must be strictly positive in every regime")
            object.__setattr__(self, name, vals)
        if self.sigma == 0:
            raise InvalidParameter("sigma must be nonzero")
        if not self.r_trunc > 0:
            raise InvalidParameter("r_trunc must be positive")
        if not self.a_lo < self.a_hi:
            raise InvalidParameter("need a_lo < a_hi")
        if not 1 <= int(self.xi0) <= n:
            raise InvalidParameter("initial regime outside 1..n")
        if self.env_source not in ("constant", "lq"):
            raise InvalidParameter(f"env_source must be 'constant' or 'lq', got {self.env_source!r}")

    @classmethod
    def from_config(cls, cfg: dict) -> "PortfolioParams":
        cfg = dict(cfg)
        if "n" in cfg:
            cfg["n_regimes"] = cfg.pop("n")
        if "r" in cfg:
            cfg["r_trunc"] = cfg.pop("r")
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise InvalidParameter(f"unknown portfolio keys: {sorted(unknown)}")
        return cls(**cfg)

    def to_config(self) -> dict:
        out = asdict(self)
        out["n"] = out.pop("n_regimes")
        out["r"] = out.pop("r_trunc")
        for k in ("b0", "b1", "f", "g"):
            out[k] = list(out[k])
        return out

    def table(self, name: str) -> np.ndarray:
        """Regime-indexed lookup table with a dummy slot 0."""
        return np.concatenate([[np.nan], getattr(self, name)])


def c_r(nu: EmpiricalMeasure, r: float) -> float:
    return (truncated_second_moment(nu, r) + 1.0) / (r * r + 1.0)


def regime_generator(nu: EmpiricalMeasure, p: PortfolioParams) -> np.ndarray:
    n = p.n_regimes
    c = c_r(nu, p.r_trunc)
    return (c / n) * (1.0 - n * np.eye(n))


class RegimeIntensity(Intensity):
    """Regime chain as a one-channel marked process; the mark is the new state.

    From state i the kernel puts mass c_r(nu)/n on every j != i.
    """

    def __init__(self, n: int, r_trunc: float, xi0: int = 1):
        self.n = int(n)
        self.r_trunc = r_trunc
        self.xi0 = int(xi0)
        self.marks = (finite_marks(np.arange(1, self.n + 1)),)

    def initial_state(self):
        return self.xi0

    def rate(self, t, j, measure, state):
        out = np.full(self.n, c_r(measure, self.r_trunc) / self.n)
        out[state - 1] = 0.0
        return out

    def majorant(self, t, j, state):
        return (self.n - 1) / self.n, math.inf

    def integrate(self, t0, t1, j, measure, state):
        return self.rate(t0, j, measure, state) * max(t1 - t0, 0.0)

    def update(self, state, t, j, mark):
        return int(round(mark))

    def regime(self, state):
        return state


def regime_path(log: MarkedEventLog, grid, xi0: int) -> np.ndarray:
    """Regime at each grid point (right-continuous)."""
    grid = np.asarray(grid, dtype=float)
    states = np.concatenate([[xi0], log.marks.astype(int)])
    idx = np.searchsorted(log.times, grid, side="right")
    return states[idx]


def simulate_regime_chain(p: PortfolioParams, env: MeasureFlow, seed: int, grid,
                          method: str = "thinning") -> tuple[np.ndarray, MarkedEventLog]:
    """Regime path on ``grid`` and its event log.

    ``method="thinning"`` simulates the marked process directly;
    ``method="intervals"`` drives the chain by a unit-rate Poisson random
    measure on [0, T] x [0, n-1], moving i -> i+j when the point's height falls
    in c_r [(i-1) + (j-1)/n, (i-1) + j/n) and i -> i-j when it falls in
    c_r [(i-1) - j/n, (i-1) - (j-1)/n).
    """
    grid = np.asarray(grid, dtype=float)
    T = float(grid[-1])
    n = p.n_regimes
    if method == "thinning":
        log = simulate_marked_process(RegimeIntensity(n, p.r_trunc, p.xi0), env, T, seed)
    elif method == "intervals":
        log = _interval_chain(p, env, T, seed)
    else:
        raise InvalidParameter(f"unknown method {method!r}")
    return regime_path(log, grid, p.xi0), log


def _interval_chain(p: PortfolioParams, env: MeasureFlow, T: float, seed: int) -> MarkedEventLog:
    n = p.n_regimes
    height = n - 1
    if height == 0:
        return MarkedEventLog.empty(T, 1)
    gen = stream(seed, "regime", "intervals")
    count = gen.poisson(T * height)
    times = np.sort(gen.uniform(0.0, T, size=count))
    heights = gen.uniform(0.0, height, size=count)
    state = p.xi0
    ev_t, ev_m = [], []
    for s, r in zip(times, heights):
        c = c_r(env.left(s), p.r_trunc)
        base = state - 1
        new = state
        for j in range(1, n - state + 1):
            if c * (base + (j - 1) / n) <= r < c * (base + j / n):
                new = state + j
                break
        else:
            for j in range(1, state):
                if c * (base - j / n) <= r < c * (base - (j - 1) / n):
                    new = state - j
                    break
        if new != state:
            ev_t.append(s)
            ev_m.append(float(new))
            state = new
    return MarkedEventLog(np.array(ev_t), np.array(ev_m), np.ones(len(ev_t), dtype=np.int64), T, 1)


def portfolio_control(y, z, regime, p: PortfolioParams):
    """a_hi where b1(regime) y + sigma z <= 0, a_lo elsewhere."""
    s = np.asarray(p.table("b1")[regime], dtype=float) * np.asarray(y, dtype=float) + p.sigma * np.asarray(z, dtype=float)
    a = np.where(s <= 0, p.a_hi, p.a_lo)
    return float(a) if np.ndim(a) == 0 else a


def portfolio_second_order_oracle(p: PortfolioParams, log: MarkedEventLog, grid) -> np.ndarray:
    """Yt' = -2 (f(xi)/T + b0(xi) Yt), Yt_T = 2 g(xi_T), solved exactly along the regime path."""
    grid = np.asarray(grid, dtype=float)
    T = float(grid[-1])
    f, b0, g = p.table("f"), p.table("b0"), p.table("g")
    xi_T = int(regime_path(log, [T], p.xi0)[0])
    pts = np.unique(np.concatenate([grid, log.times[log.times < T]]))
    states = regime_path(log, pts, p.xi0)
    val = 2.0 * g[xi_T]
    at = {pts.size - 1: val}
    for idx in range(pts.size - 1, 0, -1):
        # on (pts[idx-1], pts[idx]] the left-limit regime is the state at pts[idx-1]
        i = int(states[idx - 1])
        c = f[i] / (T * b0[i])
        val = (val + c) * math.exp(2.0 * b0[i] * (pts[idx] - pts[idx - 1])) - c
        at[idx - 1] = val
    out = np.array([at[int(np.searchsorted(pts, t))] for t in grid])
    return out


def constant_environment(grid, scale: float = 0.5, atoms: int = 200) -> MeasureFlow:
    """Constant flow at a deterministic normal-quantile cloud."""
    from scipy.stats import norm

    q = norm.ppf((np.arange(atoms) + 0.5) / atoms) * scale
    return MeasureFlow.constant(grid, EmpiricalMeasure(q))


class PortfolioModel(ModelSpec):
    control_in_diffusion = True
    control_in_jump = False
    regression_degree = 2

    def __init__(self, params: PortfolioParams | None = None, environment: MeasureFlow | None = None,
                 steps: int = 200):
        self.params = params or PortfolioParams()
        p = self.params
        self.horizon = p.T
        self.intensity = RegimeIntensity(p.n_regimes, p.r_trunc, p.xi0)
        self.action_low = np.array([p.a_lo])
        self.action_high = np.array([p.a_hi])
        if environment is None:
            environment = constant_environment(np.linspace(0.0, p.T, steps + 1))
        self.exogenous_flow = environment
        self._b0, self._b1 = p.table("b0"), p.table("b1")
        self._f, self._g = p.table("f"), p.table("g")

    def drift(self, env, x, a):
        i = env.regime
        return self._b0[i] * x + self._b1[i] * a

    def diffusion(self, env, x, a):
        return (self.params.sigma * a).reshape(-1, 1, 1)

    def running_cost(self, env, x, a):
        return (x[:, 0] ** 2 - env.m ** 2) * self._f[env.regime] / self.params.T

    def terminal_cost(self, env, x):
        return (x[:, 0] ** 2 - env.m ** 2) * self._g[env.regime]

    def drift_dx(self, env, x, a):
        return np.full((x.shape[0], 1, 1), self._b0[env.regime])

    def drift_dxx(self, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1))

    def diffusion_dx(self, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1))

    def diffusion_dxx(self, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1, 1))

    def jump_dx(self, r, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1))

    def jump_dxx(self, r, env, x, a):
        return np.zeros((x.shape[0], 1, 1, 1, 1))

    def running_cost_dx(self, env, x, a):
        return 2.0 * x * self._f[env.regime] / self.params.T

    def running_cost_dxx(self, env, x, a):
        return np.full((x.shape[0], 1, 1), 2.0 * self._f[env.regime] / self.params.T)

    def terminal_cost_dx(self, env, x):
        return 2.0 * self._g[env.regime] * x

    def terminal_cost_dxx(self, env, x):
        return np.full((x.shape[0], 1, 1), 2.0 * self._g[env.regime])

    def argmin_hamiltonian(self, env, x, p: AdjointPoint):
        return portfolio_control(p.y[:, 0], p.z[:, 0, 0], env.regime, self.params).reshape(-1, 1)

    def sample_initial(self, n, gen):
        p = self.params
        return p.x0_mean + p.x0_std * gen.standard_normal((n, 1))

    def coupled_field(self, x, y, z, u, m, regime):
        p = self.params
        a = portfolio_control(y, z, regime, p)
        return (-2.0 * self._f[regime] / p.T * x - self._b0[regime] * y,
                self._b0[regime] * x + self._b1[regime] * a, p.sigma * a, np.zeros_like(x))

    def terminal_gradient(self, x, m, regime):
        return 2.0 * self._g[regime] * x

    def monotonicity_constants(self):
        p = self.params
        return 2.0 * min(p.f) / p.T, 0.0, 2.0 * min(p.g)

    def monotonicity_regimes(self):
        return list(range(1, self.params.n_regimes + 1))
