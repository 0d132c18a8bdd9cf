"""Marked point processes with environment-dependent intensity.

An :class:`Intensity` describes, per channel, a rate over mark nodes. Marks live
either on a finite set or on an interval discretised into cells; in both cases
the base measure Q is stored as node weights, so the kernel K_t(dr) is the
vector ``rate * weights``. Events are produced by Ogata thinning against a
channel-wise majorant and can be replayed to compute compensators and
time-change residuals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import InvalidInput, InvalidParameter, SimulationFault
from .measures import EmpiricalMeasure, MeasureFlow, read_csv, truncated_second_moment, wasserstein2, write_csv
from .rng import stream

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


# ---------------------------------------------------------------------------
# mark spaces


class MarkSpace:
    """Base measure Q on a finite set or a discretised interval."""

    def __init__(self, nodes, weights, finite: bool, edges=None):
        self.nodes = np.asarray(nodes, dtype=float).reshape(-1)
        self.weights = np.asarray(weights, dtype=float).reshape(-1)
        if self.nodes.shape != self.weights.shape or self.nodes.size == 0:
            raise InvalidParameter("mark nodes and weights must be non-empty and aligned")
        if np.any(self.weights < 0) or not self.weights.sum() > 0:
            raise InvalidParameter("base measure must be nonnegative with positive mass")
        self.finite = finite
        self.edges = None if edges is None else np.asarray(edges, dtype=float)

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def sample(self, kernel: np.ndarray, u: float) -> float:
        """Inverse-CDF draw from the normalised kernel K(dr)/K(R)."""
        if self.size == 1:
            return float(self.nodes[0])
        cdf = np.cumsum(kernel)
        cdf = cdf / cdf[-1]
        c = min(int(np.searchsorted(cdf, u, side="left")), self.size - 1)
        if self.finite:
            return float(self.nodes[c])
        lo_p = cdf[c - 1] if c > 0 else 0.0
        frac = (u - lo_p) / max(cdf[c] - lo_p, 1e-300)
        return float(self.edges[c] + min(max(frac, 0.0), 1.0) * (self.edges[c + 1] - self.edges[c]))


def trivial_marks(mass: float = 1.0) -> MarkSpace:
    """Single mark at 0 carrying the whole base measure."""
    return MarkSpace([0.0], [mass], finite=True)


def finite_marks(values, weights=None) -> MarkSpace:
    values = np.asarray(values, dtype=float)
    weights = np.ones_like(values) if weights is None else weights
    return MarkSpace(values, weights, finite=True)


def interval_marks(lo: float, hi: float, density: Callable | None = None,
                   mass: float = 1.0, cells: int = 256) -> MarkSpace:
    """Interval [lo, hi] with Q = density(r) dr (or uniform of the given mass)."""
    if not hi > lo:
        raise InvalidParameter("mark interval must have hi > lo")
    edges = np.linspace(lo, hi, cells + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    h = edges[1] - edges[0]
    if density is None:
        weights = np.full(cells, mass / cells)
    else:
        weights = np.asarray(density(mids), dtype=float) * h
    return MarkSpace(mids, weights, finite=False, edges=edges)


# ---------------------------------------------------------------------------
# event logs


@dataclass(frozen=True)
class Event:
    time: float
    mark: float
    channel: int  # 1-based


@dataclass(frozen=True, eq=False)
class MarkedEventLog:
    """Time-ordered (time, mark, channel) triples on [0, horizon]."""

    times: np.ndarray
    marks: np.ndarray
    channels: np.ndarray
    horizon: float
    n_channels: int = 1

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1).copy()
        marks = np.asarray(self.marks, dtype=float).reshape(-1).copy()
        channels = np.asarray(self.channels, dtype=np.int64).reshape(-1).copy()
        if not (times.shape == marks.shape == channels.shape):
            raise InvalidInput("times, marks and channels must be aligned")
        if times.size:
            if times.min() < 0 or times.max() > self.horizon:
                raise InvalidInput("event times must lie in [0, horizon]")
            if np.any(np.diff(times) < 0):
                raise InvalidInput("events must be ordered in time")
            if channels.min() < 1 or channels.max() > self.n_channels:
                raise InvalidInput("channels must be in 1..n_channels")
            for c in range(1, self.n_channels + 1):
                if np.any(np.diff(times[channels == c]) <= 0):
                    raise InvalidInput(f"times must be strictly increasing within channel {c}")
        for arr in (times, marks, channels):
            arr.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "horizon", float(self.horizon))

    @classmethod
    def empty(cls, horizon: float, n_channels: int = 1) -> "MarkedEventLog":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64), horizon, n_channels)

    @classmethod
    def from_events(cls, events: Sequence[Event], horizon: float, n_channels: int = 1) -> "MarkedEventLog":
        return cls(np.array([e.time for e in events], dtype=float),
                   np.array([e.mark for e in events], dtype=float),
                   np.array([e.channel for e in events], dtype=np.int64), horizon, n_channels)

    def __len__(self) -> int:
        return self.times.size

    def events(self) -> list[Event]:
        return [Event(float(t), float(m), int(c)) for t, m, c in zip(self.times, self.marks, self.channels)]

    def between(self, t0: float, t1: float) -> list[Event]:
        """Events with t0 < time <= t1."""
        i0 = int(np.searchsorted(self.times, t0, side="right"))
        i1 = int(np.searchsorted(self.times, t1, side="right"))
        return [Event(float(self.times[i]), float(self.marks[i]), int(self.channels[i])) for i in range(i0, i1)]

    def channel_times(self, channel: int) -> np.ndarray:
        return self.times[self.channels == channel]

    def counts(self) -> np.ndarray:
        return np.bincount(self.channels - 1, minlength=self.n_channels) if len(self) else np.zeros(self.n_channels, dtype=np.int64)

    def to_csv(self, path) -> None:
        write_csv(path, ["time", "channel", "mark"], np.column_stack([self.times, self.channels, self.marks]))

    @classmethod
    def from_csv(cls, path, horizon: float, n_channels: int = 1) -> "MarkedEventLog":
        _, data = read_csv(path)
        return cls(data[:, 0], data[:, 2], data[:, 1].astype(np.int64), horizon, n_channels)

    def __eq__(self, other):
        if not isinstance(other, MarkedEventLog):
            return NotImplemented
        return (np.array_equal(self.times, other.times) and np.array_equal(self.marks, other.marks)
                and np.array_equal(self.channels, other.channels) and self.horizon == other.horizon
                and self.n_channels == other.n_channels)

    __hash__ = None


# ---------------------------------------------------------------------------
# intensities


class Intensity:
    """Channel-wise rate lambda^(j)(r, nu, history) over the mark nodes.

    Subclasses implement ``rate`` and ``majorant``; the history enters through
    an immutable state updated by ``update`` at every accepted event.
    """

    marks: tuple = (trivial_marks(),)
    breakpoints: tuple = ()

    @property
    def n_channels(self) -> int:
        return len(self.marks)

    def initial_state(self):
        return None

    def rate(self, t: float, j: int, measure, state) -> np.ndarray:
        raise NotImplementedError

    def kernel(self, t: float, j: int, measure, state) -> np.ndarray:
        return self.rate(t, j, measure, state) * self.marks[j].weights

    def total(self, t: float, j: int, measure, state) -> float:
        return float(self.kernel(t, j, measure, state).sum())

    def majorant(self, t: float, j: int, state) -> tuple[float, float]:
        """Upper bound on ``total`` valid on [t, until) as long as no event occurs."""
        raise NotImplementedError

    def integrate(self, t0: float, t1: float, j: int, measure, state) -> np.ndarray:
        """int_{t0}^{t1} K_s(node) ds over an event-free stretch."""
        if t1 <= t0:
            return np.zeros(self.marks[j].size)
        mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
        acc = np.zeros(self.marks[j].size)
        for node, w in zip(_GL_NODES, _GL_WEIGHTS):
            acc += w * self.kernel(mid + half * node, j, measure, state)
        return acc * half

    def update(self, state, t: float, j: int, mark: float):
        return state

    def regime(self, state):
        return None


class ConstantIntensity(Intensity):
    """Deterministic rates, one per channel (optionally per mark node)."""

    def __init__(self, rates, marks: Sequence[MarkSpace] | None = None):
        if np.isscalar(rates):
            rates = [rates]
        rates = [np.atleast_1d(np.asarray(r, dtype=float)) for r in rates]
        self.marks = tuple(marks) if marks is not None else tuple(trivial_marks() for _ in rates)
        if len(self.marks) != len(rates):
            raise InvalidParameter("one rate per channel")
        self._rates = [np.broadcast_to(r, (m.size,)).astype(float) for r, m in zip(rates, self.marks)]
        if any(np.any(r < 0) for r in self._rates):
            raise InvalidParameter("rates must be nonnegative")

    def rate(self, t, j, measure, state):
        return self._rates[j]

    def majorant(self, t, j, state):
        return float((self._rates[j] * self.marks[j].weights).sum()), math.inf

    def integrate(self, t0, t1, j, measure, state):
        return self._rates[j] * self.marks[j].weights * max(t1 - t0, 0.0)


class FunctionIntensity(Intensity):
    """Rates from a callable ``fn(t, j, measure) -> rate per node`` with a global bound."""

    def __init__(self, fn: Callable, bound: Sequence[float] | float,
                 marks: Sequence[MarkSpace] | None = None, breakpoints: Sequence[float] = ()):
        self.fn = fn
        self.marks = tuple(marks) if marks is not None else (trivial_marks(),)
        self.bound = np.broadcast_to(np.asarray(bound, dtype=float), (len(self.marks),))
        self.breakpoints = tuple(sorted(breakpoints))

    def rate(self, t, j, measure, state):
        return np.broadcast_to(np.asarray(self.fn(t, j, measure), dtype=float), (self.marks[j].size,))

    def majorant(self, t, j, state):
        return float(self.bound[j]), math.inf


# -- Hawkes --------------------------------------------------------------------


@dataclass(frozen=True)
class ExpKernel:
    """psi(u) = beta * exp(-alpha u)."""

    beta: float
    alpha: float

    monotone = True

    def __post_init__(self):
        if self.beta < 0 or self.alpha < 0:
            raise InvalidParameter("exponential kernel needs beta >= 0 and alpha >= 0")

    def value(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(u >= 0, self.beta * np.exp(-self.alpha * np.maximum(u, 0.0)), 0.0)

    def integral(self, a, b):
        a, b = max(a, 0.0), max(b, 0.0)
        if self.alpha == 0:
            return self.beta * (b - a)
        return self.beta / self.alpha * (math.exp(-self.alpha * a) - math.exp(-self.alpha * b))

    def window_max(self, a, b):
        return float(self.value(max(a, 0.0)))


@dataclass(frozen=True)
class ZeroKernel:
    monotone = True

    def value(self, u):
        return np.zeros_like(np.asarray(u, dtype=float))

    def integral(self, a, b):
        return 0.0

    def window_max(self, a, b):
        return 0.0


class TableKernel:
    """Piecewise-linear kernel through (u_i, v_i); zero past the last knot."""

    monotone = False

    def __init__(self, u, values):
        self.u = np.asarray(u, dtype=float)
        self.v = np.asarray(values, dtype=float)
        if self.u.size < 2 or self.u.shape != self.v.shape or np.any(np.diff(self.u) <= 0):
            raise InvalidParameter("table kernel needs >= 2 increasing knots")
        if self.u[0] != 0 or np.any(self.v < 0):
            raise InvalidParameter("table kernel starts at u = 0 and is nonnegative")
        seg = 0.5 * (self.v[1:] + self.v[:-1]) * np.diff(self.u)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])

    def value(self, u):
        u = np.asarray(u, dtype=float)
        return np.where((u >= 0) & (u <= self.u[-1]), np.interp(u, self.u, self.v), 0.0)

    def _antiderivative(self, x):
        x = min(max(x, 0.0), self.u[-1])
        i = min(int(np.searchsorted(self.u, x, side="right")) - 1, self.u.size - 2)
        h = x - self.u[i]
        slope = (self.v[i + 1] - self.v[i]) / (self.u[i + 1] - self.u[i])
        return self._cum[i] + self.v[i] * h + 0.5 * slope * h * h

    def integral(self, a, b):
        return self._antiderivative(b) - self._antiderivative(a)

    def window_max(self, a, b):
        a, b = max(a, 0.0), max(b, 0.0)
        inside = self.v[(self.u > a) & (self.u < b)]
        ends = self.value(np.array([a, b]))
        return float(max(ends.max(), inside.max() if inside.size else 0.0))


def make_kernel(cfg) -> ExpKernel | ZeroKernel | TableKernel:
    """Kernel from ``{"kind": "exp"|"zero"|"table", "params": {...}}``."""
    if isinstance(cfg, (ExpKernel, ZeroKernel, TableKernel)):
        return cfg
    kind = cfg.get("kind")
    params = cfg.get("params", {})
    if kind == "exp":
        return ExpKernel(float(params["beta"]), float(params["alpha"]))
    if kind == "zero":
        return ZeroKernel()
    if kind == "table":
        return TableKernel(params["u"], params["values"])
    raise InvalidParameter(f"unknown kernel kind {kind!r}")


def kernel_config(kernel) -> dict:
    if isinstance(kernel, ExpKernel):
        return {"kind": "exp", "params": {"beta": kernel.beta, "alpha": kernel.alpha}}
    if isinstance(kernel, ZeroKernel):
        return {"kind": "zero", "params": {}}
    return {"kind": "table", "params": {"u": kernel.u.tolist(), "values": kernel.v.tolist()}}


@dataclass(frozen=True)
class HawkesParams:
    """lambda_t = lambda0 + psi1 v_r(mu_{t-}) + sum_{s<t} psi2(t - s)."""

    lambda0: float
    psi1: float
    r_trunc: float
    psi2: Any = ZeroKernel()

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise InvalidParameter(f"lambda0 must be positive, got {self.lambda0}")
        if self.psi1 < 0:
            raise InvalidParameter(f"psi1 must be nonnegative, got {self.psi1}")
        if not self.r_trunc > 0:
            raise InvalidParameter(f"r_trunc must be positive, got {self.r_trunc}")
        object.__setattr__(self, "psi2", make_kernel(self.psi2))


class HawkesIntensity(Intensity):
    """Single-channel Hawkes rate with environment feedback through v_r.

    State: ``(t_last, excitation_after_last)`` for exponential kernels (exact
    recursion) and the tuple of past event times otherwise.
    """

    def __init__(self, params: HawkesParams, horizon: float = 1.0, refresh: float | None = None,
                 marks: MarkSpace | None = None):
        self.params = params
        self.marks = (marks if marks is not None else trivial_marks(),)
        self.refresh = refresh if refresh is not None else horizon / 1000.0
        self._exp = isinstance(params.psi2, ExpKernel)
        self._mass = self.marks[0].total_mass

    def initial_state(self):
        return (0.0, 0.0) if self._exp else ()

    def excitation(self, t: float, state) -> float:
        k = self.params.psi2
        if self._exp:
            t_last, acc = state
            return acc * math.exp(-k.alpha * (t - t_last)) if acc else 0.0
        if not state:
            return 0.0
        return float(k.value(t - np.asarray(state)).sum())

    def base(self, measure) -> float:
        p = self.params
        if p.psi1 == 0:
            return p.lambda0
        return p.lambda0 + p.psi1 * truncated_second_moment(measure, p.r_trunc)

    def scalar_rate(self, t, measure, state) -> float:
        return self.base(measure) + self.excitation(t, state)

    def rate(self, t, j, measure, state):
        return np.full(self.marks[0].size, self.scalar_rate(t, measure, state))

    def majorant(self, t, j, state):
        p = self.params
        base = p.lambda0 + p.psi1 * p.r_trunc ** 2
        if p.psi2.monotone:
            return self._mass * (base + self.excitation(t, state)), math.inf
        until = t + self.refresh
        exc = sum(p.psi2.window_max(t - s, until - s) for s in state)
        return self._mass * (base + exc), until

    def integrate(self, t0, t1, j, measure, state):
        h = max(t1 - t0, 0.0)
        k = self.params.psi2
        if self._exp:
            t_last, acc = state
            exc = acc / k.beta * k.integral(t0 - t_last, t1 - t_last) if acc else 0.0
        else:
            exc = sum(k.integral(t0 - s, t1 - s) for s in state)
        return self.marks[0].weights * (self.base(measure) * h + exc)

    def update(self, state, t, j, mark):
        if self._exp:
            return (t, self.excitation(t, state) + self.params.psi2.beta)
        return state + (t,)


def hawkes_intensity(t: float, params: HawkesParams, env: MeasureFlow | None,
                     history: MarkedEventLog | Sequence[float]) -> float:
    """Direct evaluation of the Hawkes rate at t from the full history."""
    times = history.times if isinstance(history, MarkedEventLog) else np.asarray(history, dtype=float)
    times = times[times < t]
    rate = params.lambda0 + float(params.psi2.value(t - times).sum()) if times.size else params.lambda0
    if params.psi1:
        rate += params.psi1 * truncated_second_moment(env.left(t), params.r_trunc)
    return rate


def hawkes_lipschitz_ratio(params: HawkesParams, n_pairs: int = 200, atoms: int = 50,
                           seed: int = 0) -> tuple[float, float]:
    """Largest observed |lambda(nu1) - lambda(nu2)| / W2(nu1, nu2) and the bound 2 psi1 r."""
    gen = stream(seed, "lipschitz")
    worst = 0.0
    for _ in range(n_pairs):
        scale = gen.uniform(0.1, 3.0, size=2)
        nu1 = EmpiricalMeasure(gen.standard_normal(atoms) * scale[0] + gen.uniform(-1, 1))
        nu2 = EmpiricalMeasure(gen.standard_normal(atoms) * scale[1] + gen.uniform(-1, 1))
        dist = wasserstein2(nu1, nu2)
        if dist > 1e-12:
            diff = params.psi1 * abs(truncated_second_moment(nu1, params.r_trunc)
                                     - truncated_second_moment(nu2, params.r_trunc))
            worst = max(worst, diff / dist)
    return worst, 2.0 * params.psi1 * params.r_trunc


# ---------------------------------------------------------------------------
# thinning


class ThinningSampler:
    """Ogata thinning across channels, advanced interval by interval.

    Each call to :meth:`advance` holds the environment measure fixed; this is
    how mu_{t-} enters on a piecewise-constant flow.
    """

    def __init__(self, intensity: Intensity, seed: int, start: float = 0.0):
        self.intensity = intensity
        l = intensity.n_channels
        self._times = [stream(seed, "thinning", "times", j) for j in range(l)]
        self._accept = [stream(seed, "thinning", "accept", j) for j in range(l)]
        self._marks = [stream(seed, "thinning", "marks", j) for j in range(l)]
        self.t = float(start)
        self.state = intensity.initial_state()
        self.events: list[Event] = []

    def _candidate(self, j: int, t_end: float) -> tuple[float, float]:
        t = self.t
        while True:
            bound, until = self.intensity.majorant(t, j, self.state)
            window = min(until, t_end)
            if bound > 0:
                cand = t + self._times[j].exponential(1.0 / bound)
                if cand <= window:
                    return cand, bound
            if window >= t_end:
                return math.inf, bound
            t = window

    def advance(self, t_end: float, measure) -> list[Event]:
        new: list[Event] = []
        if t_end <= self.t:
            return new
        intensity = self.intensity
        while True:
            best, best_j, best_bound = math.inf, -1, 0.0
            for j in range(intensity.n_channels):
                cand, bound = self._candidate(j, t_end)
                if cand < best:
                    best, best_j, best_bound = cand, j, bound
            if best_j < 0:
                self.t = t_end
                return new
            self.t = best
            kern = intensity.kernel(best, best_j, measure, self.state)
            total = float(kern.sum())
            if total > best_bound * (1 + 1e-12) + 1e-300:
                raise SimulationFault(
                    f"intensity {total!r} exceeds majorant {best_bound!r} at t = {best!r}",
                    time=best, rate=total, bound=best_bound)
            if self._accept[best_j].random() * best_bound <= total and total > 0:
                space = intensity.marks[best_j]
                mark = space.sample(kern, self._marks[best_j].random()) if space.size > 1 else float(space.nodes[0])
                event = Event(best, mark, best_j + 1)
                self.state = intensity.update(self.state, best, best_j, mark)
                self.events.append(event)
                new.append(event)

    def log(self, horizon: float | None = None) -> MarkedEventLog:
        return MarkedEventLog.from_events(self.events, self.t if horizon is None else horizon,
                                          self.intensity.n_channels)


def _env_pieces(env: MeasureFlow | None, t_end: float):
    """(a, b, mu_{s-}) for s in (a, b], covering (0, t_end]."""
    if env is None:
        yield 0.0, t_end, None
        return
    grid = env.grid
    for k in range(grid.size):
        a = grid[k]
        if a >= t_end:
            return
        b = grid[k + 1] if k + 1 < grid.size else t_end
        yield a, min(b, t_end), env.values[k]


def simulate_marked_process(spec: Intensity, env: MeasureFlow | None, horizon: float, seed: int) -> MarkedEventLog:
    """One realisation on [0, horizon] with the environment held at mu_{t-}."""
    sampler = ThinningSampler(spec, seed)
    for a, b, measure in _env_pieces(env, horizon):
        sampler.advance(b, measure)
    return sampler.log(horizon)


def _integrate_piecewise(intensity: Intensity, t0: float, t1: float, j: int, measure, state) -> np.ndarray:
    cuts = [b for b in intensity.breakpoints if t0 < b < t1]
    pts = [t0, *cuts, t1]
    acc = np.zeros(intensity.marks[j].size)
    for a, b in zip(pts[:-1], pts[1:]):
        acc += intensity.integrate(a, b, j, measure, state)
    return acc


def _replay(intensity: Intensity, env: MeasureFlow | None, log: MarkedEventLog, t_end: float):
    """Yield (a, b, measure, state, events_at_b) over event-free stretches of (0, t_end]."""
    state = intensity.initial_state()
    for a, b, measure in _env_pieces(env, t_end):
        t = a
        events = log.between(a, b)
        i = 0
        while i < len(events):
            tau = events[i].time
            group = [e for e in events[i:] if e.time == tau]
            yield t, tau, measure, state, group
            for e in group:
                state = intensity.update(state, e.time, e.channel - 1, e.mark)
            t = tau
            i += len(group)
        if t < b:
            yield t, b, measure, state, []


def compensator(spec: Intensity, env: MeasureFlow | None, log: MarkedEventLog, t: float) -> np.ndarray:
    """Lambda^(j)(t) = int_0^t K_s^(j)(R) ds for every channel."""
    out = np.zeros(spec.n_channels)
    if t <= 0:
        return out
    for a, b, measure, state, _ in _replay(spec, env, log, t):
        for j in range(spec.n_channels):
            out[j] += _integrate_piecewise(spec, a, b, j, measure, state).sum()
    return out


def transformed_times(log: MarkedEventLog, spec: Intensity, env: MeasureFlow | None):
    """Compensator values at the event times per channel, and the compensator at the horizon."""
    l = spec.n_channels
    running = np.zeros(l)
    out: list[list[float]] = [[] for _ in range(l)]
    for a, b, measure, state, events in _replay(spec, env, log, log.horizon):
        for j in range(l):
            running[j] += _integrate_piecewise(spec, a, b, j, measure, state).sum()
        for e in events:
            out[e.channel - 1].append(running[e.channel - 1])
    return [np.array(r) for r in out], running.copy()


def time_change_residuals(log: MarkedEventLog, spec: Intensity, env: MeasureFlow | None) -> list[np.ndarray]:
    """Compensator increments between consecutive events (the first from time 0), per channel."""
    times, _ = transformed_times(log, spec, env)
    return [np.diff(t, prepend=0.0) for t in times]


def pooled_residuals(logs: Sequence[MarkedEventLog], spec: Intensity, env: MeasureFlow | None) -> list[np.ndarray]:
    """Residuals of independent paths laid end to end in compensator time.

    Per-path gaps alone are biased on short horizons (the censored last gap is
    dropped); concatenating the transformed times gives one unit-rate process.
    """
    offset = np.zeros(spec.n_channels)
    pooled: list[list[np.ndarray]] = [[] for _ in range(spec.n_channels)]
    for log in logs:
        times, total = transformed_times(log, spec, env)
        for j, t in enumerate(times):
            pooled[j].append(t + offset[j])
        offset += total
    return [np.diff(np.concatenate(p), prepend=0.0) if p else np.zeros(0) for p in pooled]


# ---------------------------------------------------------------------------
# step-wise drivers for particle simulation


@dataclass(frozen=True)
class Segment:
    """Event-free stretch (t0, t1] followed by ``events`` at t1."""

    t0: float
    t1: float
    mass: tuple  # per channel, int K_s(node) ds over the stretch
    regime: Any
    events: tuple


@dataclass(frozen=True)
class StepNoise:
    kernel: tuple  # per channel K_{t_k}(node), after events at t_k
    regime: Any
    segments: tuple


def _build_step(intensity: Intensity, state, t0: float, t1: float, measure, events: Sequence[Event]):
    l = intensity.n_channels
    kernel0 = tuple(intensity.kernel(t0, j, measure, state) for j in range(l))
    regime0 = intensity.regime(state)
    segments = []
    t = t0
    i = 0
    while i < len(events):
        tau = events[i].time
        group = tuple(e for e in events[i:] if e.time == tau)
        mass = tuple(_integrate_piecewise(intensity, t, tau, j, measure, state) for j in range(l))
        segments.append(Segment(t, tau, mass, intensity.regime(state), group))
        for e in group:
            state = intensity.update(state, e.time, e.channel - 1, e.mark)
        t = tau
        i += len(group)
    if t < t1 or not segments:
        mass = tuple(_integrate_piecewise(intensity, t, t1, j, measure, state) for j in range(l))
        segments.append(Segment(t, t1, mass, intensity.regime(state), ()))
    return StepNoise(kernel0, regime0, tuple(segments)), state


class ClosedLoopNoise:
    """Common noise generated on the fly from the ensemble's own measure."""

    def __init__(self, intensity: Intensity, seed: int):
        self.intensity = intensity
        self.sampler = ThinningSampler(intensity, seed)

    def step(self, t0: float, t1: float, measure) -> StepNoise:
        if abs(self.sampler.t - t0) > 1e-12:
            raise InvalidInput(f"noise driver is at t = {self.sampler.t}, asked to step from {t0}")
        state = self.sampler.state
        events = self.sampler.advance(t1, measure)
        step, _ = _build_step(self.intensity, state, t0, t1, measure, events)
        return step

    def current(self, t: float, measure) -> tuple[tuple, Any]:
        state = self.sampler.state
        l = self.intensity.n_channels
        return tuple(self.intensity.kernel(t, j, measure, state) for j in range(l)), self.intensity.regime(state)

    def log(self, horizon: float) -> MarkedEventLog:
        return self.sampler.log(horizon)


class FrozenLogNoise:
    """Replays a given event log; the measure only enters the kernel values."""

    def __init__(self, intensity: Intensity, log: MarkedEventLog):
        if log.n_channels != intensity.n_channels:
            raise InvalidInput("log and intensity disagree on the number of channels")
        self.intensity = intensity
        self._log = log
        self.state = intensity.initial_state()
        self.t = 0.0

    def step(self, t0: float, t1: float, measure) -> StepNoise:
        if abs(self.t - t0) > 1e-12:
            raise InvalidInput(f"noise driver is at t = {self.t}, asked to step from {t0}")
        events = self._log.between(t0, t1)
        step, self.state = _build_step(self.intensity, self.state, t0, t1, measure, events)
        self.t = t1
        return step

    def current(self, t: float, measure) -> tuple[tuple, Any]:
        l = self.intensity.n_channels
        return tuple(self.intensity.kernel(t, j, measure, self.state) for j in range(l)), self.intensity.regime(self.state)

    def log(self, horizon: float) -> MarkedEventLog:
        return self._log
