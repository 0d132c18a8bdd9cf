"""Mean-field equilibrium by Picard iteration on the measure flow, plus audits.

Each Picard step freezes the flow, draws the common event log from the
intensity evaluated on that flow, improves the feedback policy by a
forward/backward sweep (simulate, regress the adjoints, minimise the
Hamiltonian pointwise) and re-simulates. Initial states and Brownian
increments are common random numbers across iterations, so the flows of
successive iterations are index-aligned particle clouds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import (MonotonicityReport, RegressionFit, check_g_monotonicity, solve_first_order_adjoint,
                      solve_second_order_adjoint)
from .errors import InvalidInput, InvalidParameter
from .hamiltonian import AdjointPoint, action_grid, extended_pontryagin_lhs, minimize_hamiltonian, pontryagin_gap
from .jump_sde import (ModelSpec, ParticleEnsemble, brownian_increments, evaluate_costs, initial_states,
                       simulate_paths, uniform_grid)
from .measures import EmpiricalMeasure, MeasureFlow, eighth_moment, sup_w2
from .point_process import FrozenLogNoise, MarkedEventLog, simulate_marked_process
from .policies import ConstantPolicy, Policy, SpikedPolicy, grid_index
from .rng import child_seed, stream

MOMENT_CAP = 1e8


class FeedbackPolicy(Policy):
    """a(t, mean, x) = argmin_a H at the regressed adjoints (Y, Z, U)(t, x; mean).

    The measure enters only through its mean, which recentres the basis.
    """

    def __init__(self, model: ModelSpec, fit: RegressionFit):
        self.model = model
        self.fit = fit

    def point(self, k: int, env, x) -> AdjointPoint:
        n, d = x.shape
        m = self.model
        center = env.mean
        y = self.fit.evaluate("Y", k, x, center).reshape(n, d)
        z = self.fit.evaluate("Z", k, x, center).reshape(n, d, m.noise_dim)
        u = self.fit.evaluate("U", k, x, center).reshape(n, d, m.n_channels)
        return AdjointPoint(y, z, u)

    def __call__(self, t, env, x):
        k = grid_index(self.fit.grid, t)
        return minimize_hamiltonian(self.model, env, x, self.point(k, env, x))

    def describe(self) -> dict:
        return {"kind": "feedback", "fit": self.fit.to_dict()}


def affine_summary(ensemble: ParticleEnsemble) -> dict | None:
    """Per-step least-squares a ~ c1 (x - mean) + c2 for scalar state and action."""
    if ensemble.states.shape[2] != 1 or ensemble.actions.shape[2] != 1:
        return None
    c1, c2 = [], []
    for k in range(ensemble.grid.size):
        x = ensemble.states[k, :, 0]
        a = ensemble.actions[k, :, 0]
        dx = x - ensemble.envs[k].m
        B = np.column_stack([dx, np.ones_like(dx)])
        coef = np.linalg.lstsq(B, a, rcond=None)[0]
        c1.append(float(coef[0]))
        c2.append(float(coef[1]))
    return {"grid": ensemble.grid.tolist(), "c1": c1, "c2": c2}


@dataclass(eq=False)
class _Setup:
    """Common random numbers shared by every forward simulation of a run."""

    model: ModelSpec
    grid: np.ndarray
    x0: np.ndarray
    dW: np.ndarray
    seed: int
    common_seed: int
    degree: int

    @classmethod
    def build(cls, model, N, steps, seed, degree=None, common_seed=None):
        grid = uniform_grid(model.horizon, steps)
        x0 = initial_states(model, N, seed)
        dW = brownian_increments(seed, grid, N, model.noise_dim)
        common = child_seed(seed, "common") if common_seed is None else common_seed
        return cls(model, grid, x0, dW, seed, common, model.regression_degree if degree is None else degree)

    def environment(self, flow: MeasureFlow) -> MeasureFlow:
        exo = getattr(self.model, "exogenous_flow", None)
        return flow if exo is None else exo

    def common_log(self, flow: MeasureFlow) -> MarkedEventLog:
        return simulate_marked_process(self.model.intensity, self.environment(flow), self.model.horizon,
                                       self.common_seed)

    def forward(self, policy, flow: MeasureFlow, log: MarkedEventLog | None = None) -> ParticleEnsemble:
        env = self.environment(flow)
        log = self.common_log(flow) if log is None else log
        noise = FrozenLogNoise(self.model.intensity, log)
        return simulate_paths(self.model, policy, self.x0, self.grid, self.dW, noise, env_flow=env,
                              bridge_seed=self.seed)

    def improve(self, policy, flow: MeasureFlow, sweeps: int):
        """Best-response sweeps against a frozen flow; returns (policy, ensemble)."""
        log = self.common_log(flow)
        ens = self.forward(policy, flow, log)
        for _ in range(sweeps):
            adj = solve_first_order_adjoint(self.model, ens, self.degree)
            policy = FeedbackPolicy(self.model, adj.fit)
            ens = self.forward(policy, flow, log)
        return policy, ens


def damped_flow(old: MeasureFlow, new: MeasureFlow, damping: float, gen: np.random.Generator) -> MeasureFlow:
    """Replace ceil(damping N) index-aligned particles of ``old`` by those of ``new``."""
    n = old.values[0].size
    take = gen.permutation(n)[:math.ceil(damping * n)]
    values = []
    for a, b in zip(old.values, new.values):
        atoms = np.array(a.atoms)
        atoms[take] = b.atoms[take]
        values.append(EmpiricalMeasure(atoms))
    return MeasureFlow(old.grid, tuple(values))


@dataclass(eq=False)
class MfgEquilibriumReport:
    flow: MeasureFlow
    policy: Policy
    policy_params: dict
    picard_gaps: list
    converged: bool
    cost_at_equilibrium: float
    cost_std: float
    pontryagin_worst_gap: float
    extended_worst_gap: float | None
    moment8_sup: float
    monotonicity: MonotonicityReport | None
    settings: dict
    log: MarkedEventLog
    warnings: list = field(default_factory=list)
    spike_audit: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "picard_gaps": list(self.picard_gaps),
            "iterations_run": len(self.picard_gaps),
            "cost_at_equilibrium": self.cost_at_equilibrium,
            "cost_std": self.cost_std,
            "pontryagin_worst_gap": self.pontryagin_worst_gap,
            "extended_worst_gap": self.extended_worst_gap,
            "moment8_sup": self.moment8_sup,
            "monotonicity": None if self.monotonicity is None else self.monotonicity.to_dict(),
            "common_events": len(self.log.times),
            "settings": dict(self.settings),
            "warnings": list(self.warnings),
            "spike_audit": list(self.spike_audit),
            "policy_params": self.policy_params,
        }

    @classmethod
    def from_dict(cls, model: ModelSpec, data: dict, flow: MeasureFlow) -> "MfgEquilibriumReport":
        """Rebuild a report (policy included) from its JSON form and its flow."""
        fit = RegressionFit.from_dict(data["policy_params"]["fit"])
        settings = data["settings"]
        setup = _Setup.build(model, settings["N"], settings["steps"], settings["seed"], settings["degree"],
                             settings["common_seed"])
        mono = data.get("monotonicity")
        return cls(flow, FeedbackPolicy(model, fit), data["policy_params"], data["picard_gaps"], data["converged"],
                   data["cost_at_equilibrium"], data["cost_std"], data["pontryagin_worst_gap"],
                   data["extended_worst_gap"], data["moment8_sup"],
                   None if mono is None else MonotonicityReport(**mono), settings, setup.common_log(flow),
                   data.get("warnings", []), data.get("spike_audit", []))


def _pontryagin_audit(model: ModelSpec, policy: FeedbackPolicy, ens: ParticleEnsemble, n_points: int,
                      gen: np.random.Generator, second=None) -> tuple[float, float | None]:
    """Worst grid gap min_a H(a) - H(a_hat) (and the extended lhs) at random (particle, step) pairs."""
    K, N = ens.K, ens.N
    steps = gen.integers(0, K, n_points)
    parts = gen.integers(0, N, n_points)
    grid = action_grid(model, 50)
    worst, worst_ext = np.inf, None
    for k in np.unique(steps):
        idx = parts[steps == k]
        env, x = ens.envs[k], ens.states[k, idx]
        p = policy.point(int(k), env, x)
        a_hat = ens.actions[k, idx]
        worst = min(worst, float(pontryagin_gap(model, env, x, p, a_hat).min()))
        if second is not None:
            pt = AdjointPoint(p.y, p.z, p.u, second.Yt[k, idx])
            ext = min(float(extended_pontryagin_lhs(model, env, x, pt, g, a_hat).min()) for g in grid)
            worst_ext = ext if worst_ext is None else min(worst_ext, ext)
    return worst, worst_ext


def solve_mfg(model: ModelSpec, N: int = 2000, iterations: int = 20, damping: float = 1.0,
              tolerance: float = 0.05, seed: int = 0, steps: int = 200, degree: int | None = None,
              inner_sweeps: int = 1, monotonicity_samples: int = 10_000,
              pontryagin_points: int = 200) -> MfgEquilibriumReport:
    """Picard iteration mu -> law of the best response against mu, with damping."""
    if N < 2:
        raise InvalidParameter(f"need at least two particles, got {N}")
    if not 0 < damping <= 1:
        raise InvalidParameter(f"damping must lie in (0, 1], got {damping}")
    if not tolerance > 0 or iterations < 1 or inner_sweeps < 1:
        raise InvalidParameter("need tolerance > 0, iterations >= 1 and inner_sweeps >= 1")
    problems = model.validate()
    if problems:
        raise InvalidParameter("; ".join(problems))
    setup = _Setup.build(model, N, steps, seed, degree)
    flow = MeasureFlow.constant(setup.grid, EmpiricalMeasure(setup.x0))
    policy: Policy = ConstantPolicy(model.project(np.zeros((1, model.action_dim)))[0])
    gaps = []
    mix = stream(seed, "damping")
    for _ in range(iterations):
        policy, ens = setup.improve(policy, flow, inner_sweeps)
        new = damped_flow(flow, ens.flow, damping, mix)
        gaps.append(sup_w2(flow, new))
        flow = new
        if gaps[-1] < tolerance:
            break
    converged = bool(gaps[-1] < tolerance)

    log = setup.common_log(flow)
    ens = setup.forward(policy, flow, log)
    costs = evaluate_costs(model, ens)
    warnings = []
    moment8 = max(eighth_moment(nu) for nu in ens.flow.values)
    if moment8 > MOMENT_CAP:
        warnings.append(f"eighth moment {moment8:.6g} exceeds {MOMENT_CAP:.6g}")
    box = np.isclose(ens.actions, model.action_low) | np.isclose(ens.actions, model.action_high)
    if getattr(model, "interior_minimizer", False) and box.any():
        warnings.append(f"minimiser hit the action bounds at {int(box.sum())} (particle, step) pairs")
    second = None
    if isinstance(policy, FeedbackPolicy) and (model.control_in_diffusion or model.control_in_jump):
        first = solve_first_order_adjoint(model, ens, setup.degree)
        second = solve_second_order_adjoint(model, ens, first, setup.degree)
    if isinstance(policy, FeedbackPolicy):
        gap, ext = _pontryagin_audit(model, policy, ens, pontryagin_points, stream(seed, "pontryagin"), second)
    else:
        gap, ext = float("nan"), None
    mono = None
    if hasattr(model, "coupled_field"):
        mono = check_g_monotonicity(model, monotonicity_samples, child_seed(seed, "monotonicity"))
        if not mono.holds:
            warnings.append("G-monotonicity check failed")
    params = policy.describe()
    aff = affine_summary(ens)
    if aff is not None:
        params["affine"] = aff
    settings = {"N": N, "iterations": iterations, "damping": damping, "tolerance": tolerance, "seed": seed,
                "steps": steps, "degree": setup.degree, "inner_sweeps": inner_sweeps,
                "common_seed": setup.common_seed}
    return MfgEquilibriumReport(flow, policy, params, gaps, converged, float(costs.mean()),
                                float(costs.std(ddof=1) / np.sqrt(N)), gap, ext, float(moment8), mono, settings,
                                log, warnings)


def picard_residual(model: ModelSpec, report: MfgEquilibriumReport) -> float:
    """sup-W2 move of the flow under one further undamped Picard application."""
    s = report.settings
    setup = _Setup.build(model, s["N"], s["steps"], s["seed"], s["degree"], s["common_seed"])
    _, ens = setup.improve(report.policy, report.flow, s["inner_sweeps"])
    return sup_w2(report.flow, ens.flow)


def spike_variation(policy: Policy, interval, alt, horizon: float) -> Policy:
    """``alt`` on [s, e), ``policy`` elsewhere; an empty interval returns ``policy``."""
    s, e = float(interval[0]), float(interval[1])
    if not (0.0 <= s <= e <= horizon):
        raise InvalidInput(f"spike interval [{s}, {e}) is not inside [0, {horizon}]")
    if e == s:
        return policy
    return SpikedPolicy(policy, s, e, alt)


@dataclass(eq=False)
class AuditTable:
    spikes: list
    fraction_significant_negative: float
    pontryagin_worst_gap: float
    extended_worst_gap: float | None

    def to_dict(self) -> dict:
        return {"spikes": self.spikes, "fraction_significant_negative": self.fraction_significant_negative,
                "pontryagin_worst_gap": self.pontryagin_worst_gap, "extended_worst_gap": self.extended_worst_gap}


def optimality_audit(model: ModelSpec, report: MfgEquilibriumReport, n_spikes: int = 50, n_paths: int = 2000,
                     seed: int = 0, eps: float = 0.05, pontryagin_points: int = 200) -> AuditTable:
    """Spike variations on common random numbers against the frozen equilibrium flow.

    Every path is a single deviating player facing the frozen flow; all runs
    reuse the equilibrium event log and the same Brownian increments.
    """
    if not isinstance(report.policy, FeedbackPolicy):
        raise InvalidInput("the audit needs a fitted feedback policy")
    T = model.horizon
    setup = _Setup.build(model, n_paths, report.settings["steps"], seed, report.settings["degree"],
                         report.settings["common_seed"])
    log = setup.common_log(report.flow)
    base = setup.forward(report.policy, report.flow, log)
    j_base = evaluate_costs(model, base)
    gen = stream(seed, "spikes")
    rows = []
    for _ in range(n_spikes):
        s = float(gen.uniform(0.0, T - eps))
        alt = gen.uniform(model.action_low, model.action_high)
        spiked = spike_variation(report.policy, (s, s + eps), alt, T)
        ens = setup.forward(spiked, report.flow, log)
        assert ens.log == base.log and ens.dW is base.dW, "spike run left the common random numbers"
        diff = evaluate_costs(model, ens) - j_base
        rows.append({"start": s, "end": s + eps, "alt": alt.tolist(), "delta_j": float(diff.mean()),
                     "std": float(diff.std(ddof=1) / np.sqrt(n_paths))})
    neg = sum(r["delta_j"] < -2.0 * r["std"] for r in rows)
    second = None
    if model.control_in_diffusion or model.control_in_jump:
        first = solve_first_order_adjoint(model, base, setup.degree)
        second = solve_second_order_adjoint(model, base, first, setup.degree)
    gap, ext = _pontryagin_audit(model, report.policy, base, pontryagin_points, stream(seed, "pontryagin"), second)
    return AuditTable(rows, neg / n_spikes if n_spikes else 0.0, gap, ext)
