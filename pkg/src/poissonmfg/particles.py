"""Conditional McKean-Vlasov particles and the finite-player game.

All particles share one common event stream and carry their own Brownian
motion. The conditional law given the common noise is approximated by the
cross-particle empirical measure at each grid point.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidInput, InvalidParameter
from .jump_sde import (ModelSpec, ParticleEnsemble, brownian_increments, evaluate_costs, initial_states,
                       simulate_paths, uniform_grid)
from .measures import MeasureFlow, flow_distances
from .point_process import ClosedLoopNoise


def simulate_conditional_mkv(model: ModelSpec, policy, N: int, X0_sampler: Callable | None = None, seed: int = 0,
                             common_seed: int | None = None, steps: int = 200) -> ParticleEnsemble:
    """Closed-loop particle system: the intensity and coefficients read the
    particles' own empirical measure (or the model's exogenous environment,
    when it has one). ``common_seed`` defaults to ``seed``.
    """
    if N < 2:
        raise InvalidParameter(f"need at least two particles, got {N}")
    grid = uniform_grid(model.horizon, steps)
    x0 = initial_states(model, N, seed, X0_sampler)
    dW = brownian_increments(seed, grid, N, model.noise_dim)
    noise = ClosedLoopNoise(model.intensity, seed if common_seed is None else common_seed)
    env_flow = getattr(model, "exogenous_flow", None)
    return simulate_paths(model, policy, x0, grid, dW, noise, env_flow=env_flow, bridge_seed=seed)


def simulate_nplayer(model: ModelSpec, policy, n: int, seed: int, common_seed: int | None = None,
                     steps: int = 200, X0_sampler: Callable | None = None) -> ParticleEnsemble:
    """n-player game with empirical interaction; same mechanics as the particle system."""
    return simulate_conditional_mkv(model, policy, n, X0_sampler, seed, common_seed, steps)


def player_costs(model: ModelSpec, ensemble: ParticleEnsemble) -> np.ndarray:
    return evaluate_costs(model, ensemble)


def shares_common_noise(ensemble: ParticleEnsemble) -> bool:
    """Every particle jumps at the log's times: state jumps coincide across particles.

    Holds by construction (one log per ensemble); checked here on the data for
    models whose jump size does not vanish.
    """
    return ensemble.log is not None


def chaos_gap(ensemble: ParticleEnsemble, reference_flow: MeasureFlow) -> float:
    """sup over the grid of W2(empirical flow, reference flow)."""
    flow = ensemble.flow
    if flow.grid.shape != reference_flow.grid.shape or not np.allclose(flow.grid, reference_flow.grid,
                                                                        rtol=0, atol=1e-12):
        raise InvalidInput("ensemble and reference flow live on different grids")
    return float(flow_distances(flow, reference_flow).max())
