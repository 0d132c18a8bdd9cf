import numpy as np
import pytest
from scipy import stats

from poissonmfg.errors import InvalidInput, InvalidParameter
from poissonmfg.jump_sde import CustomModel
from poissonmfg.measures import MeasureFlow
from poissonmfg.models import LqModel, lq_equilibrium_policy
from poissonmfg.particles import (chaos_gap, player_costs, shares_common_noise, simulate_conditional_mkv,
                                  simulate_nplayer)
from poissonmfg.point_process import ConstantIntensity, compensator
from poissonmfg.policies import ConstantPolicy

GRID = np.linspace(0, 1, 201)


def _lq(N, seed, common_seed=None):
    model = LqModel()
    return model, simulate_conditional_mkv(model, lq_equilibrium_policy(model.params, GRID), N, seed=seed,
                                           common_seed=common_seed)


def test_zero_model_flow_is_constant():
    model = CustomModel(ConstantIntensity(2.0), -1.0, 1.0, initial=lambda n, g: np.array([[0.0], [1.0]]))
    ens = simulate_conditional_mkv(model, ConstantPolicy(0.0), 2, seed=1, steps=20)
    assert all(np.array_equal(v.atoms, ens.flow.values[0].atoms) for v in ens.flow.values)
    assert shares_common_noise(ens)
    with pytest.raises(InvalidParameter):
        simulate_conditional_mkv(model, ConstantPolicy(0.0), 1, seed=1)


def test_nplayer_matches_particle_system():
    model = LqModel()
    a = simulate_nplayer(model, ConstantPolicy(0.1), 2, seed=5, steps=50)
    b = simulate_conditional_mkv(model, ConstantPolicy(0.1), 2, seed=5, steps=50)
    assert a.states.tobytes() == b.states.tobytes() and a.log.times.tobytes() == b.log.times.tobytes()


def test_lq_mean_moves_only_with_noise_and_jumps():
    model, ens = _lq(500, seed=2, common_seed=39)
    p = model.params
    m = ens.states[..., 0].mean(axis=1)
    # the jump term is compensated: gamma (dN - lambda dt)
    comp = compensator(model.intensity, ens.env_flow, ens.log, 1.0)[0]
    expected = m[0] + p.sigma * ens.dW[..., 0].mean(axis=1).sum() + p.gamma * (len(ens.log) - comp)
    assert m[-1] == pytest.approx(expected, abs=1e-10)


def test_common_seed_controls_the_log():
    _, a = _lq(200, seed=3, common_seed=39)
    _, b = _lq(300, seed=4, common_seed=39)
    assert len(a.log) > 0
    assert np.array_equal(a.log.times, b.log.times)
    _, c = _lq(200, seed=3, common_seed=38)
    assert not np.array_equal(a.log.times, c.log.times)


def test_flow_is_the_cross_section():
    _, ens = _lq(100, seed=6)
    for k in (0, 50, 200):
        assert np.array_equal(ens.flow.values[k].atoms, ens.states[k])
    assert ens.envs[10].m == pytest.approx(ens.states[10, :, 0].mean())


def test_exchangeable_and_decoupled():
    model, ens = _lq(4000, seed=7)
    xT = ens.states[-1, :, 0]
    assert stats.ks_2samp(xT[:2000], xT[2000:]).pvalue > 0.01
    assert abs(np.corrcoef(xT[0::2], xT[1::2])[0, 1]) < 4 / np.sqrt(2000)
    costs = player_costs(model, ens)
    assert costs.shape == (4000,)
    assert stats.ks_2samp(costs[:2000], costs[2000:]).pvalue > 0.01


def test_chaos_gap_properties():
    _, ens = _lq(300, seed=8)
    assert chaos_gap(ens, ens.flow) == 0.0
    shifted = MeasureFlow(ens.grid, tuple(type(v)(v.atoms + 0.25) for v in ens.flow.values))
    assert chaos_gap(ens, shifted) == pytest.approx(0.25, rel=1e-9)
    with pytest.raises(InvalidInput):
        chaos_gap(ens, MeasureFlow(ens.grid[::2], ens.flow.values[::2]))
