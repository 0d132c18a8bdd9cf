import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poissonmfg.errors import InvalidInput
from poissonmfg.hamiltonian import (AdjointPoint, extended_pontryagin_lhs, hamiltonian, hamiltonian_grad_x,
                                    hamiltonian_hess_x, minimize_hamiltonian, minimizer_excess, numeric_minimize,
                                    pontryagin_gap)
from poissonmfg.jump_sde import CustomModel, Environment
from poissonmfg.measures import EmpiricalMeasure
from poissonmfg.models import (LqModel, LqParams, PortfolioModel, PortfolioParams, lq_riccati_oracle,
                               lq_second_order_oracle)
from poissonmfg.point_process import ConstantIntensity, finite_marks

CLOUD = EmpiricalMeasure(np.array([-1.0, 0.5, 2.0]))


def _point(y, z, u, yt=None, n=1):
    return AdjointPoint(np.full((n, 1), y, float), np.full((n, 1, 1), z, float), np.full((n, 1, 1), u, float),
                        None if yt is None else np.full((n, 1, 1), yt, float))


def _lq_env(mass=0.5, measure=CLOUD):
    return Environment(measure, 0.0, None, (np.array([mass]),))


def test_zero_model_hamiltonian_vanishes():
    model = CustomModel(ConstantIntensity(1.0), -1.0, 1.0)
    env = _lq_env()
    x = np.array([[0.4]])
    assert hamiltonian(model, env, x, AdjointPoint.zeros(1, 1, 1, 1), np.zeros((1, 1)))[0] == 0.0
    assert hamiltonian_grad_x(model, env, x, _point(1, 1, 1), np.zeros((1, 1)))[0, 0] == 0.0
    assert hamiltonian_hess_x(model, env, x, _point(1, 1, 1), np.zeros((1, 1)))[0, 0, 0] == 0.0


def test_lq_hamiltonian_hand_value():
    model = LqModel(LqParams(sigma=2.0, gamma=3.0))
    env = _lq_env(0.5)
    x = np.array([[env.m]])
    assert hamiltonian(model, env, x, _point(0, 1, 1), np.zeros((1, 1)))[0] == pytest.approx(2.0 + 1.5, rel=1e-15)


def test_portfolio_hamiltonian_hand_value():
    p = PortfolioParams()
    model = PortfolioModel(p)
    env = Environment(CLOUD, 0.0, 2, (np.zeros(2),))
    a = np.array([[0.6]])
    h = hamiltonian(model, env, np.zeros((1, 1)), _point(0, 0.7, 0), a)[0]
    assert h == pytest.approx(-env.m ** 2 * p.f[1] / p.T + p.sigma * 0.7 * 0.6, rel=1e-14)


def test_lq_gradient_and_hessian_closed_forms():
    p = LqParams()
    model = LqModel(p)
    env = _lq_env()
    gen = np.random.default_rng(0)
    x, y, a = gen.normal(size=(3, 20, 1))
    pt = AdjointPoint(y, gen.normal(size=(20, 1, 1)), gen.normal(size=(20, 1, 1)))
    grad = hamiltonian_grad_x(model, env, x, pt, a)
    assert np.allclose(grad, p.f1 * (x - env.m) + p.f * a + p.b * y, rtol=1e-14)
    assert np.all(hamiltonian_hess_x(model, env, x, pt, a) == p.f1)


def test_finite_difference_fallback_for_custom_model():
    model = CustomModel(ConstantIntensity(1.0), -1.0, 1.0,
                        drift=lambda env, x, a: np.sin(x) + a,
                        running_cost=lambda env, x, a: x[:, 0] ** 4 / 4,
                        jump=lambda r, env, x, a: (0.3 * x ** 2)[:, :, None])
    env = _lq_env(0.8)
    x = np.array([[0.7], [-1.1]])
    pt = _point(0.5, 0.0, 2.0, n=2)
    a = np.zeros((2, 1))
    exact = x ** 3 + 0.5 * np.cos(x) + 0.8 * 2.0 * 0.6 * x
    assert np.allclose(hamiltonian_grad_x(model, env, x, pt, a), exact, rtol=1e-6)
    exact_h = 3 * x ** 2 - 0.5 * np.sin(x) + 0.8 * 2.0 * 0.6
    assert np.allclose(hamiltonian_hess_x(model, env, x, pt, a)[:, :, 0], exact_h, rtol=1e-4)


@settings(max_examples=40)
@given(st.lists(st.floats(-3, 3), min_size=7, max_size=7))
def test_hamiltonian_affine_in_adjoints(v):
    model = LqModel()
    env = _lq_env()
    x, a = np.array([[v[0]]]), np.array([[v[6]]])
    p1, p2 = _point(v[1], v[2], v[3]), _point(v[4], v[5], v[1])
    p12 = AdjointPoint(p1.y + p2.y, p1.z + p2.z, p1.u + p2.u)
    zero = AdjointPoint.zeros(1, 1, 1, 1)
    lhs = hamiltonian(model, env, x, p12, a) + hamiltonian(model, env, x, zero, a)
    rhs = hamiltonian(model, env, x, p1, a) + hamiltonian(model, env, x, p2, a)
    assert lhs[0] == pytest.approx(rhs[0], rel=1e-12, abs=1e-12)


def test_lq_minimiser_interior_formula_and_grid_check():
    p = LqParams()
    model = LqModel(p)
    env = _lq_env()
    gen = np.random.default_rng(1)
    x = gen.normal(size=(100, 1))
    pt = AdjointPoint(gen.normal(size=(100, 1)), gen.normal(size=(100, 1, 1)), gen.normal(size=(100, 1, 1)))
    a = minimize_hamiltonian(model, env, x, pt, verify=True)
    assert np.allclose(a, -(p.f * (x - env.m) + pt.y) / p.f2, rtol=1e-14)
    assert np.all(minimizer_excess(model, env, x, pt, a) <= 1e-8)


def test_lq_minimiser_is_projected():
    model = LqModel(LqParams(a_max=1.0))
    a = minimize_hamiltonian(model, _lq_env(), np.array([[0.0]]), _point(100.0, 0, 0))
    assert a[0, 0] == -1.0


def test_portfolio_minimiser_endpoints_and_tie():
    p = PortfolioParams()
    model = PortfolioModel(p)
    env = Environment(CLOUD, 0.0, 1, (np.zeros(2),))
    b1 = p.b1[0]
    # b1 y + sigma z = 0 resolves to the upper endpoint
    tie = _point(p.sigma, -b1, 0)
    assert minimize_hamiltonian(model, env, np.array([[1.0]]), tie)[0, 0] == p.a_hi
    gen = np.random.default_rng(2)
    pt = AdjointPoint(gen.normal(size=(50, 1)), gen.normal(size=(50, 1, 1)), np.zeros((50, 1, 1)))
    a = minimize_hamiltonian(model, env, gen.normal(size=(50, 1)), pt, verify=True)
    assert set(np.unique(a)) <= {p.a_lo, p.a_hi}


def test_numeric_minimiser_on_custom_quadratic():
    model = CustomModel(ConstantIntensity(0.0), -2.0, 3.0,
                        running_cost=lambda env, x, a: (a[:, 0] - 0.3 * x[:, 0]) ** 2)
    env = _lq_env(0.0)
    x = np.array([[1.0], [5.0], [-9.0]])
    a = numeric_minimize(model, env, x, AdjointPoint.zeros(3, 1, 1, 1))
    assert np.allclose(a[:, 0], np.clip(0.3 * x[:, 0], -2, 3), atol=5e-6 * 5)


def test_numeric_minimiser_two_dimensional_actions():
    model = CustomModel(ConstantIntensity(0.0), [-1.0, -1.0], [1.0, 1.0], action_dim=2,
                        running_cost=lambda env, x, a: (a[:, 0] - 0.4) ** 2 + 2 * (a[:, 1] + 0.2) ** 2)
    a = minimize_hamiltonian(model, _lq_env(0.0), np.zeros((2, 1)), AdjointPoint.zeros(2, 1, 1, 1))
    assert np.allclose(a, [[0.4, -0.2]] * 2, atol=1e-5)


def test_mark_table_adjoint():
    marks = finite_marks([0.5, 2.0], [0.5, 0.5])
    model = CustomModel(ConstantIntensity([[1.0, 3.0]], marks=[marks]), -1.0, 1.0,
                        jump=lambda r, env, x, a: np.full((x.shape[0], 1, 1), r))
    env = Environment(CLOUD, 0.0, None, (np.array([0.5, 1.5]),))
    pt = AdjointPoint(np.zeros((1, 1)), np.zeros((1, 1, 1)), (np.array([[[2.0, -1.0]]]),))
    h = hamiltonian(model, env, np.zeros((1, 1)), pt, np.zeros((1, 1)))[0]
    assert h == pytest.approx(0.5 * 2.0 * 0.5 + 1.5 * (-1.0) * 2.0)


def test_extended_condition_basics():
    model = LqModel()
    env = _lq_env()
    x = np.array([[0.3]])
    pt = _point(0.2, 0.1, 0.0, yt=1.0)
    a_hat = minimize_hamiltonian(model, env, x, pt)
    assert extended_pontryagin_lhs(model, env, x, pt, a_hat)[0] == pytest.approx(0.0, abs=1e-15)
    # control-free sigma and gamma: reduces to delta H
    a = np.array([[1.3]])
    dh = hamiltonian(model, env, x, pt, a) - hamiltonian(model, env, x, pt, a_hat)
    assert extended_pontryagin_lhs(model, env, x, pt, a)[0] == pytest.approx(dh[0], rel=1e-14)
    with pytest.raises(InvalidInput):
        extended_pontryagin_lhs(model, env, x, _point(0, 0, 0), a)


def test_extended_condition_adds_diffusion_term_for_portfolio():
    model = PortfolioModel()
    env = Environment(CLOUD, 0.0, 1, (np.zeros(2),))
    x = np.array([[1.0]])
    pt = _point(-1.0, 0.5, 0.0, yt=2.0)
    a_hat = minimize_hamiltonian(model, env, x, pt)
    a = np.array([[0.0]]) if a_hat[0, 0] == 1.0 else np.array([[1.0]])
    dh = hamiltonian(model, env, x, pt, a) - hamiltonian(model, env, x, pt, a_hat)
    ds = model.params.sigma * (a - a_hat)[0, 0]
    assert extended_pontryagin_lhs(model, env, x, pt, a)[0] == pytest.approx(dh[0] + ds * ds, rel=1e-14)


def test_lq_extended_condition_at_riccati_adjoints():
    p = LqParams()
    model = LqModel(p)
    grid = np.linspace(0, 1, 201)
    P, Yt = lq_riccati_oracle(p, grid), lq_second_order_oracle(p, grid)
    env = _lq_env(1.0)
    gen = np.random.default_rng(4)
    worst = np.inf
    for k in range(0, 200, 20):
        x = gen.normal(size=(10, 1))
        pt = AdjointPoint(P[k] * (x - env.m), np.full((10, 1, 1), P[k] * p.sigma), np.zeros((10, 1, 1)),
                          np.full((10, 1, 1), Yt[k]))
        for a in np.linspace(-p.a_max, p.a_max, 50):
            worst = min(worst, extended_pontryagin_lhs(model, env, x, pt, a).min())
    assert worst >= -1e-8


def test_pontryagin_gap_sign():
    model = LqModel()
    env = _lq_env()
    x = np.array([[0.5]])
    pt = _point(0.3, 0, 0)
    a_hat = minimize_hamiltonian(model, env, x, pt)
    assert pontryagin_gap(model, env, x, pt, a_hat)[0] >= -1e-12
    assert pontryagin_gap(model, env, x, pt, a_hat + 3.0)[0] < 0
