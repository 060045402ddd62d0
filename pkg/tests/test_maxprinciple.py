import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from oracles import continuous_riccati_value, discrete_riccati_value, tree_value
from stochctl import core, maxprinciple as mp
from stochctl.errors import ConfigurationError, DomainError, ResourceGuardError, RestrictionError


def quad_problem(U):
    """``a = u``, ``b = 0.3``, ``g = u^2``, ``h = 0``."""
    z = lambda x: 0 * x
    return mp.scalar_problem(
        "quad", 0.2, 1.0,
        a=lambda t, x, u: u + z(x), b=lambda t, x, u: z(x) + 0.3, g=lambda t, x, u: u * u + z(x),
        h=lambda x: z(x), a_x=lambda t, x, u: z(x), b_x=lambda t, x, u: z(x),
        g_x=lambda t, x, u: z(x), h_x=z, h_xx=z, g_xx=lambda t, x, u: z(x), U=U,
    )


@pytest.fixture(scope="module")
def gpaths():
    return core.generate_paths(core.TimeGrid(0.0, 1.0, 100), 10_000, 4)


def test_hamiltonian_examples():
    zero = mp.scalar_problem(
        "zero", 0.0, 1.0, *(lambda t, x, u: 0 * x,) * 3, lambda x: 0 * x,
        *(lambda t, x, u: 0 * x,) * 3, lambda x: 0 * x, lambda x: 0 * x, lambda t, x, u: 0 * x, U=[0.0],
    )
    assert mp.hamiltonian(0.3, 1.2, 0.7, 2.0, -1.0, zero) == 0.0
    p = mp.lq_additive(q=0.0, r=1.0, sigma=1.0)
    assert mp.hamiltonian(0.0, 0.4, 1.0, 2.0, 0.0, p) == pytest.approx(1.5)
    assert mp.hamiltonian(0.0, 0.4, 1.0, 0.0, 0.0, p) == pytest.approx(-0.5)


def test_named_problem_errors():
    with pytest.raises(ConfigurationError):
        mp.named_problem("nope")
    with pytest.raises(ConfigurationError):
        mp.lq_additive(U=[])


def test_riccati_value_matches_independent_integrator():
    assert mp.riccati_lq_value(1.0, 1.0, 1.0, 0.5, 1.0, 1.0) == pytest.approx(
        continuous_riccati_value(1.0, 1.0, 1.0, 0.5, 1.0, 1.0), rel=1e-9)


def test_dp_quadratic_control_cost():
    pol = mp.dp_oracle(quad_problem(np.array([-1.0, -0.5, 0.0, 0.5])), 4)
    assert all(np.all(c == 0.0) for c in pol.controls)
    assert pol.J == pytest.approx(0.0)


@pytest.mark.parametrize("K", [1, 3])
def test_dp_matches_full_tree(K):
    prob = mp.nonlinear_oscillator(U=np.linspace(-1, 1, 5))
    a = lambda t, x, u: -np.sin(x) + u
    b = lambda t, x, u: 0.2 * np.cos(x) + 0.5 * u
    g = lambda t, x, u: 0.5 * (x * x + u * u)
    ref = tree_value(a, b, g, lambda x: 0.5 * x * x, prob.U, 0.5, 1.0, K)
    assert mp.dp_oracle(prob, K).J == pytest.approx(ref, rel=1e-12)


def test_dp_lq_against_riccati():
    K = 10
    prob = mp.lq_additive()
    J = mp.dp_oracle(prob, K).J
    disc = discrete_riccati_value(1.0, 1.0, 1.0, 0.5, 1.0, 1.0, K)
    cont = continuous_riccati_value(1.0, 1.0, 1.0, 0.5, 1.0, 1.0)
    # grid spacing 0.05 costs O(spacing^2); discretisation O(dt)
    assert J == pytest.approx(disc, abs=1e-3)
    assert abs(J - cont) <= 1.0 / K


def test_dp_guards():
    prob = mp.lq_additive()
    with pytest.raises(ResourceGuardError):
        mp.dp_oracle(prob, 13)
    with pytest.raises(ResourceGuardError):
        mp.dp_oracle(mp.lq_multiplicative(U=np.linspace(-3, 3, 601)), 10)


def test_first_adjoint_brownian_case(gpaths):
    sigma = 0.5
    prob = mp.lq_additive(q=0.0, s=1.0, sigma=sigma, x0=0.0)
    cp = mp.simulate(prob, 0.0, gpaths)
    adj = mp.first_adjoint(prob, cp)
    assert np.abs(adj.y[:, :, 0] + sigma * gpaths.W).mean(axis=0).max() <= 0.02
    assert np.abs(adj.Y[:, :-1, 0] + sigma).mean() <= 0.02
    assert adj.terminal_error == 0.0


def test_first_adjoint_zero_costs(gpaths):
    prob = quad_problem(np.array([0.0]))
    adj = mp.first_adjoint(prob, mp.simulate(prob, 0.0, gpaths))
    assert np.allclose(adj.y, 0.0) and np.allclose(adj.Y, 0.0)


def test_first_adjoint_deterministic(gpaths):
    prob = mp.lq_additive(sigma=0.0)
    adj = mp.first_adjoint(prob, mp.simulate(prob, -0.3, gpaths))
    assert np.abs(adj.Y).max() <= 1e-8


def test_second_adjoint_lq_closed_form(gpaths):
    q, s = 1.5, 0.7
    prob = mp.lq_additive(q=q, s=s)
    cp = mp.simulate(prob, 0.0, gpaths)
    adj2 = mp.second_adjoint(prob, cp, mp.first_adjoint(prob, cp))
    t = gpaths.grid.times
    assert np.allclose(adj2.P[:, 0, 0], -s - q * (1 - t), atol=1e-10)
    assert np.all(adj2.Q == 0) and adj2.restricted


def test_second_adjoint_multiplicative_against_ivp(gpaths):
    prob = mp.lq_multiplicative()
    cp = mp.simulate(prob, 0.0, gpaths)
    adj2 = mp.second_adjoint(prob, cp, mp.first_adjoint(prob, cp))
    # dP/dt = -(2 alpha P + sigma^2 P - q), P(1) = -s
    sol = solve_ivp(lambda t, P: -(2 * 0.2 * P + 0.09 * P - 1.0), (1.0, 0.0), [-1.0],
                    rtol=1e-12, atol=1e-14, dense_output=True)
    t = gpaths.grid.times
    assert np.allclose(adj2.P[:, 0, 0], sol.sol(t)[0], atol=1e-8)


def test_second_adjoint_restriction(gpaths):
    prob = mp.nonlinear_oscillator()
    cp = mp.simulate(prob, 0.0, gpaths)
    with pytest.raises(RestrictionError):
        mp.second_adjoint(prob, cp, mp.first_adjoint(prob, cp))


def _mp_setup(prob, control, P=4000, K=10, seed=0):
    bp = core.generate_binomial_paths(core.TimeGrid(0.0, prob.T, K), P, seed)
    cp = mp.simulate(prob, control, bp)
    a1 = mp.first_adjoint(prob, cp, degree=3)
    return cp, a1, mp.second_adjoint(prob, cp, a1)


def test_mp_singleton_u_is_zero():
    prob = mp.lq_multiplicative()
    cp, a1, a2 = _mp_setup(prob, 0.4)
    rep = mp.check_mp_inequality(prob, cp, a1, a2, U_grid=[0.4])
    assert np.all(rep.S_min == 0) and rep.min_S == 0


def test_mp_dp_optimum_and_violation():
    prob = mp.lq_additive()
    cp, a1, a2 = _mp_setup(prob, mp.dp_oracle(prob, 10))
    assert mp.check_mp_inequality(prob, cp, a1, a2).passed
    cp, a1, a2 = _mp_setup(prob, 0.8)
    rep = mp.check_mp_inequality(prob, cp, a1, a2)
    assert not rep.passed and rep.min_S < -rep.tol_MP


def test_mp_cost_shift_invariance():
    base, shifted = mp.lq_additive(), mp.lq_additive(c=3.0)
    r = []
    for prob in (base, shifted):
        cp, a1, a2 = _mp_setup(prob, 0.2)
        r.append(mp.check_mp_inequality(prob, cp, a1, a2))
    assert np.allclose(r[0].S_min, r[1].S_min, atol=1e-10)


def test_mp_report_csv(tmp_path):
    prob = mp.bang_bang_finiteU()
    cp, a1, a2 = _mp_setup(prob, mp.dp_oracle(prob, 6), K=6)
    rep = mp.check_mp_inequality(prob, cp, a1, a2)
    rep.to_csv(tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 1 + 6 * 2


def test_spike_at_reference_control(gpaths):
    prob = mp.lq_multiplicative()
    cp = mp.simulate(prob, 0.5, gpaths)
    a1 = mp.first_adjoint(prob, cp)
    rep = mp.spike_variation(prob, cp, 0.3, 0.5, [0.1, 0.05], a1, mp.second_adjoint(prob, cp, a1))
    assert np.all(rep.slopes == 0) and np.all(rep.x1_rms == 0) and np.all(rep.x2_rms == 0)


def test_spike_additive_closed_form(gpaths):
    prob = mp.lq_additive()
    cp = mp.simulate(prob, 0.0, gpaths)
    a1 = mp.first_adjoint(prob, cp)
    eps = np.array([0.1, 0.05, 0.02])
    rep = mp.spike_variation(prob, cp, 0.3, 1.5, eps, a1, mp.second_adjoint(prob, cp, a1))
    assert np.all(rep.x1_rms == 0)
    # x2 is the forced response of dx2 = (u_spike - 0) chi dt: 1.5 eps after the window
    assert np.allclose(rep.x2_rms, 1.5 * eps, atol=1e-8)
    assert np.all(rep.res2 <= 1e-8)


def test_spike_slope_and_order(gpaths):
    policy = lambda k, t, x: -0.5 * x[:, 0]
    prob = mp.lq_multiplicative()
    cp = mp.simulate(prob, policy, gpaths)
    a1 = mp.first_adjoint(prob, cp)
    rep = mp.spike_variation(prob, cp, 0.3, 1.0, [0.1, 0.05, 0.02], a1, mp.second_adjoint(prob, cp, a1))
    assert np.all(rep.slope_ok(2.0))
    assert 0.8 < rep.order("res1") and rep.order("res2") > 1


def test_spike_validation(gpaths):
    prob = mp.lq_additive()
    cp = mp.simulate(prob, 0.0, gpaths)
    a1 = mp.first_adjoint(prob, cp)
    a2 = mp.second_adjoint(prob, cp, a1)
    with pytest.raises(ConfigurationError):
        mp.spike_variation(prob, cp, 0.3, 1.0, [0.05, 0.1], a1, a2)
    with pytest.raises(DomainError):
        mp.spike_variation(prob, cp, 0.95, 1.0, [0.1], a1, a2)


def _riccati_policy(q=1.0, r=1.0, s=1.0, T=1.0):
    sol = solve_ivp(lambda t, S: [S[0] ** 2 / r - q], (T, 0.0), [s], rtol=1e-12, atol=1e-14, dense_output=True)
    return lambda k, t, x: -sol.sol(t)[0] * x[:, 0] / r


def test_convex_interior_optimum(gpaths):
    prob = mp.lq_additive()
    cp = mp.simulate(prob, _riccati_policy(), gpaths)
    rep = mp.convex_variation_check(prob, cp, mp.first_adjoint(prob, cp))
    assert rep.passed
    # a constant control away from the feedback optimum is caught
    cp = mp.simulate(prob, 0.8, gpaths)
    assert not mp.convex_variation_check(prob, cp, mp.first_adjoint(prob, cp)).passed


def test_convex_boundary_optimum(gpaths):
    prob = mp.lq_additive(U=np.linspace(0.5, 1.0, 11))
    cp = mp.simulate(prob, 0.5, gpaths)
    rep = mp.convex_variation_check(prob, cp, mp.first_adjoint(prob, cp), U_grid=prob.U[1:])
    assert rep.max_pairing < 0 and rep.passed


def test_convex_singleton(gpaths):
    prob = mp.lq_additive(U=np.array([0.3]))
    cp = mp.simulate(prob, 0.3, gpaths)
    assert mp.convex_variation_check(prob, cp, mp.first_adjoint(prob, cp)).max_pairing == 0.0


@given(u=st.floats(-2, 2), seed=st.integers(0, 1000))
def test_self_comparison_vanishes(u, seed):
    prob = mp.nonlinear_oscillator()
    p = core.generate_paths(core.TimeGrid(0.0, 1.0, 5), 50, seed)
    cp = mp.simulate(prob, u, p)
    a1 = mp.first_adjoint(prob, cp, degree=2)
    a2 = mp.SecondAdjoint(np.ones((6, 1, 1)), np.zeros((6, 1, 1)), False)
    rep = mp.check_mp_inequality(prob, cp, a1, a2, U_grid=[u])
    assert np.all(rep.S_min == 0)


@given(q=st.floats(0.1, 3), s=st.floats(0.0, 3), alpha=st.floats(-1, 1), sigma=st.floats(-1, 1))
def test_second_adjoint_symmetric_and_terminal(q, s, alpha, sigma):
    prob = mp.lq_multiplicative(q=q, s=s, alpha=alpha, sigma=sigma)
    p = core.generate_paths(core.TimeGrid(0.0, 1.0, 5), 50, 0)
    cp = mp.simulate(prob, 0.0, p)
    P = mp.second_adjoint(prob, cp, mp.first_adjoint(prob, cp, degree=2)).P
    assert P[-1, 0, 0] == pytest.approx(-s)
    assert np.allclose(P, np.swapaxes(P, 1, 2), atol=1e-10)
