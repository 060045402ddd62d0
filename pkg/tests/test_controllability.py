import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import BETA_EXACT, exact_word_rank, kalman_matrix_rank, sign_path_observable, sympy_gramian
from stochctl import controllability as ctl, core
from stochctl.errors import DomainError, NotControllableError, ReductionError, ResourceGuardError

DI_A = [[0.0, 1.0], [0.0, 0.0]]
DI_B = [[0.0], [1.0]]
SHIFT = [[0.0, 0.0], [1.0, 0.0]]
E1 = [[1.0], [0.0]]


def int_matrix(n, m):
    return st.lists(st.lists(st.integers(-1, 1), min_size=m, max_size=m), min_size=n, max_size=n).map(
        lambda x: np.array(x, dtype=float)
    )


@st.composite
def triples(draw):
    n = draw(st.integers(1, 4))
    m = draw(st.integers(1, n))
    return draw(int_matrix(n, n)), draw(int_matrix(n, n)), draw(int_matrix(n, m))


def test_kalman_examples():
    assert ctl.kalman_rank(DI_A, DI_B).rank == 2
    assert ctl.kalman_rank(DI_A, DI_B).full
    assert ctl.kalman_rank(np.random.default_rng(0).normal(size=(3, 3)), np.zeros((3, 1))).rank == 0
    assert ctl.kalman_rank(np.eye(2), E1).rank == 1


def test_certificate_invariants():
    cert = ctl.stochastic_rank(SHIFT, np.eye(2), E1)
    Q = cert.basis
    assert np.allclose(Q.T @ Q, np.eye(cert.rank), atol=1e-12)
    assert cert.certified
    assert cert.fixed_point_residual <= 1e-9


def test_stochastic_rank_examples():
    assert ctl.stochastic_rank(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2)).rank == 2
    assert ctl.stochastic_rank(SHIFT, np.zeros((2, 2)), E1).rank == 2
    assert ctl.stochastic_rank(np.zeros((2, 2)), SHIFT, E1).rank == 2
    assert ctl.stochastic_rank(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 0))).rank == 0


@pytest.mark.parametrize("A1, A2, B1", [
    (np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2)),
    (SHIFT, np.zeros((2, 2)), E1),
    (np.zeros((2, 2)), SHIFT, E1),
])
def test_oracle_matches_rank_examples(A1, A2, B1):
    cert = ctl.stochastic_rank(A1, A2, B1)
    assert ctl.binomial_observability_oracle(A1, A2, B1, steps=3, dt=0.1).observable == cert.full


def test_oracle_trivial_cases():
    v = ctl.binomial_observability_oracle(np.eye(2), np.eye(2), np.zeros((2, 1)), steps=2)
    assert not v.observable and v.nullspace_dim == 2
    assert ctl.binomial_observability_oracle(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2), steps=1).observable
    with pytest.raises(ResourceGuardError):
        ctl.binomial_observability_oracle(np.eye(2), np.eye(2), E1, steps=13)


def test_gramian_examples():
    gc = ctl.gramian_control([[0.0]], [[1.0]], 1.0, [0.0], [1.0])
    assert gc.terminal_error <= 1e-10
    assert np.allclose([gc.control(t) for t in (0.0, 0.5, 1.0)], 1.0)
    gc = ctl.gramian_control(DI_A, DI_B, 1.0, [0.0, 0.0], [1.0, 0.0])
    assert np.allclose(gc.G, sympy_gramian(DI_A, DI_B, 1), atol=1e-12)
    assert gc.terminal_error <= 1e-8
    with pytest.raises(NotControllableError):
        ctl.gramian_control(DI_A, np.zeros((2, 1)), 1.0, [0, 0], [1, 0])


def test_gramian_against_sympy_rotation():
    A = [[0.0, 1.0], [-1.0, 0.0]]
    B = [[0.0], [1.0]]
    assert np.allclose(ctl.controllability_gramian(A, B, 2.0), sympy_gramian(A, B, 2), atol=1e-12)


def test_gramian_null_direction_leaves_target():
    # adding w orthogonal to t -> B^T e^{A^T (T - t)} leaves y(T) unchanged
    gc = ctl.gramian_control(DI_A, DI_B, 1.0, [1.0, 0.0], [0.0, 0.0])
    # B^T e^{A^T (1-t)} = (1 - t, 1); w = P3(2t - 1) is orthogonal to 1 and t
    w = lambda t: 20 * t**3 - 30 * t**2 + 12 * t - 1
    y = ctl.terminal_state(DI_A, DI_B, 1.0, [1.0, 0.0], lambda t: gc.control(t) + w(t))
    assert np.linalg.norm(y) <= 1e-8


def test_necessary_conditions():
    s = ctl.LinearStochasticSystem([[0.0]], [[1.0]], [[0.0]], [[0.0]])
    nc = ctl.necessary_conditions(s)
    assert not nc.rankD_full and not nc.possible
    assert ctl.necessary_conditions(ctl.LinearStochasticSystem(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2))).rankD_full
    nc = ctl.necessary_conditions(ctl.LinearStochasticSystem(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2)))
    assert not nc.kalman_AB


def test_reduce_system_examples():
    r = ctl.reduce_system(ctl.LinearStochasticSystem([[0.5]], [[2.0]], [[0.7]], [[1.0]]))
    assert np.allclose(r.K1, [[1.0]]) and np.allclose(r.K2, [[-0.7]])
    assert np.allclose(r.A1, [[0.5 - 2.0 * 0.7]]) and np.allclose(r.A2, [[2.0]])
    assert r.B1.shape == (1, 0)
    r = ctl.reduce_system(ctl.LinearStochasticSystem([[0.0]], [[1.0, 3.0]], [[0.0]], [[1.0, 0.0]]))
    assert np.allclose(r.K2, 0) and np.allclose(r.B1, [[3.0]])
    with pytest.raises(ReductionError):
        ctl.reduce_system(ctl.LinearStochasticSystem([[0.0]], [[1.0]], [[0.0]], [[0.0]]))


def test_reduce_system_random():
    rng = np.random.default_rng(5)
    n, m = 3, 5
    A, B, C, D = rng.normal(size=(n, n)), rng.normal(size=(n, m)), rng.normal(size=(n, n)), rng.normal(size=(n, m))
    r = ctl.reduce_system(ctl.LinearStochasticSystem(A, B, C, D))
    assert np.allclose(D @ r.K1, np.hstack([np.eye(n), np.zeros((n, m - n))]), atol=1e-10)
    assert np.allclose(D @ r.K2, -C, atol=1e-10)
    assert np.allclose(r.A1, A + B @ r.K2, atol=1e-10)
    BK1 = B @ r.K1
    assert np.allclose(r.A2, BK1[:, :n]) and np.allclose(r.B1, BK1[:, n:])
    assert r.residual <= 1e-10


def test_simulate_dual():
    p = core.generate_paths(core.TimeGrid(0.0, 0.1, 20), 2000, 0)
    assert ctl.simulate_dual(SHIFT, np.zeros((2, 2)), E1, [0.0, 0.0], p).statistic == 0
    d = ctl.simulate_dual(SHIFT, np.zeros((2, 2)), E1, [1.0, 0.0], p)
    assert d.statistic >= 0.5


def test_simulate_dual_outside_word_space():
    # word space of (A1 = 0, A2 = diag, B1 = e1) is span(e1); z0 = e2 is orthogonal to it
    A2 = np.diag([0.5, -0.3])
    p = core.generate_paths(core.TimeGrid(0.0, 1.0, 50), 1000, 0)
    d = ctl.simulate_dual(np.zeros((2, 2)), A2, E1, [0.0, 1.0], p)
    assert d.statistic <= 1e-20


def test_eta_values():
    assert ctl.eta(0.1, 1.0) == 1
    assert ctl.eta(0.6, 1.0) == -1
    t = np.linspace(0, 0.999, 500)
    assert set(np.unique(ctl.eta(t, 1.0))) <= {-1.0, 1.0}
    with pytest.raises(DomainError):
        ctl.eta(1.0, 1.0)


def test_beta_estimate():
    prof = ctl.beta_estimate(1.0)
    assert prof.beta_hat > 0
    assert prof.beta_hat <= (1 + abs(prof.c_star)) ** 2 / 4
    assert abs(prof.beta_hat - BETA_EXACT) <= 1e-6
    assert abs(ctl.beta_estimate(1.0, 4, 16).beta_hat - prof.beta_hat) <= 0.05 * prof.beta_hat


def test_counterexample_324():
    p = core.generate_paths(core.TimeGrid(0.0, 1.0, 100), 20_000, 2)
    r = ctl.verify_counterexample_324(0.5, p)
    assert np.all(r.z1.values[:, 0] == 1.0)
    assert r.second_rms <= 1e-12
    assert r.martingale_ok(3)
    with pytest.raises(DomainError):
        ctl.verify_counterexample_324(0.0, p)


def test_random_integer_instance_entries():
    rng = np.random.default_rng(0)
    for _ in range(50):
        inst = ctl.random_integer_instance(rng)
        for M in (inst.A1, inst.A2, inst.B1):
            assert set(np.unique(M)) <= {-1.0, 0.0, 1.0}
        assert 1 <= inst.n <= 4 and 1 <= inst.B1.shape[1] <= inst.n


@given(triples())
def test_stochastic_rank_matches_exact_enumeration(t):
    A1, A2, B1 = t
    assert ctl.stochastic_rank(A1, A2, B1).rank == exact_word_rank(A1, A2, B1)


@given(triples())
def test_kalman_reduction(t):
    A1, _, B1 = t
    r = ctl.stochastic_rank(A1, np.zeros_like(A1), B1).rank
    assert r == ctl.kalman_rank(A1, B1).rank == kalman_matrix_rank(A1, B1)


@given(triples(), st.integers(0, 2**32 - 1))
def test_similarity_invariance(t, seed):
    A1, A2, B1 = t
    n = A1.shape[0]
    S = np.random.default_rng(seed).normal(size=(n, n)) + 3 * np.eye(n)
    Si = np.linalg.inv(S)
    r = ctl.stochastic_rank(S @ A1 @ Si, S @ A2 @ Si, S @ B1).rank
    assert r == ctl.stochastic_rank(A1, A2, B1).rank


@given(triples())
def test_oracle_matches_per_path_recursion(t):
    A1, A2, B1 = t
    n = A1.shape[0]
    v = ctl.binomial_observability_oracle(A1, A2, B1, steps=n, dt=0.1)
    assert v.observable == sign_path_observable(A1, A2, B1, n, 0.1)
