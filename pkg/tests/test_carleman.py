import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from oracles import carleman_identity_symbolic
from stochctl import carleman as cm
from stochctl.errors import ConfigurationError, DomainError

H = lambda t, x: sp.sin(sp.pi * x) * (1 + t**2)
H_NP = lambda t, x: np.sin(np.pi * x) * (1 + t**2)
POINTS = [(0.3, 0.25), (0.5, 0.6), (0.7, 0.45)]


def test_symbolic_oracle_balances():
    (t, x), lhs, rhs = carleman_identity_symbolic(H, 2, 3)
    for tp, xp in POINTS:
        sub = {t: sp.Rational(str(tp)), x: sp.Rational(str(xp))}
        l, r = lhs.evalf(40, subs=sub), rhs.evalf(40, subs=sub)
        assert abs(l - r) <= sp.Float("1e-30", 40) * max(abs(l), 1)


def test_identity_terms_match_oracle_with_exact_jets():
    mu, lam = 2.0, 3.0
    spec = cm.WeightSpec(mu=mu, lam=lam)
    cf = cm.CoefficientFields(spec)
    (t, x), lhs, rhs = carleman_identity_symbolic(H, sp.Integer(2), sp.Integer(3))
    l = cf.expr["l"]
    tt, xx = sp.symbols("t x", real=True)
    h = H(tt, xx)
    w = sp.exp(l) * h
    D = sp.diff
    jets = lambda f: [sp.lambdify((tt, xx), e, "numpy") for e in (f, D(f, xx), D(f, xx, 2), D(f, tt), D(f, xx, tt))]
    wj_f, hj_f = jets(w), jets(h)
    for tp, xp in POINTS:
        wj = [f(tp, xp) for f in wj_f]
        hj = [f(tp, xp) for f in hj_f]
        L, R = cm.identity_terms(cf, np.array(tp), np.array(xp), wj, hj)
        sub = {t: tp, x: xp}
        assert np.isclose(float(L), float(lhs.evalf(30, subs=sub)), rtol=1e-8)
        assert np.isclose(float(R), float(rhs.evalf(30, subs=sub)), rtol=1e-8)


def test_coefficients_match_oracle_definitions():
    spec = cm.WeightSpec(mu=3.0, lam=5.0)
    cf = cm.CoefficientFields(spec)
    t, x = 0.4, 0.3
    lam, mu = 5.0, 3.0
    psi = x * (1 - x)
    l = lam * (np.exp(mu * psi) - np.exp(2 * mu * 0.25)) / (t * (1 - t))
    assert np.isclose(float(cf("l", t, x)), l, rtol=1e-12)
    w = cm.coefficient_fields(spec, [t], [x])
    assert np.isclose(w.C[0, 0], float(cf("C", t, x)))
    # b = -1: C = 3 b^2 l_xx
    assert np.isclose(w.C[0, 0], 3 * w.l_xx[0, 0], rtol=1e-10)


def test_weight_invariants():
    spec = cm.WeightSpec(mu=4.0, lam=10.0)
    w = cm.build_weights(spec, np.linspace(0.1, 0.9, 9), np.linspace(0, 1, 21))
    assert np.all(w.alpha < 0)
    assert np.all(w.phi > 0)
    assert np.allclose(w.theta, np.exp(w.l))
    assert np.allclose(w.log_theta, w.l)
    assert np.isclose(spec.psi_max, 0.25)


def test_closed_form_derivatives():
    spec = cm.WeightSpec(mu=2.0, lam=3.0)
    cf = cm.CoefficientFields(spec)
    t, x = np.array([0.3, 0.6]), np.array([0.2, 0.7])
    w = cm.build_weights(spec, t, x)
    TT, XX = np.meshgrid(t, x, indexing="ij")
    for k in ("l_t", "l_x", "l_xx"):
        assert np.allclose(getattr(w, k), cf(k, TT, XX), rtol=1e-10)


def test_domain_errors():
    with pytest.raises(DomainError):
        cm.WeightSpec(mu=1.0, lam=5.0)
    with pytest.raises(DomainError):
        cm.WeightSpec(mu=2.0, lam=0.5)
    with pytest.raises(DomainError):
        cm.WeightSpec(mu=2.0, lam=2.0, psi="x")
    with pytest.raises(DomainError):
        cm.build_weights(cm.WeightSpec(mu=2.0, lam=2.0), [0.0], [0.5])
    with pytest.raises(ConfigurationError):
        cm.WeightSpec(mu=2.0, lam=2.0, psi="x*(1-x)*t")


def test_identity_direct_order():
    r = cm.verify_pointwise_identity(H_NP, cm.WeightSpec(mu=2.0, lam=3.0))
    assert r.order >= 1.8 and r.passed()


def test_identity_variable_b():
    r = cm.verify_pointwise_identity(H_NP, cm.WeightSpec(mu=2.0, lam=3.0), b="-(1 + x*x/2)")
    assert r.passed()


def test_identity_conjugated_polynomial():
    w = lambda t, x: 1 + t * x + x * x
    r = cm.verify_pointwise_identity(None, cm.WeightSpec(mu=2.0, lam=3.0), mode="conjugated", w=w, refinements=3)
    assert r.passed()


def test_identity_mode_validation():
    spec = cm.WeightSpec(mu=2.0, lam=3.0)
    with pytest.raises(ConfigurationError):
        cm.verify_pointwise_identity(H_NP, spec, mode="other")
    with pytest.raises(ConfigurationError):
        cm.verify_pointwise_identity(None, spec)
    with pytest.raises(ConfigurationError):
        cm.verify_pointwise_identity(H_NP, spec, refinements=1)


def test_identity_csv(tmp_path):
    r = cm.verify_pointwise_identity(H_NP, cm.WeightSpec(mu=2.0, lam=3.0), refinements=2)
    r.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "ht,hx,max_abs,rms,order"


def test_asymptotic_ratios_closed_form():
    tab = cm.asymptotic_checks(lams=(1e4,), mus=(8.0,), x_points=(0.1,))
    row = tab.at(1e4, 8.0)
    psi_x, psi_xx = 0.8, -2.0
    k = 1 + psi_xx / (8.0 * psi_x**2)
    assert abs(row.A_ratio - 1.0) <= 0.01
    assert np.isclose(row.C_ratio, 3 * k, rtol=1e-10)
    assert np.isclose(row.B_ratio, 2 * k, rtol=0.01)
    with pytest.raises(KeyError):
        tab.at(1.0, 1.0)


def test_asymptotic_skips_flat_points():
    tab = cm.asymptotic_checks(lams=(1e2,), mus=(4.0,), x_points=(0.1, 0.5))
    assert tab.skipped == 1
    with pytest.raises(DomainError):
        cm.asymptotic_checks(x_points=(0.5,))


@given(st.floats(1.5, 10.0), st.floats(1.5, 100.0), st.floats(0.05, 0.95), st.floats(0.0, 1.0))
def test_alpha_negative_everywhere(mu, lam, t, x):
    w = cm.build_weights(cm.WeightSpec(mu=mu, lam=lam), [t], [x])
    assert w.alpha[0, 0] < 0 and w.l[0, 0] < 0
    assert 0 <= w.theta[0, 0] < 1
