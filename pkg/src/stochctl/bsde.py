"""Backward SDEs ``dy = f(t, y, Y) dt + Y dW``, ``y(T) = y_T``.

Two solvers:

* :func:`solve_bsde_lsmc`, least-squares Monte Carlo on a path bundle,
  conditioning on polynomial features of a Markov state (``W`` by
  default);
* :func:`solve_modal_bsde_exact`, the linear scalar equation
  ``dz = [(lam - a) z - b Z] dt + Z dW`` with ``z(s2) = g(W(s2))``,
  solved by an exponential change of measure and Gauss-Hermite quadrature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import quad

from .core import (
    AdaptedSamples,
    PathBundle,
    euler_maruyama,
    mc_mean,
    polynomial_features,
    regress,
)
from .errors import AccuracyError, ConfigurationError, DomainError, ShapeError


@dataclass(frozen=True)
class GeneratorSpec:
    """Generator ``f(t, y, Y, k)`` with a declared Lipschitz constant.

    ``y`` and ``Y`` have shape ``(P,)`` or ``(P, n)``; ``k`` is the grid
    index so that coefficients sampled along a reference path can be read
    per step.  ``lipschitz`` is the declared constant ``C_L``.
    """

    f: Callable
    lipschitz: float = 0.0

    def __call__(self, t, y, Y, k):
        return self.f(t, y, Y, k)


ZERO_GENERATOR = GeneratorSpec(lambda t, y, Y, k: np.zeros_like(y), 0.0)


def linear_generator(alpha: float, beta: float, c: float = 0.0) -> GeneratorSpec:
    """``f = alpha y + beta Y + c``."""
    return GeneratorSpec(lambda t, y, Y, k: alpha * y + beta * Y + c, abs(alpha) + abs(beta))


def linear_bsde_y0(alpha: float, beta: float, c: float, poly, T: float) -> float:
    """Exact ``y(0)`` for ``f = alpha y + beta Y + c`` and ``y(T) = p(W(T))``.

    ``poly = (c0, c1, c2)`` are the coefficients of a polynomial of degree
    at most two.  With ``ytilde = e^{-alpha t} y`` and the drift removed
    by the change of measure ``dW + beta dt``, ``W(T)`` has mean
    ``-beta T`` and variance ``T``, hence

    ``y(0) = e^{-alpha T} E_Q p(W(T)) - c int_0^T e^{-alpha t} dt``.
    """
    c0, c1, c2 = (list(poly) + [0.0, 0.0, 0.0])[:3]
    if len(poly) > 3:
        raise ConfigurationError("polynomial terminals of degree <= 2 only")
    m1 = -beta * T
    m2 = T + m1 * m1
    drift = c * T if alpha == 0 else c * (1.0 - np.exp(-alpha * T)) / alpha
    return float(np.exp(-alpha * T) * (c0 + c1 * m1 + c2 * m2) - drift)


@dataclass(frozen=True)
class LipschitzProbe:
    declared: float
    empirical: float

    @property
    def ok(self) -> bool:
        return self.empirical <= self.declared * (1 + 1e-9) + 1e-12


def probe_lipschitz(gen: GeneratorSpec, t: float = 0.0, n_probe: int = 2000, seed: int = 0, scale: float = 3.0) -> LipschitzProbe:
    """Largest ``|f(p1, q1) - f(p2, q2)| / (|p1 - p2| + |q1 - q2|)`` on random probes."""
    rng = np.random.default_rng(seed)
    p1, q1, p2, q2 = scale * rng.standard_normal((4, n_probe))
    d = np.abs(gen(t, p1, q1, 0) - gen(t, p2, q2, 0))
    den = np.abs(p1 - p2) + np.abs(q1 - q2)
    return LipschitzProbe(float(gen.lipschitz), float(np.max(d / den)))


@dataclass(frozen=True)
class BSDESolution:
    """Adapted pair ``(y, Y)`` on a grid.

    ``Y.values[:, K]`` repeats the last computed column (``Y`` lives on
    steps ``0..K-1``).  ``y0`` is the mean of ``y(0)`` over paths with its
    Monte Carlo standard error ``y0_se``.  ``fit_se`` holds per-step standard errors of
    the fitted ``y`` and ``Y`` regressions, used as Monte Carlo error
    scales by callers.
    """

    y: AdaptedSamples
    Y: AdaptedSamples
    terminal_mismatch: float
    y0: np.ndarray
    y0_se: np.ndarray
    fit_se_y: np.ndarray
    fit_se_Y: np.ndarray
    degree: int
    picard_iterations: int

    def to_csv(self, path, max_paths: Optional[int] = None) -> None:
        """Write columns ``t, path, y, Y`` (component columns for vector ``y``)."""
        write_solution_csv(path, self.y, self.Y, max_paths)


def write_solution_csv(path, y: AdaptedSamples, Y: AdaptedSamples, max_paths: Optional[int] = None) -> None:
    yv, Yv = y.values, Y.values
    P = yv.shape[0] if max_paths is None else min(max_paths, yv.shape[0])
    t = y.grid.times
    vec = yv.ndim == 3
    n = yv.shape[2] if vec else 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if vec:
            w.writerow(["t", "path"] + [f"y{i}" for i in range(n)] + [f"Y{i}" for i in range(n)])
        else:
            w.writerow(["t", "path", "y", "Y"])
        for p in range(P):
            for k in range(len(t)):
                if vec:
                    row = [*yv[p, k], *Yv[p, k]]
                else:
                    row = [yv[p, k], Yv[p, k]]
                w.writerow([f"{t[k]:.17g}", p] + [f"{v:.17g}" for v in row])


def _terminal_values(terminal, paths: PathBundle) -> np.ndarray:
    if callable(terminal):
        yT = terminal(paths)
    else:
        yT = terminal
    yT = np.asarray(yT, dtype=float)
    if yT.ndim == 0:
        yT = np.full(paths.P, float(yT))
    if yT.shape[0] != paths.P:
        raise ShapeError(f"terminal has {yT.shape[0]} samples, bundle has {paths.P}")
    if not np.all(np.isfinite(yT)):
        raise ConfigurationError("terminal values must be finite")
    return yT


def _fit_se(X, resid, P):
    # standard error of a fitted value, averaged over the sample
    nf = X.shape[1]
    return float(np.sqrt(np.mean(resid**2) * nf / P))


def solve_bsde_lsmc(
    gen: GeneratorSpec,
    terminal,
    paths: PathBundle,
    degree: int = 4,
    state: Optional[np.ndarray] = None,
    picard_tol: float = 1e-12,
    max_picard: int = 50,
) -> BSDESolution:
    """Least-squares Monte Carlo for ``dy = f(t, y, Y) dt + Y dW``.

    Backward induction from ``y(T) = terminal``:

    ``Y_k = E_k[(y_{k+1} - E_k y_{k+1}) dW_k] / dt`` and
    ``y_k = E_k[y_{k+1}] - f(t_k, y_k, Y_k) dt``,

    where ``E_k`` is the regression on polynomial features of the state
    at step ``k``.  The ``y`` relation is implicit; one fixed-point sweep
    is used unless ``C_L dt > 0.1``, in which case it is iterated to
    ``picard_tol``.

    Parameters
    ----------
    gen : GeneratorSpec
    terminal : array_like or callable
        Values ``y_T`` of shape ``(P,)``/``(P, n)``, or a function of the
        bundle returning them.
    paths : PathBundle
    degree : int
        Total degree of the polynomial basis.
    state : ndarray, optional
        Markov state to condition on, shape ``(P, K+1)`` or
        ``(P, K+1, d)``.  Defaults to ``W``.

    Returns
    -------
    BSDESolution

    Raises
    ------
    BasisDegeneracyError
        If a regression design is too ill-conditioned.
    """
    if degree < 1:
        raise ConfigurationError("degree must be >= 1")
    yT = _terminal_values(terminal, paths)
    P, K = paths.increments.shape
    dt = paths.dt
    t = paths.grid.times
    S = paths.W if state is None else np.asarray(state, dtype=float)
    if S.shape[0] != P or S.shape[1] != K + 1:
        raise ShapeError(f"state shape {S.shape} does not fit P={P}, K={K}")
    y = np.empty((P, K + 1) + yT.shape[1:])
    Y = np.empty_like(y)
    y[:, K] = yT
    se_y = np.zeros(K + 1)
    se_Y = np.zeros(K + 1)
    iterate = gen.lipschitz * dt > 0.1
    sweeps = 1
    fsum = np.zeros_like(yT)
    for k in range(K - 1, -1, -1):
        X = polynomial_features(S[:, k], degree)
        nxt = y[:, k + 1]
        dw = paths.increments[:, k].reshape((P,) + (1,) * (nxt.ndim - 1))
        fit_c = regress(X, nxt)
        # E_k[c dW] = 0 for F_k-measurable c: centring is a control variate
        fit_Y = regress(X, (nxt - fit_c.fitted) * dw / dt)
        Yk = fit_Y.fitted
        cond_mean = fit_c.fitted
        yk = cond_mean.copy()
        for it in range(max_picard if iterate else 1):
            new = cond_mean - np.asarray(gen(t[k], yk, Yk, k)) * dt
            # f is evaluated on F_k-measurable inputs, so the regression of
            # y_{k+1} - f dt equals E_k[y_{k+1}] - f dt; project anyway so
            # y_k stays in the feature span
            new = regress(X, new).fitted
            delta = np.max(np.abs(new - yk)) if it else np.inf
            yk = new
            if iterate and delta <= picard_tol * (1 + np.max(np.abs(yk))):
                sweeps = max(sweeps, it + 1)
                break
        y[:, k] = yk
        Y[:, k] = Yk
        fsum += np.asarray(gen(t[k], yk, Yk, k)) * dt
        se_y[k] = _fit_se(X, fit_c.residual, P)
        se_Y[k] = _fit_se(X, fit_Y.residual * dt, P) / dt
    Y[:, K] = Y[:, K - 1]
    mismatch = float(np.sqrt(np.mean((y[:, K] - yT) ** 2)))
    # every basis holds the constant, so regressions preserve sample means
    # and y(0) is the sample mean of y_T - sum_k f_k dt; its SE is the
    # Monte Carlo error of y(0)
    y0 = y[:, 0].mean(axis=0)
    _, y0_se = mc_mean(yT - fsum, axis=0)
    return BSDESolution(
        AdaptedSamples(paths.grid, y),
        AdaptedSamples(paths.grid, Y),
        mismatch,
        np.asarray(y0),
        np.asarray(y0_se),
        se_y,
        se_Y,
        degree,
        sweeps,
    )


def _as_function(c) -> Callable:
    if callable(c):
        return c
    val = float(c)
    return lambda t: val + 0.0 * np.asarray(t, dtype=float)


def _integral(fun, s: float, t: float, const: Optional[float]) -> float:
    if const is not None:
        return const * (t - s)
    if t <= s:
        return 0.0
    return quad(fun, s, t, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


def _unit(w):
    return np.ones_like(np.asarray(w, dtype=float))


@dataclass(frozen=True)
class ModalBSDEProblem:
    """``dz - lam z dt = -(a z + b Z) dt + Z dW`` on ``[s1, s2]``, ``z(s2) = g(W(s2))``.

    ``a`` and ``b`` are floats or bounded functions of time; for functions
    the sup-norms ``a_sup`` and ``b_sup`` must be declared.
    """

    lam: float
    a: Union[float, Callable] = 0.0
    b: Union[float, Callable] = 0.0
    s1: float = 0.0
    s2: float = 1.0
    g: Callable = field(default=None)
    a_sup: Optional[float] = None
    b_sup: Optional[float] = None

    def __post_init__(self):
        if self.g is None:
            object.__setattr__(self, "g", _unit)
        if not self.s1 < self.s2:
            raise ConfigurationError("need s1 < s2")
        if self.lam < 0:
            raise ConfigurationError("lam must be nonnegative")
        for name in ("a", "b"):
            v = getattr(self, name)
            sup = getattr(self, name + "_sup")
            if not callable(v):
                object.__setattr__(self, name + "_sup", abs(float(v)))
            elif sup is None:
                raise ConfigurationError(f"declare {name}_sup for a time-dependent {name}")

    @property
    def r0(self) -> float:
        return 2 * self.a_sup + self.b_sup**2

    def _const(self, name):
        v = getattr(self, name)
        return None if callable(v) else float(v)

    def int_a(self, t: float) -> float:
        return _integral(_as_function(self.a), t, self.s2, self._const("a"))

    def int_b(self, t: float) -> float:
        return _integral(_as_function(self.b), t, self.s2, self._const("b"))

    def int_b2(self, t: float) -> float:
        c = self._const("b")
        if c is not None:
            return c * c * (self.s2 - t)
        f = _as_function(self.b)
        return _integral(lambda s: f(s) ** 2, t, self.s2, None)


class ModalBSDESolution:
    """Exact solution ``z(t, w)``, ``Z(t, w)`` of a :class:`ModalBSDEProblem`.

    Conditionally on ``W(t) = w``,

    ``z(t) = exp(int_t^{s2} (a - lam) ds) E g(w + int_t^{s2} b ds + sqrt(s2 - t) xi)``

    with ``xi`` standard normal: the tilt ``rho`` shifts the Gaussian
    increment by ``int b ds`` and its normalising factor cancels the
    ``-b^2/2`` term.  ``Z = dz/dw`` by a centred difference.
    """

    def __init__(self, prob: ModalBSDEProblem, nodes: int = 40, tol: float = 1e-10, fd_step: float = 1e-4):
        self.prob = prob
        self.nodes = nodes
        self.tol = tol
        self.fd_step = fd_step
        self._x, self._w = hermegauss(nodes)
        self._w = self._w / self._w.sum()
        self._x2, self._w2 = hermegauss(2 * nodes)
        self._w2 = self._w2 / self._w2.sum()
        self._cache = {}

    def _coeffs(self, t: float):
        key = float(t)
        if key not in self._cache:
            p = self.prob
            self._cache[key] = (
                np.exp(p.int_a(t) - p.lam * (p.s2 - t)),
                p.int_b(t),
                np.sqrt(max(p.s2 - t, 0.0)),
            )
        return self._cache[key]

    def _expect(self, t: float, w: np.ndarray, x, wts) -> np.ndarray:
        scale, shift, sd = self._coeffs(t)
        arg = w[..., None] + shift + sd * x
        return scale * (self.prob.g(arg) @ wts)

    def z(self, t: float, w) -> np.ndarray:
        """``z(t)`` given ``W(t) = w`` (array).

        Raises
        ------
        AccuracyError
            If doubling the node count changes the value by more than
            ``tol`` (relative).
        """
        p = self.prob
        if not p.s1 - 1e-12 <= t <= p.s2 + 1e-12:
            raise DomainError(f"t={t} outside [{p.s1}, {p.s2}]")
        w = np.asarray(w, dtype=float)
        if t >= p.s2:
            return np.asarray(p.g(w), dtype=float)
        v1 = self._expect(t, w, self._x, self._w)
        v2 = self._expect(t, w, self._x2, self._w2)
        err = np.max(np.abs(v2 - v1)) if v1.size else 0.0
        if err > self.tol * (1.0 + np.max(np.abs(v2), initial=0.0)):
            raise AccuracyError(f"quadrature changed by {err:.3g} on node doubling at t={t}")
        return v2

    def Z(self, t: float, w) -> np.ndarray:
        h = self.fd_step
        w = np.asarray(w, dtype=float)
        return (self.z(t, w + h) - self.z(t, w - h)) / (2 * h)

    def moment2(self, t: float, nodes: int = 60) -> float:
        """``E z(t)^2`` with ``W(t) ~ N(0, t)`` by Gauss-Hermite quadrature."""
        x, wts = hermegauss(nodes)
        wts = wts / wts.sum()
        vals = self.z(t, np.sqrt(max(t, 0.0)) * x)
        return float(wts @ vals**2)

    def on_paths(self, paths: PathBundle):
        """Samples of ``(z, Z)`` on the grid points inside ``[s1, s2]``.

        Returns ``(k_indices, z, Z)`` with arrays of shape ``(P, len(k))``.
        """
        t = paths.grid.times
        ks = np.flatnonzero((t >= self.prob.s1 - 1e-12) & (t <= self.prob.s2 + 1e-12))
        z = np.stack([self.z(t[k], paths.W[:, k]) for k in ks], axis=1)
        Z = np.stack([self.Z(t[k], paths.W[:, k]) for k in ks], axis=1)
        return ks, z, Z


def solve_modal_bsde_exact(prob: ModalBSDEProblem, nodes: int = 40, tol: float = 1e-10) -> ModalBSDESolution:
    """Exact modal solution; see :class:`ModalBSDESolution`."""
    return ModalBSDESolution(prob, nodes, tol)


def modal_generator(prob: ModalBSDEProblem) -> GeneratorSpec:
    """The modal equation in ``dy = f dt + Y dW`` form: ``f = (lam - a) y - b Y``."""
    a = _as_function(prob.a)
    b = _as_function(prob.b)
    return GeneratorSpec(
        lambda t, y, Y, k: (prob.lam - a(t)) * y - b(t) * Y,
        prob.lam + prob.a_sup + prob.b_sup,
    )


def rho_martingale_check(prob: ModalBSDEProblem, paths: PathBundle):
    """Sample mean of ``rho(s1, s2) g(W(s2))`` and its SE, for comparison with ``z(s1)``.

    Requires ``s1 = 0`` so that ``z(s1)`` is deterministic, and constant
    ``a``, ``b``.
    """
    if prob.s1 != 0.0 or callable(prob.a) or callable(prob.b):
        raise ConfigurationError("rho check implemented for s1 = 0 and constant a, b")
    k2 = paths.grid.index(prob.s2)
    W2 = paths.W[:, k2]
    a, b = float(prob.a), float(prob.b)
    rho = np.exp((a - prob.lam - 0.5 * b * b) * prob.s2 + b * W2)
    return mc_mean(rho * prob.g(W2))


@dataclass(frozen=True)
class TestTriple:
    """Test data for the duality identity.

    ``eta`` (values at step ``k0``), ``u`` and ``v`` are callables of
    ``(t, W)`` returning ``(P,)`` arrays; ``k0`` is the start index.
    """

    k0: int
    eta: Callable
    u: Callable
    v: Callable


@dataclass(frozen=True)
class TranspositionResidual:
    lhs: float
    rhs: float
    residual: float
    se: float
    allowance: float

    @property
    def passed(self) -> bool:
        return self.residual <= 3 * self.se + self.allowance


def verify_transposition_identity(
    sol: BSDESolution,
    gen: GeneratorSpec,
    test: TestTriple,
    paths: PathBundle,
    c_disc: float = 1.0,
) -> TranspositionResidual:
    """Check ``E<z(T), y_T> - E<eta, y(t)> = E int_t^T (<z, f> + <u, y> + <v, Y>) ds``.

    ``z`` solves ``dz = u dt + v dW`` from ``z(t) = eta`` (Euler-Maruyama,
    left-point sums).  The residual is the absolute sample mean of the
    per-path difference; its standard error is returned together with the
    discretisation allowance ``c_disc * sqrt(dt)``.
    """
    P, K = paths.increments.shape
    dt = paths.dt
    t = paths.grid.times
    k0 = test.k0
    if not 0 <= k0 < K:
        raise ConfigurationError(f"k0 must be in [0, {K})")
    y = sol.y.values
    Y = sol.Y.values
    if y.ndim != 2:
        raise ShapeError("scalar BSDE solutions only")
    z = np.empty((P, K + 1))
    z[:, k0] = test.eta(t[k0], paths.W[:, k0])
    rhs = np.zeros(P)
    for k in range(k0, K):
        w = paths.W[:, k]
        u = test.u(t[k], w)
        v = test.v(t[k], w)
        f = gen(t[k], y[:, k], Y[:, k], k)
        rhs += (z[:, k] * f + u * y[:, k] + v * Y[:, k]) * dt
        z[:, k + 1] = z[:, k] + u * dt + v * paths.increments[:, k]
    lhs = z[:, K] * y[:, K] - z[:, k0] * y[:, k0]
    d = lhs - rhs
    mean, se = mc_mean(d)
    return TranspositionResidual(
        float(lhs.mean()), float(rhs.mean()), float(abs(mean)), float(se), c_disc * np.sqrt(dt)
    )


def random_test_triple(rng: np.random.Generator, K: int, T: float) -> TestTriple:
    """Bounded test processes: ``tanh`` of random quadratics in ``W``."""
    k0 = int(rng.integers(0, K // 2))
    ce, cu, cv = rng.uniform(-1, 1, size=(3, 3))

    def mk(c):
        return lambda t, w: np.tanh(c[0] + c[1] * w + c[2] * w * w)

    return TestTriple(k0, mk(ce), mk(cu), mk(cv))


@dataclass(frozen=True)
class NormProbe:
    C_hat: float
    numerator: float
    denominator: float
    degenerate: bool


def norm_estimate_probe(sol: BSDESolution, gen: GeneratorSpec, terminal, paths: PathBundle) -> NormProbe:
    """Ratio ``||(y, Y)|| / (||f(., 0, 0)|| + ||y_T||)`` with ``p = 2`` norms.

    ``||(y, Y)|| = sup_t (E|y(t)|^2)^{1/2} + (E int |Y|^2 dt)^{1/2}`` and
    ``||f(., 0, 0)|| = (E (int |f(t, 0, 0)| dt)^2)^{1/2}``.
    """
    yT = _terminal_values(terminal, paths)
    P, K = paths.increments.shape
    dt = paths.dt
    t = paths.grid.times
    y = sol.y.values
    Y = sol.Y.values
    sq = lambda a: (a**2).reshape(a.shape[0], a.shape[1], -1).sum(axis=2) if a.ndim > 2 else a**2
    num = float(np.sqrt(sq(y).mean(axis=0).max()) + np.sqrt((sq(Y[:, :K]).sum(axis=1) * dt).mean()))
    z = np.zeros_like(y[:, 0])
    f0 = np.stack([np.abs(np.asarray(gen(t[k], z, z, k))).reshape(P, -1).sum(axis=1) for k in range(K)], axis=1)
    fnorm = float(np.sqrt(((f0.sum(axis=1) * dt) ** 2).mean()))
    tnorm = float(np.sqrt((yT.reshape(P, -1) ** 2).sum(axis=1).mean()))
    den = fnorm + tnorm
    if den == 0.0 or num == 0.0:
        return NormProbe(float("nan"), num, den, True)
    return NormProbe(num / den, num, den, False)
