"""Stochastic maximum principle checks for ``dx = a dt + b dW``.

Cost ``J(u) = E[ int_0^T g(t, x, u) dt + h(x(T)) ]`` (minimised).
Hamiltonian ``H(t, x, u, y1, y2) = <y1, a> + <y2, b> - g``.

Shapes: states ``x`` are ``(P, n)``, controls ``u`` are scalar per path
``(P,)``; ``a``, ``b`` return ``(P, n)``, ``g`` and ``h`` return ``(P,)``,
first derivatives in ``x`` return ``(P, n, n)`` (``[p, i, j] = d a_i / d x_j``)
for ``a``, ``b`` and ``(P, n)`` for ``g``, ``h``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .bsde import BSDESolution, GeneratorSpec, solve_bsde_lsmc
from .core import PathBundle, mc_mean
from .errors import (
    ConfigurationError,
    DivergenceError,
    DomainError,
    ResourceGuardError,
    RestrictionError,
    ShapeError,
)


def _zero_vec(t, x, u):
    return np.zeros_like(x)


@dataclass(frozen=True)
class ControlProblem:
    """Controlled SDE with running and terminal cost.

    ``U`` is the finite control set used for DP and for the ``for all u``
    checks (for an interval, a grid over it); ``U_interval`` marks a convex
    interval set.  Second derivatives ``a_xx``, ``b_xx`` return
    ``(P, n, n, n)`` and may be left as ``None`` when they vanish.
    """

    name: str
    n: int
    x0: np.ndarray
    T: float
    a: Callable
    b: Callable
    g: Callable
    h: Callable
    a_x: Callable
    b_x: Callable
    g_x: Callable
    h_x: Callable
    h_xx: Callable
    g_xx: Callable
    U: np.ndarray
    a_xx: Optional[Callable] = None
    b_xx: Optional[Callable] = None
    a_u: Optional[Callable] = None
    b_u: Optional[Callable] = None
    g_u: Optional[Callable] = None
    U_interval: Optional[tuple] = None
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(self.n))
        U = np.atleast_1d(np.asarray(self.U, dtype=float))
        if U.size == 0:
            raise ConfigurationError("U must be nonempty")
        object.__setattr__(self, "U", U)
        if not self.T > 0:
            raise ConfigurationError("T must be positive")


def scalar_problem(name, x0, T, a, b, g, h, a_x, b_x, g_x, h_x, h_xx, g_xx, U,
                   a_xx=None, b_xx=None, a_u=None, b_u=None, g_u=None, U_interval=None, params=None):
    """Build an ``n = 1`` problem from functions of scalar arrays ``x`` of shape ``(P,)``."""

    def vec(f):
        return None if f is None else (lambda t, x, u: f(t, x[:, 0], u)[:, None])

    def mat(f):
        return None if f is None else (lambda t, x, u: f(t, x[:, 0], u)[:, None, None])

    def ten(f):
        return None if f is None else (lambda t, x, u: f(t, x[:, 0], u)[:, None, None, None])

    def sca(f):
        return lambda t, x, u: f(t, x[:, 0], u)

    return ControlProblem(
        name, 1, np.atleast_1d(float(x0)), T,
        vec(a), vec(b), sca(g), lambda x: h(x[:, 0]),
        mat(a_x), mat(b_x), vec(g_x), lambda x: h_x(x[:, 0])[:, None],
        lambda x: h_xx(x[:, 0])[:, None, None], mat(g_xx), U,
        ten(a_xx), ten(b_xx), vec(a_u), vec(b_u), sca(g_u) if g_u else None,
        U_interval, dict(params or {}),
    )


def _c(x, v):
    return np.full(np.shape(x), float(v))


def _control_set(U, lo, hi, n):
    U = np.linspace(lo, hi, n) if U is None else np.atleast_1d(np.asarray(U, dtype=float))
    if U.size == 0:
        raise ConfigurationError("U must be nonempty")
    return U


def lq_additive(q=1.0, r=1.0, s=1.0, sigma=0.5, x0=1.0, T=1.0, U=None, c=0.0):
    """``a = u``, ``b = sigma``, ``g = (q x^2 + r u^2)/2 + c``, ``h = s x^2/2``."""
    U = _control_set(U, -3, 3, 121)
    return scalar_problem(
        "lq_additive", x0, T,
        a=lambda t, x, u: u + 0 * x,
        b=lambda t, x, u: _c(x, sigma),
        g=lambda t, x, u: 0.5 * (q * x * x + r * u * u) + c,
        h=lambda x: 0.5 * s * x * x,
        a_x=lambda t, x, u: _c(x, 0), b_x=lambda t, x, u: _c(x, 0),
        g_x=lambda t, x, u: q * x, h_x=lambda x: s * x, h_xx=lambda x: _c(x, s),
        g_xx=lambda t, x, u: _c(x, q), U=U,
        a_u=lambda t, x, u: _c(x, 1), b_u=lambda t, x, u: _c(x, 0),
        g_u=lambda t, x, u: r * u + 0 * x,
        U_interval=(float(np.min(U)), float(np.max(U))),
        params=dict(q=q, r=r, s=s, sigma=sigma, x0=x0, T=T, c=c),
    )


def lq_multiplicative(q=1.0, r=1.0, s=1.0, alpha=0.2, sigma=0.3, delta=0.5, x0=1.0, T=1.0, U=None):
    """``a = alpha x + u``, ``b = sigma x + delta u``, quadratic costs."""
    U = _control_set(U, -3, 3, 121)
    return scalar_problem(
        "lq_multiplicative", x0, T,
        a=lambda t, x, u: alpha * x + u,
        b=lambda t, x, u: sigma * x + delta * u,
        g=lambda t, x, u: 0.5 * (q * x * x + r * u * u),
        h=lambda x: 0.5 * s * x * x,
        a_x=lambda t, x, u: _c(x, alpha), b_x=lambda t, x, u: _c(x, sigma),
        g_x=lambda t, x, u: q * x, h_x=lambda x: s * x, h_xx=lambda x: _c(x, s),
        g_xx=lambda t, x, u: _c(x, q), U=U,
        a_u=lambda t, x, u: _c(x, 1), b_u=lambda t, x, u: _c(x, delta),
        g_u=lambda t, x, u: r * u + 0 * x,
        U_interval=(float(np.min(U)), float(np.max(U))),
        params=dict(q=q, r=r, s=s, alpha=alpha, sigma=sigma, delta=delta, x0=x0, T=T),
    )


def bang_bang_finiteU(sigma=0.3, x0=1.0, T=1.0, U=(-1.0, 1.0)):
    """``a = u``, ``b = sigma``, ``g = x^2/2``, ``h = x^2/2``, ``U`` finite."""
    return scalar_problem(
        "bang_bang_finiteU", x0, T,
        a=lambda t, x, u: u + 0 * x,
        b=lambda t, x, u: _c(x, sigma),
        g=lambda t, x, u: 0.5 * x * x,
        h=lambda x: 0.5 * x * x,
        a_x=lambda t, x, u: _c(x, 0), b_x=lambda t, x, u: _c(x, 0),
        g_x=lambda t, x, u: x, h_x=lambda x: x, h_xx=lambda x: _c(x, 1),
        g_xx=lambda t, x, u: _c(x, 1), U=np.asarray(U, dtype=float),
        params=dict(sigma=sigma, x0=x0, T=T),
    )


def nonlinear_oscillator(x0=0.5, T=1.0, kappa=0.2, delta=0.5, U=None):
    """``a = -sin x + u``, ``b = kappa cos x + delta u``, quadratic costs.

    Nonzero second derivatives in ``x`` exercise the second-order terms of
    the variational equations.
    """
    U = _control_set(U, -2, 2, 81)
    return scalar_problem(
        "nonlinear_oscillator", x0, T,
        a=lambda t, x, u: -np.sin(x) + u,
        b=lambda t, x, u: kappa * np.cos(x) + delta * u,
        g=lambda t, x, u: 0.5 * (x * x + u * u),
        h=lambda x: 0.5 * x * x,
        a_x=lambda t, x, u: -np.cos(x), b_x=lambda t, x, u: -kappa * np.sin(x),
        g_x=lambda t, x, u: x, h_x=lambda x: x, h_xx=lambda x: _c(x, 1),
        g_xx=lambda t, x, u: _c(x, 1), U=U,
        a_xx=lambda t, x, u: np.sin(x), b_xx=lambda t, x, u: -kappa * np.cos(x),
        a_u=lambda t, x, u: _c(x, 1), b_u=lambda t, x, u: _c(x, delta),
        g_u=lambda t, x, u: u + 0 * x,
        U_interval=(float(np.min(U)), float(np.max(U))),
        params=dict(x0=x0, T=T, kappa=kappa, delta=delta),
    )


NAMED_INSTANCES = {
    "lq_additive": lq_additive,
    "lq_multiplicative": lq_multiplicative,
    "bang_bang_finiteU": bang_bang_finiteU,
    "nonlinear_oscillator": nonlinear_oscillator,
}


def named_problem(name: str, **overrides) -> ControlProblem:
    if name not in NAMED_INSTANCES:
        raise ConfigurationError(f"unknown problem {name!r}; choose from {sorted(NAMED_INSTANCES)}")
    if "U" in overrides and overrides["U"] is not None:
        overrides["U"] = np.asarray(overrides["U"], dtype=float)
    return NAMED_INSTANCES[name](**overrides)


def riccati_lq_value(q, r, s, sigma, x0, T) -> float:
    """Optimal cost of :func:`lq_additive` with ``U = R`` (continuous time).

    ``-S' = q - S^2 / r``, ``S(T) = s``, ``J* = S(0) x0^2 / 2 + sigma^2/2 int S``.
    """
    sol = solve_ivp(
        lambda t, z: [-(q - z[0] ** 2 / r), -0.5 * sigma**2 * z[0]],
        (T, 0.0), [s, 0.0], method="DOP853", rtol=1e-12, atol=1e-14,
    )
    S0, c0 = sol.y[:, -1]
    return 0.5 * S0 * x0**2 + c0


# --- simulation and cost ---------------------------------------------------


@dataclass(frozen=True)
class ControlledPath:
    """State ``x`` ``(P, K+1, n)`` and control ``u`` ``(P, K)`` on one bundle."""

    x: np.ndarray
    u: np.ndarray
    paths: PathBundle


def simulate(prob: ControlProblem, control, paths: PathBundle) -> ControlledPath:
    """Euler-Maruyama under a feedback policy or an open-loop control array.

    ``control`` is either an array of shape ``(P, K)`` (or a scalar), or a
    callable ``policy(k, t, x) -> (P,)``.
    """
    P, K = paths.increments.shape
    t = paths.grid.times
    dt = paths.dt
    x = np.empty((P, K + 1, prob.n))
    x[:, 0] = prob.x0
    if callable(control):
        u = np.empty((P, K))
    else:
        u = np.broadcast_to(np.asarray(control, dtype=float), (P, K)).copy()
    for k in range(K):
        if callable(control):
            u[:, k] = control(k, t[k], x[:, k])
        xk = x[:, k]
        x[:, k + 1] = xk + prob.a(t[k], xk, u[:, k]) * dt + prob.b(t[k], xk, u[:, k]) * paths.increments[:, k, None]
        if not np.all(np.isfinite(x[:, k + 1])):
            raise DivergenceError("non-finite controlled state", k)
    return ControlledPath(x, u, paths)


def cost_samples(prob: ControlProblem, cp: ControlledPath) -> np.ndarray:
    """Per-path ``sum_k g(t_k, x_k, u_k) dt + h(x_K)``."""
    t = cp.paths.grid.times
    K = cp.u.shape[1]
    run = sum(prob.g(t[k], cp.x[:, k], cp.u[:, k]) for k in range(K)) * cp.paths.dt
    return run + prob.h(cp.x[:, K])


def cost(prob: ControlProblem, cp: ControlledPath):
    """Sample mean of the cost and its standard error."""
    return mc_mean(cost_samples(prob, cp))


def hamiltonian(t, x, u, y1, y2, prob: ControlProblem):
    """``<y1, a(t,x,u)> + <y2, b(t,x,u)> - g(t,x,u)``, vectorised over paths."""
    n = prob.n
    scalar = np.ndim(u) == 0
    x = np.asarray(x, dtype=float).reshape(-1, n)
    u = np.asarray(u, dtype=float).reshape(-1)
    y1 = np.asarray(y1, dtype=float).reshape(-1, n)
    y2 = np.asarray(y2, dtype=float).reshape(-1, n)
    H = (y1 * prob.a(t, x, u)).sum(axis=1) + (y2 * prob.b(t, x, u)).sum(axis=1) - prob.g(t, x, u)
    return float(H[0]) if scalar and H.size == 1 else H


# --- adjoints ---------------------------------------------------------------


def _along(fun, cp: ControlledPath) -> np.ndarray:
    t = cp.paths.grid.times
    return np.stack([fun(t[k], cp.x[:, k], cp.u[:, k]) for k in range(cp.u.shape[1])], axis=1)


@dataclass(frozen=True)
class AdjointPair1:
    """First-order adjoint ``(y, Y)``, arrays of shape ``(P, K+1, n)``."""

    y: np.ndarray
    Y: np.ndarray
    solution: BSDESolution
    terminal_error: float


def first_adjoint(prob: ControlProblem, cp: ControlledPath, degree: int = 4) -> AdjointPair1:
    """Solve ``dy = (-a_x^T y - b_x^T Y + g_x) dt + Y dW``, ``y(T) = -h_x(x(T))``.

    Conditional expectations are regressions on polynomial features of
    the state ``x(t)``.
    """
    AX = _along(prob.a_x, cp)
    BX = _along(prob.b_x, cp)
    GX = _along(prob.g_x, cp)

    def f(t, y, Y, k):
        return -np.einsum("pji,pj->pi", AX[:, k], y) - np.einsum("pji,pj->pi", BX[:, k], Y) + GX[:, k]

    CL = float(np.abs(AX).max() + np.abs(BX).max()) * prob.n
    gen = GeneratorSpec(f, CL)
    K = cp.u.shape[1]
    yT = -prob.h_x(cp.x[:, K])
    sol = solve_bsde_lsmc(gen, yT, cp.paths, degree=degree, state=cp.x)
    err = float(np.abs(sol.y.values[:, K] - yT).max())
    return AdjointPair1(sol.y.values, sol.Y.values, sol, err)


@dataclass(frozen=True)
class SecondAdjoint:
    """Deterministic second-order adjoint ``P(t)`` on the grid, ``(K+1, n, n)``.

    ``Q`` is identically zero under the deterministic-coefficient restriction
    recorded in ``restricted``.
    """

    P: np.ndarray
    Q: np.ndarray
    restricted: bool = True

    @property
    def max_asymmetry(self) -> float:
        return float(np.abs(self.P - np.swapaxes(self.P, 1, 2)).max())


def _deterministic(arr: np.ndarray, name: str, tol: float) -> np.ndarray:
    mean = arr.mean(axis=0)
    spread = np.abs(arr - mean).max() if arr.size else 0.0
    if spread > tol * (1.0 + np.abs(mean).max()):
        raise RestrictionError(
            f"{name} varies across paths (spread {spread:.3g}); random-coefficient second "
            "adjoints need the matrix-valued BSDE, which is not implemented"
        )
    return mean


def hamiltonian_xx(prob: ControlProblem, cp: ControlledPath, adj1: AdjointPair1) -> np.ndarray:
    """``H_xx = sum_i y_i a^i_xx + Y_i b^i_xx - g_xx`` along the path, ``(P, K, n, n)``."""
    H = -_along(prob.g_xx, cp)
    K = cp.u.shape[1]
    if prob.a_xx is not None:
        H = H + np.einsum("pki,pkijl->pkjl", adj1.y[:, :K], _along(prob.a_xx, cp))
    if prob.b_xx is not None:
        H = H + np.einsum("pki,pkijl->pkjl", adj1.Y[:, :K], _along(prob.b_xx, cp))
    return H


def second_adjoint(prob: ControlProblem, cp: ControlledPath, adj1: AdjointPair1, tol: float = 1e-10) -> SecondAdjoint:
    """``dP/dt = -(a_x^T P + P a_x + b_x^T P b_x + H_xx)``, ``P(T) = -h_xx``.

    Coefficients are frozen at the left end of each grid step and each
    step is integrated exactly with a matrix exponential.

    Raises
    ------
    RestrictionError
        If ``a_x``, ``b_x``, ``H_xx`` or ``h_xx(x(T))`` vary across paths.
    """
    n = prob.n
    K = cp.u.shape[1]
    dt = cp.paths.dt
    AX = _deterministic(_along(prob.a_x, cp), "a_x", tol)
    BX = _deterministic(_along(prob.b_x, cp), "b_x", tol)
    HXX = _deterministic(hamiltonian_xx(prob, cp, adj1), "H_xx", tol)
    PT = _deterministic(prob.h_xx(cp.x[:, K]), "h_xx", tol)
    P = np.empty((K + 1, n, n))
    P[K] = -PT
    I = np.eye(n)
    for k in range(K - 1, -1, -1):
        A, B = AX[k], BX[k]
        L = np.kron(A.T, I) + np.kron(I, A.T) + np.kron(B.T, B.T)
        M = np.zeros((n * n + 1, n * n + 1))
        M[:-1, :-1] = L
        M[:-1, -1] = HXX[k].reshape(-1)
        v = expm(M * dt) @ np.append(P[k + 1].reshape(-1), 1.0)
        P[k] = v[:-1].reshape(n, n)
    return SecondAdjoint(P, np.zeros_like(P), True)


# --- dynamic programming oracle --------------------------------------------


@dataclass(frozen=True)
class DPPolicy:
    """Optimal feedback on the binomial tree.

    ``states[k]`` holds the distinct reachable states at level ``k``
    (sorted for ``n = 1``) and ``controls[k]`` the optimal control there.
    Off-tree states use the nearest tree state (``n = 1``).
    """

    states: List[np.ndarray]
    controls: List[np.ndarray]
    values: List[np.ndarray]
    J: float
    U: np.ndarray

    def __call__(self, k, t, x):
        S = self.states[k]
        x = np.asarray(x, dtype=float)
        if S.shape[1] == 1:
            s = S[:, 0]
            xi = x.reshape(-1)
            j = np.clip(np.searchsorted(s, xi), 1, len(s) - 1) if len(s) > 1 else np.zeros(len(xi), int)
            if len(s) > 1:
                j = np.where(np.abs(s[j - 1] - xi) <= np.abs(s[j] - xi), j - 1, j)
            return self.controls[k][j]
        d = ((x[:, None, :] - S[None]) ** 2).sum(axis=2)
        return self.controls[k][np.argmin(d, axis=1)]


def dp_oracle(prob: ControlProblem, K: int, max_K: int = 12, max_evals: float = 5e7, key_decimals: int = 10) -> DPPolicy:
    """Exact dynamic programming for the discrete model with ``dW = ±sqrt(dt)``.

    States reachable from ``x0`` are enumerated level by level and merged
    when equal to ``key_decimals`` decimals, so lattice dynamics (e.g.
    ``a = u`` on a uniform ``U`` grid with additive noise) recombine.

    Raises
    ------
    ResourceGuardError
        If ``K > max_K`` or the number of state-control evaluations
        exceeds ``max_evals``.
    """
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    if K > max_K:
        raise ResourceGuardError(f"K={K} exceeds the guard {max_K}")
    U = prob.U
    nU = U.size
    dt = prob.T / K
    sdt = np.sqrt(dt)
    t = np.arange(K + 1) * dt
    levels = [prob.x0[None, :]]
    children = []
    evals = 0
    for k in range(K):
        S = levels[-1]
        ns = S.shape[0]
        evals += ns * nU
        if evals > max_evals:
            raise ResourceGuardError(f"DP needs more than {max_evals:.0e} evaluations")
        X = np.repeat(S, nU, axis=0)
        uu = np.tile(U, ns)
        a = prob.a(t[k], X, uu)
        b = prob.b(t[k], X, uu)
        ch = np.concatenate([X + a * dt + b * sdt, X + a * dt - b * sdt])
        keys = np.round(ch, key_decimals)
        if prob.n == 1:
            uniq, inv = np.unique(keys[:, 0], return_inverse=True)
        else:
            uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        # representative value: first occurrence of each key
        first = np.full(len(uniq), -1)
        first[inv[::-1]] = np.arange(len(inv))[::-1]
        levels.append(ch[first])
        m = ns * nU
        children.append((inv[:m].reshape(ns, nU), inv[m:].reshape(ns, nU)))
    V = prob.h(levels[K])
    values = [None] * (K + 1)
    controls = [None] * K
    values[K] = V
    for k in range(K - 1, -1, -1):
        S = levels[k]
        ns = S.shape[0]
        X = np.repeat(S, nU, axis=0)
        uu = np.tile(U, ns)
        run = prob.g(t[k], X, uu).reshape(ns, nU) * dt
        up, dn = children[k]
        Q = run + 0.5 * (V[up] + V[dn])
        j = np.argmin(Q, axis=1)
        controls[k] = U[j]
        V = Q[np.arange(ns), j]
        values[k] = V
    order = [np.argsort(L[:, 0], kind="stable") if prob.n == 1 else np.arange(len(L)) for L in levels]
    return DPPolicy(
        [levels[k][order[k]] for k in range(K + 1)],
        [controls[k][order[k]] for k in range(K)],
        [values[k][order[k]] for k in range(K + 1)],
        float(values[0][0]),
        U,
    )


# --- maximum principle inequality ------------------------------------------


@dataclass(frozen=True)
class MPReport:
    """Minimum of ``S(t, u, w)`` over grid, control grid and paths.

    ``S = H(ubar) - H(u) - <P db, db>/2`` with ``db = b(ubar) - b(u)``.
    ``S_mean`` and ``S_min`` are ``(K, |U|)`` tables (mean and minimum
    over paths).
    """

    min_S: float
    t_min: float
    u_min: float
    path_min: int
    tol_MP: float
    se_S: float
    S_mean: np.ndarray
    S_min: np.ndarray
    U: np.ndarray
    times: np.ndarray

    @property
    def passed(self) -> bool:
        return self.min_S >= -self.tol_MP

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u", "S_mean", "S_min"])
            for k, tk in enumerate(self.times):
                for j, uj in enumerate(self.U):
                    w.writerow([f"{tk:.17g}", f"{uj:.17g}", f"{self.S_mean[k, j]:.17g}", f"{self.S_min[k, j]:.17g}"])


def _spike_integrand(prob, t, x, ubar, u, y, Y, P):
    db = prob.b(t, x, ubar) - prob.b(t, x, u)
    quad = np.einsum("pi,ij,pj->p", db, P, db)
    return hamiltonian(t, x, ubar, y, Y, prob) - hamiltonian(t, x, u, y, Y, prob) - 0.5 * quad


def check_mp_inequality(
    prob: ControlProblem,
    cp: ControlledPath,
    adj1: AdjointPair1,
    adj2: SecondAdjoint,
    U_grid=None,
    se_mult: float = 3.0,
    dt_mult: float = 5.0,
) -> MPReport:
    """Evaluate the maximum-principle inequality on grid x U x paths.

    ``tol_MP = se_mult * SE + dt_mult * dt``, where ``SE`` propagates the
    regression standard errors of ``y`` and ``Y`` through the largest
    ``|a(u) - a(ubar)|`` and ``|b(u) - b(ubar)|`` seen at each step.
    """
    U = prob.U if U_grid is None else np.atleast_1d(np.asarray(U_grid, dtype=float))
    K = cp.u.shape[1]
    t = cp.paths.grid.times
    dt = cp.paths.dt
    S_mean = np.empty((K, U.size))
    S_min = np.empty((K, U.size))
    best = (np.inf, 0, 0, 0)
    se_S = 0.0
    for k in range(K):
        x, ub = cp.x[:, k], cp.u[:, k]
        y, Y = adj1.y[:, k], adj1.Y[:, k]
        da_max = db_max = 0.0
        for j, uj in enumerate(U):
            uu = np.full_like(ub, uj)
            S = _spike_integrand(prob, t[k], x, ub, uu, y, Y, adj2.P[k])
            S_mean[k, j] = S.mean()
            i = int(np.argmin(S))
            S_min[k, j] = S[i]
            if S[i] < best[0]:
                best = (float(S[i]), k, j, i)
            da_max = max(da_max, float(np.abs(prob.a(t[k], x, uu) - prob.a(t[k], x, ub)).max()))
            db_max = max(db_max, float(np.abs(prob.b(t[k], x, uu) - prob.b(t[k], x, ub)).max()))
        se_S = max(se_S, adj1.solution.fit_se_y[k] * da_max + adj1.solution.fit_se_Y[k] * db_max)
    tol = se_mult * se_S + dt_mult * dt
    m, k, j, i = best
    return MPReport(m, float(t[k]), float(U[j]), i, float(tol), float(se_S), S_mean, S_min, U, t[:K])


# --- spike variation --------------------------------------------------------


@dataclass(frozen=True)
class SpikeReport:
    """Spike variation on ``[tau, tau + eps)`` for each ``eps``.

    ``slopes[i]`` is ``(J(u^eps) - J(ubar)) / eps`` with standard error
    ``slope_se[i]``.  ``predicted`` is the mean at ``tau`` of
    ``H(ubar) - H(u_spike) - <P db, db>/2``; ``predicted_window[i]`` is its
    average over the spike window.  ``res1`` and ``res2`` are
    ``sup_t RMS |x^eps - xbar - x1|`` and ``sup_t RMS |x^eps - xbar - x1 - x2|``.
    """

    tau: float
    u_spike: float
    eps: np.ndarray
    slopes: np.ndarray
    slope_se: np.ndarray
    predicted: float
    predicted_se: float
    predicted_window: np.ndarray
    res1: np.ndarray
    res2: np.ndarray
    x1_rms: np.ndarray
    x2_rms: np.ndarray
    floor: float

    def order(self, which: str = "res2") -> float:
        """Least-squares slope of ``log res`` against ``log eps``.

        Returns ``inf`` when every residual is at the rounding floor
        (the expansion is exact).
        """
        r = getattr(self, which)
        if np.all(r <= self.floor):
            return float("inf")
        r = np.maximum(r, self.floor)
        return float(np.polyfit(np.log(self.eps), np.log(r), 1)[0])

    def slope_ok(self, kappa: float = 2.0) -> np.ndarray:
        """``|slope - predicted| <= 3 SE + kappa * eps`` per ``eps``."""
        return np.abs(self.slopes - self.predicted) <= 3 * np.hypot(self.slope_se, self.predicted_se) + kappa * self.eps


def _vec2(fun, t, x, u):
    return fun(t, x, u) if fun is not None else None


def spike_variation(
    prob: ControlProblem,
    cp: ControlledPath,
    tau: float,
    u_spike: float,
    eps_list: Sequence[float],
    adj1: AdjointPair1,
    adj2: SecondAdjoint,
) -> SpikeReport:
    """Finite-difference cost slopes and variational expansion for a spike.

    ``cp`` holds the reference pair ``(xbar, ubar)``; ``ubar`` is kept as a
    fixed adapted process and replaced by ``u_spike`` on the steps
    ``tau <= t_k < tau + eps``.
    """
    eps = np.asarray(eps_list, dtype=float)
    if np.any(np.diff(eps) >= 0):
        raise ConfigurationError("eps list must be strictly decreasing")
    paths = cp.paths
    P, K = cp.u.shape
    dt = paths.dt
    t = paths.grid.times
    if tau + eps.max() > prob.T + 1e-12:
        raise DomainError("tau + max(eps) must not exceed T")
    k_tau = paths.grid.index(tau)
    J0 = cost_samples(prob, cp)
    xb = cp.x
    dW = paths.increments
    slopes, ses, pw, r1, r2, n1, n2 = [], [], [], [], [], [], []
    for e in eps:
        m = int(round(e / dt))
        if m < 1 or abs(m * dt - e) > 1e-9:
            raise ConfigurationError(f"eps={e} is not a multiple of dt={dt}")
        ue = cp.u.copy()
        ue[:, k_tau:k_tau + m] = u_spike
        ce = simulate(prob, ue, paths)
        dJ = cost_samples(prob, ce) - J0
        mean, se = mc_mean(dJ)
        slopes.append(mean / e)
        ses.append(se / e)
        x1 = np.zeros_like(xb)
        x2 = np.zeros_like(xb)
        win = []
        for k in range(K):
            xk, ub = xb[:, k], cp.u[:, k]
            us = ue[:, k]
            chi = k_tau <= k < k_tau + m
            AX = prob.a_x(t[k], xk, ub)
            BX = prob.b_x(t[k], xk, ub)
            da = prob.a(t[k], xk, us) - prob.a(t[k], xk, ub) if chi else 0.0
            db = prob.b(t[k], xk, us) - prob.b(t[k], xk, ub) if chi else 0.0
            dbx = prob.b_x(t[k], xk, us) - BX if chi else 0.0
            a2 = b2 = 0.0
            if prob.a_xx is not None:
                a2 = 0.5 * np.einsum("pijl,pj,pl->pi", prob.a_xx(t[k], xk, ub), x1[:, k], x1[:, k])
            if prob.b_xx is not None:
                b2 = 0.5 * np.einsum("pijl,pj,pl->pi", prob.b_xx(t[k], xk, ub), x1[:, k], x1[:, k])
            w = dW[:, k, None]
            x1[:, k + 1] = x1[:, k] + np.einsum("pij,pj->pi", AX, x1[:, k]) * dt + (
                np.einsum("pij,pj->pi", BX, x1[:, k]) + db) * w
            x2[:, k + 1] = x2[:, k] + (np.einsum("pij,pj->pi", AX, x2[:, k]) + da + a2) * dt + (
                np.einsum("pij,pj->pi", BX, x2[:, k]) + (np.einsum("pij,pj->pi", dbx, x1[:, k]) if chi else 0.0) + b2) * w
            if chi:
                win.append(_spike_integrand(prob, t[k], xk, ub, us, adj1.y[:, k], adj1.Y[:, k], adj2.P[k]).mean())
        d = ce.x - xb
        rms = lambda z: np.sqrt((z**2).sum(axis=2).mean(axis=0)).max()
        r1.append(rms(d - x1))
        r2.append(rms(d - x1 - x2))
        n1.append(rms(x1))
        n2.append(rms(x2))
        pw.append(float(np.mean(win)))
    integrand = _spike_integrand(
        prob, t[k_tau], xb[:, k_tau], cp.u[:, k_tau], np.full(P, float(u_spike)),
        adj1.y[:, k_tau], adj1.Y[:, k_tau], adj2.P[k_tau],
    )
    pm, pse = mc_mean(integrand)
    floor = 1e-13 * (1.0 + float(np.abs(xb).max()))
    return SpikeReport(
        float(t[k_tau]), float(u_spike), eps, np.array(slopes), np.array(ses), float(pm), float(pse),
        np.array(pw), np.array(r1), np.array(r2), np.array(n1), np.array(n2), floor,
    )


# --- convex variation --------------------------------------------------------


@dataclass(frozen=True)
class ConvexReport:
    """Pairing ``<a_u^T y + b_u^T Y - g_u, u - ubar>`` over grid x U.

    ``max_mean_pairing`` is the largest path average and decides
    ``passed``; ``max_pairing`` is the largest single-path value, kept as
    telemetry because regression error in the tails of the state sample
    dominates it.
    """

    max_pairing: float
    t_max: float
    u_max: float
    max_gradient: float
    tol: float
    max_mean_pairing: float = float("nan")

    @property
    def passed(self) -> bool:
        return self.max_mean_pairing <= self.tol


def convex_variation_check(
    prob: ControlProblem,
    cp: ControlledPath,
    adj1: AdjointPair1,
    U_grid=None,
    se_mult: float = 3.0,
    dt_mult: float = 5.0,
) -> ConvexReport:
    """First-order condition for a convex (interval) control set.

    Raises
    ------
    ConfigurationError
        If ``a_u``, ``b_u`` or ``g_u`` are missing.
    """
    if prob.a_u is None or prob.b_u is None or prob.g_u is None:
        raise ConfigurationError("a_u, b_u and g_u are required")
    U = prob.U if U_grid is None else np.atleast_1d(np.asarray(U_grid, dtype=float))
    K = cp.u.shape[1]
    t = cp.paths.grid.times
    best = (-np.inf, 0, 0)
    mean_best = -np.inf
    gmax = 0.0
    se = 0.0
    for k in range(K):
        x, ub = cp.x[:, k], cp.u[:, k]
        grad = (prob.a_u(t[k], x, ub) * adj1.y[:, k]).sum(axis=1) + (
            prob.b_u(t[k], x, ub) * adj1.Y[:, k]).sum(axis=1) - prob.g_u(t[k], x, ub)
        gmax = max(gmax, float(np.abs(grad).max()))
        pair = grad[:, None] * (U[None, :] - ub[:, None])
        mean_best = max(mean_best, float(pair.mean(axis=0).max()))
        i, j = np.unravel_index(np.argmax(pair), pair.shape)
        if pair[i, j] > best[0]:
            best = (float(pair[i, j]), k, j)
        width = float(np.abs(U[None, :] - ub[:, None]).max())
        au = float(np.abs(prob.a_u(t[k], x, ub)).max())
        bu = float(np.abs(prob.b_u(t[k], x, ub)).max())
        se = max(se, width * (au * adj1.solution.fit_se_y[k] + bu * adj1.solution.fit_se_Y[k]))
    tol = se_mult * se + dt_mult * cp.paths.dt
    return ConvexReport(best[0], float(t[best[1]]), float(U[best[2]]), gmax, float(tol), mean_best)
