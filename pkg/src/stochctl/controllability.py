"""Controllability of linear (stochastic) ODE systems.

Rank tests are done by growing an orthonormal basis of the smallest
subspace that contains ``range(B)`` and is invariant under the given
matrices.  For one matrix ``A`` that is the Krylov space of the Kalman
test; for the pair ``(A1, A2)`` it is the span of every word in
``A1, A2`` applied to ``B1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.integrate import quad_vec, solve_ivp
from scipy.linalg import expm, null_space

from .core import AdaptedSamples, PathBundle, euler_maruyama, mc_mean
from .errors import (
    ConfigurationError,
    DomainError,
    NotControllableError,
    ReductionError,
    ResourceGuardError,
    ShapeError,
)

RANK_TOL = 1e-9


def _mat(M, name, shape=None) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise ConfigurationError(f"{name} has non-finite entries")
    if shape is not None:
        for got, want in zip(M.shape, shape):
            if want is not None and got != want:
                raise ShapeError(f"{name} has shape {M.shape}, expected {shape}")
    return M


def _cols(B, n, name) -> np.ndarray:
    """``B`` as an ``n x p`` matrix; ``p = 0`` is allowed."""
    B = np.asarray(B, dtype=float)
    if B.size == 0:
        return np.zeros((n, 0))
    if B.ndim == 1:
        B = B.reshape(n, -1)
    return _mat(B, name, (n, None))


@dataclass(frozen=True)
class RankCertificate:
    """Result of a rank test.

    Attributes
    ----------
    rank : int
    basis : ndarray, shape (n, rank)
        Orthonormal basis of the reachable (word) space.
    words : list of str
        The word whose image contributed each basis column.
    tol : float
    fixed_point_residual : float
        ``max_M ||(I - Q Q^T) M Q|| / ||M||`` over the generating
        matrices; below ``tol`` when the space is invariant.
    """

    rank: int
    n: int
    basis: np.ndarray
    words: List[str]
    tol: float
    fixed_point_residual: float

    @property
    def full(self) -> bool:
        return self.rank == self.n

    @property
    def certified(self) -> bool:
        return self.fixed_point_residual <= self.tol

    def summary(self) -> dict:
        return {
            "rank": self.rank,
            "n": self.n,
            "controllable": self.full,
            "words": list(self.words),
            "tol": self.tol,
            "fixed_point_residual": self.fixed_point_residual,
        }


def _orth_step(Q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # classical Gram-Schmidt, applied twice
    for _ in range(2):
        if Q.shape[1]:
            v = v - Q @ (Q.T @ v)
    return v


def _invariant_closure(gens: Dict[str, np.ndarray], B: np.ndarray, bname: str, tol: float) -> RankCertificate:
    n = B.shape[0]
    Q = np.zeros((n, 0))
    words: List[str] = []
    bscale = np.linalg.norm(B, 2) if B.size else 0.0
    queue: List[Tuple[np.ndarray, str]] = []
    for j in range(B.shape[1]):
        if bscale == 0.0:
            break
        r = _orth_step(Q, B[:, j])
        if np.linalg.norm(r) > tol * bscale:
            q = r / np.linalg.norm(r)
            Q = np.column_stack([Q, q])
            words.append(f"{bname}[:,{j}]")
            queue.append((q, words[-1]))
    norms = {k: np.linalg.norm(M, 2) for k, M in gens.items()}
    while queue and Q.shape[1] < n:
        q, w = queue.pop(0)
        for name, M in gens.items():
            if norms[name] == 0.0:
                continue
            r = _orth_step(Q, M @ q)
            if np.linalg.norm(r) > tol * norms[name]:
                r = r / np.linalg.norm(r)
                Q = np.column_stack([Q, r])
                words.append(f"{name}*{w}")
                queue.append((r, words[-1]))
                if Q.shape[1] == n:
                    break
    res = 0.0
    if Q.shape[1]:
        for name, M in gens.items():
            if norms[name] > 0:
                R = M @ Q - Q @ (Q.T @ (M @ Q))
                res = max(res, np.linalg.norm(R, 2) / norms[name])
    return RankCertificate(Q.shape[1], n, Q, words, tol, float(res))


def kalman_rank(A, B, tol: float = RANK_TOL) -> RankCertificate:
    """Rank of ``[B, AB, ..., A^{n-1} B]`` by subspace growth.

    Examples
    --------
    >>> kalman_rank([[0, 1], [0, 0]], [[0], [1]]).rank
    2
    """
    A = _mat(A, "A")
    n = A.shape[0]
    _mat(A, "A", (n, n))
    B = _cols(B, n, "B")
    return _invariant_closure({"A": A}, B, "B", tol)


def stochastic_rank(A1, A2, B1, tol: float = RANK_TOL) -> RankCertificate:
    """Dimension of the span of all words in ``A1, A2`` applied to ``B1``.

    Full rank is the exact-controllability condition for the reduced
    system ``dy = (A1 y + A2 v2 + B1 v1) dt + v2 dW``.
    """
    A1 = _mat(A1, "A1")
    n = A1.shape[0]
    _mat(A1, "A1", (n, n))
    A2 = _mat(A2, "A2", (n, n))
    B1 = _cols(B1, n, "B1")
    return _invariant_closure({"A1": A1, "A2": A2}, B1, "B1", tol)


@dataclass(frozen=True)
class GramianControl:
    """Minimum-energy steering control of ``y' = Ay + Bu``.

    ``control(t)`` returns ``u*(t)`` (shape ``(m,)``).
    """

    A: np.ndarray
    B: np.ndarray
    T: float
    y0: np.ndarray
    yT: np.ndarray
    G: np.ndarray
    cond: float
    terminal_error: float
    _lam: np.ndarray = field(repr=False)

    def control(self, t) -> np.ndarray:
        return -self.B.T @ expm(self.A.T * (self.T - t)) @ self._lam


def controllability_gramian(A, B, T: float) -> np.ndarray:
    """``G_T = int_0^T e^{At} B B^T e^{A^T t} dt`` by adaptive quadrature."""
    A = _mat(A, "A")
    B = _cols(B, A.shape[0], "B")

    def integrand(t):
        E = expm(A * t) @ B
        return E @ E.T

    G, _ = quad_vec(integrand, 0.0, T, epsabs=1e-15, epsrel=1e-13)
    return 0.5 * (G + G.T)


def terminal_state(A, B, T: float, y0, u: Callable, rtol: float = 1e-12, atol: float = 1e-14) -> np.ndarray:
    """Integrate ``y' = Ay + Bu(t)`` on ``[0, T]`` with DOP853."""
    A = _mat(A, "A")
    B = _cols(B, A.shape[0], "B")
    sol = solve_ivp(
        lambda t, y: A @ y + B @ np.atleast_1d(u(t)),
        (0.0, T),
        np.asarray(y0, dtype=float),
        method="DOP853",
        rtol=rtol,
        atol=atol,
    )
    return sol.y[:, -1]


def gramian_control(A, B, T: float, y0, yT, max_cond: float = 1e12) -> GramianControl:
    """Steer ``y0`` to ``yT`` at time ``T`` with the Gramian control.

    Raises
    ------
    NotControllableError
        If the Kalman rank is deficient or ``cond(G_T) > max_cond``.
    """
    if not T > 0:
        raise DomainError("T must be positive")
    A = _mat(A, "A")
    n = A.shape[0]
    B = _cols(B, n, "B")
    y0 = np.asarray(y0, dtype=float).reshape(n)
    yT = np.asarray(yT, dtype=float).reshape(n)
    cert = kalman_rank(A, B)
    if not cert.full:
        raise NotControllableError(f"Kalman rank {cert.rank} < {n}")
    G = controllability_gramian(A, B, T)
    cond = float(np.linalg.cond(G))
    if not cond <= max_cond:
        raise NotControllableError(f"Gramian condition number {cond:.3g} exceeds {max_cond:.1g}")
    lam = np.linalg.solve(G, expm(A * T) @ y0 - yT)
    gc = GramianControl(A, B, float(T), y0, yT, G, cond, float("nan"), lam)
    yend = terminal_state(A, B, T, y0, gc.control)
    err = float(np.linalg.norm(yend - yT))
    return GramianControl(A, B, float(T), y0, yT, G, cond, err, lam)


@dataclass(frozen=True)
class LinearStochasticSystem:
    """``dy = (Ay + Bu) dt + (Cy + Du) dW``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _mat(self.A, "A")
        n = A.shape[0]
        _mat(A, "A", (n, n))
        B = _cols(self.B, n, "B")
        m = B.shape[1]
        C = _mat(self.C, "C", (n, n))
        D = _cols(self.D, n, "D")
        if D.shape[1] != m:
            raise ShapeError(f"D has {D.shape[1]} columns, B has {m}")
        for k, v in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class NecessaryConditions:
    rankD_full: bool
    kalman_AB: bool
    rank_D: int
    kalman_rank: int

    @property
    def possible(self) -> bool:
        return self.rankD_full and self.kalman_AB


def _rank(M, tol=RANK_TOL) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol * s[0])) if s[0] > 0 else 0


def necessary_conditions(sys: LinearStochasticSystem) -> NecessaryConditions:
    """Two necessary conditions for exact controllability with L^2 controls."""
    rD = _rank(sys.D)
    cert = kalman_rank(sys.A, sys.B)
    return NecessaryConditions(rD == sys.n, cert.full, rD, cert.rank)


@dataclass(frozen=True)
class ReducedSystem:
    """``dy = (A1 y + A2 v2 + B1 v1) dt + v2 dW`` with ``u = K1 (v2; v1) + K2 y``."""

    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    residual: float


def _canonical_sign(N: np.ndarray) -> np.ndarray:
    N = N.copy()
    for j in range(N.shape[1]):
        i = np.flatnonzero(np.abs(N[:, j]) > 1e-12)
        if i.size and N[i[0], j] < 0:
            N[:, j] = -N[:, j]
    return N


def reduce_system(sys: LinearStochasticSystem, tol: float = 1e-10) -> ReducedSystem:
    """Eliminate ``C`` and normalise ``D`` by the feedback ``u = K1 v + K2 y``.

    ``K1 = [D^+, null(D)]`` and ``K2 = -D^+ C``, so that ``D K1 = (I, 0)``
    and ``D K2 = -C``.

    Raises
    ------
    ReductionError
        If ``rank D < n``.
    """
    n, m = sys.n, sys.m
    if _rank(sys.D) < n:
        raise ReductionError(f"rank D = {_rank(sys.D)} < n = {n}")
    Dp = np.linalg.pinv(sys.D)
    N = _canonical_sign(null_space(sys.D)) if m > n else np.zeros((m, 0))
    K1 = np.column_stack([Dp, N])
    K2 = -Dp @ sys.C
    target = np.column_stack([np.eye(n), np.zeros((n, m - n))])
    res = max(
        np.abs(sys.D @ K1 - target).max(),
        np.abs(sys.D @ K2 + sys.C).max() if n else 0.0,
    )
    scale = 1.0 + np.abs(sys.C).max()
    if res > tol * scale:
        raise ReductionError(f"reduction residual {res:.3g} above tolerance")
    BK1 = sys.B @ K1
    return ReducedSystem(sys.A + sys.B @ K2, BK1[:, :n], BK1[:, n:], K1, K2, float(res))


@dataclass(frozen=True)
class OracleVerdict:
    observable: bool
    nullspace_dim: int
    steps: int
    dt: float
    constraints: int


def binomial_observability_oracle(A1, A2, B1, steps: int, dt: float = 0.1, max_steps: int = 12) -> OracleVerdict:
    """Exact observability test for the sign-path discretisation of the dual.

    Every sign sequence ``s in {-1, +1}^K`` defines
    ``z_{k+1} = (I + A1^T dt + s_k A2^T sqrt(dt)) z_k``; the constraints
    ``B1^T z_k(s) = 0`` for all ``k <= K`` and all ``s`` are stacked and
    the dimension of their common null space in ``z_0`` is returned.

    Raises
    ------
    ResourceGuardError
        If ``steps > max_steps``.
    """
    A1 = _mat(A1, "A1")
    n = A1.shape[0]
    A2 = _mat(A2, "A2", (n, n))
    B1 = _cols(B1, n, "B1")
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if steps > max_steps:
        raise ResourceGuardError(f"2^{steps} sign paths exceed the guard 2^{max_steps}")
    if B1.shape[1] == 0 or not np.any(B1):
        return OracleVerdict(False, n, steps, dt, 0)
    I = np.eye(n)
    Mp = I + A1.T * dt + A2.T * np.sqrt(dt)
    Mm = I + A1.T * dt - A2.T * np.sqrt(dt)
    level = I[None]
    rows = [B1.T @ I]
    for _ in range(steps):
        level = np.concatenate([Mp @ level, Mm @ level])
        rows.extend(B1.T @ level)
    S = np.concatenate(rows, axis=0)
    r = _rank(S)
    return OracleVerdict(r == n, n - r, steps, dt, S.shape[0])


@dataclass(frozen=True)
class DualStatistic:
    statistic: float
    se: float
    t_argmax: float


def simulate_dual(A1, A2, B1, z0, paths: PathBundle) -> DualStatistic:
    """Euler-Maruyama for ``dz = -A1^T z dt - A2^T z dW``.

    Returns the maximum over the grid of the sample mean of
    ``|B1^T z(t)|^2`` and its standard error at the maximiser.
    """
    A1 = _mat(A1, "A1")
    n = A1.shape[0]
    A2 = _mat(A2, "A2", (n, n))
    B1 = _cols(B1, n, "B1")
    z0 = np.asarray(z0, dtype=float).reshape(n)
    Z = euler_maruyama(lambda t, z, k: -z @ A1, lambda t, z, k: -z @ A2, z0, paths).values
    obs = np.einsum("pkn,nj->pkj", Z, B1)
    sq = (obs**2).sum(axis=2)
    mean, se = mc_mean(sq, axis=0)
    k = int(np.argmax(mean))
    return DualStatistic(float(mean[k]), float(se[k]), float(paths.grid.times[k]))


# --- the eta profile ------------------------------------------------------


def _plus_intervals(T: float, i_max: int) -> np.ndarray:
    i = np.arange(i_max + 1)
    return np.stack([(1 - 4.0**-i) * T, (1 - 0.5 * 4.0**-i) * T], axis=1)


def eta(t, T: float) -> np.ndarray:
    """The +-1 profile: ``+1`` on ``[(1-2^{-2i})T, (1-2^{-2i-1})T)``, else ``-1``.

    Raises
    ------
    DomainError
        If any ``t`` lies outside ``[0, T)``.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t >= T):
        raise DomainError("eta is defined for 0 <= t < T")
    # remaining fraction s = 1 - t/T in (0, 1]; plus iff s in (4^-i/2, 4^-i]
    s = 1.0 - t / T
    j = np.floor(-np.log2(s))  # s in (2^-(j+1), 2^-j]
    # guard against rounding at exact powers of two
    j = np.where(s > 2.0 ** -(j + 1), j, j + 1)
    j = np.where(s <= 2.0**-j, j, j - 1)
    out = np.where(j % 2 == 0, 1.0, -1.0)
    return out if out.ndim else float(out)


def _eta_integral(t: np.ndarray, T: float, i_max: int) -> np.ndarray:
    """``int_t^T eta ds`` for ``t <= (1 - 4^{-(i_max+1)}) T``.

    The profile is invariant under ``T - s -> (T - s)/4``, so its mean over
    ``[(1 - 4^{-j}) T, T]`` is the same for every ``j``; from
    ``M = 1/2 - 1/4 + M/4`` that mean is ``1/3``.  Plus intervals up to
    ``i_max`` are summed explicitly and the remaining tail uses ``M``.
    """
    iv = _plus_intervals(T, i_max)
    tail = (1 - 4.0 ** -(i_max + 1)) * T
    lo = np.maximum(iv[None, :, 0], t[:, None])
    plus = np.clip(iv[None, :, 1] - lo, 0.0, None).sum(axis=1)
    return 2.0 * plus - (tail - t) + (T - tail) / 3.0


@dataclass(frozen=True)
class EtaProfile:
    """Estimate of the constant in ``int_t^T |eta - c|^2 ds >= 4 beta (T - t)``.

    ``beta_hat`` is the minimum over the grid of
    ``int_t^T |eta - c*|^2 / (4 (T - t))`` with ``c*`` the mean of ``eta`` on
    ``[t, T]``; ``t_grid`` and ``values`` hold the whole curve.
    """

    T: float
    i_max: int
    resolution: int
    beta_hat: float
    t_argmin: float
    c_star: float
    t_grid: np.ndarray
    values: np.ndarray


def beta_estimate(T: float = 1.0, resolution: int = 2, i_max: int = 8) -> EtaProfile:
    """Grid minimisation of the eta inequality constant.

    The grid holds the dyadic breakpoints ``(1 - 2^{-j}) T`` for
    ``j <= 2 i_max + 2`` and ``resolution - 1`` equally spaced points inside
    each dyadic cell.
    """
    if not T > 0:
        raise DomainError("T must be positive")
    if resolution < 1 or i_max < 0:
        raise ConfigurationError("need resolution >= 1 and i_max >= 0")
    jmax = 2 * i_max + 2
    pts = []
    for j in range(jmax):
        a, b = (1 - 2.0**-j) * T, (1 - 2.0 ** -(j + 1)) * T
        pts.append(a + (b - a) * np.arange(resolution) / resolution)
    pts.append([(1 - 2.0**-jmax) * T])
    t = np.concatenate(pts)
    L = T - t
    c = _eta_integral(t, T, i_max) / L
    vals = (1.0 - c**2) / 4.0  # int |eta - c|^2 = L (1 - c^2) since eta^2 = 1
    k = int(np.argmin(vals))
    return EtaProfile(float(T), i_max, resolution, float(vals[k]), float(t[k]), float(c[k]), t, vals)


# --- the explicit BSDE counterexample --------------------------------------


@dataclass(frozen=True)
class Counterexample324:
    """Residuals of the explicit solution with ``z2 = Z2 = 0``.

    ``local_rms`` is the RMS over paths and steps of the one-step residual
    of ``dz1 = Z1 dW`` (order ``dt``); ``global_rms`` that of the
    accumulated residual (order ``sqrt(dt)``).  ``second_rms`` is the RMS
    residual of the ``z2`` equation, zero up to rounding.
    """

    eps: float
    z1: AdaptedSamples
    Z1: np.ndarray
    local_rms: float
    global_rms: float
    second_rms: float
    mean_z1: np.ndarray
    se_z1: np.ndarray
    max_abs_z: float

    @property
    def mean_T(self) -> float:
        return float(self.mean_z1[-1])

    @property
    def se_T(self) -> float:
        return float(self.se_z1[-1])

    def martingale_ok(self, k: float = 3.0) -> bool:
        return abs(self.mean_T - 1.0) <= k * self.se_T


def verify_counterexample_324(eps: float, paths: PathBundle) -> Counterexample324:
    """Check the nonzero solution of the dual BSDE with ``z2 = 0``.

    ``z1 = exp(-W/eps - t/(2 eps^2))``, ``Z1 = -z1/eps``, ``z2 = Z2 = 0``
    solves ``dz1 = Z1 dW``, ``dz2 = -(z1 + eps Z1) dt + Z2 dW``.
    """
    if eps == 0 or not np.isfinite(eps):
        raise DomainError("eps must be finite and nonzero")
    t = paths.grid.times
    z1 = np.exp(-paths.W / eps - t[None, :] / (2 * eps**2))
    Z1 = -z1 / eps
    z2 = np.zeros_like(z1)
    Z2 = np.zeros_like(z1)
    dW = paths.increments
    r1 = z1[:, 1:] - z1[:, :-1] - Z1[:, :-1] * dW
    r2 = z2[:, 1:] - z2[:, :-1] + (z1[:, :-1] + eps * Z1[:, :-1]) * paths.dt - Z2[:, :-1] * dW
    mean, se = mc_mean(z1, axis=0)
    return Counterexample324(
        float(eps),
        AdaptedSamples(paths.grid, z1),
        Z1,
        float(np.sqrt(np.mean(r1**2))),
        float(np.sqrt(np.mean(np.cumsum(r1, axis=1) ** 2))),
        float(np.sqrt(np.mean(r2**2))),
        mean,
        se,
        float(np.abs(z1).max()),
    )


# --- random instances ----------------------------------------------------------


@dataclass(frozen=True)
class IntegerInstance:
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray

    @property
    def n(self) -> int:
        return self.A1.shape[0]


def random_integer_instance(rng: np.random.Generator, n_max: int = 4, low: int = -1, high: int = 1, p_zero: float = 0.5) -> IntegerInstance:
    """Sparse integer triple ``(A1, A2, B1)`` with ``n <= n_max``.

    Each entry is zero with probability ``p_zero`` and otherwise uniform
    on the nonzero integers of ``[low, high]``; sparsity keeps both
    verdicts of the rank test well represented.
    """
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, n + 1))
    vals = np.array([v for v in range(low, high + 1) if v != 0], dtype=float)

    def draw(shape):
        M = rng.choice(vals, size=shape)
        return np.where(rng.random(shape) < p_zero, 0.0, M)

    return IntegerInstance(draw((n, n)), draw((n, n)), draw((n, m)))
