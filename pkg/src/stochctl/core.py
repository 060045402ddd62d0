"""Brownian paths, Itô sums, Euler-Maruyama and Monte Carlo checks.

Everything in the package that samples randomness goes through
:func:`generate_paths` (or :func:`generate_binomial_paths`).  Paths are
generated in blocks of ``BLOCK`` rows, each block from its own Philox
stream keyed by ``(seed, block index)``; row ``i`` of a bundle is thus
the same for every bundle size ``P > i`` and the result does not depend
on the order in which blocks are produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import hermite_e

from .errors import (
    BasisDegeneracyError,
    ConfigurationError,
    DivergenceError,
    ShapeError,
)

BLOCK = 4096


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 = tau_0 < ... < tau_K = T``."""

    t0: float = 0.0
    T: float = 1.0
    K: int = 100

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigurationError(f"K must be a positive integer, got {self.K}")
        if not np.isfinite(self.t0) or not np.isfinite(self.T) or self.T <= self.t0:
            raise ConfigurationError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.K

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.K + 1)

    def index(self, t: float) -> int:
        """Grid index closest to ``t``."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.K:
            raise ConfigurationError(f"time {t} outside [{self.t0}, {self.T}]")
        return k

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.K * factor)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Seeded ensemble of Brownian paths.

    Attributes
    ----------
    grid : TimeGrid
    seed : int
    increments : ndarray, shape (P, K)
        ``W(tau_{k+1}) - W(tau_k)``.
    W : ndarray, shape (P, K+1)
        Cumulative values with ``W[:, 0] == 0`` exactly.
    kind : str
        ``"gaussian"`` or ``"binomial"`` (increments ``±sqrt(dt)``).
    """

    grid: TimeGrid
    seed: int
    increments: np.ndarray
    W: np.ndarray
    kind: str = "gaussian"

    @property
    def P(self) -> int:
        return self.increments.shape[0]

    @property
    def dt(self) -> float:
        return self.grid.dt

    def coarsen(self, factor: int) -> "PathBundle":
        """Same paths observed on a grid ``factor`` times coarser."""
        K = self.grid.K
        if factor < 1 or K % factor:
            raise ConfigurationError(f"factor {factor} does not divide K={K}")
        inc = self.increments.reshape(self.P, K // factor, factor).sum(axis=2)
        grid = TimeGrid(self.grid.t0, self.grid.T, K // factor)
        return _bundle(grid, self.seed, inc, self.kind)


def _bundle(grid, seed, inc, kind):
    W = np.zeros((inc.shape[0], grid.K + 1))
    np.cumsum(inc, axis=1, out=W[:, 1:])
    inc.setflags(write=False)
    W.setflags(write=False)
    return PathBundle(grid, int(seed), inc, W, kind)


def _check_counts(grid, P, seed):
    if not isinstance(grid, TimeGrid):
        raise ConfigurationError("grid must be a TimeGrid")
    if int(P) != P or P < 1:
        raise ConfigurationError(f"P must be a positive integer, got {P}")
    if int(seed) != seed or seed < 0 or seed >= 2**64:
        raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {seed}")


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), block])))


def generate_paths(grid: TimeGrid, P: int, seed: int) -> PathBundle:
    """Sample ``P`` Brownian paths on ``grid``.

    Parameters
    ----------
    grid : TimeGrid
    P : int
        Number of paths.
    seed : int
        Unsigned 64-bit seed.

    Returns
    -------
    PathBundle
        Deterministic in ``(grid, P, seed)``.
    """
    _check_counts(grid, P, seed)
    P = int(P)
    inc = np.empty((P, grid.K))
    sdt = np.sqrt(grid.dt)
    for b, start in enumerate(range(0, P, BLOCK)):
        stop = min(P, start + BLOCK)
        inc[start:stop] = sdt * _block_rng(seed, b).standard_normal((stop - start, grid.K))
    return _bundle(grid, seed, inc, "gaussian")


def generate_binomial_paths(grid: TimeGrid, P: int, seed: int) -> PathBundle:
    """Random walk paths with increments ``±sqrt(dt)``, probability 1/2 each."""
    _check_counts(grid, P, seed)
    P = int(P)
    inc = np.empty((P, grid.K))
    sdt = np.sqrt(grid.dt)
    for b, start in enumerate(range(0, P, BLOCK)):
        stop = min(P, start + BLOCK)
        bits = _block_rng(seed, b).integers(0, 2, size=(stop - start, grid.K))
        inc[start:stop] = sdt * (2.0 * bits - 1.0)
    return _bundle(grid, seed, inc, "binomial")


@dataclass(frozen=True, eq=False)
class AdaptedSamples:
    """Samples of an adapted process on a grid.

    ``values[:, k]`` only depends on increments ``0..k-1``; the functions
    here build them in time order, so this holds by construction.
    ``drift`` and ``diffusion`` (shape ``(P, K, ...)``) are recorded when
    the process is an Itô process built by :func:`euler_maruyama`.
    """

    grid: TimeGrid
    values: np.ndarray
    adapted: bool = True
    drift: Optional[np.ndarray] = None
    diffusion: Optional[np.ndarray] = None

    @property
    def P(self) -> int:
        return self.values.shape[0]


def brownian_samples(paths: PathBundle) -> AdaptedSamples:
    """``W`` itself as an Itô process with drift 0 and diffusion 1."""
    P, K = paths.increments.shape
    return AdaptedSamples(paths.grid, paths.W, True, np.zeros((P, K)), np.ones((P, K)))


def constant_samples(c: float, paths: PathBundle) -> AdaptedSamples:
    return AdaptedSamples(paths.grid, np.full((paths.P, paths.grid.K + 1), float(c)))


def _match(f: AdaptedSamples, paths: PathBundle):
    if f.grid != paths.grid:
        raise ShapeError(f"grid mismatch: {f.grid} vs {paths.grid}")
    if f.values.shape[0] != paths.P or f.values.shape[1] != paths.grid.K + 1:
        raise ShapeError(
            f"samples shape {f.values.shape} does not fit P={paths.P}, K={paths.grid.K}"
        )


def mc_mean(x: np.ndarray, axis: int = 0):
    """Sample mean and its standard error along ``axis``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    mean = x.mean(axis=axis)
    se = x.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.full_like(mean, np.inf)
    return mean, se


def ito_integral(f: AdaptedSamples, paths: PathBundle) -> AdaptedSamples:
    """Left-point sums ``I(tau_k) = sum_{j<k} f(tau_j) dW_j``."""
    _match(f, paths)
    if f.values.ndim != 2:
        raise ShapeError("ito_integral expects scalar samples of shape (P, K+1)")
    terms = f.values[:, :-1] * paths.increments
    out = np.zeros_like(f.values, dtype=float)
    np.cumsum(terms, axis=1, out=out[:, 1:])
    return AdaptedSamples(
        paths.grid, out, f.adapted, np.zeros_like(terms), f.values[:, :-1].copy()
    )


@dataclass(frozen=True)
class RatioEstimate:
    """Ratio of two sample means with a delta-method standard error."""

    ratio: float
    se: float
    degenerate: bool = False

    def within(self, target: float, k: float = 3.0) -> bool:
        return (not self.degenerate) and abs(self.ratio - target) <= k * self.se


def _ratio(num: np.ndarray, den: np.ndarray) -> RatioEstimate:
    mden = den.mean()
    if not mden > 0.0:
        return RatioEstimate(float("nan"), float("nan"), True)
    r = num.mean() / mden
    se = (num - r * den).std(ddof=1) / (mden * np.sqrt(num.size))
    return RatioEstimate(float(r), float(se))


def check_ito_isometry(f: AdaptedSamples, paths: PathBundle) -> RatioEstimate:
    """Estimate ``E[I(f)(T)^2] / E[int_0^T f^2 dt]``."""
    I = ito_integral(f, paths).values[:, -1]
    den = (f.values[:, :-1] ** 2).sum(axis=1) * paths.dt
    return _ratio(I**2, den)


@dataclass(frozen=True)
class BDGRatios:
    """Empirical BDG ratios for exponent ``p``.

    ``ratio`` is ``E sup_t |I(t)|^p / E (int f^2)^(p/2)`` and
    ``reciprocal`` its inverse.  For ``p = 2`` Doob's inequality and the
    isometry give ``1 <= ratio <= 4``.
    """

    p: float
    ratio: float
    reciprocal: float
    se: float
    degenerate: bool = False


def check_bdg(f: AdaptedSamples, paths: PathBundle, p: float) -> BDGRatios:
    if not p > 0:
        raise ConfigurationError(f"p must be positive, got {p}")
    I = ito_integral(f, paths).values
    num = np.abs(I).max(axis=1) ** p
    den = ((f.values[:, :-1] ** 2).sum(axis=1) * paths.dt) ** (p / 2)
    est = _ratio(num, den)
    if est.degenerate or not est.ratio > 0:
        return BDGRatios(p, float("nan"), float("nan"), float("nan"), True)
    return BDGRatios(p, est.ratio, 1.0 / est.ratio, est.se)


def euler_maruyama(
    drift: Callable,
    diffusion: Callable,
    x0,
    paths: PathBundle,
) -> AdaptedSamples:
    """Euler-Maruyama for ``dX = drift dt + diffusion dW``.

    Parameters
    ----------
    drift, diffusion : callable
        ``f(t, x, k)`` with ``x`` of shape ``(P,)`` (scalar state) or
        ``(P, n)`` and ``k`` the step index, so path-local data such as a
        control array can be read as ``u[:, k]``.  Must return an array
        broadcastable to the shape of ``x``.
    x0 : float or array_like, shape (n,)
    paths : PathBundle

    Returns
    -------
    AdaptedSamples
        Values of shape ``(P, K+1)`` or ``(P, K+1, n)`` with the drift and
        diffusion evaluations recorded.

    Raises
    ------
    DivergenceError
        If the state becomes non-finite.
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ConfigurationError("x0 must be finite")
    P, K = paths.increments.shape
    shape = (P,) + x0.shape
    X = np.empty((P, K + 1) + x0.shape)
    phi = np.empty((P, K) + x0.shape)
    Phi = np.empty((P, K) + x0.shape)
    X[:, 0] = x0
    dW = paths.increments
    t = paths.grid.times
    dt = paths.dt
    for k in range(K):
        x = X[:, k]
        a = np.broadcast_to(drift(t[k], x, k), shape)
        b = np.broadcast_to(diffusion(t[k], x, k), shape)
        phi[:, k] = a
        Phi[:, k] = b
        dw = dW[:, k].reshape((P,) + (1,) * x0.ndim)
        X[:, k + 1] = x + a * dt + b * dw
        if not np.all(np.isfinite(X[:, k + 1])):
            raise DivergenceError("non-finite Euler-Maruyama state", k)
    return AdaptedSamples(paths.grid, X, True, phi, Phi)


@dataclass(frozen=True)
class ItoFunction:
    """Scalar ``F(t, x)`` with the partial derivatives used by Itô's formula."""

    F: Callable
    F_t: Callable
    F_x: Callable
    F_xx: Callable


def ito_formula_residual(F: ItoFunction, X: AdaptedSamples, paths: PathBundle, local: bool = False) -> float:
    """RMS residual of the discretised Itô formula along ``X``.

    With ``r_k = F(tau_{k+1}, X_{k+1}) - F(tau_k, X_k)
    - (F_t + F_x phi + F_xx Phi^2 / 2) dt - F_x Phi dW_k``, the default
    returns the RMS over paths and grid of the accumulated residual
    ``sum_{j<k} r_j``, which is ``O(sqrt(dt))``.  ``local=True`` returns
    the RMS of the one-step residuals ``r_k`` instead.
    """
    _match(X, paths)
    if X.drift is None or X.diffusion is None:
        raise ShapeError("X must carry drift and diffusion records")
    t = paths.grid.times
    x = X.values
    tk = t[:-1][None, :]
    xk = x[:, :-1]
    phi, Phi = X.drift, X.diffusion
    Fx = F.F_x(tk, xk)
    r = (
        F.F(t[1:][None, :], x[:, 1:])
        - F.F(tk, xk)
        - (F.F_t(tk, xk) + Fx * phi + 0.5 * F.F_xx(tk, xk) * Phi**2) * paths.dt
        - Fx * Phi * paths.increments
    )
    if local:
        return float(np.sqrt(np.mean(r**2)))
    R = np.cumsum(r, axis=1)
    return float(np.sqrt(np.mean(R**2)))


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Total-degree polynomial features of standardised ``x``.

    Each coordinate is centred and scaled by its sample standard deviation,
    then expanded in probabilists' Hermite polynomials (same span as the
    monomials, much better conditioned).  Coordinates with no spread, for
    example ``W(0)``, are dropped, leaving the constant.  A coordinate
    taking only ``m`` distinct values (early levels of a binomial tree)
    enters with degree at most ``m - 1``.

    Parameters
    ----------
    x : ndarray, shape (P,) or (P, n)
    degree : int

    Returns
    -------
    ndarray, shape (P, nf)
    """
    if degree < 0:
        raise ConfigurationError("degree must be nonnegative")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    P = x.shape[0]
    cols = []
    caps = []
    for j in range(x.shape[1]):
        m = x[:, j].mean()
        s = x[:, j].std()
        if s > 1e-12 * (1.0 + abs(m)):
            cols.append((x[:, j] - m) / s)
            distinct = np.unique(np.round(cols[-1][: 4 * (degree + 1) * 64], 9)).size
            caps.append(degree if distinct > degree else distinct - 1)
    if not cols:
        return np.ones((P, 1))
    z = np.stack(cols, axis=1)
    # univariate He_0..He_degree for each coordinate
    uni = np.empty((z.shape[1], degree + 1, P))
    for j in range(z.shape[1]):
        for d in range(degree + 1):
            c = np.zeros(d + 1)
            c[d] = 1.0
            uni[j, d] = hermite_e.hermeval(z[:, j], c)
    feats = [np.ones(P)]
    nvar = z.shape[1]
    for total in range(1, degree + 1):
        for combo in combinations_with_replacement(range(nvar), total):
            counts = np.bincount(combo, minlength=nvar)
            if np.any(counts > caps):
                continue
            col = np.ones(P)
            for j, d in enumerate(counts):
                if d:
                    col = col * uni[j, d]
            feats.append(col)
    return np.stack(feats, axis=1)


@dataclass(frozen=True)
class Regression:
    coef: np.ndarray
    fitted: np.ndarray
    residual: np.ndarray
    cond: float


def regress(X: np.ndarray, y: np.ndarray, max_cond: float = 1e12) -> Regression:
    """Least squares of ``y`` (``(P,)`` or ``(P, q)``) on design ``X``.

    Raises
    ------
    BasisDegeneracyError
        If the condition number of ``X`` exceeds ``max_cond``.
    """
    coef, _, rank, sv = np.linalg.lstsq(X, y, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if cond > max_cond or rank < X.shape[1]:
        raise BasisDegeneracyError(
            f"design matrix condition {cond:.3g} exceeds {max_cond:.1g}; lower the degree"
        )
    fitted = X @ coef
    return Regression(coef, fitted, y - fitted, cond)


def robust_se(X: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Heteroscedasticity-robust (HC0) coefficient standard errors."""
    bread = np.linalg.inv(X.T @ X)
    meat = (X * residual[:, None] ** 2).T @ X
    return np.sqrt(np.diag(bread @ meat @ bread))


@dataclass(frozen=True)
class MartingaleTest:
    coef: np.ndarray
    se: np.ndarray
    t_index: int

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.coef) <= 3.0 * self.se))


def martingale_regression(f: AdaptedSamples, paths: PathBundle, t_index: int, degree: int = 2) -> MartingaleTest:
    """Regress ``I(f)(T) - I(f)(t)`` on features of ``W(t/2)`` and ``W(t)``.

    For a martingale every coefficient, the intercept included, should be
    zero within sampling error.
    """
    K = paths.grid.K
    if not 0 < t_index < K:
        raise ConfigurationError(f"t_index must be in (0, {K})")
    I = ito_integral(f, paths).values
    target = I[:, -1] - I[:, t_index]
    X = polynomial_features(np.stack([paths.W[:, t_index // 2], paths.W[:, t_index]], axis=1), degree)
    fit = regress(X, target)
    return MartingaleTest(fit.coef, robust_se(X, fit.residual), t_index)
