"""Carleman weights and the weighted pointwise identity in one space dimension.

Weights: ``theta = exp(l)``, ``l = lam * alpha``,
``alpha = (exp(mu psi) - exp(2 mu |psi|_inf)) / (t (T - t))`` and
``phi = exp(mu psi) / (t (T - t))``; ``Psi = 2 b l_xx``.

Coefficients (1-D, with ``b = b(t, x)``)::

    A = -(b l_x^2 - b_x l_x - b l_xx) - Psi - l_t
    B = 2 (A Psi - (A b l_x)_x) - A_t - (b Psi_x)_x
    C = 2 b (b l_x)_x - (b^2 l_x)_x - b_t / 2 + Psi b

With ``w = theta h`` and the martingale terms dropped, the identity reads::

    2 theta [-(b w_x)_x + A w][h_t - (b h_x)_x] + 2 (b w_x w_t)_x
      + 2 [b^2 l_x w_x^2 + Psi b w_x w - b (A l_x + Psi_x / 2) w^2]_x
    = 2 C w_x^2 + B w^2 + (b w_x^2 + A w^2)_t + 2 [-(b w_x)_x + A w]^2

Coefficient fields are built symbolically (sympy) and evaluated through
``lambdify``; the identity check uses finite differences for the test
function only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy as sp
from scipy.optimize import minimize_scalar

from .errors import ConfigurationError, DomainError

_t, _x = sp.symbols("t x", real=True)
_lam, _mu, _T = sp.symbols("lambda mu T", positive=True)

Expr = Union[str, float, int, sp.Expr]


def _sym(e: Expr) -> sp.Expr:
    if isinstance(e, sp.Expr):
        return e
    if isinstance(e, (int, float)):
        return sp.Float(e) if isinstance(e, float) else sp.Integer(e)
    return sp.sympify(e, locals={"t": _t, "x": _x})


def default_psi(kappa: float = 0.0, x1: float = 0.5) -> sp.Expr:
    """``x (1 - x) exp(kappa (x - x1))``; ``kappa = 0`` gives ``x (1 - x)``."""
    base = _x * (1 - _x)
    return base if kappa == 0 else base * sp.exp(sp.Float(kappa) * (_x - sp.Float(x1)))


@dataclass(frozen=True)
class WeightSpec:
    """Parameters of the Carleman weight.

    ``psi`` is a sympy expression (or string) in ``x``; ``G1`` an interval
    outside which ``|psi_x| > 0`` must hold; evaluation is restricted to
    ``t`` in ``[delta, T - delta]``.
    """

    mu: float
    lam: float
    T: float = 1.0
    delta: Optional[float] = None
    psi: Expr = field(default_factory=default_psi)
    G1: Tuple[float, float] = (0.4, 0.6)

    def __post_init__(self):
        if not self.mu > 1 or not self.lam > 1:
            raise DomainError("mu and lambda must exceed 1")
        if not self.T > 0:
            raise ConfigurationError("T must be positive")
        d = 0.1 * self.T if self.delta is None else float(self.delta)
        if not 0 < d < self.T / 2:
            raise DomainError("delta must lie in (0, T/2)")
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "psi", _sym(self.psi))
        if self.psi.free_symbols - {_x}:
            raise ConfigurationError("psi may depend on x only")
        self._check_psi()

    def _check_psi(self):
        f = sp.lambdify(_x, self.psi, "numpy")
        fx = sp.lambdify(_x, sp.diff(self.psi, _x), "numpy")
        xs = np.linspace(0, 1, 2001)
        v = np.broadcast_to(f(xs), xs.shape)
        if v.min() < -1e-12 or abs(v[0]) > 1e-12 or abs(v[-1]) > 1e-12:
            raise DomainError("psi must be nonnegative and vanish at 0 and 1")
        outside = (xs < self.G1[0]) | (xs > self.G1[1])
        if np.any(np.abs(np.broadcast_to(fx(xs), xs.shape)[outside]) <= 0):
            raise DomainError("psi_x vanishes outside G1")

    @cached_property
    def psi_max(self) -> float:
        f = sp.lambdify(_x, self.psi, "numpy")
        xs = np.linspace(0, 1, 2001)
        v = np.broadcast_to(f(xs), xs.shape)
        i = int(np.argmax(v))
        lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, len(xs) - 1)]
        res = minimize_scalar(lambda z: -float(f(z)), bounds=(lo, hi), method="bounded", options={"xatol": 1e-14})
        return float(max(v[i], -res.fun))


class CoefficientFields:
    """Symbolic ``l``, ``Psi``, ``A``, ``B``, ``C`` for a ``WeightSpec`` and a diffusion ``b``.

    Every field is available as a sympy expression (``expr``) and as a
    vectorised numpy function of ``(t, x)`` (``__call__``).
    """

    NAMES = ("psi", "alpha", "phi", "l", "l_t", "l_x", "l_xx", "Psi", "A", "B", "C", "b")

    def __init__(self, spec: WeightSpec, b: Expr = -1):
        self.spec = spec
        self.b = _sym(b)
        if self.b.free_symbols - {_t, _x}:
            raise ConfigurationError("b may depend on t and x only")
        T = sp.Float(spec.T)
        lam, mu = sp.Float(spec.lam), sp.Float(spec.mu)
        psi = spec.psi
        big = sp.exp(2 * mu * sp.Float(spec.psi_max))
        alpha = (sp.exp(mu * psi) - big) / (_t * (T - _t))
        phi = sp.exp(mu * psi) / (_t * (T - _t))
        l = lam * alpha
        b = self.b
        D = sp.diff
        Psi = 2 * b * D(l, _x, 2)
        A = -(b * D(l, _x) ** 2 - D(b, _x) * D(l, _x) - b * D(l, _x, 2)) - Psi - D(l, _t)
        B = 2 * (A * Psi - D(A * b * D(l, _x), _x)) - D(A, _t) - D(b * D(Psi, _x), _x)
        C = 2 * b * D(b * D(l, _x), _x) - D(b * b * D(l, _x), _x) - D(b, _t) / 2 + Psi * b
        self.expr: Dict[str, sp.Expr] = {
            "psi": psi, "alpha": alpha, "phi": phi, "l": l,
            "l_t": D(l, _t), "l_x": D(l, _x), "l_xx": D(l, _x, 2),
            "Psi": Psi, "A": A, "B": B, "C": C, "b": b,
        }
        # derivatives used by the identity check
        extra = {
            "b_x": D(b, _x), "b_t": D(b, _t), "Psi_x": D(Psi, _x), "A_t": D(A, _t),
            "A_x": D(A, _x), "l_xt": D(l, _x, _t), "l_xxx": D(l, _x, 3),
            "bl2_x": D(b * b * D(l, _x), _x), "Psib_x": D(Psi * b, _x),
            "G_x": D(b * (A * D(l, _x) + D(Psi, _x) / 2), _x), "G": b * (A * D(l, _x) + D(Psi, _x) / 2),
        }
        self.expr.update(extra)
        self._fn = {k: sp.lambdify((_t, _x), v, "numpy") for k, v in self.expr.items()}

    def __call__(self, name: str, t, x) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        out = self._fn[name](t, x)
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(t, x).shape).copy()


@dataclass(frozen=True)
class WeightFields:
    """Sampled weight and coefficient fields on a tensor grid ``(t, x)``.

    ``log_theta`` equals ``l``; ``theta`` may underflow for large ``lam``.
    Derivatives of ``l`` use the closed forms
    ``l_x = lam mu phi psi_x`` and ``l_xx = lam mu^2 phi psi_x^2 + lam mu phi psi_xx``.
    """

    t: np.ndarray
    x: np.ndarray
    alpha: np.ndarray
    phi: np.ndarray
    l: np.ndarray
    theta: np.ndarray
    l_t: np.ndarray
    l_x: np.ndarray
    l_xx: np.ndarray
    Psi: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    @property
    def log_theta(self) -> np.ndarray:
        return self.l


def _check_times(spec: WeightSpec, t: np.ndarray) -> None:
    if np.any(t <= 0) or np.any(t >= spec.T):
        raise DomainError("weights blow up at t = 0 and t = T")


def build_weights(spec: WeightSpec, t, x) -> WeightFields:
    """Sample ``alpha, phi, l, theta`` and the closed-form derivatives of ``l``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_times(spec, t)
    TT, XX = np.meshgrid(t, x, indexing="ij")
    f = {k: sp.lambdify(_x, sp.diff(spec.psi, _x, n), "numpy") for n, k in enumerate(("psi", "psi_x", "psi_xx"))}
    psi, psi_x, psi_xx = (np.broadcast_to(f[k](XX), XX.shape) for k in ("psi", "psi_x", "psi_xx"))
    lam, mu, T = spec.lam, spec.mu, spec.T
    tt = TT * (T - TT)
    e = np.exp(mu * psi)
    big = np.exp(2 * mu * spec.psi_max)
    alpha = (e - big) / tt
    phi = e / tt
    l = lam * alpha
    alpha_t = -(e - big) * (T - 2 * TT) / tt**2
    return WeightFields(
        t, x, alpha, phi, l, np.exp(l), lam * alpha_t,
        lam * mu * phi * psi_x, lam * mu**2 * phi * psi_x**2 + lam * mu * phi * psi_xx,
    )


def coefficient_fields(spec: WeightSpec, t, x, b: Expr = -1) -> WeightFields:
    """:func:`build_weights` plus ``Psi, A, B, C`` and ``b`` on the grid."""
    w = build_weights(spec, t, x)
    cf = CoefficientFields(spec, b)
    TT, XX = np.meshgrid(w.t, w.x, indexing="ij")
    return WeightFields(
        w.t, w.x, w.alpha, w.phi, w.l, w.theta, w.l_t, w.l_x, w.l_xx,
        cf("Psi", TT, XX), cf("A", TT, XX), cf("B", TT, XX), cf("C", TT, XX), cf("b", TT, XX),
    )


# --- identity check -------------------------------------------------------------

# 4th-order central stencils in x
_D1 = np.array([1, -8, 0, 8, -1]) / 12.0
_D2 = np.array([-1, 16, -30, 16, -1]) / 12.0


def _jets(f: Callable, t, x, ht, hx):
    """``f, f_x, f_xx, f_t, f_xt`` at points ``(t, x)`` by finite differences."""
    offs = np.arange(-2, 3)

    def row(tt):
        vals = np.stack([f(tt, x + k * hx) for k in offs])
        return vals[2], np.tensordot(_D1, vals, 1) / hx, np.tensordot(_D2, vals, 1) / hx**2

    f0, fx, fxx = row(t)
    fp, fxp, _ = row(t + ht)
    fm, fxm, _ = row(t - ht)
    return f0, fx, fxx, (fp - fm) / (2 * ht), (fxp - fxm) / (2 * ht)


@dataclass(frozen=True)
class IdentityResidual:
    """Residual of the weighted identity at fixed evaluation points.

    ``table`` rows are ``(ht, hx, max_abs, rms)`` for each refinement;
    ``orders`` are ``log2`` ratios of successive ``max_abs`` values.
    """

    table: np.ndarray
    orders: np.ndarray
    scale: float
    mode: str

    @property
    def order(self) -> float:
        return float(np.min(self.orders)) if self.orders.size else float("nan")

    def passed(self, min_order: float = 1.8, floor: float = 1e-10) -> bool:
        """Order at least ``min_order``, or residual at rounding level throughout."""
        if np.all(self.table[:, 2] <= floor * max(self.scale, 1.0)):
            return True
        return bool(np.isfinite(self.order) and self.order >= min_order)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["ht", "hx", "max_abs", "rms", "order"])
            for i, r in enumerate(self.table):
                o = self.orders[i - 1] if i else float("nan")
                wr.writerow([f"{v:.17g}" for v in (*r, o)])


def identity_terms(cf: CoefficientFields, t, x, w_jet, h_jet):
    """Both sides of the identity from jets ``(f, f_x, f_xx, f_t, f_xt)`` of ``w`` and ``h``."""
    w, wx, wxx, wt, wxt = w_jet
    h, hx, hxx, ht, _ = h_jet
    g = {k: cf(k, t, x) for k in ("b", "b_x", "b_t", "l", "l_x", "Psi", "A", "A_t", "B", "C",
                                   "bl2_x", "Psib_x", "G", "G_x")}
    b, bx = g["b"], g["b_x"]
    theta = np.exp(g["l"])
    P = -(bx * wx + b * wxx) + g["A"] * w
    lhs = (
        2 * theta * P * (ht - bx * hx - b * hxx)
        + 2 * (bx * wx * wt + b * wxx * wt + b * wx * wxt)
        + 2 * (
            g["bl2_x"] * wx**2 + 2 * b * b * g["l_x"] * wx * wxx
            + g["Psib_x"] * wx * w + g["Psi"] * b * (wxx * w + wx**2)
            - g["G_x"] * w**2 - 2 * g["G"] * w * wx
        )
    )
    rhs = (
        2 * g["C"] * wx**2 + g["B"] * w**2
        + g["b_t"] * wx**2 + 2 * b * wx * wxt + g["A_t"] * w**2 + 2 * g["A"] * w * wt
        + 2 * P**2
    )
    return lhs, rhs


def verify_pointwise_identity(
    h: Optional[Callable],
    spec: WeightSpec,
    b: Expr = -1,
    refinements: int = 4,
    ht0: float = 0.02,
    hx0: float = 0.0125,
    points: Tuple[int, int] = (7, 9),
    x_range: Tuple[float, float] = (0.15, 0.85),
    mode: str = "direct",
    w: Optional[Callable] = None,
) -> IdentityResidual:
    """Residual of the deterministic identity under dyadic refinement.

    ``mode="direct"``: ``h`` is given, ``w = theta h`` is sampled, and both
    jets come from finite differences (4th order in ``x``, 2nd order in
    ``t``), so the residual decays with the stencil error.
    ``mode="conjugated"``: ``w`` is given and the ``h`` jet follows from
    the ``w`` jet through ``h = w / theta`` analytically; polynomial ``w``
    of low degree makes every stencil exact.

    Raises
    ------
    DomainError
        If a jet contains NaN or infinity.
    """
    if mode not in ("direct", "conjugated"):
        raise ConfigurationError("mode must be 'direct' or 'conjugated'")
    if refinements < 2:
        raise ConfigurationError("need at least two grids")
    cf = CoefficientFields(spec, b)
    lo, hi = spec.delta, spec.T - spec.delta
    pad = ht0 * 1.01
    tp = np.linspace(lo + pad, hi - pad, points[0])
    xp = np.linspace(*x_range, points[1])
    TT, XX = np.meshgrid(tp, xp, indexing="ij")
    lfun = lambda t, x: cf("l", t, x)
    rows = []
    scale = 0.0
    for m in range(refinements):
        dt, dx = ht0 / 2**m, hx0 / 2**m
        if mode == "direct":
            if h is None:
                raise ConfigurationError("direct mode needs h")
            hj = _jets(h, TT, XX, dt, dx)
            wj = _jets(lambda t, x: np.exp(lfun(t, x)) * h(t, x), TT, XX, dt, dx)
        else:
            if w is None:
                raise ConfigurationError("conjugated mode needs w")
            wj = _jets(w, TT, XX, dt, dx)
            W, Wx, Wxx, Wt, Wxt = wj
            l, lx, lxx = cf("l", TT, XX), cf("l_x", TT, XX), cf("l_xx", TT, XX)
            lt = cf("l_t", TT, XX)
            it = np.exp(-l)
            hj = (it * W, it * (Wx - lx * W), it * (Wxx - 2 * lx * Wx + (lx * lx - lxx) * W),
                  it * (Wt - lt * W), None)
        if not all(np.all(np.isfinite(a)) for a in (*wj, *hj[:4])):
            raise DomainError("non-finite derivatives; h is not smooth enough on the window")
        lhs, rhs = identity_terms(cf, TT, XX, wj, hj)
        r = lhs - rhs
        scale = max(scale, float(np.abs(lhs).max()), float(np.abs(rhs).max()))
        rows.append((dt, dx, float(np.abs(r).max()), float(np.sqrt(np.mean(r**2)))))
    table = np.array(rows)
    with np.errstate(divide="ignore", invalid="ignore"):
        orders = np.log2(table[:-1, 2] / table[1:, 2])
    return IdentityResidual(table, orders, scale, mode)


# --- large-parameter asymptotics ---------------------------------------------------


@dataclass(frozen=True)
class AsymptoticRow:
    lam: float
    mu: float
    A_ratio: float
    B_ratio: float
    C_ratio: float


@dataclass(frozen=True)
class AsymptoticTable:
    """Normalised coefficients on admissible points (``|psi_x| >= psi_x_min``).

    ``A / (lam^2 mu^2 phi^2 psi_x^2)`` (the value farthest from 1),
    ``B / (lam^3 mu^4 phi^3 psi_x^4)`` and ``C / (lam mu^2 phi psi_x^2)``
    (minima over the evaluation points).  Points with
    ``|psi_x| < psi_x_min`` are skipped.

    For constant ``b = -1`` the ``lam^3`` part of the ``B`` ratio is exactly
    ``2 (1 + psi_xx / (mu psi_x^2))`` and ``C`` ratio is exactly
    ``3 (1 + psi_xx / (mu psi_x^2))``, so convergence in ``mu`` is slow
    wherever ``mu psi_x^2`` is not large.
    """

    rows: List[AsymptoticRow]
    t_points: np.ndarray
    x_points: np.ndarray
    skipped: int
    s0: float = 1.0

    def at(self, lam: float, mu: float) -> AsymptoticRow:
        for r in self.rows:
            if r.lam == lam and r.mu == mu:
                return r
        raise KeyError((lam, mu))

    def passed(self, rel: float = 0.2) -> bool:
        """Leading constants at the largest ``(lam, mu)``: ``A -> 1``, ``B >= 2 s0^2``, ``C >= s0^2``."""
        top = max(self.rows, key=lambda r: (r.lam, r.mu))
        return (
            abs(top.A_ratio - 1.0) <= rel
            and top.B_ratio >= 2 * self.s0**2 * (1 - rel)
            and top.C_ratio >= self.s0**2 * (1 - rel)
        )

    def monotone_in_lam(self, which: str = "B_ratio") -> bool:
        ok = True
        for mu in sorted({r.mu for r in self.rows}):
            vals = [getattr(r, which) for r in sorted(self.rows, key=lambda r: r.lam) if r.mu == mu]
            ok &= bool(np.all(np.diff(vals) >= -1e-12))
        return ok

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["lambda", "mu", "A_ratio", "B_ratio", "C_ratio"])
            for r in self.rows:
                wr.writerow([f"{v:.17g}" for v in (r.lam, r.mu, r.A_ratio, r.B_ratio, r.C_ratio)])


def asymptotic_checks(
    lams: Sequence[float] = (1e2, 1e3, 1e4),
    mus: Sequence[float] = (4.0, 8.0),
    x_points: Sequence[float] = (0.02, 0.1, 0.2, 0.3, 0.45, 0.5, 0.55, 0.7, 0.8, 0.9, 0.98),
    t_points: Sequence[float] = (0.5,),
    psi_x_min: float = 0.1,
    T: float = 1.0,
    b: Expr = -1,
    psi: Optional[Expr] = None,
) -> AsymptoticTable:
    """Sweep ``(lam, mu)`` and tabulate the normalised leading coefficients."""
    xs = np.asarray(x_points, dtype=float)
    ts = np.asarray(t_points, dtype=float)
    psi = default_psi() if psi is None else _sym(psi)
    fx = sp.lambdify(_x, sp.diff(psi, _x), "numpy")
    px = np.broadcast_to(fx(xs), xs.shape)
    keep = np.abs(px) >= psi_x_min
    xs_k, px_k = xs[keep], px[keep]
    if xs_k.size == 0:
        raise DomainError("no evaluation point satisfies |psi_x| >= psi_x_min")
    TT, XX = np.meshgrid(ts, xs_k, indexing="ij")
    PX = np.broadcast_to(px_k, XX.shape)
    rows = []
    for mu in mus:
        for lam in lams:
            spec = WeightSpec(mu=mu, lam=lam, T=T, psi=psi)
            cf = CoefficientFields(spec, b)
            phi = cf("phi", TT, XX)
            A, B, C = cf("A", TT, XX), cf("B", TT, XX), cf("C", TT, XX)
            ra = (A / (lam**2 * mu**2 * phi**2 * PX**2)).ravel()
            rows.append(AsymptoticRow(
                float(lam), float(mu),
                float(ra[np.argmax(np.abs(ra - 1.0))]),
                float(np.min(B / (lam**3 * mu**4 * phi**3 * PX**4))),
                float(np.min(C / (lam * mu**2 * phi * PX**2))),
            ))
    return AsymptoticTable(rows, ts, xs_k, int((~keep).sum()))
