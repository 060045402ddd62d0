"""Spectral null and approximate controllability for a 1-D stochastic heat equation.

The model is ``dy = (y_xx + a(t) y + chi_E chi_G0 u) dt + b(t) y dW`` on
``(0, 1)`` with Dirichlet conditions.  Eigenpairs are
``lambda_i = (i pi)^2`` and ``e_i(x) = sqrt(2) sin(i pi x)``.

Writing ``y = Gamma yhat`` with ``dGamma = a Gamma dt + b Gamma dW``,
``Gamma(0) = 1``, and using controls of the form ``u = chi_E Gamma sum_i
v_i phi_i`` makes every mode of ``yhat`` deterministic:
``dyhat_k/dt = -lambda_k yhat_k + chi_E f_k`` with ``f_k = <sum v_i phi_i, e_k>``.
Second moments factor as ``E|y(t)|^2 = E[Gamma(t)^2] |yhat(t)|^2`` with
``E[Gamma(t)^2] = exp(int_0^t (2a + b^2))``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad
from scipy.linalg import cho_factor, cho_solve, eigvalsh

from .bsde import ModalBSDEProblem, solve_modal_bsde_exact
from .core import AdaptedSamples, PathBundle, mc_mean
from .errors import (
    AccuracyError,
    ConfigurationError,
    DomainError,
    InfeasibleError,
    PreconditionError,
    UniqueContinuationAlarm,
    UnsupportedSetError,
)

Coef = Union[float, Callable[[float], float]]


def _fun(c: Coef) -> Callable[[float], float]:
    if callable(c):
        return c
    v = float(c)
    return lambda t: v


# --- model and time sets -----------------------------------------------------


@dataclass(frozen=True)
class HeatModel1D:
    """Coefficients, observation set and simulation mode cap.

    ``a`` and ``b`` are floats or bounded functions of time; for functions
    the sup-norms ``a_sup`` and ``b_sup`` must be declared.
    """

    a: Coef = 0.0
    b: Coef = 0.0
    G0: Tuple[float, float] = (0.0, 1.0)
    N_max: int = 64
    a_sup: Optional[float] = None
    b_sup: Optional[float] = None

    def __post_init__(self):
        lo, hi = (float(v) for v in self.G0)
        if not 0.0 <= lo < hi <= 1.0:
            raise DomainError(f"G0 must satisfy 0 <= g- < g+ <= 1, got {self.G0}")
        object.__setattr__(self, "G0", (lo, hi))
        if self.N_max < 1:
            raise ConfigurationError("N_max must be >= 1")
        for name in ("a", "b"):
            v = getattr(self, name)
            if not callable(v):
                object.__setattr__(self, name + "_sup", abs(float(v)))
            elif getattr(self, name + "_sup") is None:
                raise ConfigurationError(f"declare {name}_sup for a time-dependent {name}")

    @property
    def r0(self) -> float:
        return 2 * self.a_sup + self.b_sup**2

    @property
    def constant(self) -> bool:
        return not (callable(self.a) or callable(self.b))

    def lam(self, N: Optional[int] = None) -> np.ndarray:
        N = self.N_max if N is None else N
        return (np.arange(1, N + 1) * np.pi) ** 2

    def eigenfunction(self, i: int, x) -> np.ndarray:
        return np.sqrt(2.0) * np.sin(i * np.pi * np.asarray(x, dtype=float))

    def log_gamma2(self, s: float, t: float) -> float:
        """``log E[Gamma(t)^2 / Gamma(s)^2] = int_s^t (2a + b^2)``."""
        if t == s:
            return 0.0
        if self.constant:
            return (2 * float(self.a) + float(self.b) ** 2) * (t - s)
        fa, fb = _fun(self.a), _fun(self.b)
        return quad(lambda u: 2 * fa(u) + fb(u) ** 2, s, t, epsabs=1e-13, epsrel=1e-12, limit=200)[0]

    def gamma2(self, t: float) -> float:
        return float(np.exp(self.log_gamma2(0.0, t)))


def modes_in(r: float) -> int:
    """Number of modes in ``Lambda_r = {i : (i pi)^2 <= r}``."""
    if r < 0:
        return 0
    n = int(np.floor(np.sqrt(r) / np.pi))
    while ((n + 1) * np.pi) ** 2 <= r:
        n += 1
    while n > 0 and (n * np.pi) ** 2 > r:
        n -= 1
    return n


@dataclass(frozen=True)
class TimeSetE:
    """Finite union of closed subintervals of ``[0, T]``.

    Degenerate intervals (points) are kept so that point sets can be
    represented and rejected by the operations that need positive measure.
    """

    intervals: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        ivs = sorted((float(lo), float(hi)) for lo, hi in self.intervals)
        for lo, hi in ivs:
            if hi < lo:
                raise ConfigurationError(f"interval [{lo}, {hi}] is reversed")
        for (l1, h1), (l2, h2) in zip(ivs, ivs[1:]):
            if l2 < h1:
                raise ConfigurationError("intervals must be disjoint")
        object.__setattr__(self, "intervals", tuple(ivs))

    @classmethod
    def of(cls, *intervals) -> "TimeSetE":
        return cls(tuple(tuple(iv) for iv in intervals))

    def pieces(self, s1: float, s2: float) -> List[Tuple[float, float]]:
        """Nondegenerate pieces of ``E ∩ [s1, s2]``."""
        out = []
        for lo, hi in self.intervals:
            a, b = max(lo, s1), min(hi, s2)
            if b > a:
                out.append((a, b))
        return out

    def measure(self, s1: float = -np.inf, s2: float = np.inf) -> float:
        return float(sum(b - a for a, b in self.pieces(s1, s2)))

    def indicator(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=bool)
        for lo, hi in self.intervals:
            if hi > lo:
                out |= (t >= lo) & (t <= hi)
        return out

    @property
    def sup(self) -> float:
        return max(hi for _, hi in self.intervals) if self.intervals else -np.inf


# --- Gram matrices and observability constants ------------------------------


def _sin_integral(k: int, lo: float, hi: float) -> float:
    """``int_lo^hi cos(k pi x) dx``."""
    if k == 0:
        return hi - lo
    w = k * np.pi
    return (np.sin(w * hi) - np.sin(w * lo)) / w


def gram_matrix(r_count: int, G0, cols: Optional[int] = None) -> np.ndarray:
    """``M_ij = int_G0 e_i e_j`` for ``i < r_count``, ``j < cols``, in closed form.

    ``2 sin(i pi x) sin(j pi x) = cos((i-j) pi x) - cos((i+j) pi x)``.
    """
    lo, hi = (float(v) for v in G0)
    if not hi > lo:
        raise DomainError("G0 must be a nonempty interval")
    if r_count < 1:
        raise ConfigurationError("r_count must be >= 1")
    cols = r_count if cols is None else cols
    i = np.arange(1, r_count + 1)[:, None]
    j = np.arange(1, cols + 1)[None, :]
    kmax = r_count + cols
    tab = np.array([_sin_integral(k, lo, hi) for k in range(kmax + 1)])
    return tab[np.abs(i - j)] - tab[i + j]


@dataclass(frozen=True)
class ObsConstant:
    """``const = 1 / lambda_min(M_r)`` over ``n_modes`` modes."""

    r: float
    n_modes: int
    const: float


def spectral_obs_constant(r: float, G0) -> ObsConstant:
    """Optimal constant of ``sum |a_i|^2 <= C int_G0 |sum a_i e_i|^2`` over ``Lambda_r``.

    Raises
    ------
    DomainError
        If ``Lambda_r`` is empty (``r < pi^2``).
    """
    n = modes_in(r)
    if n == 0:
        raise DomainError(f"Lambda_r is empty for r={r} < pi^2")
    M = gram_matrix(n, G0)
    return ObsConstant(float(r), n, float(1.0 / eigvalsh(M)[0]))


@dataclass(frozen=True)
class ObsSweep:
    """Least-squares fit ``log const = log C1 + C2 sqrt(r)``."""

    r: np.ndarray
    const: np.ndarray
    C1: float
    C2: float
    residual: float


def obs_constant_sweep(G0, n_modes: int = 12) -> ObsSweep:
    """Constants at ``r = lambda_1, ..., lambda_n`` and the fitted ``(C1, C2)``."""
    lam = (np.arange(1, n_modes + 1) * np.pi) ** 2
    const = np.array([spectral_obs_constant(r, G0).const for r in lam])
    A = np.stack([np.ones_like(lam), np.sqrt(lam)], axis=1)
    coef, *_ = np.linalg.lstsq(A, np.log(const), rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - np.log(const)) ** 2)))
    return ObsSweep(lam, const, float(np.exp(coef[0])), float(coef[1]), res)


# --- schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class LRSchedule:
    """Times ``t_1 < t_2 < ... -> t_tilde`` built inside one interval of ``E``."""

    t_tilde: float
    times: np.ndarray
    rho1: float
    rho2: float
    interval: Tuple[float, float]
    lam1: float = np.pi**2

    def I(self, N: int) -> Tuple[float, float]:
        return float(self.times[2 * N - 2]), float(self.times[2 * N - 1])

    def J(self, N: int) -> Tuple[float, float]:
        return float(self.times[2 * N - 1]), float(self.times[2 * N])

    def rank(self, N: int) -> float:
        return float(max(2.0 ** (N * N), np.floor(self.lam1) + 1))

    def verify(self, E: TimeSetE) -> Tuple[bool, bool]:
        """Check the measure and ratio conditions on consecutive times."""
        t = self.times
        d = np.diff(t)
        ok1 = all(E.measure(t[i], t[i + 1]) >= self.rho1 * d[i] * (1 - 1e-12) for i in range(len(d)))
        ok2 = bool(np.all(d[:-1] / d[1:] <= self.rho2 * (1 + 1e-12)))
        return ok1, ok2


def partition_from_E(E: TimeSetE, T: float, factor: float = 0.9, n_times: int = 12) -> LRSchedule:
    """Geometric schedule inside the longest interval ``[p, q]`` of ``E``.

    ``t_tilde = p + factor (q - p)`` and ``t_i = t_tilde - (t_tilde - p) 2^{1-i}``,
    so ``rho1 = 1`` and ``rho2 = 2``.

    Raises
    ------
    UnsupportedSetError
        If ``E`` contains no nondegenerate interval.
    """
    if not 0 < factor < 1:
        raise ConfigurationError("factor must lie in (0, 1)")
    ivs = [(lo, min(hi, T)) for lo, hi in E.intervals if min(hi, T) > lo]
    if not ivs:
        raise UnsupportedSetError("E has no interval of positive length; general measurable E is unsupported")
    lengths = [hi - lo for lo, hi in ivs]
    p, q = ivs[int(np.argmax(lengths))]
    tt = p + factor * (q - p)
    i = np.arange(1, n_times + 1)
    times = tt - (tt - p) * 2.0 ** (1 - i)
    sched = LRSchedule(float(tt), times, 1.0, 2.0, (p, q))
    ok1, ok2 = sched.verify(E)
    if not (ok1 and ok2):
        raise UnsupportedSetError("schedule invariants failed")
    return sched


def approx_controllability_predicate(E: TimeSetE, T: float) -> bool:
    """``m((s, T) ∩ E) > 0`` for every ``s < T``.

    For a finite union of closed intervals this holds exactly when some
    nondegenerate interval reaches ``T``.
    """
    return any(hi >= T and min(hi, T) > lo for lo, hi in E.intervals)


# --- modal states and windows ------------------------------------------------


@dataclass(frozen=True)
class ModalState:
    """Coefficients ``yhat`` of the Gamma-rescaled state at time ``t``."""

    t: float
    coef: np.ndarray
    model: HeatModel1D

    def expected_sq_norm(self, modes: Optional[int] = None) -> float:
        c = self.coef if modes is None else self.coef[:modes]
        return self.model.gamma2(self.t) * float(c @ c)


def initial_state(model: HeatModel1D, y0) -> ModalState:
    """Pad the modal coefficients ``y0`` to ``N_max`` modes at ``t = 0``."""
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if y0.size > model.N_max:
        raise ConfigurationError("y0 has more modes than N_max")
    if not np.all(np.isfinite(y0)):
        raise ConfigurationError("y0 must be finite")
    c = np.zeros(model.N_max)
    c[: y0.size] = y0
    return ModalState(0.0, c, model)


def free_evolve(state: ModalState, t: float) -> ModalState:
    if t < state.t:
        raise DomainError("cannot evolve backward")
    lam = state.model.lam()
    return ModalState(float(t), np.exp(-lam * (t - state.t)) * state.coef, state.model)


def _window_integrals(lam: np.ndarray, pieces, s2: float) -> np.ndarray:
    """``int_{E ∩ [s1, s2]} exp(-lam (s2 - s)) ds`` per mode, overflow-free."""
    out = np.zeros_like(lam)
    for a, b in pieces:
        out += (np.exp(-lam * (s2 - b)) - np.exp(-lam * (s2 - a))) / lam
    return out


@dataclass(frozen=True)
class ControlWindowPlan:
    """Biorthogonal Gamma-scaled control on ``E ∩ [s1, s2]``.

    ``v`` holds the modal gains for the ``n_modes`` controlled modes;
    ``forcing[k] = sum_i v_i c_ik`` over all ``N_max`` modes, so entries
    beyond ``n_modes`` are the spillover.  ``norm`` is
    ``sup_t (E Gamma(t)^2 v^T M^{-1} v)^{1/2}`` over the active window.
    """

    s1: float
    s2: float
    r: float
    n_modes: int
    v: np.ndarray
    spill: np.ndarray
    forcing: np.ndarray
    norm: float
    bound: float
    biorth_error: float
    pi_residual: float
    state_after: ModalState
    pieces: Tuple[Tuple[float, float], ...]


def window_control(
    model: HeatModel1D,
    r: float,
    s1: float,
    s2: float,
    E: TimeSetE,
    state: ModalState,
    sweep: Optional[ObsSweep] = None,
    max_cond_inv: float = 1e-12,
) -> ControlWindowPlan:
    """Steer the modes in ``Lambda_r`` of ``yhat`` to zero at ``s2``.

    Gains are constant on ``E ∩ [s1, s2]``:
    ``v_i = -exp(-lambda_i (s2 - s1)) yhat_i(s1) / int_{E∩[s1,s2]} exp(-lambda_i (s2 - s)) ds``.

    Raises
    ------
    InfeasibleError
        If ``m(E ∩ [s1, s2]) = 0``.
    AccuracyError
        If the Gram matrix over ``Lambda_r`` has condition number above
        ``1 / max_cond_inv``, so biorthogonality cannot be held to 1e-10.
    """
    if abs(state.t - s1) > 1e-12:
        raise ConfigurationError(f"state is at t={state.t}, window starts at {s1}")
    if not s2 > s1:
        raise ConfigurationError("need s1 < s2")
    pieces = E.pieces(s1, s2)
    m = sum(b - a for a, b in pieces)
    if m <= 0:
        raise InfeasibleError(f"m(E ∩ [{s1}, {s2}]) = 0")
    n = modes_in(r)
    N = model.N_max
    if n == 0 or n > N:
        raise ConfigurationError(f"Lambda_r has {n} modes; need 1 <= n <= N_max={N}")
    lam = model.lam()
    Iw = _window_integrals(lam, pieces, s2)
    decay = np.exp(-lam * (s2 - s1))
    v = -decay[:n] * state.coef[:n] / Iw[:n]
    Mfull = gram_matrix(n, model.G0, N)
    ev = eigvalsh(Mfull[:, :n])
    if ev[0] <= max_cond_inv * ev[-1]:
        raise AccuracyError(
            f"Gram matrix over {n} modes is numerically singular (lambda_min/lambda_max = {ev[0] / ev[-1]:.2e})"
        )
    cf = cho_factor(Mfull[:, :n])
    C = cho_solve(cf, Mfull)  # C[i, k] = int_G0 phi_i e_k
    biorth = float(np.abs(C[:, :n] - np.eye(n)).max())
    forcing = C.T @ v
    after = decay * state.coef + forcing * Iw
    ref = float(np.linalg.norm(state.coef)) or 1.0
    pi_res = float(np.abs(after[:n]).max() / ref) if n else 0.0
    quad_form = float(v @ cho_solve(cf, v))
    if model.constant:
        tts = np.array([p for ab in pieces for p in ab])
    else:
        tts = np.concatenate([np.linspace(a, b, 33) for a, b in pieces])
    g2 = max(model.gamma2(t) for t in tts)
    norm = float(np.sqrt(g2 * quad_form))
    bound = float("nan")
    if sweep is not None:
        bound = float(sweep.C1 * np.exp(sweep.C2 * np.sqrt(r) + model.r0 * (s2 - s1)) / m**2)
    return ControlWindowPlan(
        float(s1), float(s2), float(r), n, v, C[:, n:], forcing, norm, bound, biorth, pi_res,
        ModalState(float(s2), after, model), tuple(pieces),
    )


@dataclass(frozen=True)
class DecayCheck:
    measured: float
    bound: float
    degenerate: bool = False

    @property
    def passed(self) -> bool:
        return self.degenerate or self.measured <= self.bound * (1 + 1e-9)


def free_decay_check(model: HeatModel1D, r: float, state: ModalState, s: float, t: float, tol: float = 1e-9) -> DecayCheck:
    """Compare ``E|y(t)|^2 / E|y(s)|^2`` with ``exp(-(2r - r0)(t - s))``.

    Modes in ``Lambda_r`` below ``tol`` count as zero and are dropped
    before evolving, so round-off left by a window control cannot
    dominate a long decay.

    Raises
    ------
    PreconditionError
        If the modes in ``Lambda_r`` are not zero (relative ``tol``).
    """
    if not t > s:
        raise ConfigurationError("need t > s")
    n = modes_in(r)
    c = state.coef
    nrm = float(np.linalg.norm(c))
    if n and np.abs(c[:n]).max() > tol * max(nrm, 1e-300) and nrm > 0:
        raise PreconditionError("state has nonzero modes in Lambda_r")
    bound = float(np.exp(-(2 * r - model.r0) * (t - s)))
    if nrm == 0:
        return DecayCheck(float("nan"), bound, True)
    lam = model.lam()
    c = c.copy()
    c[:n] = 0.0
    ratio = np.exp(model.log_gamma2(s, t)) * float(np.sum((np.exp(-lam * (t - s)) * c) ** 2)) / nrm**2
    return DecayCheck(float(ratio), bound)


# --- Lebeau-Robbiano iteration -------------------------------------------------


@dataclass(frozen=True)
class StageRecord:
    N: int
    r: float
    n_modes: int
    window: Tuple[float, float]
    decay: Tuple[float, float]
    before: float
    after_window: float
    after_decay: float
    control_norm: float
    bound: float
    pi_residual: float
    mc_after_window: float = float("nan")
    mc_after_window_se: float = float("nan")
    mc_after_decay: float = float("nan")
    mc_after_decay_se: float = float("nan")
    cf_after_window_trunc: float = float("nan")
    cf_after_decay_trunc: float = float("nan")


@dataclass(frozen=True)
class LRReport:
    """Outcome of :func:`lr_null_control`.

    ``status`` is ``"success"``, ``"cap"`` (tolerance not met within
    ``N_cap`` stages), ``"stagnated"`` or ``"ill_conditioned"`` (the next
    window's Gram matrix is numerically singular); ``mode_breakdown`` holds the
    final ``|yhat_i|`` when the run did not succeed.
    """

    status: str
    stages: List[StageRecord]
    initial: float
    final: float
    schedule: LRSchedule
    decay_rate: float
    mc_ok: Optional[bool]
    mc_modes: int
    mode_breakdown: Optional[np.ndarray] = None
    trajectory: List[Tuple[float, np.ndarray]] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == "success"

    @property
    def final_ratio(self) -> float:
        return self.final / self.initial if self.initial > 0 else 0.0

    def stage_ratios(self) -> np.ndarray:
        vals = np.array([s.after_decay for s in self.stages])
        return vals[1:] / vals[:-1] if len(vals) > 1 else np.array([])

    def to_csv(self, path) -> None:
        cols = ["stage", "r_N", "n_modes", "window_lo", "window_hi", "decay_hi", "E_before",
                "E_after_window", "E_after_decay", "control_norm", "bound", "pi_residual",
                "mc_after_window", "mc_after_window_se", "mc_after_decay", "mc_after_decay_se"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for s in self.stages:
                vals = [s.N, s.r, s.n_modes, s.window[0], s.window[1], s.decay[1], s.before,
                        s.after_window, s.after_decay, s.control_norm, s.bound, s.pi_residual,
                        s.mc_after_window, s.mc_after_window_se, s.mc_after_decay, s.mc_after_decay_se]
                w.writerow([v if isinstance(v, int) else f"{v:.17g}" for v in vals])

    def trajectory_csv(self, path, modes: int = 8) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"yhat_{i + 1}" for i in range(modes)])
            for t, c in self.trajectory:
                w.writerow([f"{t:.17g}"] + [f"{x:.17g}" for x in c[:modes]])


def lr_null_control(
    model: HeatModel1D,
    y0,
    E: TimeSetE,
    T: float,
    tol: float = 1e-4,
    N_cap: int = 4,
    mc_paths: int = 0,
    seed: int = 0,
    mc_modes: int = 32,
    factor: float = 0.9,
) -> LRReport:
    """Alternate window controls on ``I_N`` and free decay on ``J_N``.

    After each stage the state is evolved freely to ``T``; the run stops
    as soon as ``E|y(T)|^2 <= tol E|y0|^2``.  With ``mc_paths > 0`` the
    closed loop is re-simulated on the unscaled modal SDE for the first
    ``mc_modes`` modes and compared with the closed form restricted to
    the same modes.
    """
    if N_cap < 1:
        raise ConfigurationError("N_cap must be >= 1")
    sched = partition_from_E(E, T, factor=factor, n_times=2 * N_cap + 2)
    state = initial_state(model, y0)
    E0 = state.expected_sq_norm()
    traj = [(0.0, state.coef.copy())]
    if E0 == 0:
        return LRReport("success", [], 0.0, 0.0, sched, float("nan"), None, 0, None, traj)
    sweep = obs_constant_sweep(model.G0, 12)
    state = free_evolve(state, sched.times[0])
    traj.append((state.t, state.coef.copy()))
    stages: List[StageRecord] = []
    plans: List[ControlWindowPlan] = []
    status = "cap"
    final = free_evolve(state, T).expected_sq_norm()
    stall = 0
    for N in range(1, N_cap + 1):
        s1, s2 = sched.I(N)
        _, s3 = sched.J(N)
        before = state.expected_sq_norm()
        try:
            plan = window_control(model, sched.rank(N), s1, s2, E, state, sweep)
        except AccuracyError:
            status = "ill_conditioned"
            break
        plans.append(plan)
        state = plan.state_after
        traj.append((state.t, state.coef.copy()))
        aw = state.expected_sq_norm()
        state = free_evolve(state, s3)
        traj.append((state.t, state.coef.copy()))
        ad = state.expected_sq_norm()
        stages.append(StageRecord(N, plan.r, plan.n_modes, (s1, s2), (s2, s3), before, aw, ad,
                                  plan.norm, plan.bound, plan.pi_residual))
        final = free_evolve(state, T).expected_sq_norm()
        if final <= tol * E0:
            status = "success"
            break
        if len(stages) > 1 and ad >= stages[-2].after_decay:
            stall += 1
            if stall >= 2:
                status = "stagnated"
                break
        else:
            stall = 0
    end = free_evolve(state, T)
    traj.append((T, end.coef.copy()))
    vals = np.array([s.after_decay for s in stages])
    rate = float(np.polyfit(np.arange(len(vals)), np.log(vals), 1)[0]) if len(vals) > 1 and np.all(vals > 0) else float("nan")
    mc_ok = None
    nm = min(mc_modes, model.N_max)
    if mc_paths > 0:
        stages, mc_ok = _mc_crosscheck(model, y0, E, T, sched, plans, stages, mc_paths, seed, nm)
    return LRReport(
        status, stages, E0, final, sched, rate, mc_ok, nm,
        None if status == "success" else np.abs(end.coef), traj,
    )


def _mc_crosscheck(model, y0, E, T, sched, plans, stages, P, seed, nm):
    """Simulate ``dy_k = (-lambda_k y_k + a y_k + u_k) dt + b y_k dW``.

    Each step multiplies by the exact stochastic exponential of the
    homogeneous part; the control ``u = chi_E Gamma f`` uses the simulated
    ``Gamma`` of the same path, and its contribution over a step is
    ``Gamma(t_{k+1}) f_k int chi_E exp(-lambda_k (t_{k+1} - s)) ds``.
    Time-dependent coefficients are integrated with left-point sums on
    sub-steps of length at most 0.01.
    """
    lam = model.lam(nm)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x48454154])))
    fa, fb = _fun(model.a), _fun(model.b)
    c0 = initial_state(model, y0).coef[:nm]
    y = np.tile(c0, (P, 1))
    logG = np.zeros(P)
    t = 0.0
    knots = sorted({0.0, float(sched.times[0]), T} | {s.window[0] for s in stages} | {s.window[1] for s in stages}
                   | {s.decay[1] for s in stages})
    out = {}
    plan_at = {p.s1: p for p in plans}
    active = None
    for t0, t1 in zip(knots[:-1], knots[1:]):
        if t0 in plan_at:
            active = plan_at[t0]
        elif active is not None and t0 >= active.s2:
            active = None
        n_sub = max(1, int(np.ceil((t1 - t0) / 0.01))) if not model.constant else 1
        h = (t1 - t0) / n_sub
        for j in range(n_sub):
            a0 = t0 + j * h
            b0 = a0 + h
            dW = rng.standard_normal(P) * np.sqrt(h)
            av, bv = fa(a0), fb(a0)
            incr = (av - 0.5 * bv * bv) * h + bv * dW
            logG_new = logG + incr
            y = y * np.exp(-lam * h + incr[:, None])
            if active is not None:
                pieces = E.pieces(a0, b0)
                if pieces:
                    Iw = _window_integrals(lam, pieces, b0)
                    y = y + np.exp(logG_new)[:, None] * (active.forcing[:nm] * Iw)[None, :]
            logG = logG_new
        out[t1] = mc_mean((y**2).sum(axis=1))
    ok = True
    new = []
    for s in stages:
        mw, sw = out[s.window[1]]
        md, sd = out[s.decay[1]]
        cw = _trunc_cf(model, plans[s.N - 1].state_after, nm)
        cd = _trunc_cf(model, free_evolve(plans[s.N - 1].state_after, s.decay[1]), nm)
        ok &= abs(mw - cw) <= 3 * sw + 1e-13 * cw and abs(md - cd) <= 3 * sd + 1e-13 * cd
        new.append(StageRecord(**{**s.__dict__, "mc_after_window": float(mw), "mc_after_window_se": float(sw),
                                  "mc_after_decay": float(md), "mc_after_decay_se": float(sd),
                                  "cf_after_window_trunc": cw, "cf_after_decay_trunc": cd}))
    return new, bool(ok)


def _trunc_cf(model, state, nm):
    return state.expected_sq_norm(nm)


# --- adjoint side: monotonicity and observability -----------------------------


@dataclass(frozen=True)
class MonotonicityReport:
    times: np.ndarray
    values: np.ndarray
    passed: bool


def backward_energy_monotonicity(sol, r0: Optional[float] = None, n_grid: int = 41, tol: float = 1e-9) -> MonotonicityReport:
    """Check that ``t -> exp(r0 t) E z(t)^2`` is nondecreasing on a grid.

    Second moments come from Gauss-Hermite quadrature of the exact modal
    solution, so the comparison uses a relative rounding tolerance.
    """
    p = sol.prob
    r0 = p.r0 if r0 is None else r0
    ts = np.linspace(p.s1, p.s2, n_grid)
    vals = np.array([np.exp(r0 * t) * sol.moment2(t) for t in ts])
    ok = bool(np.all(np.diff(vals) >= -tol * np.maximum(np.abs(vals[1:]), 1e-300)))
    return MonotonicityReport(ts, vals, ok)


@dataclass(frozen=True)
class ObsProbe:
    """Ratio ``||z(s)|| / ||chi_{E∩(s,T)} chi_G0 z||_{L^1(L^2)}`` per trial.

    ``C_hat`` is the maximum over trials, ``inf`` when some trial has a
    zero denominator with a positive numerator (``unbounded``).
    """

    C_hat: float
    ratios: np.ndarray
    numerators: np.ndarray
    denominators: np.ndarray
    unbounded: bool
    degenerate: bool


def _ratio_report(num, den, predicate) -> ObsProbe:
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    zero = (den == 0) & (num > 0)
    if np.any(zero) and predicate:
        raise UniqueContinuationAlarm("zero observation of a nonzero state although m((s,T) ∩ E) > 0")
    degenerate = bool(np.all((num == 0) & (den == 0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(zero, np.inf, np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan))
    finite = ratios[~np.isnan(ratios)]
    C = float(finite.max()) if finite.size else float("nan")
    return ObsProbe(C, ratios, num, den, bool(np.any(zero)), degenerate)


def observability_probe(
    model: HeatModel1D,
    r: float,
    s: float,
    E: TimeSetE,
    T: float,
    trials: int = 8,
    seed: int = 0,
    terminals: Optional[Sequence[Sequence[Callable]]] = None,
    gl_nodes: int = 24,
    gh_nodes: int = 40,
) -> ObsProbe:
    """Empirical constant of the observability estimate at time ``s``.

    Terminal data are ``eta = sum_i g_i(W(T)) e_i`` over ``Lambda_r`` with
    ``g_i`` random quadratics (standard normal coefficients) unless
    ``terminals`` is given.  Each mode is solved exactly by
    :func:`stochctl.bsde.solve_modal_bsde_exact`; expectations over
    ``W(t)`` use Gauss-Hermite nodes, time integrals Gauss-Legendre nodes.
    """
    if not 0 <= s < T:
        raise DomainError("need 0 <= s < T")
    n = modes_in(r)
    if n == 0:
        raise DomainError("Lambda_r is empty")
    if terminals is None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x4F4253])))
        terminals = []
        for _ in range(trials):
            cs = rng.standard_normal((n, 3))
            terminals.append([(lambda w, c=c: c[0] + c[1] * w + c[2] * w * w) for c in cs])
    M = gram_matrix(n, model.G0)
    xh, wh = hermegauss(gh_nodes)
    wh = wh / wh.sum()
    xg, wg = leggauss(gl_nodes)
    pieces = E.pieces(s, T)
    pred = approx_controllability_predicate(E, T)
    nums, dens = [], []
    for gs in terminals:
        if len(gs) != n:
            raise ConfigurationError(f"terminal needs {n} modal maps")
        sols = [
            solve_modal_bsde_exact(ModalBSDEProblem(
                float(model.lam(n)[i]), model.a, model.b, 0.0, T, gs[i], model.a_sup, model.b_sup), nodes=gh_nodes)
            for i in range(n)
        ]

        def energy(t, G=None):
            w = np.sqrt(max(t, 0.0)) * xh
            Z = np.stack([sl.z(t, w) for sl in sols])  # (n, nodes)
            cross = (Z[:, None, :] * Z[None, :, :]) @ wh
            return float(np.sum((np.eye(n) if G is None else G) * cross))

        nums.append(np.sqrt(max(energy(s), 0.0)))
        den = 0.0
        for a, b in pieces:
            tq = 0.5 * (b - a) * xg + 0.5 * (a + b)
            den += 0.5 * (b - a) * sum(wq * np.sqrt(max(energy(tk, M), 0.0)) for tk, wq in zip(tq, wg))
        dens.append(den)
    return _ratio_report(nums, dens, pred)


def sample_observability_ratio(model: HeatModel1D, z: np.ndarray, times: np.ndarray, s: float, E: TimeSetE, T: float) -> ObsProbe:
    """The observability ratio for sampled modal coefficients ``z`` ``(P, K+1, n)``.

    The denominator integrates the grid values of
    ``(E int_G0 |z|^2)^{1/2}`` over ``E ∩ (s, T)`` by the trapezoid rule on
    each piece; it is exactly zero when that set has measure zero.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        z = z[:, :, None]
    n = z.shape[2]
    M = gram_matrix(n, model.G0)
    energy = np.einsum("pki,ij,pkj->k", z, M, z) / z.shape[0]
    tot = np.einsum("pki,pki->k", z, z) / z.shape[0]
    num = np.sqrt(np.interp(s, times, tot))
    den = 0.0
    for a, b in E.pieces(s, T):
        inner = times[(times > a) & (times < b)]
        tq = np.concatenate([[a], inner, [b]])
        den += np.trapezoid(np.sqrt(np.maximum(np.interp(tq, times, energy), 0.0)), tq)
    return _ratio_report([num], [den], approx_controllability_predicate(E, T))


# --- forward-uniqueness counterexample ----------------------------------------


@dataclass(frozen=True)
class Remark52Result:
    """Nonzero adjoint solution ``(z, Z) = (zeta e_1, xi e_1)`` vanishing before ``s0``.

    ``local_rms``/``global_rms`` are the one-step and accumulated residuals
    of the Euler form of the modal equation on the returned samples.
    """

    s0: float
    z: AdaptedSamples
    Z: np.ndarray
    local_rms: float
    global_rms: float
    mean_zT2: float
    se_zT2: float
    zero_before_s0: bool
    degenerate: bool

    def vanishes_on(self, E: TimeSetE, T: float) -> bool:
        """``z = 0`` on ``G0 x E`` up to a null set of times."""
        return self.zero_before_s0 and E.measure(self.s0, T) == 0


def remark52_counterexample(model: HeatModel1D, s0: float, xi2, paths: PathBundle) -> Remark52Result:
    """Forward-solve ``dzeta - lambda_1 zeta dt = -(a zeta + b xi) dt + xi dW`` from ``zeta(s0) = 0``.

    ``xi2`` is a float or a function ``(t, W_t) -> (P,)`` evaluated at the
    left end of each step.  Each step uses the exponential-midpoint rule
    ``zeta_{k+1} = e^{c dt} zeta_k + (e^{c dt} - 1)/c (-b xi_k) + e^{c dt/2} xi_k dW_k``
    with ``c = lambda_1 - a(t_k)``.
    """
    T = paths.grid.T
    if not 0 <= s0 < T:
        raise DomainError("need 0 <= s0 < T")
    t = paths.grid.times
    dt = paths.dt
    P, K = paths.increments.shape
    k0 = int(np.searchsorted(t, s0 - 1e-12))
    if abs(t[k0] - s0) > 1e-9:
        raise ConfigurationError("s0 must be a grid point")
    fa, fb = _fun(model.a), _fun(model.b)
    lam1 = np.pi**2
    if callable(xi2):
        xi = np.stack([np.broadcast_to(np.asarray(xi2(t[k], paths.W[:, k]), dtype=float), (P,)) for k in range(K + 1)], axis=1)
    else:
        xi = np.full((P, K + 1), float(xi2))
    xi[:, :k0] = 0.0
    zeta = np.zeros((P, K + 1))
    dW = paths.increments
    for k in range(k0, K):
        c = lam1 - fa(t[k])
        e = np.exp(c * dt)
        phi = (e - 1) / c if c != 0 else dt
        zeta[:, k + 1] = e * zeta[:, k] - phi * fb(t[k]) * xi[:, k] + np.exp(0.5 * c * dt) * xi[:, k] * dW[:, k]
    drift = np.array([lam1 - fa(tk) for tk in t[:-1]])
    bt = np.array([fb(tk) for tk in t[:-1]])
    r = zeta[:, 1:] - zeta[:, :-1] - (drift * zeta[:, :-1] - bt * xi[:, :-1]) * dt - xi[:, :-1] * dW
    m, se = mc_mean(zeta[:, K] ** 2)
    return Remark52Result(
        float(s0), AdaptedSamples(paths.grid, zeta), xi,
        float(np.sqrt(np.mean(r[:, k0:] ** 2))) if K > k0 else 0.0,
        float(np.sqrt(np.mean(np.cumsum(r, axis=1) ** 2))),
        float(m), float(se), bool(np.all(zeta[:, : k0 + 1] == 0)), bool(np.all(xi[:, k0:] == 0)),
    )
