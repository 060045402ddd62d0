"""Independent reference computations used by the tests.

Each oracle avoids the code path it checks: symbolic integration instead
of quadrature, explicit enumeration instead of batched linear algebra,
closed forms instead of simulation.
"""

from itertools import product

import numpy as np
import sympy as sp
from scipy.integrate import quad, solve_ivp

# beta of the eta inequality: the minimiser sits where eta has mean 1/3
# on [t, T], so beta = (1 - 1/9) / 4.
BETA_EXACT = 2.0 / 9.0


def sympy_gramian(A, B, T):
    """``int_0^T e^{At} B B^T e^{A^T t} dt`` in exact arithmetic."""
    t = sp.symbols("t", real=True)
    A = sp.Matrix(A)
    B = sp.Matrix(B)
    E = (A * t).exp() * B
    G = (E * E.T).applyfunc(lambda e: sp.integrate(e, (t, 0, T)))
    return np.array(G.evalf(30).tolist(), dtype=float)


def exact_word_rank(A1, A2, B1):
    """Rank of all words of length ``<= n`` in ``{A1, A2}`` applied to ``B1``, in rationals."""
    A1 = sp.Matrix(np.asarray(A1, dtype=int).tolist())
    A2 = sp.Matrix(np.asarray(A2, dtype=int).tolist())
    B1 = sp.Matrix(np.asarray(B1, dtype=int).tolist())
    n = A1.shape[0]
    blocks = [B1]
    level = [B1]
    for _ in range(n):
        level = [M * X for X in level for M in (A1, A2)]
        blocks.extend(level)
    return sp.Matrix.hstack(*blocks).rank()


def kalman_matrix_rank(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    cols = [np.linalg.matrix_power(A, k) @ B for k in range(n)]
    return int(np.linalg.matrix_rank(np.hstack(cols)))


def sign_path_observable(A1, A2, B1, K, dt):
    """Observability of the sign-path dual by per-path recursion."""
    A1, A2, B1 = (np.asarray(M, dtype=float) for M in (A1, A2, B1))
    n = A1.shape[0]
    I = np.eye(n)
    rows = [B1.T]
    for signs in product((-1.0, 1.0), repeat=K):
        Z = I.copy()
        for s in signs:
            Z = (I + A1.T * dt + s * A2.T * np.sqrt(dt)) @ Z
            rows.append(B1.T @ Z)
    S = np.vstack(rows)
    return np.linalg.matrix_rank(S) == n


def discrete_riccati_value(q, r, s, sigma, x0, T, K):
    """Value of the LQ problem ``a = u, b = sigma`` with explicit Euler steps."""
    dt = T / K
    S, c = s, 0.0
    for _ in range(K):
        c = c + 0.5 * S * sigma**2 * dt
        S = q * dt + S - S * S * dt / (r + S * dt)
    return 0.5 * S * x0**2 + c


def continuous_riccati_value(q, r, s, sigma, x0, T):
    """``S' = S^2 / r - q`` backward from ``S(T) = s``; value ``S(0) x0^2 / 2 + int sigma^2 S / 2``."""
    sol = solve_ivp(lambda t, y: [y[0] ** 2 / r - q, -0.5 * sigma**2 * y[0]], (T, 0.0), [s, 0.0],
                    rtol=1e-12, atol=1e-14)
    S0, c0 = sol.y[:, -1]
    return 0.5 * S0 * x0**2 + c0


def tree_value(a, b, g, h, U, x0, T, K):
    """Exhaustive expectimin over the full (non-merged) sign tree, scalar state."""
    dt = T / K
    sq = np.sqrt(dt)

    def V(k, x):
        if k == K:
            return h(x)
        best = np.inf
        for u in U:
            t = k * dt
            drift = x + a(t, x, u) * dt
            cont = 0.5 * (V(k + 1, drift + b(t, x, u) * sq) + V(k + 1, drift - b(t, x, u) * sq))
            best = min(best, g(t, x, u) * dt + cont)
        return best

    return V(0, x0)


def gram_by_quadrature(n, G0):
    lo, hi = G0
    M = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            f = lambda x: 2 * np.sin((i + 1) * np.pi * x) * np.sin((j + 1) * np.pi * x)
            M[i, j] = quad(f, lo, hi, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    return M


def remark52_second_moment(xi, lam, s0, t):
    """``E zeta(t)^2`` for ``dzeta = lam zeta dt + xi dW`` from ``zeta(s0) = 0``."""
    return xi**2 * np.expm1(2 * lam * (t - s0)) / (2 * lam)


def single_mode_obs_ratio(lam, s, T):
    """Observability ratio of ``z(t) = e^{-lam (T - t)}`` with ``G0 = (0, 1)`` and ``E = [0, T]``."""
    num = np.exp(-lam * (T - s))
    den = (1 - np.exp(-lam * (T - s))) / lam
    return num / den


def carleman_identity_symbolic(h_expr, mu, lam, b_expr=-1, T=1, psi_max=sp.Rational(1, 4)):
    """Both sides of the weighted identity, built from the unexpanded definitions.

    Returns sympy expressions in ``t, x``; used at a handful of points with
    high-precision evaluation.
    """
    t, x = sp.symbols("t x", real=True)
    h = h_expr(t, x)
    b = sp.sympify(b_expr) if not callable(b_expr) else b_expr(t, x)
    psi = x * (1 - x)
    l = lam * (sp.exp(mu * psi) - sp.exp(2 * mu * psi_max)) / (t * (T - t))
    th = sp.exp(l)
    w = th * h
    D = sp.diff
    Psi = 2 * b * D(l, x, 2)
    A = -(b * D(l, x) ** 2 - D(b, x) * D(l, x) - b * D(l, x, 2)) - Psi - D(l, t)
    B = 2 * (A * Psi - D(A * b * D(l, x), x)) - D(A, t) - D(b * D(Psi, x), x)
    C = 2 * b * D(b * D(l, x), x) - D(b * b * D(l, x), x) - D(b, t) / 2 + Psi * b
    P = -D(b * D(w, x), x) + A * w
    lhs = (2 * th * P * (D(h, t) - D(b * D(h, x), x)) + 2 * D(b * D(w, x) * D(w, t), x)
           + 2 * D(b * b * D(l, x) * D(w, x) ** 2 + Psi * b * D(w, x) * w
                   - b * (A * D(l, x) + D(Psi, x) / 2) * w**2, x))
    rhs = 2 * C * D(w, x) ** 2 + B * w**2 + D(b * D(w, x) ** 2 + A * w**2, t) + 2 * P**2
    return (t, x), lhs, rhs
