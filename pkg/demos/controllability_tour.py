# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Finite-dimensional controllability
#
# A deterministic pair `(A, B)` is controllable when the Kalman matrix has
# full rank. For the stochastic dual `dz = -A1^T z dt - A2^T z dW` the
# relevant subspace is spanned by every word in `{A1, A2}` applied to `B1`.

# %%
import numpy as np

from stochctl import controllability as ctl, core

A = np.array([[0.0, 1.0], [0.0, 0.0]])
B = np.array([[0.0], [1.0]])
print("Kalman rank:", ctl.kalman_rank(A, B).rank)

# %% [markdown]
# The shift matrix moves `e1` into `e2`, so putting it in the diffusion is
# enough even when the drift vanishes.

# %%
shift = np.array([[0.0, 0.0], [1.0, 0.0]])
e1 = np.array([[1.0], [0.0]])
cert = ctl.stochastic_rank(np.zeros((2, 2)), shift, e1)
print(cert.rank, cert.words, "residual", cert.fixed_point_residual)

# %% [markdown]
# ## Steering with the Gramian
#
# The minimum-energy control `u(t) = B^T e^{A^T (T-t)} G_T^{-1} (yT - e^{AT} y0)`
# hits the target up to ODE tolerance.

# %%
gc = ctl.gramian_control(A, B, 1.0, [1.0, 0.0], [0.0, 0.0])
print("G_T =\n", gc.G)
print("terminal error", gc.terminal_error)

# %% [markdown]
# ## Rank test against a brute-force oracle
#
# On random integer systems the binomial-tree oracle enumerates every sign
# path and reports whether the dual observation can vanish for `z0 != 0`.

# %%
rng = np.random.default_rng(0)
agree = 0
for _ in range(50):
    inst = ctl.random_integer_instance(rng)
    r = ctl.stochastic_rank(inst.A1, inst.A2, inst.B1).full
    o = ctl.binomial_observability_oracle(inst.A1, inst.A2, inst.B1, steps=inst.n).observable
    agree += r == o
print(f"{agree} / 50 agree")

# %% [markdown]
# ## A BSDE whose second component vanishes
#
# The explicit solution has `z2 = 0` on every path, so a rank condition on
# the drift alone cannot decide controllability.

# %%
paths = core.generate_paths(core.TimeGrid(0.0, 1.0, 100), 20_000, 2)
res = ctl.verify_counterexample_324(0.5, paths)
print("second component RMS", res.second_rms, "martingale ok", res.martingale_ok(3))
