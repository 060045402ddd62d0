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
# # Carleman weights
#
# `theta = exp(lam alpha)` with `alpha < 0` blowing up at `t = 0` and
# `t = T`. The weighted identity is checked pointwise by finite
# differences under refinement.

# %%
import numpy as np

from stochctl import carleman as cm

spec = cm.WeightSpec(mu=2.0, lam=3.0)
h = lambda t, x: np.sin(np.pi * x) * (1 + t**2)
res = cm.verify_pointwise_identity(h, spec)
print(res.table)
print("observed order", res.order)

# %% [markdown]
# ## Leading-order coefficients
#
# With `psi = x (1 - x)` the `B` and `C` ratios equal
# `2 (1 + psi_xx / (mu psi_x^2))` and `3 (1 + psi_xx / (mu psi_x^2))`, so
# they turn negative near the centre of the domain unless `mu psi_x^2` is
# large.

# %%
tab = cm.asymptotic_checks()
for r in tab.rows:
    print(f"lam={r.lam:g} mu={r.mu:g}: A {r.A_ratio:.3f} B {r.B_ratio:.3f} C {r.C_ratio:.3f}")
