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
# # Null control of a stochastic heat equation
#
# Controls act on `G0 x E`. Each stage kills the modes below `r_N` on a
# window inside `E`, then lets the high modes decay freely. Second moments
# are exact because the noise factors out through `Gamma`.

# %%
import numpy as np

from stochctl import heat

model = heat.HeatModel1D(a=0.1, b=0.3, G0=(0.3, 0.6), N_max=64)
E = heat.TimeSetE.of((0.0, 1.0))
rep = heat.lr_null_control(model, [1.0, 0.5, -0.3, 0.2], E, 1.0, tol=1e-6, N_cap=4)
print(rep.status, f"final ratio {rep.final_ratio:.3e}")
for s in rep.stages:
    print(f"stage {s.N}: r={s.r:g}, modes={s.n_modes}, E|y|^2 after decay {s.after_decay:.3e}, control norm {s.control_norm:.3g}")

# %% [markdown]
# ## Observability constants
#
# The constant of the partial-sum inequality on `G0` grows like
# `C1 exp(C2 sqrt(r))`.

# %%
sw = heat.obs_constant_sweep((0.3, 0.6), 10)
print("C1", sw.C1, "C2", sw.C2, "fit residual", sw.residual)

# %% [markdown]
# ## When `E` stops short of `T`
#
# If `E` misses a final interval, a nonzero adjoint state can vanish on
# `G0 x E`, so no observability constant exists from `s` onward.

# %%
short = heat.TimeSetE.of((0.0, 0.5))
print("predicate", heat.approx_controllability_predicate(short, 1.0))
times = np.linspace(0, 1, 11)
probe = heat.sample_observability_ratio(model, np.ones((4, 11)), times, 0.6, short, 1.0)
print("unbounded", probe.unbounded)
