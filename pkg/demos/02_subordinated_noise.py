# %% [markdown]
# # Subordinators and the degenerate forcing
#
# The noise is a Brownian motion run on the clock of an increasing Levy
# process `l_t`.  Admissible clocks have infinitely many small jumps and a
# Levy measure with an exponential moment; the compound Poisson clock fails
# the first requirement.

# %%
import numpy as np

from mhdlab.levy_noise import (
    NoiseConfig,
    SubordinatorModel,
    check_admissibility,
    eta_times,
    sample_path,
    subordinated_increments,
)

models = {
    "tempered-stable": SubordinatorModel.tempered_stable(0.25, 0.5, 1.0),
    "gamma": SubordinatorModel.gamma(1.0, 1.0),
    "compound-poisson": SubordinatorModel.compound_poisson(1.0, 1.0),
}
for name, m in models.items():
    rep = check_admissibility(m)
    print(f"{name:17s} admissible={rep.accepted}  E[l_1]={m.mean_rate:.4f}")

# %% [markdown]
# A sampled path: jumps above the cutoff are exact, the rest become drift.

# %%
model = models["tempered-stable"]
path = sample_path(model, 10.0, eps_cut=1e-4, rng_seed=1)
print("jumps:", len(path.jump_times), " drift:", path.drift, " l_10 =", path.value(10.0))
ends = np.array([sample_path(model, 10.0, 1e-4, s).value(10.0) for s in range(4000)])
print(f"mean of l_10 over 4000 paths: {ends.mean():.3f} +- {ends.std() / np.sqrt(len(ends)):.3f}",
      f" exact: {10 * model.mean_rate:.3f}")

# %% [markdown]
# Brownian increments on the subordinated clock, and the forcing operator
# built from a symmetric set of forced wavevectors.

# %%
noise = NoiseConfig.from_symmetric([(0, 1), (0, -1), (1, 1), (-1, -1)], {(0, 1): (0.1, 0.1), (1, 1): (0.1, 0.1)})
grid = np.linspace(0, 10, 101)
dW = subordinated_increments(path, grid, noise.d, rng_seed=2)
print("noise dimension:", noise.d, " B0 =", noise.B0, " increments:", dW.shape)

# %% [markdown]
# Stopping times `eta_n`: the first time after `eta_{n-1} + 1/nu` at which the
# clock has advanced by `kappa / B0`.

# %%
print("eta_1..3:", eta_times(path, nu=1.0, kappa=0.1, B0=noise.B0, count=3))
