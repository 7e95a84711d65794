# %% [markdown]
# # Monte-Carlo probes of ergodic behaviour
#
# Each probe takes an `ExperimentPlan` (solver, ensemble size, horizon,
# seed) and returns a report with time series, named checks and the config
# hash.  Sizes here are small; the acceptance suite runs the full ones.

# %%
import numpy as np

from mhdlab.config import build_solver, default_config
from mhdlab.ergodicity_lab import (
    ExperimentPlan,
    e_property_probe,
    invariant_measure_compare,
    irreducibility_probe,
    moment_experiment,
)
from mhdlab.fourier_core import SpectralField

cfg = build_solver(default_config(), "moments")
r = moment_experiment(ExperimentPlan("moments", cfg, M=200, T=6.0, burn_in=3.0))
print("moments:", {k: v["passed"] for k, v in r.checks.items()}, " fitted C:", r.metadata["C_fit"],
      " model:", r.metadata["C_model"])

# %% [markdown]
# Synchronous coupling: the distance in expectation between two nearby starts.

# %%
U0 = SpectralField.random(cfg.N, np.random.default_rng(1), norm=1.0)
r = e_property_probe(U0, [0.08, 0.04, 0.02, 0.01, 0.005], "energy", 1.0, ExperimentPlan("e", cfg, M=100, T=1.0))
print("e-property:", {k: v["passed"] for k, v in r.checks.items()})

# %% [markdown]
# Worst-case start on a sphere, probability of landing in a small ball.

# %%
r = irreducibility_probe(2.0, 0.5, 3.0, ExperimentPlan("irr", cfg, M=300, T=3.0), candidates=4, pilot=50)
c = r.checks["positive_lower_bound"]
print(f"P(|U_T| <= 0.5) ~ {c['estimate']:.3f}, 95% interval [{c['ci_low']:.3f}, {c['ci_high']:.3f}]")

# %% [markdown]
# Two far-apart starts should produce the same stationary statistics.

# %%
far = SpectralField.random(cfg.N, np.random.default_rng(2), norm=5.0)
r = invariant_measure_compare(np.zeros(cfg.n), far, ExperimentPlan("inv", cfg, M=40, T=12.0, burn_in=4.0))
for k, v in r.checks.items():
    print(k, v["passed"])
