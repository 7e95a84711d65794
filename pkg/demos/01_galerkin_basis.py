# %% [markdown]
# # Divergence-free Galerkin basis on the torus
#
# A state is a pair (velocity, magnetic field), each expanded in the real
# trigonometric fields `e_k^0 = k^perp/|k| cos(k.x)` and `e_k^1 = -k^perp/|k| sin(k.x)`
# for wavevectors on the half-lattice.  The nonlinear term is evaluated
# exactly from product-to-sum rules, so truncation is the only error.

# %%
import numpy as np

from mhdlab.fourier_core import (
    DissipationParams,
    SpectralField,
    bilinear_B,
    dissipation_rates,
    evaluate,
    galerkin_space,
    inner_product,
    sobolev_norm,
)

space = galerkin_space(4)
print("half-lattice modes with |k| <= 4:", space.K, " real unknowns:", space.n)

# %% [markdown]
# Basis fields are orthogonal with squared norm 2 pi^2 and divergence free.
# A quick grid check:

# %%
G = 32
x = -np.pi + 2 * np.pi * np.arange(G) / G
X, Y = np.meshgrid(x, x, indexing="ij")
a = evaluate(SpectralField.basis((1, 2), 0, "velocity", 4), X, Y)
b = evaluate(SpectralField.basis((1, 2), 1, "velocity", 4), X, Y)
cell = (2 * np.pi / G) ** 2
print("|psi|^2 =", np.sum(a * a) * cell, " (2 pi^2 =", 2 * np.pi**2, ")")
print("<psi^0, psi^1> =", np.sum(a * b) * cell)

# %% [markdown]
# The nonlinearity conserves energy: `<B(U, U), U> = 0` for every state.

# %%
rng = np.random.default_rng(0)
U = SpectralField.random(4, rng, norm=2.0)
B = bilinear_B(U, U)
print("<B(U,U),U> =", inner_product(B, U), " |B(U,U)| =", np.sqrt(inner_product(B, B)))

# %% [markdown]
# Fractional dissipation `nu |k|^(2 alpha)` acts diagonally.

# %%
p = DissipationParams(1.0, 0.5, 1.25, 1.5)
lam = dissipation_rates(p, 4)
print("slowest and fastest rates:", lam.min(), lam.max())
print("H^1 norm of U:", sobolev_norm(U, 1.0))
