"""Fractional MHD on the 2-torus driven by degenerate subordinated Brownian noise.

Galerkin solver, Levy subordinators, variational and Malliavin calculus,
Lie bracket checks and Monte-Carlo ergodicity probes.  Submodules:

- ``fourier_core``: basis, bilinear term, dissipation
- ``levy_noise``: subordinator models and paths, forcing operator, stopping times
- ``dynamics``: exponential integrators, trajectories, ensembles
- ``variational``: Jacobian, adjoint, Malliavin matrix, controls, cone minimum
- ``hoermander``: bracket identities, direction cascade
- ``ergodicity_lab``: moment, e-property, irreducibility, invariant measure and positivity probes
- ``config`` and ``cli``: JSON configuration and the ``mhdlab`` command
"""

from .dynamics import SolverConfig, StepFailure, Trajectory, energy_ledger, evolve, replay, run_ensemble
from .ergodicity_lab import (
    ExperimentPlan,
    ProbeReport,
    e_property_probe,
    invariant_measure_compare,
    irreducibility_probe,
    malliavin_positivity,
    moment_experiment,
)
from .fourier_core import (
    DissipationParams,
    SpectralField,
    advect,
    bilinear_B,
    galerkin_space,
    inner_product,
    sobolev_norm,
)
from .hoermander import cascade, coverage_report, generator_check, lemma_suite, verify_lemma
from .levy_noise import (
    NoiseConfig,
    SubordinatorModel,
    SubordinatorPath,
    check_admissibility,
    eta_times,
    sample_path,
)
from .variational import (
    adjoint,
    cone_minimum,
    jacobian,
    malliavin_form,
    malliavin_matrix,
    second_variation,
    tikhonov_control,
)

__version__ = "0.1.0"
