"""Simulation and optimality checks for controlled stochastic evolution
equations driven by nuclear-covariance martingale noise.

The package is organised bottom-up:

* :mod:`spdectrl.hilbert`       weighted-norm geometry, operators, covariances
* :mod:`spdectrl.noise`         time grids, modulated covariance, path sampling
* :mod:`spdectrl.coefficients`  affine coefficient families and controls
* :mod:`spdectrl.forward`       state integration, moments, weak residuals
* :mod:`spdectrl.hamiltonian`   cost and Hamiltonian algebra
* :mod:`spdectrl.adjoint`       backward triple via least-squares Monte Carlo
* :mod:`spdectrl.spike`         spike variations, scaling, optimality margins
* :mod:`spdectrl.presets`       ready-made problem configurations
* :mod:`spdectrl.cli`           command-line entry point

Hot loops run through a compiled extension when it is importable and fall
back to a NumPy implementation otherwise; see :mod:`spdectrl.backend`.
"""

from .adjoint import (
    AdjointTriple,
    RegressionBasis,
    duality_check_inner,
    duality_check_tail,
    residual_orthogonality,
    solve_bspde,
)
from .backend import active_backend, available_backends
from .coefficients import (
    AffineCoefficients,
    CallableCoefficients,
    CoefficientBounds,
    ControlProcess,
    FactorSpec,
    NonAdaptedControlError,
    ScalarForm,
    TimeProfile,
    verify_coefficient_bounds,
)
from .forward import (
    ForwardEnsemble,
    SolverError,
    integrate,
    integrate_cost,
    moment_bound_check,
    moment_envelope_constants,
    weak_residual,
)
from .hamiltonian import (
    HamiltonianArgs,
    b_operator,
    cost,
    grad_x_hamiltonian,
    hamiltonian,
    hamiltonian_difference,
    sigma_tilde,
)
from .hilbert import (
    GelfandTriple,
    NuclearCovariance,
    OmegaState,
    OperatorFamily,
    dissipative_diagonal_family,
    hs_inner,
    hs_norm,
    verify_coercivity,
    verify_operator_bound,
)
from .noise import (
    CovarianceProcess,
    MartingaleEnsemble,
    TimeGrid,
    coarsen_ensemble,
    dump_paths,
    ito_isometry_check,
    sample_paths,
    stochastic_integral,
)
from .presets import PRESETS, Problem, build_problem, config_hash, load_config, preset_config
from .spike import (
    SpikeSpec,
    VariationEnsemble,
    maximum_principle_check,
    optimize_control,
    perturb_control,
    spike_control,
    variation_ensemble,
    variation_envelope_constants,
    variational_inequality,
    xi_dynamics_residual,
    xi_envelope_check,
    xi_scaling_study,
)

__version__ = "0.1.0"
