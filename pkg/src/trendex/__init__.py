"""Trend exclusion for diffusions and Markov-chain discretizations.

The package removes a linearly growing drift component from a
diffusion (or from a Markov chain approximating it) by conjugating
with the fundamental matrix of the drift's linear part, simulates and
evolves the resulting bounded-drift systems, and measures how fast the
chain's transition density approaches the diffusion's in a
polynomially weighted sup-norm.
"""

from .chains import (
    PathEnsemble,
    RandomStream,
    coupling_residual,
    simulate_chain,
    simulate_coupled,
    simulate_diffusion_reference,
)
from .config import load_model, model_from_dict
from .density import (
    DensityField,
    SpatialGrid,
    evolve_chain_density,
    gaussian_tail_check,
    kde_estimate,
    transform_density,
    vasicek_density,
    vasicek_excluded_density,
    weighted_sup_distance,
)
from .errors import TrendexError
from .exclusion import (
    ExcludedChain,
    ExcludedDiffusion,
    exclude_chain,
    exclude_diffusion,
    pull_state,
    restore_state,
    transform_innovation_density,
    transformed_covariance,
)
from .fundmat import (
    FundamentalMatrixTable,
    MatrixFunction,
    TimeGrid,
    broken_line_convergence,
    build_discrete,
    exp_bound_residual,
    solve_continuous,
)
from .harness import (
    ConvergenceConfig,
    ConvergenceReport,
    run_convergence_study,
    run_example,
    vasicek_study_config,
)
from .models import (
    ChainSpec,
    DiffusionModel,
    InnovationFamily,
    ProbeBox,
    chain_from_model,
    gaussian_innovations,
    make_heston_like,
    make_koo_linton,
    make_vasicek,
    validate_conditions,
)

__version__ = "0.1.0"
