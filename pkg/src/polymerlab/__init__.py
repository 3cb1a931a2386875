"""Transfer-matrix and Monte Carlo laboratory for directed polymers in a
random environment.

The package computes partition functions of lattice polymers exactly by
dynamic programming, estimates growth and localization exponents by Monte
Carlo, and cross-checks everything against brute-force path enumeration on
small instances.
"""

__version__ = "0.1.0"

from .environment import (
    CompositeEnvironment,
    DisorderLaw,
    EnvironmentBox,
    Region,
    SeededEnvironment,
    TabulatedEnvironment,
    derive_seed,
    reference_law,
    sample_omega,
)
from .errors import (
    CapacityError,
    ConfigError,
    GridInfeasibleError,
    IdentityError,
    NoTransitionError,
    UnsupportedLawError,
)
from .lattice import (
    PolymerConfig,
    backward_field,
    backward_sweep,
    endpoint_measure,
    evolve,
    forward_field,
    log_partition,
    restricted_partition,
)
from .moments import (
    beta_crit_L2,
    build_moment_curve,
    estimate_pstar,
    estimate_qstar,
    exact_a2,
    exact_kth_moment,
    exact_second_moment,
    gff_intensity,
    l2_growth_point,
    mc_moment,
    return_probability,
    second_moment_growth_rate,
    xi_from_pstar,
)
