"""Even-order Gromov-Wasserstein functionals for discrete measures."""

from .measures import (
    DiscreteMeasure,
    DistributionSpec,
    NormalizationRecord,
    center,
    empirical_from_samples,
    merge_duplicate_atoms,
    moment,
    normalize_pair,
    parse_distribution,
    population_measure,
    population_moment,
    sample,
)
from .expansion import (
    KernelExpansion,
    KernelTerm,
    TermCapExceeded,
    coupling_value_direct,
    expand_kernel,
    expand_norm_power,
    gw_objective_bruteforce,
    marginal_value,
)

__version__ = "0.1.0"
