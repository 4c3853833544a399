"""Randomization inference under stratified permutations.

Exact and Monte Carlo randomization tests, combinatorial-CLT diagnostics for
doubly-centered arrays, and a simulation harness for rank tests with many
small strata.
"""

from .core import (CenteredArray, CsvSchema, StrataLayout, StratifiedDataset, build_centered_array,
                   demean_within_strata, load_dataset, write_dataset)
from .errors import (CouplingUndefined, DegenerateVarianceError, DimensionError, DomainError, EmptyInputError,
                     EnumerationTooLarge, ParseError, SchemaError, SingularCovarianceError, StrataRandError, TieError)
from .inference import MCNullDistribution, TestReport, am_test, exact_null_distribution, ir_test, mc_null_distribution
from .numerics import (IDENTITY, NORMAL, WILCOXON, RankVector, ScoreSpec, chi2_cdf, chi2_quantile, chi2_sf,
                       ranks_within_strata, score_positions, score_transform, score_variance_factor,
                       std_normal_cdf, std_normal_quantile)
from .permute import (CouplingDraw, StratifiedPermutation, check_coupling_properties, enumerate_permutations,
                      sample_permutation, stein_coupling)
from .simharness import SimConfig, generate_design, rejection_table, simulate_replication
from .stats import (AMComponents, AMDesign, CltDiagnostics, FinitePopBridge, IRMoments, IRResult, am_components,
                    clt_diagnostics, sigma_matrix, finite_pop_bridge, ir_moments, ir_statistic, lindeberg_sum,
                    lyapunov_sum, product_moment_sums, sigma_n_sq, t_statistic)

__version__ = "0.1.0"
