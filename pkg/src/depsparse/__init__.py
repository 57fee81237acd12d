"""Desk-scale lab for latent recovery under dependency sparsity.

Generate nonlinear latent-variable data with a prescribed Jacobian support,
train autoencoder/VAE estimators with an L1 penalty on the decoder Jacobian,
and verify set-theoretic, structural, and element-wise recovery with exact
combinatorial checkers and numerical metrics.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DegenerateMapError,
    DepsparseError,
    EvaluationError,
    FormatError,
    GenerationError,
    NumericError,
    TrainingError,
)
from .setalg import (
    AtomicRegion,
    Certificate,
    CertificationFailure,
    DiversityVerdict,
    ForbiddenPairSet,
    IndexSet,
    SupportMatrix,
    atomic_regions,
    certify_region,
    check_sufficient_diversity,
    element_identifiability_predicted,
    forbidden_pairs,
    implied_pairs,
    index_set,
)

__all__ = [
    "__version__",
    "AtomicRegion",
    "Certificate",
    "CertificationFailure",
    "ConfigError",
    "DegenerateMapError",
    "DepsparseError",
    "DiversityVerdict",
    "EvaluationError",
    "ForbiddenPairSet",
    "FormatError",
    "GenerationError",
    "IndexSet",
    "NumericError",
    "SupportMatrix",
    "TrainingError",
    "atomic_regions",
    "certify_region",
    "check_sufficient_diversity",
    "element_identifiability_predicted",
    "forbidden_pairs",
    "implied_pairs",
    "index_set",
]
