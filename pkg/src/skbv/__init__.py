"""Spatial knockoff Bayesian variable selection.

Pipeline: load or simulate data -> build knockoffs -> (optionally)
prune / project off relatedness -> run the spike-and-slab chain ->
apply the knockoff filter at a target FDR level.
"""

from .data import Dataset, KnockoffPair, RelatednessBasis, load_dataset
from .errors import DataError, NumericalError, SkbvError
from .estimators import KnockoffSelector, KnockoffTransformer
from .filters import KnockoffResult, select, threshold
from .knockoffs import GaussianKnockoffSampler, check_exchangeability, equi_s
from .preprocess import ibs_kinship, marginal_pvalues, prune, relatedness_basis
from .sampler import PosteriorAccumulator, SamplerConfig, fit_dataset, run_chain
from .simbench import SimDesign, SimResult, run_grid, simulate, summarize
from .spatial import SpatialBasis, build_spatial_basis, moran_basis, neighborhood

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "KnockoffPair",
    "RelatednessBasis",
    "load_dataset",
    "SkbvError",
    "DataError",
    "NumericalError",
    "KnockoffSelector",
    "KnockoffTransformer",
    "KnockoffResult",
    "select",
    "threshold",
    "GaussianKnockoffSampler",
    "check_exchangeability",
    "equi_s",
    "ibs_kinship",
    "marginal_pvalues",
    "prune",
    "relatedness_basis",
    "PosteriorAccumulator",
    "SamplerConfig",
    "fit_dataset",
    "run_chain",
    "SimDesign",
    "SimResult",
    "run_grid",
    "simulate",
    "summarize",
    "SpatialBasis",
    "build_spatial_basis",
    "moran_basis",
    "neighborhood",
    "__version__",
]
