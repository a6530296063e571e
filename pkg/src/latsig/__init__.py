"""Signal detection on lattices from incomplete, spatially aggregated data.

The package tests whether a fine-resolution spatial mean is zero given only
block-aggregated (and possibly incomplete) observations, by conditional
Gaussian simulation, wavelet-domain FDR testing of each simulated field, and
a dependence-aware combination of the resulting p-values.
"""

from .combine import CombineResult, combine
from .covariance import CovarianceFamily, FittedCovariance, cov_matrix, ml_fit
from .efdr import EfdrConfig, EfdrResult, efdr_test
from .grid import (
    AggregatedData,
    AggregationScheme,
    Grid2D,
    aggregate,
    drop_blocks,
    identity_scheme,
    observed_data,
    regular_blocks,
)
from .pipeline import DetectionReport, PipelineConfig, detect
from .wavelet import WaveletPyramid, dwt2, idwt2

__version__ = "0.1.0"

__all__ = [
    "Grid2D",
    "AggregationScheme",
    "AggregatedData",
    "aggregate",
    "regular_blocks",
    "identity_scheme",
    "drop_blocks",
    "observed_data",
    "WaveletPyramid",
    "dwt2",
    "idwt2",
    "CovarianceFamily",
    "FittedCovariance",
    "cov_matrix",
    "ml_fit",
    "EfdrConfig",
    "EfdrResult",
    "efdr_test",
    "CombineResult",
    "combine",
    "PipelineConfig",
    "DetectionReport",
    "detect",
    "__version__",
]
