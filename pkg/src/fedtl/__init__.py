"""Federated transfer learning with per-site differential privacy.

Estimators for univariate means, low-dimensional and sparse high-dimensional
linear regression across multiple simulated sites, where every communicated
message is privatized locally; plus the protocol harness, privacy-ledger
audit, synthetic data generators, and a Monte Carlo experiment front end.
"""

__version__ = "0.1.0"

from .detection import DetectionInput, calibrate_tilde_c, detect_informative
from .errors import (
    CalibrationError,
    DivergenceError,
    InsufficientDataError,
    ParameterError,
    ProtocolError,
    TranscriptFormatError,
)
from .harness import (
    EstimatorReport,
    LedgerVerdict,
    Partition,
    SiteDataset,
    Transcript,
    audit_ledger,
    partition_site,
    run_protocol,
)
from .highdim import MetaDecision, SparseRegConfig, dp_sparse_single, fed_sparse, meta_sparse
from .lowdim import GdTrace, RegressionConfig, dp_linreg_single, fed_linreg
from .meanest import FedMeanReport, PrivateMeanResult, fed_mean, kv_private_mean, run_fed_mean
from .mechanisms import (
    ClipRadii,
    NoiseMode,
    PrivacyBudget,
    gaussian_noise_std,
    hard_threshold,
    laplace_sample,
    peeling,
    private_variance,
    project_l2,
    project_linf,
)
from .rates import (
    RateParams,
    aggregation_privacy_term,
    rate_highdim,
    rate_lowdim,
    rate_mean,
)
from .synth import Family, ProblemSpec, gen_linreg_sites, gen_mean_sites, gen_sparse_sites

__all__ = [name for name in dir() if not name.startswith("_")]
