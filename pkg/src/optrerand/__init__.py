"""Optimal rerandomization designs for two-arm experiments."""

from .balance import BalanceMetric, RankedPool, imbalances, mahalanobis_imbalance, rank_pool
from .design_space import (
    AssignmentPool,
    decode_assignment,
    design_pool,
    encode_assignment,
    enumerate_balanced,
    greedy_pair_switch,
    mirror_close,
    sample_bcrd,
)
from .errors import NumericalError, RerandError, ValidationError
from .inference import (
    ExperimentRecord,
    TestResult,
    confidence_interval,
    estimate_dm,
    estimate_lr,
    randomization_test,
)
from .io import DesignArtifact, ingest_covariates, load_design, save_design, standardize
from .moments import StrategyMoments, criterion_matrices, moments_of, projection_cache
from .optimizer import DesignResult, SearchMode, optimize, sweep_trace_export
from .tail import TailSpec, ZSampler, evaluate_tail, hbe_quantile

__version__ = "0.1.0"
