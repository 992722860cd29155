"""Asynchronous aggregation of distributed Gaussian process experts with delay-aware error bounds."""

from .aggregation import (
    AggregationResult,
    AggregatorKind,
    InformationSet,
    PredictionRecord,
    aggregate,
    aggregate_error_bound,
    asyncdgp_aggregate,
    baseline_aggregate,
    delayed_error_bound,
    manage_information_set,
)
from .errors import (
    AsyncGPError,
    ContractError,
    DivergenceError,
    InputError,
    NotApplicableError,
    NumericError,
    ResourceError,
)
from .gp import GPConfig, OnlineGP, Posterior
from .kernels import KernelFamily, KernelSpec, eval_kernel, kernel_matrix, lipschitz_constant, lipschitz_oracle

__version__ = "0.1.0"
