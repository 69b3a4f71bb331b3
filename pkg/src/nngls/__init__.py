"""Neural-network mean estimation for spatially correlated data with an NNGP GLS loss."""

__version__ = "0.1.0"

from .covariance import CovarianceParams, cov_matrix, matern, matern_min_eigen_bound
from .exceptions import DegenerateDesignError, InsufficientDataError, NumericalError
from .inference import BootstrapBand, PredictionResult, bootstrap_ci, partial_dependence, predict
from .network import MlpModel, backward, forward, gls_loss, init_model
from .nngp import (NngpFactors, compute_factors, correlate_back, decorrelate,
                   discrepancy_diagnostics, nngp_neg_loglik)
from .spatial_core import NeighborDag, SpatialDataset, build_dag, find_prediction_neighbors
from .trainer import FitResult, TrainConfig, estimate_theta, fit_nngls, split_data

__all__ = [
    "BootstrapBand", "CovarianceParams", "DegenerateDesignError", "FitResult",
    "InsufficientDataError", "MlpModel", "NeighborDag", "NngpFactors", "NumericalError",
    "PredictionResult", "SpatialDataset", "TrainConfig", "backward", "bootstrap_ci",
    "build_dag", "compute_factors", "correlate_back", "cov_matrix", "decorrelate",
    "discrepancy_diagnostics", "estimate_theta", "find_prediction_neighbors", "fit_nngls",
    "forward", "gls_loss", "init_model", "matern", "matern_min_eigen_bound",
    "nngp_neg_loglik", "partial_dependence", "predict", "split_data",
]
