"""Multivariate varying coefficient models for functional responses."""

from .coefficients import (CoefficientFit, cross_validate_bandwidth, estimate_bias,
                           estimate_coefficients, fit_auto)
from .data import FunctionalDataset, validate_dataset
from .fpca import (CovarianceEstimate, EigenSystem, compute_scores, cross_covariance_from_scores,
                   empirical_covariance, run_fpca, spectral_decompose)
from .inference import (BandResult, GlobalTestResult, LinearHypothesis, build_band, global_statistic,
                        scb_critical_value, wild_bootstrap_test, zero_effect_hypothesis)
from .kernels import Kernel
from .simulation import SimulationDesign, generate_dataset, run_coverage_study, run_power_study
from .smoothing import IndividualCurves, default_bandwidth, gcv_bandwidth, smooth_auto, smooth_individuals

__version__ = "0.1.0"
