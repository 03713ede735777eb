"""Covariate-balancing doubly robust value estimation for individualized treatment rules."""

from .dataset import AugmentedDataset, Dataset, Schema, SplitSpec, augment, load_csv, normalize, split, write_csv
from .design import Design
from .missingness import ImputationScheme, impute, independence_check
from .outcome import OutcomeModel, fit_ols, features, predict
from .policy import LinearRule, SearchSettings, optimize_rule
from .propensity import BalanceFunction, GmmSettings, PropensityModel, fit_cbps, fit_mle
from .value import (
    EstimatorKind, EstimatorOptions, ValueEstimate, aipw_value, beta_opt, bootstrap, estimate, sigma_hat,
)

__version__ = "0.1.0"
