"""Frailty-correlated default intensity models.

Estimation by particle MCMC EM, Monte Carlo default-probability forecasts
and CAP / accuracy-ratio backtests.
"""

from .data_io import GeneratorSpec, RunConfig, generate_synthetic, load_config, load_panel, save_panel
from .estimation import EmConfig, ThetaEstimate, em_estimate
from .evaluation import ScoredCohort, accuracy_ratio, backtest, cap_curve, fit_logistic
from .forecast import CovariateForecastModel, default_probability, fit_covariate_model, forecast_frailty
from .model import (
    FirmPanel,
    FirmRecord,
    FrailtyPath,
    GaussianPrior,
    Theta,
    UniformPrior,
    complete_data_loglik,
    intensity,
    log_posterior,
)
from .ou import OuParams
from .pimh import PimhConfig, run_pimh
from .smc import SmcConfig, run_smc

__version__ = "0.1.0"
