"""SiRE - simulation-informed revenue extrapolation.

Peer-based revenue measurements feed a five-state linear dynamical system
that is fitted with EM and rolled into the future over many stochastic
trials. See README.md for the command line.
"""
from sire.dataset import CompanyProfile, Dataset, build_dataset, ingest_csv
from sire.errors import (
    DataValidationError,
    ForecastFailed,
    GranularityError,
    InsufficientHistory,
    MeasurementUnavailable,
    NumericalDegeneracy,
    SireError,
)
from sire.evaluation import EvalPlan, persistence_forecaster, rolling_origin, sire_forecaster
from sire.extrapolation import ForecastConfig, ForecastResult, forecast_with_confidence
from sire.measurement import MeasureConfig
from sire.synthetic import CohortSpec, GrowthProfile, generate_cohort

__version__ = "0.1.0"
