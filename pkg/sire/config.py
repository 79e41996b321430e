"""Runtime defaults for SiRE.

Operating-point values are read once from the environment; every one of them
has a literal fallback so nothing needs to be set.
"""
import logging
import os
from typing import Optional

DEFAULT_RELAX_R = float(os.getenv("SIRE_RELAX_R", 0.5))
DEFAULT_QUANTILES = int(os.getenv("SIRE_QUANTILES", 4))
DEFAULT_TRIALS = int(os.getenv("SIRE_TRIALS", 10))
DEFAULT_Z_VALUE = float(os.getenv("SIRE_Z_VALUE", 1.96))
DEFAULT_EM_ITERS = int(os.getenv("SIRE_EM_ITERS", 10))
DEFAULT_SEED = int(os.getenv("SIRE_SEED", 0))
LOG_LEVEL = os.getenv("SIRE_LOG_LEVEL", "INFO")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Numerical floors
EPS_Z = 1e-6  # sampled growth / latent revenue floor
EPS_R_REL = 1e-9  # measurement variance floor, relative to (scale of y)^2
EPS_S_REL = 1e-6  # predictive std floor in NLL, relative to mean scale
PSD_FLOOR_REL = 1e-12  # eigenvalue floor for projected covariances

# Fallback ladder: r is doubled at most this many times and kept below R_CAP
RELAX_DOUBLINGS = 2
R_CAP = 0.99

PERIODICITY_BY_FREQ = {"M": 12, "Y": 1}


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging for entry points (CLI, jobs)."""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
    )
