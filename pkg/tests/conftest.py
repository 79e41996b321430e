import numpy as np
import pandas as pd
import pytest

from sire.dataset import CompanyProfile, build_dataset
from sire.lds import STATE_DIM, ModelParams
from sire.synthetic import CohortSpec, GrowthProfile, generate_cohort


def _series(company_id, values, start, freq="M"):
    index = pd.period_range(start, periods=len(values), freq=freq)
    return pd.Series(np.asarray(values, dtype=float), index=index, name=company_id)


@pytest.fixture
def make_dataset():
    """Factory: {company_id: (sector, customer_focus, values, start)} -> Dataset."""
    def make(companies, p=12, freq="M"):
        raw = []
        for company_id, (sector, focus, values, start) in companies.items():
            profile = CompanyProfile(company_id=company_id, sector=sector, customer_focus=focus)
            raw.append((profile, _series(company_id, values, start, freq)))
        return build_dataset(raw, p)
    return make


@pytest.fixture
def flat_dataset(make_dataset):
    """A flat peer (every z_next = 1.0) and a flat focus in the same business."""
    return make_dataset({
        "PEER": ("software", "b2b", [100.0] * 40, "2016-01"),
        "FOCUS": ("software", "b2b", [100.0] * 24, "2017-01"),
    })


@pytest.fixture(scope="session")
def small_cohort():
    spec = CohortSpec(
        n_companies=12,
        sectors=["software"],
        customer_focus=["b2b", "b2c"],
        length=(30, 30),
        log10_initial_revenue=(5.0, 5.5),
        start=("2015-01", "2015-06"),
        default_growth=GrowthProfile(initial_growth=(1.5, 2.5), decay=0.98, noise=0.01),
        seed=3,
    )
    return generate_cohort(spec)


@pytest.fixture
def random_params():
    """Factory: rng -> well-conditioned random ModelParams."""
    def make(rng):
        B = rng.normal(size=(STATE_DIM, STATE_DIM))
        W = rng.normal(size=(STATE_DIM, STATE_DIM))
        return ModelParams(
            Q=0.2 * B @ B.T + 0.5 * np.eye(STATE_DIM),
            R=float(rng.uniform(0.5, 2.0)),
            mu=rng.normal(10.0, 2.0, size=STATE_DIM),
            Omega=0.2 * W @ W.T + np.eye(STATE_DIM),
        )
    return make
