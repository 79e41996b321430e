import io

import numpy as np
import pytest

from sire.dataset import build_dataset, ingest_csv
from sire.synthetic import CohortSpec, GrowthProfile, generate_cohort, generate_company, write_cohort_csv


def _constant_growth(lo, hi):
    return GrowthProfile(initial_growth=(lo, hi), decay=1.0, noise=0.0)


def test_noiseless_cohort_holds_its_growth():
    dataset = generate_cohort(CohortSpec(n_companies=5, default_growth=_constant_growth(1.5, 1.5)))
    np.testing.assert_allclose(dataset.z, 1.5, rtol=1e-10)
    np.testing.assert_allclose(dataset.z_next, 1.5, rtol=1e-10)


def test_default_cohort_size():
    dataset = generate_cohort(CohortSpec())
    assert len(dataset.companies) == 50
    assert len(dataset) == 50 * (36 - 13)
    assert dataset.companies[0] == "C0000"


def test_same_seed_same_cohort():
    spec = CohortSpec(n_companies=8, measurement_noise=0.05, seed=11)
    assert generate_cohort(spec) == generate_cohort(spec)
    assert generate_cohort(spec) != generate_cohort(spec.model_copy(update={"seed": 12}))


def test_company_draw_is_independent_of_cohort_size():
    small = CohortSpec(n_companies=3, seed=4)
    big = small.model_copy(update={"n_companies": 30})
    profile_a, series_a = generate_company(small, 2)
    profile_b, series_b = generate_company(big, 2)
    assert profile_a == profile_b
    assert series_a.equals(series_b)


def test_revenue_stays_positive_under_heavy_shocks():
    spec = CohortSpec(
        n_companies=20,
        default_growth=GrowthProfile(initial_growth=(0.5, 1.0), decay=0.9, noise=2.0),
        measurement_noise=0.5,
        seed=5,
    )
    dataset = generate_cohort(spec)
    for company_id in dataset.companies:
        assert (dataset.booked(company_id) > 0).all()


def test_median_growth_tracks_the_initial_range():
    dataset = generate_cohort(CohortSpec(default_growth=_constant_growth(1.2, 2.0), seed=9))
    per_company = dataset.frame.groupby("company_id")["z"].first()
    assert per_company.median() == pytest.approx(1.6, abs=0.1)


def test_sector_growth_overrides_the_default():
    spec = CohortSpec(
        n_companies=30,
        sectors=["software", "hardware"],
        default_growth=_constant_growth(1.1, 1.1),
        sector_growth={"hardware": _constant_growth(2.0, 2.0)},
        seed=2,
    )
    dataset = generate_cohort(spec)
    frame = dataset.frame
    sectors = frame["company_id"].map(lambda c: dataset.profiles[c].sector)
    np.testing.assert_allclose(frame.loc[sectors == "software", "z"], 1.1, rtol=1e-10)
    np.testing.assert_allclose(frame.loc[sectors == "hardware", "z"], 2.0, rtol=1e-10)


def test_yearly_cohort():
    dataset = generate_cohort(CohortSpec(n_companies=4, periodicity=1, length=(8, 8), start=("2010", "2012")))
    assert dataset.periodicity == 1
    assert len(dataset) == 4 * (8 - 2)


def test_csv_round_trip(small_cohort):
    buf = io.StringIO()
    write_cohort_csv(small_cohort, buf)
    buf.seek(0)
    assert build_dataset(ingest_csv(buf), 12) == small_cohort


@pytest.mark.parametrize("kwargs", [
    {"n_companies": 0},
    {"periodicity": 4},
    {"length": (10, 5)},
    {"start": ("2018-01", "2017-01")},
])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        CohortSpec(**kwargs)
