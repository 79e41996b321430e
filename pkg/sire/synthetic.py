"""Synthetic scaleup cohorts for tests, demos and the nightly backtest.

Each company starts at a log-uniform revenue with an initial YoY growth that
decays toward 1.0:

    g_{t+1} = 1 + decay * (g_t - 1) + noise * N(0, 1)
    u_{t+1} = u_t * g_{t+1} ** (1 / p)

and booked values carry multiplicative lognormal measurement noise.
"""
from __future__ import annotations

import logging
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from sire.dataset import CompanyProfile, Dataset, build_dataset

logger = logging.getLogger(__name__)

GROWTH_FLOOR = 0.01


def _ordered(v: Tuple, name: str) -> Tuple:
    if v[0] > v[1]:
        raise ValueError(f"{name} range must satisfy lo <= hi, got {v}")
    return v


class GrowthProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    initial_growth: Tuple[float, float] = (1.5, 3.0)
    decay: float = 0.97
    noise: float = 0.02

    @field_validator("initial_growth")
    @classmethod
    def _check_initial(cls, v):
        if v[0] <= 0:
            raise ValueError("initial growth must be positive")
        return _ordered(v, "initial_growth")

    @field_validator("decay")
    @classmethod
    def _check_decay(cls, v: float) -> float:
        if not 0 < v <= 1:
            raise ValueError("decay must lie in (0, 1]")
        return v

    @field_validator("noise")
    @classmethod
    def _check_noise(cls, v: float) -> float:
        if v < 0:
            raise ValueError("noise must be >= 0")
        return v


class CohortSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_companies: int = 50
    sectors: List[str] = ["software", "fintech", "health"]
    customer_focus: List[str] = ["b2b", "b2c"]
    periodicity: int = 12
    length: Tuple[int, int] = (36, 36)
    log10_initial_revenue: Tuple[float, float] = (5.0, 7.0)
    start: Tuple[str, str] = ("2014-01", "2017-12")
    default_growth: GrowthProfile = GrowthProfile()
    sector_growth: Dict[str, GrowthProfile] = {}
    measurement_noise: float = 0.0
    seed: int = 0

    @field_validator("n_companies")
    @classmethod
    def _check_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("n_companies must be >= 1")
        return v

    @field_validator("sectors", "customer_focus")
    @classmethod
    def _non_empty(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("at least one value required")
        return v

    @field_validator("periodicity")
    @classmethod
    def _check_periodicity(cls, v: int) -> int:
        if v not in (1, 12):
            raise ValueError("periodicity must be 12 (monthly) or 1 (yearly)")
        return v

    @field_validator("length")
    @classmethod
    def _check_length(cls, v):
        if v[0] < 1:
            raise ValueError("series length must be >= 1")
        return _ordered(v, "length")

    @field_validator("log10_initial_revenue")
    @classmethod
    def _check_revenue(cls, v):
        return _ordered(v, "log10_initial_revenue")

    @field_validator("measurement_noise", "seed")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @model_validator(mode="after")
    def _check_start(self):
        first, last = (pd.Period(s, freq=self.freq) for s in self.start)
        if first > last:
            raise ValueError(f"start range must satisfy first <= last, got {self.start}")
        return self

    @property
    def freq(self) -> str:
        return "M" if self.periodicity == 12 else "Y"

    def growth_for(self, sector: str) -> GrowthProfile:
        return self.sector_growth.get(sector, self.default_growth)


def generate_company(spec: CohortSpec, index: int) -> Tuple[CompanyProfile, pd.Series]:
    """Company `index` of the cohort, drawn from its own substream [seed, index]."""
    rng = np.random.default_rng([spec.seed, index])
    sector = spec.sectors[rng.integers(len(spec.sectors))]
    focus = spec.customer_focus[rng.integers(len(spec.customer_focus))]
    n = int(rng.integers(spec.length[0], spec.length[1] + 1))
    u0 = 10 ** rng.uniform(*spec.log10_initial_revenue)
    first, last = (pd.Period(s, freq=spec.freq) for s in spec.start)
    start = first + int(rng.integers(0, (last - first).n + 1))

    growth = spec.growth_for(sector)
    g = rng.uniform(*growth.initial_growth)
    shocks = rng.standard_normal(n)
    noise = rng.standard_normal(n)

    u = np.empty(n)
    u[0] = u0
    for t in range(1, n):
        g = max(1.0 + growth.decay * (g - 1.0) + growth.noise * shocks[t], GROWTH_FLOOR)
        u[t] = u[t - 1] * g ** (1.0 / spec.periodicity)
    booked = u * np.exp(spec.measurement_noise * noise)

    company_id = f"C{index:04d}"
    profile = CompanyProfile(company_id=company_id, sector=sector, customer_focus=focus)
    dates = pd.period_range(start, periods=n, freq=spec.freq)
    return profile, pd.Series(booked, index=dates, name=company_id)


def generate_cohort(spec: CohortSpec) -> Dataset:
    raw = [generate_company(spec, i) for i in range(spec.n_companies)]
    dataset = build_dataset(raw, spec.periodicity)
    logger.info(f"Generated cohort: {dataset!r} (seed {spec.seed})")
    return dataset


def write_cohort_csv(dataset: Dataset, path: Union[str, object]) -> None:
    """Write the cohort in the standard ingest CSV format."""
    dataset.to_csv(path)
    logger.info(f"Wrote {len(dataset.companies)} companies to {path}")
