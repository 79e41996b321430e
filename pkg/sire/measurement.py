"""Simulation-informed revenue measurements.

To measure the next revenue of a company we look at peer tuples in a
comparable state (same sector and customer focus, dated no later than the
cutoff, revenue within +-r of the base, current growth in the same quantile
bucket), sample one of their next-period growths, blur it with a Silverman
bandwidth and apply it to the base revenue.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator

from sire.config import DEFAULT_QUANTILES, DEFAULT_RELAX_R, EPS_Z, R_CAP, RELAX_DOUBLINGS
from sire.dataset import CompanyProfile, Dataset
from sire.errors import MeasurementUnavailable

logger = logging.getLogger(__name__)

BUSINESS_FILTER = "business-filter"
DATE_FILTER = "date-filter"
REVENUE_FILTER = "revenue-filter"
GROWTH_FILTER = "growth-filter"


class FallbackPolicy(str, Enum):
    STRICT = "strict"
    RELAX = "relax"


class MeasureConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    r: float = DEFAULT_RELAX_R
    n: int = DEFAULT_QUANTILES
    periodicity: int = 12
    fallback_policy: FallbackPolicy = FallbackPolicy.RELAX
    exclude_focus: bool = True
    silverman_as_variance: bool = True

    @field_validator("r")
    @classmethod
    def _check_r(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("r must lie in (0, 1)")
        return v

    @field_validator("n", "periodicity")
    @classmethod
    def _check_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v


@dataclass(eq=False)
class MeasuringContext:
    candidates: pd.DataFrame
    quantile_bounds: np.ndarray
    bucket: Optional[int]  # None when the growth filter was skipped
    measuring_set: pd.DataFrame
    next_growth_pool: np.ndarray

    @property
    def growth_filter_skipped(self) -> bool:
        return self.bucket is None


@dataclass(frozen=True, eq=False)
class MeasurementDraw:
    measured_y: float
    z_hat: float
    z_anchor: float
    base: float
    periodicity: int
    cutoff: pd.Period
    relax_r: float
    fallback_level: int
    growth_filter_skipped: bool
    peers: pd.DataFrame

    @property
    def provenance(self) -> list:
        return [
            {"company_id": r.company_id, "date": str(r.date), "u": float(r.u), "z": float(r.z), "z_next": float(r.z_next)}
            for r in self.peers.itertuples(index=False)
        ]

    @property
    def latest_peer_date(self) -> Optional[pd.Period]:
        return self.peers["date"].max() if len(self.peers) else None

    def recompute(self) -> float:
        return measure_revenue(self.base, self.z_hat, self.periodicity)

    def to_dict(self) -> dict:
        return {
            "measured_y": self.measured_y,
            "z_hat": self.z_hat,
            "z_anchor": self.z_anchor,
            "base": self.base,
            "periodicity": self.periodicity,
            "cutoff": str(self.cutoff),
            "relax_r": self.relax_r,
            "fallback_level": self.fallback_level,
            "growth_filter_skipped": self.growth_filter_skipped,
            "peers": self.provenance,
        }


def _candidate_mask(
    dataset: Dataset,
    focus: CompanyProfile,
    base: float,
    cutoff: pd.Period,
    r: float,
    exclude_focus: bool,
    use_business: bool = True,
) -> Tuple[np.ndarray, Optional[str]]:
    """Apply business, date and revenue filters in turn.

    Returns the mask and the first stage that left nothing (None if the
    result is non-empty).
    """
    mask = np.ones(len(dataset), dtype=bool)
    if exclude_focus:
        mask &= dataset.company_ids != focus.company_id
    if use_business:
        mask &= dataset.business_keys == focus.business_key
        if not mask.any():
            return mask, BUSINESS_FILTER
    mask &= dataset.ordinals <= cutoff.ordinal
    if not mask.any():
        return mask, DATE_FILTER
    mask &= (dataset.u >= (1 - r) * base) & (dataset.u <= (1 + r) * base)
    if not mask.any():
        return mask, REVENUE_FILTER
    return mask, None


def assemble_candidates(
    dataset: Dataset,
    focus: CompanyProfile,
    base_revenue: float,
    cutoff: Union[str, pd.Period],
    cfg: MeasureConfig,
) -> pd.DataFrame:
    """Peer tuples with the focus's business key, dated <= cutoff and u within [(1-r)base, (1+r)base]."""
    if base_revenue <= 0:
        raise ValueError(f"base revenue must be positive, got {base_revenue}")
    mask, _ = _candidate_mask(dataset, focus, base_revenue, dataset.period(cutoff), cfg.r, cfg.exclude_focus)
    return dataset.frame[mask]


def quantile_bounds(values: np.ndarray, n: int) -> np.ndarray:
    """Linear-interpolation quantiles q_0..q_n of values.

    A quantile whose position j (N - 1) / n is integral is the data point at
    that rank exactly; np.quantile may land one ULP off it.
    """
    ordered = np.sort(np.asarray(values, dtype=float))
    bounds = np.quantile(ordered, np.linspace(0.0, 1.0, n + 1))
    j = np.arange(n + 1)
    exact = (j * (len(ordered) - 1)) % n == 0
    bounds[exact] = ordered[(j[exact] * (len(ordered) - 1)) // n]
    return bounds


def bucket_of(values, bounds: np.ndarray):
    """1-based bucket [q_{k-1}, q_k); values >= q_n go to bucket n, values < q_0 to bucket 1."""
    n = len(bounds) - 1
    k = np.searchsorted(bounds[1:], values, side="right") + 1
    return np.clip(k, 1, n)


def growth_quantile_filter(candidates: pd.DataFrame, z_current: Optional[float], n: int) -> MeasuringContext:
    """Keep the candidates whose growth falls in the same quantile bucket as z_current."""
    if candidates.empty:
        raise ValueError("growth quantile filter needs at least one candidate")
    pool = candidates["z"].to_numpy()
    bounds = quantile_bounds(pool, n)
    if z_current is None or not np.isfinite(z_current):
        selected, k = candidates, None
    else:
        k = int(bucket_of(z_current, bounds))
        selected = candidates[bucket_of(pool, bounds) == k]
    return MeasuringContext(
        candidates=candidates,
        quantile_bounds=bounds,
        bucket=k,
        measuring_set=selected,
        next_growth_pool=selected["z_next"].to_numpy(),
    )


def silverman_value(pool: np.ndarray) -> float:
    """[(4/3) * sigma^5 / |pool|]^(1/5), sigma the population std of the pool."""
    pool = np.asarray(pool, dtype=float)
    return float((4.0 / 3.0 * np.std(pool) ** 5 / len(pool)) ** 0.2)


def sample_growth(
    next_growth_pool: np.ndarray,
    rng: np.random.Generator,
    silverman_as_variance: bool = True,
    size: Optional[int] = None,
):
    """Draw an anchor uniformly from the pool, then a Normal around it.

    Returns (z_anchor, z_hat); arrays of length `size` when size is given.
    z_hat is floored at EPS_Z.
    """
    pool = np.asarray(next_growth_pool, dtype=float)
    if pool.size == 0:
        raise ValueError("cannot sample from an empty growth pool")
    spread = silverman_value(pool)
    scale = np.sqrt(spread) if silverman_as_variance else spread
    anchor = pool[rng.integers(pool.size, size=size)]
    z_hat = np.maximum(anchor + scale * rng.standard_normal(size=size), EPS_Z)
    if size is None:
        return float(anchor), float(z_hat)
    return anchor, z_hat


def measure_revenue(base: float, z_hat: float, p: int) -> float:
    """base * z_hat^(1/p)"""
    if base <= 0 or z_hat <= 0:
        raise ValueError(f"base and growth must be positive, got {base}, {z_hat}")
    return base * z_hat ** (1.0 / p)


def _ladder(cfg: MeasureConfig):
    """(r, use_growth, use_business) attempts in order."""
    yield cfg.r, True, True
    if cfg.fallback_policy is FallbackPolicy.STRICT:
        return
    r = cfg.r
    for _ in range(RELAX_DOUBLINGS):
        r = min(2 * r, R_CAP)
        yield r, True, True
    yield r, False, True
    yield r, False, False


def measure_with_provenance(
    dataset: Dataset,
    focus: CompanyProfile,
    base: float,
    z_current: Optional[float],
    cutoff: Union[str, pd.Period],
    cfg: MeasureConfig,
    rng: np.random.Generator,
) -> MeasurementDraw:
    """Assemble, bucket, sample and measure; walks the fallback ladder under the relax policy."""
    if base <= 0:
        raise ValueError(f"base revenue must be positive, got {base}")
    cutoff = dataset.period(cutoff)
    stage = None
    for level, (r, use_growth, use_business) in enumerate(_ladder(cfg)):
        mask, stage = _candidate_mask(dataset, focus, base, cutoff, r, cfg.exclude_focus, use_business)
        if stage is not None:
            continue
        candidates = dataset.frame[mask]
        if use_growth:
            context = growth_quantile_filter(candidates, z_current, cfg.n)
            if context.measuring_set.empty:
                stage = GROWTH_FILTER
                continue
        else:
            context = MeasuringContext(candidates, quantile_bounds(candidates["z"].to_numpy(), 1), None,
                                       candidates, candidates["z_next"].to_numpy())
        if level:
            logger.warning(
                f"Measurement for {focus.company_id} at {cutoff} used fallback level {level} "
                f"(r={r:.3f}, growth filter={use_growth}, business filter={use_business})"
            )
        z_anchor, z_hat = sample_growth(context.next_growth_pool, rng, cfg.silverman_as_variance)
        return MeasurementDraw(
            measured_y=measure_revenue(base, z_hat, cfg.periodicity),
            z_hat=z_hat,
            z_anchor=z_anchor,
            base=float(base),
            periodicity=cfg.periodicity,
            cutoff=cutoff,
            relax_r=r,
            fallback_level=level,
            growth_filter_skipped=context.growth_filter_skipped,
            peers=context.measuring_set,
        )
    raise MeasurementUnavailable(
        stage, f"no peers for {focus.company_id} at {cutoff} (base {base:.4g}): empty after {stage}"
    )
