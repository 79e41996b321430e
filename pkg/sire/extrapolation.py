"""Roll a fitted revenue LDS into the future.

Each trial measures the focus history against its peers, fits the LDS with
EM, then alternates measure and filter steps over the horizon, smooths the
whole timeline once at the end and reads off the latent revenue. M trials
give a mean trajectory and a confidence margin.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator

from sire.config import DEFAULT_EM_ITERS, DEFAULT_SEED, DEFAULT_TRIALS, DEFAULT_Z_VALUE, EPS_Z
from sire.dataset import Dataset, FocusSeries, compute_growth_series
from sire.errors import DataValidationError, ForecastFailed, InsufficientHistory, MeasurementUnavailable, SireError
from sire.lds import LATENT, EMFit, FilterPass, SmoothPass, backward_smooth, filter_step, fit_em, init_params
from sire.measurement import FallbackPolicy, MeasureConfig, MeasurementDraw, measure_with_provenance

logger = logging.getLogger(__name__)

# Substream for the shared EM fit; trial streams use [seed, trial]
_SHARED_FIT_STREAM = 2**32 - 1


class ForecastConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    horizon: int
    trials: int = DEFAULT_TRIALS
    z_value: float = DEFAULT_Z_VALUE
    seed: int = DEFAULT_SEED
    em_iterations: int = DEFAULT_EM_ITERS
    measure: MeasureConfig = MeasureConfig()
    shared_fit: bool = False
    workers: int = 1

    @field_validator("horizon", "workers")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("trials")
    @classmethod
    def _check_trials(cls, v: int) -> int:
        if v < 2:
            raise ValueError("at least 2 trials are needed for a margin")
        return v

    @field_validator("z_value")
    @classmethod
    def _check_z(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("z_value must be positive")
        return v

    @field_validator("seed", "em_iterations")
    @classmethod
    def _non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be >= 0")
        return v


@dataclass
class FocusFit:
    """Historical measurements y_1..y_T and the EM fit for one focus company.

    measured is in revenue units; em was fitted on measured / scale, with
    scale the last booked revenue u_T.
    """
    focus: FocusSeries
    measured: np.ndarray
    em: EMFit
    draws: List[Optional[MeasurementDraw]]
    missing: int = 0
    scale: float = 1.0


@dataclass
class Trajectory:
    latent: np.ndarray  # x_{T+1}..x_{T+T'}
    history_latent: np.ndarray  # smoothed x_1..x_T after global smoothing
    draws: List[MeasurementDraw]  # draws[k] measured y_{T+k+1}
    fit: FocusFit
    floored: int = 0
    growth_fallbacks: int = 0

    @property
    def warning_counts(self) -> dict:
        return {
            "floored": self.floored,
            "missing_measurements": self.fit.missing,
            "growth_fallbacks": self.growth_fallbacks,
        }


@dataclass
class TrajectoryMatrix:
    values: np.ndarray  # (M, T')
    provenance: List[List[Optional[MeasurementDraw]]]

    def __post_init__(self):
        if not (np.isfinite(self.values).all() and (self.values > 0).all()):
            raise ValueError("trajectory entries must be finite and positive")


@dataclass
class ForecastResult:
    company_id: str
    periodicity: int
    dates: pd.PeriodIndex
    mean: np.ndarray
    margin: np.ndarray
    std: np.ndarray
    trajectories: TrajectoryMatrix
    history_dates: pd.PeriodIndex
    history_latent: np.ndarray
    config: dict = field(default_factory=dict)
    warning_counts: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.mean)

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.margin

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.margin

    def to_frame(self) -> pd.DataFrame:
        """One row per horizon step; the plotting artifact."""
        return pd.DataFrame({
            "company_id": self.company_id,
            "step": np.arange(1, self.horizon + 1),
            "date": [str(d) for d in self.dates],
            "mean": self.mean,
            "margin": self.margin,
            "lower": self.lower,
            "upper": self.upper,
            "std": self.std,
        })

    def step_provenance(self, step: int) -> list:
        """Measurements that informed horizon step `step` (1-based), one per trial."""
        if not 1 <= step <= self.horizon:
            raise ValueError(f"step must lie in [1, {self.horizon}]")
        return [trial[step - 1] for trial in self.trajectories.provenance]

    def to_dict(self, include_trials: bool = False, include_provenance: bool = False) -> dict:
        out = {
            "company_id": self.company_id,
            "periodicity": self.periodicity,
            "horizon": self.horizon,
            "config": self.config,
            "steps": [
                {
                    "step": k + 1,
                    "date": str(self.dates[k]),
                    "mean": float(self.mean[k]),
                    "margin": float(self.margin[k]),
                    "lower": float(self.lower[k]),
                    "upper": float(self.upper[k]),
                    "std": float(self.std[k]),
                }
                for k in range(self.horizon)
            ],
            "history": [
                {"date": str(d), "latent": float(x)} for d, x in zip(self.history_dates, self.history_latent)
            ],
            "warnings": self.warning_counts,
        }
        if include_trials:
            out["trials"] = self.trajectories.values.tolist()
        if include_provenance:
            out["provenance"] = [
                [draw.to_dict() if draw is not None else None for draw in trial]
                for trial in self.trajectories.provenance
            ]
        return out


def horizon_dates(last: pd.Period, horizon: int) -> pd.PeriodIndex:
    """The horizon continues the booked calendar at the same frequency with no gaps."""
    return pd.period_range(last + 1, periods=horizon, freq=last.freq)


def predict_growth(latent: Sequence[float], booked: Sequence[float], tau: int, p: int) -> float:
    """YoY growth of latent revenue at timeline index tau.

    latent[t - 1] holds x_t and booked[i] holds u_i. The p-back denominator is
    the booked value when one exists, otherwise the latent value; if the
    timeline does not reach back p steps the earliest latent value is used.
    """
    back = tau - p
    if 0 <= back < len(booked):
        denom = booked[back]
    elif back >= 1:
        denom = latent[back - 1]
    else:
        logger.warning(f"No value {p} steps before t={tau}; using earliest latent revenue")
        denom = latent[0]
    return float(latent[tau - 1]) / max(float(denom), EPS_Z)


def _measure_cfg(dataset: Dataset, cfg: ForecastConfig) -> MeasureConfig:
    if cfg.measure.periodicity != dataset.periodicity:
        raise DataValidationError(
            f"forecast periodicity {cfg.measure.periodicity} does not match dataset periodicity {dataset.periodicity}"
        )
    return cfg.measure


def _measure(dataset, focus, base, z_current, cutoff, mcfg, rng) -> Tuple[float, Optional[MeasurementDraw]]:
    """Historical measurement or, under the relax policy, a missing observation."""
    try:
        draw = measure_with_provenance(dataset, focus.profile, base, z_current, cutoff, mcfg, rng)
    except MeasurementUnavailable as e:
        if mcfg.fallback_policy is FallbackPolicy.STRICT:
            raise
        logger.warning(f"{focus.company_id} at {cutoff}: {e.detail}; treating as missing")
        return np.nan, None
    return draw.measured_y, draw


def fit_focus(dataset: Dataset, focus: FocusSeries, cfg: ForecastConfig, rng: np.random.Generator) -> FocusFit:
    """Measure y_1..y_T from the booked bases u_0..u_{T-1}, then fit EM in units of u_T."""
    mcfg = _measure_cfg(dataset, cfg)
    booked = focus.booked
    if len(booked) < 3:
        raise InsufficientHistory(f"{focus.company_id} has {len(booked)} booked points, needs at least 3")
    u = booked.to_numpy(dtype=float)
    z = compute_growth_series(booked, dataset.periodicity, focus.company_id).to_numpy()

    measured, draws, missing = [], [], 0
    for i in range(len(u) - 1):
        y, draw = _measure(dataset, focus, u[i], z[i], booked.index[i], mcfg, rng)
        measured.append(y)
        draws.append(draw)
        missing += draw is None
    measured = np.array(measured)
    scale = float(u[-1])
    em = fit_em(measured / scale, init_params(u / scale, measured / scale), cfg.em_iterations)
    return FocusFit(focus=focus, measured=measured, em=em, draws=draws, missing=missing, scale=scale)


def global_smooth(history: FilterPass, horizon: Sequence[FilterPass]) -> SmoothPass:
    """RTS smoothing over history and horizon as one timeline."""
    return backward_smooth(FilterPass.concat(history, *horizon))


def roll_out(dataset: Dataset, fit: FocusFit, cfg: ForecastConfig, rng: np.random.Generator) -> Trajectory:
    """Seed the horizon with y_{T+1} from the last booked value, then alternate measure and filter.

    Every horizon step needs a measurement: an empty measuring set at the end
    of the fallback ladder raises MeasurementUnavailable under either policy.
    """
    mcfg = _measure_cfg(dataset, cfg)
    p = dataset.periodicity
    booked = fit.focus.booked
    u = booked.to_numpy(dtype=float)
    z = compute_growth_series(booked, p, fit.focus.company_id).to_numpy()
    T = len(u) - 1
    params, scale = fit.em.params, fit.scale
    latent = list(fit.em.smoothed.latent * scale)  # x_1..x_T, extended with filtered horizon values

    draw = measure_with_provenance(dataset, fit.focus.profile, u[T], z[T], booked.index[T], mcfg, rng)
    step = filter_step(params, fit.em.filtered.x_filt[-1], fit.em.filtered.P_filt[-1], draw.measured_y / scale, t=T + 1)
    steps, draws = [step], [draw]
    floored = growth_fallbacks = 0
    for tau in range(T + 1, T + cfg.horizon):
        base = float(step.x_filt[0, LATENT]) * scale
        if base < EPS_Z:
            base = EPS_Z
            floored += 1
        latent.append(base)
        growth_fallbacks += tau - p < 0
        z_tau = predict_growth(latent, u, tau, p)
        draw = measure_with_provenance(dataset, fit.focus.profile, base, z_tau, booked.index[T] + (tau - T), mcfg, rng)
        step = filter_step(params, step.x_filt[0], step.P_filt[0], draw.measured_y / scale, t=tau + 1)
        steps.append(step)
        draws.append(draw)

    smoothed = global_smooth(fit.em.filtered, steps)
    values = smoothed.latent[T:] * scale
    floored += int((values < EPS_Z).sum())
    if floored:
        logger.warning(f"{fit.focus.company_id}: {floored} latent values floored at {EPS_Z}")
    return Trajectory(
        latent=np.maximum(values, EPS_Z),
        history_latent=smoothed.latent[:T] * scale,
        draws=draws,
        fit=fit,
        floored=floored,
        growth_fallbacks=growth_fallbacks,
    )


def forecast_one_trajectory(dataset: Dataset, focus: FocusSeries, cfg: ForecastConfig, rng: np.random.Generator) -> Trajectory:
    return roll_out(dataset, fit_focus(dataset, focus, cfg, rng), cfg, rng)


def confidence_band(values: np.ndarray, z_value: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column mean, margin z * sqrt(sum (x - mean)^2 / (M (M - 1))) and sample std of an (M, T') matrix."""
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    if m < 2:
        raise ValueError("need at least 2 trials")
    mean = values.mean(axis=0)
    ss = ((values - mean) ** 2).sum(axis=0)
    return mean, z_value * np.sqrt(ss / (m * (m - 1))), np.sqrt(ss / (m - 1))


def forecast_with_confidence(dataset: Dataset, focus: FocusSeries, cfg: ForecastConfig) -> ForecastResult:
    """Run cfg.trials independent trajectories and aggregate them.

    Trial m draws from np.random.default_rng([seed, m]), so results do not
    depend on the order trials finish in. With shared_fit the historical
    measurements and EM run once and only the horizon is re-sampled.
    """
    _measure_cfg(dataset, cfg)
    shared = None
    if cfg.shared_fit:
        shared = fit_focus(dataset, focus, cfg, np.random.default_rng([cfg.seed, _SHARED_FIT_STREAM]))

    def run(trial: int) -> Trajectory:
        rng = np.random.default_rng([cfg.seed, trial])
        try:
            if shared is not None:
                return roll_out(dataset, shared, cfg, rng)
            return forecast_one_trajectory(dataset, focus, cfg, rng)
        except SireError as e:
            logger.error(f"{focus.company_id}: trial {trial} failed: {e.detail}")
            raise ForecastFailed(trial, e) from e

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            trajectories = list(pool.map(run, range(cfg.trials)))
    else:
        trajectories = [run(m) for m in range(cfg.trials)]

    matrix = TrajectoryMatrix(
        values=np.vstack([t.latent for t in trajectories]),
        provenance=[t.draws for t in trajectories],
    )
    mean, margin, std = confidence_band(matrix.values, cfg.z_value)
    counts = {}
    for t in trajectories:
        for key, n in t.warning_counts.items():
            counts[key] = counts.get(key, 0) + n
    booked = focus.booked
    logger.info(f"Forecast {focus.company_id}: {cfg.trials} trials, horizon {cfg.horizon}")
    return ForecastResult(
        company_id=focus.company_id,
        periodicity=dataset.periodicity,
        dates=horizon_dates(booked.index[-1], cfg.horizon),
        mean=mean,
        margin=margin,
        std=std,
        trajectories=matrix,
        history_dates=booked.index[1:],
        history_latent=np.mean([t.history_latent for t in trajectories], axis=0),
        config=cfg.model_dump(mode="json"),
        warning_counts=counts,
    )
