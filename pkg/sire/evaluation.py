"""Rolling-origin backtesting.

At every (company, cutoff) cell the dataset is rebuilt from values dated at
or before the cutoff, each forecaster extrapolates the horizon, and the
forecast is aligned with the held-out booked revenue by calendar date.
Only cells and step dates produced by every method are scored.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import stats

from sire.config import EPS_S_REL
from sire.dataset import Dataset, FocusSeries
from sire.errors import DataValidationError
from sire.extrapolation import ForecastConfig, forecast_with_confidence, horizon_dates

logger = logging.getLogger(__name__)

POINT_METRICS = ("rmse", "mape", "pcc")
DISTRIBUTION_METRICS = ("nll", "acc")
ALL_WINDOW = "all"


class Forecast(Protocol):
    dates: pd.PeriodIndex
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


Forecaster = Callable[[Dataset, FocusSeries, int], Forecast]


@dataclass
class PointForecast:
    """Deterministic forecast: zero spread, band collapsed onto the mean."""
    dates: pd.PeriodIndex
    mean: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.zeros_like(self.mean)

    @property
    def lower(self) -> np.ndarray:
        return self.mean

    @property
    def upper(self) -> np.ndarray:
        return self.mean


def sire_forecaster(cfg: ForecastConfig) -> Forecaster:
    def forecast(dataset: Dataset, focus: FocusSeries, horizon: int):
        return forecast_with_confidence(dataset, focus, cfg.model_copy(update={"horizon": horizon}))
    return forecast


def persistence_forecaster(dataset: Dataset, focus: FocusSeries, horizon: int) -> PointForecast:
    """Last YoY growth applied forever: x_{T+k} = u_T * z^(k/p).

    Falls back to the last one-step ratio when the history is shorter than p + 1.
    """
    u = focus.booked.to_numpy(dtype=float)
    p = dataset.periodicity
    k = np.arange(1, horizon + 1)
    if len(u) > p:
        mean = u[-1] * (u[-1] / u[-1 - p]) ** (k / p)
    elif len(u) >= 2:
        mean = u[-1] * (u[-1] / u[-2]) ** k
    else:
        mean = np.full(horizon, u[-1])
    return PointForecast(dates=horizon_dates(focus.booked.index[-1], horizon), mean=mean)


class InvestorTarget(BaseModel):
    """Positive when revenue reaches `multiple` times the cutoff value in any step of years lo..hi."""
    model_config = ConfigDict(frozen=True)

    multiple: float
    years: Tuple[int, int]

    @field_validator("years")
    @classmethod
    def _check_years(cls, v):
        if v[0] < 1 or v[1] < v[0]:
            raise ValueError("years must satisfy 1 <= lo <= hi")
        return v

    @property
    def label(self) -> str:
        return f">{self.multiple:g}x_in_{self.years[0]}/{self.years[1]}y"


class EvalPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    horizon: int
    cutoffs: Optional[Dict[str, List[str]]] = None
    cutoff_every: int = 1
    max_cutoffs: Optional[int] = None
    min_history: int = 3
    min_holdout: int = 1
    history_points: Optional[int] = None
    windows: List[Tuple[int, int]] = []
    investor_targets: List[InvestorTarget] = []
    workers: int = 1

    @field_validator("horizon", "cutoff_every", "min_holdout", "workers", "max_cutoffs")
    @classmethod
    def _at_least_one(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("min_history")
    @classmethod
    def _min_history(cls, v: int) -> int:
        if v < 3:
            raise ValueError("min_history must be >= 3")
        return v

    @model_validator(mode="after")
    def _check_windows(self):
        for lo, hi in self.windows:
            if lo < 1 or hi < lo:
                raise ValueError(f"bad window {lo}-{hi}")
        if self.history_points is not None and self.history_points < 3:
            raise ValueError("history_points must be >= 3")
        return self

    def resolve_cutoffs(self, dataset: Dataset) -> List[Tuple[str, pd.Period]]:
        """(company, cutoff) cells in company order, cutoffs ascending."""
        cells = []
        for company_id in dataset.companies:
            index = dataset.booked(company_id).index
            n = len(index)
            last = n - 1 - self.min_holdout
            if self.cutoffs is not None:
                if company_id not in self.cutoffs:
                    continue
                chosen = []
                for value in self.cutoffs[company_id]:
                    cutoff = dataset.period(value)
                    i = int((index <= cutoff).sum()) - 1
                    if i < self.min_history - 1 or i > last or index[i] != cutoff:
                        raise DataValidationError(
                            "cutoff outside the evaluable range", company_id=company_id, date=str(cutoff)
                        )
                    chosen.append(i)
            else:
                chosen = list(range(last, self.min_history - 2, -self.cutoff_every))[::-1]
                if self.max_cutoffs is not None:
                    chosen = chosen[-self.max_cutoffs:]
            cells.extend((company_id, index[i]) for i in sorted(chosen))
        return cells


@dataclass
class CellResult:
    method: str
    company_id: str
    cutoff: pd.Period
    base: float  # booked revenue at the cutoff
    steps: np.ndarray  # 1-based horizon steps
    dates: pd.PeriodIndex
    actual: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def select(self, keep: np.ndarray) -> "CellResult":
        return CellResult(
            self.method, self.company_id, self.cutoff, self.base, self.steps[keep], self.dates[keep],
            self.actual[keep], self.mean[keep], self.std[keep], self.lower[keep], self.upper[keep],
        )

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "company_id": self.company_id,
            "cutoff": str(self.cutoff),
            "base": self.base,
            "steps": [
                {
                    "step": int(s), "date": str(d), "actual": float(u), "mean": float(x),
                    "std": float(sd), "lower": float(lo), "upper": float(hi),
                }
                for s, d, u, x, sd, lo, hi in zip(
                    self.steps, self.dates, self.actual, self.mean, self.std, self.lower, self.upper
                )
            ],
        }


@dataclass
class PointMetrics:
    rmse: Optional[float]
    mape: Optional[float]
    pcc: Optional[float]
    n: int
    mape_excluded: int = 0


@dataclass
class DistributionMetrics:
    nll: Optional[float]
    acc: Optional[float]
    n: int


@dataclass
class InvestorMetrics:
    tpr: Optional[float]
    actual_positives: int
    true_positives: int
    cells: int


def point_metrics(actual: Sequence[float], predicted: Sequence[float]) -> PointMetrics:
    """RMSE, MAPE and Pearson correlation over aligned pairs.

    Pairs with u = 0 are left out of MAPE and counted. PCC is None for fewer
    than two pairs or a constant series.
    """
    u = np.asarray(actual, dtype=float)
    x = np.asarray(predicted, dtype=float)
    n = len(u)
    if n == 0:
        return PointMetrics(None, None, None, 0)
    rmse = float(np.sqrt(np.mean((x - u) ** 2)))
    nonzero = u != 0
    mape = float(np.mean(np.abs((u[nonzero] - x[nonzero]) / u[nonzero]))) if nonzero.any() else None
    pcc = None
    if n >= 2 and np.std(u) > 0 and np.std(x) > 0:
        pcc = float(np.corrcoef(u, x)[0, 1])
    return PointMetrics(rmse, mape, pcc, n, int((~nonzero).sum()))


def distribution_metrics(
    actual: Sequence[float],
    mean: Sequence[float],
    std: Sequence[float],
    lower: Sequence[float],
    upper: Sequence[float],
) -> DistributionMetrics:
    """Gaussian NLL with the across-trial mean/std, and coverage of the closed band."""
    u = np.asarray(actual, dtype=float)
    if len(u) == 0:
        return DistributionMetrics(None, None, 0)
    x = np.asarray(mean, dtype=float)
    scale = float(np.mean(np.abs(u))) or 1.0
    s = np.maximum(np.asarray(std, dtype=float), EPS_S_REL * scale)
    nll = -float(np.mean(stats.norm.logpdf(u, loc=x, scale=s)))
    inside = (u >= np.asarray(lower, dtype=float)) & (u <= np.asarray(upper, dtype=float))
    return DistributionMetrics(nll, float(inside.mean()), len(u))


def window_steps(years: Tuple[int, int], periodicity: int) -> Tuple[int, int]:
    """Inclusive range of 1-based horizon steps falling in years lo..hi."""
    lo, hi = years
    return (lo - 1) * periodicity + 1, hi * periodicity


def investor_metrics(cells: Sequence[CellResult], target: InvestorTarget, periodicity: int) -> InvestorMetrics:
    """True positive rate of reaching target.multiple within target.years.

    Only cells whose held-out truth covers every step of the window count.
    """
    first, last = window_steps(target.years, periodicity)
    wanted = np.arange(first, last + 1)
    actual_pos = true_pos = counted = 0
    for cell in cells:
        in_window = np.isin(cell.steps, wanted)
        if in_window.sum() < len(wanted):
            continue
        counted += 1
        actual = cell.actual[in_window].max() / cell.base >= target.multiple
        predicted = cell.mean[in_window].max() / cell.base >= target.multiple
        actual_pos += bool(actual)
        true_pos += bool(actual and predicted)
    if actual_pos == 0:
        logger.info(f"{target.label}: no actual positives among {counted} cells")
    return InvestorMetrics(true_pos / actual_pos if actual_pos else None, actual_pos, true_pos, counted)


@dataclass
class MetricReport:
    methods: List[str]
    periodicity: int
    metrics: Dict[str, Dict[str, dict]]  # method -> window -> metric -> value
    counts: Dict[str, Dict[str, int]]  # method -> window -> aligned pairs
    investor: Dict[str, Dict[str, InvestorMetrics]]
    cells: List[CellResult]
    failures: List[dict] = field(default_factory=list)
    excluded_cells: int = 0
    leakage: int = 0
    config: dict = field(default_factory=dict)

    def value(self, method: str, metric: str, window: str = ALL_WINDOW) -> Optional[float]:
        return self.metrics[method][window][metric]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for method in self.methods:
            for window, values in self.metrics[method].items():
                for metric, value in values.items():
                    rows.append([method, window, metric, value, self.counts[method][window]])
            for label, result in self.investor.get(method, {}).items():
                rows.append([method, label, "tpr", result.tpr, result.cells])
        return pd.DataFrame(rows, columns=["method", "window", "metric", "value", "n"])

    def to_csv(self, path_or_buf=None) -> Optional[str]:
        """Metric rows preceded by a `# sire-config:` comment line."""
        header = f"# sire-config: {json.dumps(self.config, sort_keys=True)}\n"
        body = self.to_frame().to_csv(index=False, float_format="%.10g")
        if path_or_buf is None:
            return header + body
        if isinstance(path_or_buf, str):
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(header + body)
        else:
            path_or_buf.write(header + body)
        return None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "methods": self.methods,
            "metrics": self.metrics,
            "counts": self.counts,
            "investor": {
                m: {label: vars(r) for label, r in targets.items()} for m, targets in self.investor.items()
            },
            "failures": self.failures,
            "excluded_cells": self.excluded_cells,
            "leakage": self.leakage,
            "cells": [c.to_dict() for c in self.cells],
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def summary_table(self) -> str:
        frame = self.to_frame()
        if frame.empty:
            return "(no scored cells)"
        frame["value"] = pd.to_numeric(frame["value"])
        table = frame.pivot_table(index=["window", "metric"], columns="method", values="value", aggfunc="first", dropna=False)
        return table.reindex(columns=self.methods).to_string(float_format=lambda v: f"{v:.4f}", na_rep="-")


def _truncate(focus: FocusSeries, history_points: Optional[int]) -> FocusSeries:
    if history_points is None or len(focus.booked) <= history_points:
        return focus
    return FocusSeries(profile=focus.profile, booked=focus.booked.iloc[-history_points:])


def _leaks(forecast, cutoff: pd.Period) -> int:
    """Provenance records dated after the cell cutoff."""
    trajectories = getattr(forecast, "trajectories", None)
    if trajectories is None:
        return 0
    count = 0
    for trial in trajectories.provenance:
        for draw in trial:
            if draw is not None and len(draw.peers):
                count += int((draw.peers["date"] > cutoff).sum())
    return count


def _evaluate_cell(dataset, restricted, company_id, cutoff, forecasters, plan):
    """Run every method on one cell; returns ({method: CellResult}, failures, leakage)."""
    booked = dataset.booked(company_id)
    held_out = booked[booked.index > cutoff]
    focus = _truncate(restricted.focus(company_id), plan.history_points)
    results, failures, leakage = {}, [], 0
    for method, forecaster in forecasters.items():
        try:
            forecast = forecaster(restricted, focus, plan.horizon)
        except Exception as e:
            detail = getattr(e, "detail", str(e))
            logger.error(f"{method} failed on {company_id} at {cutoff}: {detail}")
            failures.append({"method": method, "company_id": company_id, "cutoff": str(cutoff), "error": detail})
            continue
        leakage += _leaks(forecast, cutoff)
        dates = pd.PeriodIndex(forecast.dates)
        hit = dates.isin(held_out.index)
        results[method] = CellResult(
            method=method,
            company_id=company_id,
            cutoff=cutoff,
            base=float(booked[cutoff]),
            steps=np.arange(1, len(dates) + 1)[hit],
            dates=dates[hit],
            actual=held_out.reindex(dates[hit]).to_numpy(dtype=float),
            mean=np.asarray(forecast.mean, dtype=float)[hit],
            std=np.asarray(forecast.std, dtype=float)[hit],
            lower=np.asarray(forecast.lower, dtype=float)[hit],
            upper=np.asarray(forecast.upper, dtype=float)[hit],
        )
    return results, failures, leakage


def _score(cells: List[CellResult], first: int = 1, last: Optional[int] = None) -> Tuple[dict, int]:
    keep = [c.select((c.steps >= first) & (c.steps <= (last or c.steps.max(initial=0)))) for c in cells]
    actual = np.concatenate([c.actual for c in keep]) if keep else np.array([])

    def cat(attr):
        return np.concatenate([getattr(c, attr) for c in keep]) if keep else np.array([])

    point = point_metrics(actual, cat("mean"))
    dist = distribution_metrics(actual, cat("mean"), cat("std"), cat("lower"), cat("upper"))
    values = {"rmse": point.rmse, "mape": point.mape, "pcc": point.pcc, "nll": dist.nll, "acc": dist.acc}
    return values, point.n


def rolling_origin(dataset: Dataset, forecasters: Mapping[str, Forecaster], plan: EvalPlan, config: Optional[dict] = None) -> MetricReport:
    """Backtest every forecaster over the plan's (company, cutoff) cells."""
    if not forecasters:
        raise ValueError("at least one forecaster is required")
    methods = list(forecasters)
    cells = plan.resolve_cutoffs(dataset)
    logger.info(f"Rolling-origin evaluation: {len(cells)} cells, methods {methods}")

    restricted_cache: Dict[pd.Period, Dataset] = {}
    for _, cutoff in cells:
        if cutoff not in restricted_cache:
            restricted_cache[cutoff] = dataset.restrict(cutoff)

    def run(cell):
        company_id, cutoff = cell
        return _evaluate_cell(dataset, restricted_cache[cutoff], company_id, cutoff, forecasters, plan)

    if plan.workers > 1:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            outcomes = list(pool.map(run, cells))
    else:
        outcomes = [run(cell) for cell in cells]

    scored = {m: [] for m in methods}
    failures, leakage, excluded = [], 0, 0
    for results, cell_failures, cell_leakage in outcomes:
        failures.extend(cell_failures)
        leakage += cell_leakage
        if len(results) < len(methods):
            excluded += 1
            continue
        common = set.intersection(*(set(r.dates) for r in results.values()))
        for method in methods:
            result = results[method]
            scored[method].append(result.select(np.array([d in common for d in result.dates], dtype=bool)))

    metrics, counts, investor = {}, {}, {}
    windows = [(ALL_WINDOW, 1, None)] + [
        (f"y{lo}-{hi}", *window_steps((lo, hi), dataset.periodicity)) for lo, hi in plan.windows
    ]
    for method in methods:
        metrics[method], counts[method] = {}, {}
        for label, first, last in windows:
            metrics[method][label], counts[method][label] = _score(scored[method], first, last)
        investor[method] = {
            target.label: investor_metrics(scored[method], target, dataset.periodicity)
            for target in plan.investor_targets
        }

    if leakage:
        logger.error(f"Leakage audit: {leakage} provenance records dated after their cutoff")
    logger.info(f"Scored {len(cells) - excluded} cells, excluded {excluded}, {len(failures)} failures")
    return MetricReport(
        methods=methods,
        periodicity=dataset.periodicity,
        metrics=metrics,
        counts=counts,
        investor=investor,
        cells=[c for m in methods for c in scored[m]],
        failures=failures,
        excluded_cells=excluded,
        leakage=leakage,
        config=dict(config or {}, plan=plan.model_dump(mode="json")),
    )
