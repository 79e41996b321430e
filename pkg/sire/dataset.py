"""Revenue panel construction.

Booked revenue series are turned into the tuple panel U: one
(u_t, b_t, z_t, z_{t+1}) record per company and period where the current
revenue, its YoY growth and the next period's YoY growth are all defined.

Growth is z_t = u_t / u_{t-p} with p = 12 for monthly data and p = 1 for
yearly data. Tuples are re-indexed so that period_index 1 is the first
complete tuple of a company.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import IO, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, computed_field

from sire.config import PERIODICITY_BY_FREQ
from sire.errors import DataValidationError, GranularityError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["company_id", "date", "revenue", "sector", "customer_focus"]
MONTHLY_RE = re.compile(r"\d{4}-(0[1-9]|1[0-2])")
YEARLY_RE = re.compile(r"\d{4}")


class CompanyProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    company_id: str
    sector: str
    customer_focus: str

    @computed_field
    @property
    def business_key(self) -> str:
        return f"{self.sector}+{self.customer_focus}"


@dataclass(frozen=True)
class RevenueTuple:
    company_id: str
    period_index: int
    date: pd.Period
    u: float
    z: float
    z_next: float


@dataclass(frozen=True)
class FocusSeries:
    """The company being forecast: its profile and booked revenue history."""
    profile: CompanyProfile
    booked: pd.Series

    @property
    def company_id(self) -> str:
        return self.profile.company_id


RawSeries = Tuple[CompanyProfile, pd.Series]


def infer_periodicity(freq: str) -> int:
    return PERIODICITY_BY_FREQ[freq[0]]


def freq_of(index: pd.PeriodIndex) -> str:
    return "M" if index.freqstr.startswith("M") else "Y"


def as_booked_series(
    points: Iterable[Tuple[Union[str, pd.Period], float]],
    company_id: Optional[str] = None,
    freq: Optional[str] = None,
) -> pd.Series:
    """Build a booked series from (date, revenue) pairs."""
    points = list(points)
    if not points:
        return pd.Series([], index=pd.PeriodIndex([], freq=freq or "M"), dtype=float, name=company_id)
    dates = [d for d, _ in points]
    if freq is None:
        first = dates[0]
        if isinstance(first, pd.Period):
            freq = "M" if first.freqstr.startswith("M") else "Y"
        else:
            freq = "M" if "-" in str(first) else "Y"
    index = pd.PeriodIndex([pd.Period(d, freq=freq) for d in dates], freq=freq)
    return pd.Series([float(u) for _, u in points], index=index, name=company_id)


def compute_growth_series(booked: pd.Series, p: int, company_id: Optional[str] = None) -> pd.Series:
    """YoY growth z_t = u_t / u_{t-p}; NaN where no p-back value exists.

    Raises DataValidationError for non-positive revenue or irregular dates.
    """
    company_id = company_id or booked.name
    values = booked.to_numpy(dtype=float)
    bad = ~np.isfinite(values) | (values <= 0)
    if bad.any():
        i = int(np.argmax(bad))
        raise DataValidationError(
            f"non-positive revenue {values[i]!r}", company_id=company_id, date=str(booked.index[i])
        )
    if len(values) > 1:
        steps = np.diff(booked.index.asi8)
        irregular = steps != 1
        if irregular.any():
            i = int(np.argmax(irregular)) + 1
            raise DataValidationError(
                "gap or disorder in date spacing", company_id=company_id, date=str(booked.index[i])
            )
    growth = np.full(len(values), np.nan)
    if len(values) > p:
        growth[p:] = values[p:] / values[:-p]
    return pd.Series(growth, index=booked.index, name=booked.name)


class Dataset:
    """Immutable tuple panel plus the booked series it was built from."""

    def __init__(
        self,
        frame: pd.DataFrame,
        profiles: dict,
        periodicity: int,
        booked: dict,
        freq: str,
        warnings: Sequence[str] = (),
    ):
        self.frame = frame
        self.profiles = dict(profiles)
        self.periodicity = periodicity
        self._booked = dict(booked)
        self.freq = freq
        self.warnings = list(warnings)

        # Column arrays used by the measurement filters
        self.company_ids = frame["company_id"].to_numpy(dtype=object)
        self.business_keys = frame["business_key"].to_numpy(dtype=object)
        self.ordinals = frame["ordinal"].to_numpy(dtype=np.int64)
        self.u = frame["u"].to_numpy(dtype=float)
        self.z = frame["z"].to_numpy(dtype=float)
        self.z_next = frame["z_next"].to_numpy(dtype=float)
        for arr in (self.company_ids, self.business_keys, self.ordinals, self.u, self.z, self.z_next):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.frame)

    def __repr__(self) -> str:
        return f"Dataset(companies={len(self.profiles)}, tuples={len(self)}, periodicity={self.periodicity})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.periodicity, self.freq, self.profiles) != (other.periodicity, other.freq, other.profiles):
            return False
        if list(self._booked) != list(other._booked):
            return False
        if not all(self._booked[c].equals(other._booked[c]) for c in self._booked):
            return False
        return self.frame.reset_index(drop=True).equals(other.frame.reset_index(drop=True))

    @property
    def companies(self) -> List[str]:
        return list(self._booked)

    @property
    def tuples(self) -> List[RevenueTuple]:
        return tuples_of(self.frame)

    def booked(self, company_id: str) -> pd.Series:
        try:
            return self._booked[company_id]
        except KeyError:
            raise DataValidationError("unknown company", company_id=company_id) from None

    def focus(self, company_id: str) -> FocusSeries:
        booked = self.booked(company_id)
        return FocusSeries(profile=self.profiles[company_id], booked=booked)

    def period(self, value: Union[str, pd.Period]) -> pd.Period:
        return pd.Period(value, freq=self.freq)

    def restrict(self, cutoff: Union[str, pd.Period]) -> "Dataset":
        """Rebuild the panel from booked values dated <= cutoff only.

        Tuples are recomputed, so none carries a z_next that needs a value
        after the cutoff.
        """
        cutoff = self.period(cutoff)
        raw = []
        for company_id, series in self._booked.items():
            kept = series[series.index <= cutoff]
            if len(kept):
                raw.append((self.profiles[company_id], kept))
        return _assemble(raw, self.periodicity, skip_level=logging.DEBUG)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        companies = []
        for company_id, series in self._booked.items():
            rows = self.frame[self.frame["company_id"] == company_id]
            companies.append({
                "profile": self.profiles[company_id].model_dump(),
                "booked": [{"date": str(d), "u": float(u)} for d, u in series.items()],
                "tuples": [
                    {
                        "period_index": int(r.period_index),
                        "date": str(r.date),
                        "u": float(r.u),
                        "z": float(r.z),
                        "z_next": float(r.z_next),
                    }
                    for r in rows.itertuples(index=False)
                ],
            })
        return {
            "periodicity": self.periodicity,
            "freq": self.freq,
            "companies": companies,
            "warnings": list(self.warnings),
        }

    def to_json(self, indent: Optional[int] = None) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, data: dict) -> "Dataset":
        freq = data["freq"]
        profiles, booked, rows = {}, {}, []
        for entry in data["companies"]:
            profile = CompanyProfile(**entry["profile"])
            profiles[profile.company_id] = profile
            booked[profile.company_id] = as_booked_series(
                [(b["date"], b["u"]) for b in entry["booked"]], profile.company_id, freq
            )
            for t in entry["tuples"]:
                rows.append((profile, t["period_index"], pd.Period(t["date"], freq=freq), t["u"], t["z"], t["z_next"]))
        return cls(_frame(rows, freq), profiles, data["periodicity"], booked, freq, data.get("warnings", ()))

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        return cls.from_dict(json.loads(text))

    def to_csv(self, path_or_buf: Union[str, IO, None] = None) -> Optional[str]:
        """Write the booked series in the standard ingest CSV format."""
        records = []
        for company_id, series in self._booked.items():
            profile = self.profiles[company_id]
            for date, u in series.items():
                records.append([company_id, str(date), repr(float(u)), profile.sector, profile.customer_focus])
        table = pd.DataFrame(records, columns=CSV_COLUMNS, dtype=str)
        return table.to_csv(path_or_buf, index=False)


def tuples_of(frame: pd.DataFrame) -> List[RevenueTuple]:
    return [
        RevenueTuple(r.company_id, int(r.period_index), r.date, float(r.u), float(r.z), float(r.z_next))
        for r in frame.itertuples(index=False)
    ]


def _frame(rows: list, freq: str) -> pd.DataFrame:
    """rows: (profile, period_index, date, u, z, z_next)"""
    dates = pd.PeriodIndex([r[2] for r in rows], freq=freq)
    return pd.DataFrame({
        "company_id": pd.Series([r[0].company_id for r in rows], dtype=object),
        "business_key": pd.Series([r[0].business_key for r in rows], dtype=object),
        "period_index": pd.Series([r[1] for r in rows], dtype=np.int64),
        "date": pd.Series(dates),
        "ordinal": pd.Series(dates.asi8, dtype=np.int64),
        "u": pd.Series([r[3] for r in rows], dtype=float),
        "z": pd.Series([r[4] for r in rows], dtype=float),
        "z_next": pd.Series([r[5] for r in rows], dtype=float),
    })


def build_dataset(raw: Iterable[RawSeries], p: int) -> Dataset:
    """Emit one tuple per period where u_t, z_t and z_{t+1} are defined.

    Companies with fewer than p + 2 booked points yield no tuple; they are
    kept (profile and booked series) so they can still be forecast, and a
    warning is recorded.
    """
    return _assemble(list(raw), p, skip_level=logging.WARNING)


def _assemble(raw: List[RawSeries], p: int, skip_level: int) -> Dataset:
    if p < 1:
        raise DataValidationError(f"periodicity must be >= 1, got {p}")
    freqs = {freq_of(series.index) for _, series in raw if len(series.index)}
    if len(freqs) > 1:
        raise GranularityError("monthly and yearly series mixed in one dataset")
    freq = freqs.pop() if freqs else "M"

    profiles, booked, rows, warnings = {}, {}, [], []
    for profile, series in raw:
        company_id = profile.company_id
        if company_id in profiles:
            raise DataValidationError("duplicate company", company_id=company_id)
        series = series.astype(float).rename(company_id)
        growth = compute_growth_series(series, p, company_id).to_numpy()
        profiles[company_id] = profile
        booked[company_id] = series

        n = len(series)
        if n < p + 2:
            message = f"company {company_id} skipped: {n} points, needs at least {p + 2}"
            warnings.append(message)
            logger.log(skip_level, message)
            continue
        values = series.to_numpy()
        for i in range(p, n - 1):
            rows.append((profile, i - p + 1, series.index[i], values[i], growth[i], growth[i + 1]))

    dataset = Dataset(_frame(rows, freq), profiles, p, booked, freq, warnings)
    logger.debug(f"Built {dataset!r}")
    return dataset


def _parse_revenue(text: str) -> float:
    # correctly rounded: repr-formatted values re-ingest exactly
    try:
        return float(text)
    except ValueError:
        return np.nan


def ingest_csv(stream: Union[str, IO]) -> List[RawSeries]:
    """Read company_id,date,revenue,sector,customer_focus rows.

    Returns one (profile, booked series) pair per company in order of first
    appearance, each series sorted by date.
    """
    try:
        df = pd.read_csv(stream, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DataValidationError(f"malformed CSV: {e}", line=int(match.group(1)) if match else None) from e
    except pd.errors.EmptyDataError as e:
        raise DataValidationError("empty CSV input") from e

    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise DataValidationError(f"missing columns: {', '.join(missing)}", line=1)
    if df.empty:
        return []
    lines = pd.Series(np.arange(len(df)) + 2, index=df.index)
    short = df[CSV_COLUMNS].isna().any(axis=1)
    if short.any():
        i = short.to_numpy().argmax()
        raise DataValidationError(
            f"malformed row: expected {len(CSV_COLUMNS)} fields", line=int(lines.iloc[i]), company_id=df["company_id"].fillna("").iloc[i] or None,
        )
    df = df[CSV_COLUMNS].apply(lambda col: col.str.strip())

    def fail(mask: pd.Series, detail: str, cls=DataValidationError):
        i = mask.to_numpy().argmax()
        row = df.iloc[i]
        raise cls(detail, line=int(lines.iloc[i]), company_id=row["company_id"] or None, date=row["date"] or None)

    empty = (df["company_id"] == "") | (df["sector"] == "") | (df["customer_focus"] == "")
    if empty.any():
        fail(empty, "empty company_id, sector or customer_focus")

    monthly = df["date"].map(lambda s: MONTHLY_RE.fullmatch(s) is not None)
    yearly = df["date"].map(lambda s: YEARLY_RE.fullmatch(s) is not None)
    if not (monthly | yearly).all():
        fail(~(monthly | yearly), "date must be YYYY-MM or YYYY")
    if monthly.any() and yearly.any():
        fail(monthly != monthly.iloc[0], "mixed date granularity", GranularityError)
    freq = "M" if monthly.iloc[0] else "Y"

    revenue = df["revenue"].map(_parse_revenue)
    bad = revenue.isna() | ~np.isfinite(revenue) | (revenue <= 0)
    if bad.any():
        fail(bad, f"revenue must be a positive number, got {df['revenue'][bad].iloc[0]!r}")

    periods = pd.PeriodIndex(df["date"], freq=freq)
    df = df.assign(revenue=revenue, period=periods, line=lines)

    raw = []
    for company_id, group in df.groupby("company_id", sort=False):
        first = group.iloc[0]
        inconsistent = (group["sector"] != first["sector"]) | (group["customer_focus"] != first["customer_focus"])
        if inconsistent.any():
            row = group[inconsistent].iloc[0]
            raise DataValidationError("inconsistent sector/customer_focus", line=int(row["line"]), company_id=company_id)
        dup = group["period"].duplicated()
        if dup.any():
            row = group[dup].iloc[0]
            raise DataValidationError("duplicate date", line=int(row["line"]), company_id=company_id, date=row["date"])
        group = group.sort_values("period")
        profile = CompanyProfile(company_id=company_id, sector=first["sector"], customer_focus=first["customer_focus"])
        series = pd.Series(group["revenue"].to_numpy(dtype=float), index=pd.PeriodIndex(group["period"], freq=freq), name=company_id)
        raw.append((profile, series))
    logger.info(f"Ingested {len(df)} rows for {len(raw)} companies")
    return raw
