"""Exceptions raised by the SiRE library."""
from typing import Optional


class SireError(Exception):
    """Base class; `detail` is the message shown to users."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class DataValidationError(SireError):
    def __init__(
        self,
        detail: str,
        line: Optional[int] = None,
        company_id: Optional[str] = None,
        date: Optional[str] = None,
    ):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if company_id is not None:
            where.append(f"company {company_id}")
        if date is not None:
            where.append(f"date {date}")
        super().__init__(f"{detail} ({', '.join(where)})" if where else detail)
        self.line = line
        self.company_id = company_id
        self.date = date


class GranularityError(DataValidationError):
    """Monthly and yearly dates mixed in one input."""


class InsufficientHistory(SireError):
    pass


class MeasurementUnavailable(SireError):
    """No peer tuple survives the filters; `stage` names the filter that emptied the set."""

    def __init__(self, stage: str, detail: Optional[str] = None):
        super().__init__(detail or f"measuring dataset empty after {stage}")
        self.stage = stage


class NumericalDegeneracy(SireError):
    def __init__(self, detail: str, step: Optional[int] = None):
        super().__init__(f"{detail} at step {step}" if step is not None else detail)
        self.step = step


class ForecastFailed(SireError):
    def __init__(self, trial: int, cause: SireError):
        super().__init__(f"trial {trial} failed: {cause.detail}")
        self.trial = trial
        self.cause = cause
