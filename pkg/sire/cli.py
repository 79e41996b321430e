"""Command line front-end: validate, forecast, evaluate, explain, synth.

Every artifact embeds the effective RunConfig; CSV artifacts start with a
`# sire-config: {...}` comment line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError

from sire.config import (
    DEFAULT_EM_ITERS,
    DEFAULT_QUANTILES,
    DEFAULT_RELAX_R,
    DEFAULT_SEED,
    DEFAULT_TRIALS,
    DEFAULT_Z_VALUE,
    configure_logging,
)
from sire.dataset import Dataset, build_dataset, freq_of, infer_periodicity, ingest_csv
from sire.errors import SireError
from sire.evaluation import EvalPlan, InvestorTarget, persistence_forecaster, rolling_origin, sire_forecaster
from sire.extrapolation import ForecastConfig, forecast_with_confidence
from sire.measurement import FallbackPolicy, MeasureConfig
from sire.synthetic import CohortSpec, GrowthProfile, generate_cohort, write_cohort_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_ERROR = 2


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: str
    input: Optional[str] = None
    output: Optional[str] = None
    seed: int = DEFAULT_SEED
    horizon: int = 12
    trials: int = DEFAULT_TRIALS
    relax_r: float = DEFAULT_RELAX_R
    quantiles: int = DEFAULT_QUANTILES
    z_value: float = DEFAULT_Z_VALUE
    em_iters: int = DEFAULT_EM_ITERS
    periodicity: Optional[int] = None
    fallback: FallbackPolicy = FallbackPolicy.RELAX
    format: str = "json"
    company: Optional[str] = None
    step: Optional[int] = None
    cutoff_every: int = 1
    max_cutoffs: Optional[int] = None
    history_points: Optional[int] = None
    windows: List[Tuple[int, int]] = []
    investor: List[Tuple[float, int, int]] = []
    shared_fit: bool = False
    workers: int = 1
    companies: int = 50
    length: Tuple[int, int] = (36, 36)
    noise: float = 0.0

    def forecast_config(self, periodicity: int, horizon: Optional[int] = None) -> ForecastConfig:
        return ForecastConfig(
            horizon=horizon or self.horizon,
            trials=self.trials,
            z_value=self.z_value,
            seed=self.seed,
            em_iterations=self.em_iters,
            shared_fit=self.shared_fit,
            workers=self.workers,
            measure=MeasureConfig(
                r=self.relax_r, n=self.quantiles, periodicity=periodicity, fallback_policy=self.fallback
            ),
        )

    def echo(self) -> dict:
        return self.model_dump(mode="json")


def _year_window(text: str) -> Tuple[int, int]:
    lo, _, hi = text.partition("-")
    try:
        return int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must look like 2-3, got {text!r}") from None


def _investor_target(text: str) -> Tuple[float, int, int]:
    """'3:4-5' -> reach 3x within years 4-5"""
    multiple, _, window = text.partition(":")
    try:
        return (float(multiple), *_year_window(window))
    except ValueError:
        raise argparse.ArgumentTypeError(f"investor target must look like 3:4-5, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sire", description="Simulation-informed revenue extrapolation")
    parser.add_argument("--log-level", default=None, help="overrides SIRE_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", required=True, help="ingest CSV: company_id,date,revenue,sector,customer_focus")
        p.add_argument("--output", help="artifact path (stdout if omitted)")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--periodicity", type=int, help="12 for monthly, 1 for yearly; inferred if omitted")

    def model(p):
        p.add_argument("--horizon", type=int, default=12)
        p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
        p.add_argument("--relax-r", type=float, default=DEFAULT_RELAX_R)
        p.add_argument("--quantiles", type=int, default=DEFAULT_QUANTILES)
        p.add_argument("--z-value", type=float, default=DEFAULT_Z_VALUE)
        p.add_argument("--em-iters", type=int, default=DEFAULT_EM_ITERS)
        p.add_argument("--fallback", choices=[f.value for f in FallbackPolicy], default=FallbackPolicy.RELAX.value)
        p.add_argument("--shared-fit", action="store_true", help="fit EM once and resample only the horizon")
        p.add_argument("--workers", type=int, default=1)

    p = commands.add_parser("validate", help="ingest and report on a dataset")
    common(p)

    p = commands.add_parser("forecast", help="forecast one company or all")
    common(p)
    model(p)
    p.add_argument("--company")
    p.add_argument("--format", choices=["json", "csv"], default="json")

    p = commands.add_parser("evaluate", help="rolling-origin backtest against the persistence baseline")
    common(p)
    model(p)
    p.add_argument("--format", choices=["json", "csv"], default="csv")
    p.add_argument("--cutoff-every", type=int, default=1)
    p.add_argument("--max-cutoffs", type=int)
    p.add_argument("--history-points", type=int)
    p.add_argument("--windows", type=_year_window, nargs="*", default=[], help="year windows such as 2-3 4-5")
    p.add_argument("--investor", type=_investor_target, nargs="*", default=[], help="targets such as 3:4-5")

    p = commands.add_parser("explain", help="dump the peer tuples behind one forecast step")
    common(p)
    model(p)
    p.add_argument("--company", required=True)
    p.add_argument("--step", type=int, required=True)

    p = commands.add_parser("synth", help="generate a synthetic cohort CSV")
    common(p, needs_input=False)
    p.add_argument("--companies", type=int, default=50)
    p.add_argument("--length", type=int, nargs=2, default=[36, 36], metavar=("MIN", "MAX"))
    p.add_argument("--noise", type=float, default=0.0, help="lognormal measurement noise std")
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    values = {k: v for k, v in vars(args).items() if k != "log_level" and v is not None}
    if "length" in values:
        values["length"] = tuple(values["length"])
    if args.command == "explain":
        values["horizon"] = max(values.get("horizon", 12), values["step"])
    return RunConfig(**values)


def _load(cfg: RunConfig) -> Dataset:
    with open(cfg.input, newline="") as fh:
        raw = ingest_csv(fh)
    if cfg.periodicity is not None:
        p = cfg.periodicity
    else:
        p = infer_periodicity(freq_of(raw[0][1].index) if raw else "M")
    return build_dataset(raw, p)


def _emit(text: str, output: Optional[str]) -> None:
    if output is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    with open(output, "w", newline="") as fh:
        fh.write(text)
    logger.info(f"Wrote {output}")


def _config_line(cfg: RunConfig) -> str:
    return f"# sire-config: {json.dumps(cfg.echo(), sort_keys=True)}\n"


def cmd_validate(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    report = {
        "config": cfg.echo(),
        "companies": len(dataset.companies),
        "tuples": len(dataset),
        "periodicity": dataset.periodicity,
        "errors": 0,
        "warnings": dataset.warnings,
    }
    _emit(json.dumps(report, indent=2), cfg.output)
    return EXIT_OK


def cmd_forecast(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    fcfg = cfg.forecast_config(dataset.periodicity)
    companies = [cfg.company] if cfg.company else dataset.companies
    results, failures = [], []
    for company_id in companies:
        try:
            results.append(forecast_with_confidence(dataset, dataset.focus(company_id), fcfg))
        except SireError as e:
            if cfg.company:
                raise
            logger.error(f"Forecast failed for {company_id}: {e.detail}")
            failures.append({"company_id": company_id, "error": e.detail})

    if cfg.format == "csv":
        frame = pd.concat([r.to_frame() for r in results], ignore_index=True) if results else pd.DataFrame()
        _emit(_config_line(cfg) + frame.to_csv(index=False, float_format="%.10g"), cfg.output)
    else:
        payload = {"config": cfg.echo(), "forecasts": [r.to_dict() for r in results], "failures": failures}
        _emit(json.dumps(payload, indent=2), cfg.output)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    plan = EvalPlan(
        horizon=cfg.horizon,
        cutoff_every=cfg.cutoff_every,
        max_cutoffs=cfg.max_cutoffs,
        history_points=cfg.history_points,
        windows=cfg.windows,
        investor_targets=[InvestorTarget(multiple=k, years=(lo, hi)) for k, lo, hi in cfg.investor],
    )
    forecasters = {"sire": sire_forecaster(cfg.forecast_config(dataset.periodicity)), "persistence": persistence_forecaster}
    report = rolling_origin(dataset, forecasters, plan, config=cfg.echo())
    if cfg.output is None:
        logger.info(f"Backtest summary:\n{report.summary_table()}")
    else:
        print(report.summary_table())
    if cfg.format == "csv":
        _emit(report.to_csv(), cfg.output)
    else:
        _emit(report.to_json(), cfg.output)
    if report.failures:
        logger.warning(f"{len(report.failures)} forecast cells failed and were excluded")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_explain(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    result = forecast_with_confidence(dataset, dataset.focus(cfg.company), cfg.forecast_config(dataset.periodicity))
    draws = result.step_provenance(cfg.step)
    payload = {
        "config": cfg.echo(),
        "company_id": cfg.company,
        "step": cfg.step,
        "date": str(result.dates[cfg.step - 1]),
        "mean": float(result.mean[cfg.step - 1]),
        "margin": float(result.margin[cfg.step - 1]),
        "trials": [draw.to_dict() if draw is not None else None for draw in draws],
    }
    _emit(json.dumps(payload, indent=2), cfg.output)
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    spec = CohortSpec(
        n_companies=cfg.companies,
        periodicity=cfg.periodicity or 12,
        length=cfg.length,
        measurement_noise=cfg.noise,
        default_growth=GrowthProfile(),
        seed=cfg.seed,
    )
    dataset = generate_cohort(spec)
    if cfg.output is None:
        sys.stdout.write(dataset.to_csv())
    else:
        write_cohort_csv(dataset, cfg.output)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "synth": cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        cfg = _run_config(args)
        return COMMANDS[cfg.command](cfg)
    except SireError as e:
        print(f"error: {e.detail}", file=sys.stderr)
        return EXIT_ERROR
    except ValidationError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
