"""
Nightly Backtest Job

Runs the SiRE vs persistence rolling-origin comparison and writes the
metric CSV:
- Reads the cohort from BACKTEST_INPUT, or synthesizes one when unset
- One cutoff per company, leaving BACKTEST_HORIZON periods held out
- Logs a statistics block (cells, failures, leakage audit)
- Designed for daily 03:00 UTC cron runs: python -m jobs.nightly_backtest
"""

import logging
import os
from datetime import datetime
from typing import Dict, Optional, Tuple

from sire.config import DEFAULT_SEED, DEFAULT_TRIALS, configure_logging
from sire.dataset import Dataset, build_dataset, freq_of, infer_periodicity, ingest_csv
from sire.evaluation import EvalPlan, MetricReport, persistence_forecaster, rolling_origin, sire_forecaster
from sire.extrapolation import ForecastConfig
from sire.measurement import MeasureConfig
from sire.synthetic import CohortSpec, generate_cohort

logger = logging.getLogger(__name__)

BACKTEST_INPUT = os.getenv('BACKTEST_INPUT')
BACKTEST_OUTPUT = os.getenv('BACKTEST_OUTPUT', 'backtest_metrics.csv')
BACKTEST_COMPANIES = int(os.getenv('BACKTEST_COMPANIES', 50))
BACKTEST_HORIZON = int(os.getenv('BACKTEST_HORIZON', 12))
BACKTEST_SEED = int(os.getenv('BACKTEST_SEED', DEFAULT_SEED))


def load_dataset(path: Optional[str] = BACKTEST_INPUT) -> Dataset:
    """Read the cohort CSV, or synthesize a monthly cohort with 36 months of history plus the holdout."""
    if path:
        logger.info(f"Loading cohort from {path}")
        with open(path, newline='') as fh:
            raw = ingest_csv(fh)
        p = infer_periodicity(freq_of(raw[0][1].index)) if raw else 12
        return build_dataset(raw, p)

    logger.info(f"Synthesizing {BACKTEST_COMPANIES} companies (seed {BACKTEST_SEED})")
    length = 36 + BACKTEST_HORIZON
    spec = CohortSpec(n_companies=BACKTEST_COMPANIES, length=(length, length), seed=BACKTEST_SEED)
    return generate_cohort(spec)


def run_backtest(dataset: Dataset, horizon: int = BACKTEST_HORIZON, seed: int = BACKTEST_SEED) -> Tuple[MetricReport, Dict]:
    """Evaluate both methods at each company's last cutoff with `horizon` periods held out."""
    cfg = ForecastConfig(
        horizon=horizon,
        trials=DEFAULT_TRIALS,
        seed=seed,
        measure=MeasureConfig(periodicity=dataset.periodicity),
    )
    plan = EvalPlan(horizon=horizon, min_holdout=horizon, max_cutoffs=1)
    forecasters = {'sire': sire_forecaster(cfg), 'persistence': persistence_forecaster}
    report = rolling_origin(dataset, forecasters, plan, config={'job': 'nightly_backtest', 'seed': seed})

    cells = len(plan.resolve_cutoffs(dataset))
    stats = {
        'companies': len(dataset.companies),
        'cells': cells,
        'scored': cells - report.excluded_cells,
        'excluded': report.excluded_cells,
        'failures': len(report.failures),
        'leakage': report.leakage,
    }
    return report, stats


def main():
    """Main execution function for the nightly backtest"""
    configure_logging()
    logger.info("=" * 80)
    logger.info("Starting Nightly Backtest Job")
    logger.info(f"Timestamp: {datetime.now().isoformat()}")
    logger.info("=" * 80)

    try:
        dataset = load_dataset()
        if not dataset.companies:
            logger.warning("No companies to evaluate")
            return

        report, stats = run_backtest(dataset)
        report.to_csv(BACKTEST_OUTPUT)

        logger.info("=" * 80)
        logger.info("Backtest Complete")
        logger.info(f"Companies: {stats['companies']}")
        logger.info(f"Cells scored: {stats['scored']} of {stats['cells']}")
        logger.info(f"Forecast failures: {stats['failures']}")
        logger.info(f"Leakage records: {stats['leakage']}")
        for method in report.methods:
            logger.info(f"{method}: MAPE={report.value(method, 'mape')} PCC={report.value(method, 'pcc')}")
        logger.info(f"Metrics written to {BACKTEST_OUTPUT}")
        logger.info("=" * 80)

    except Exception as e:
        logger.error(f"Fatal error in backtest job: {e}")
        raise


if __name__ == "__main__":
    main()
