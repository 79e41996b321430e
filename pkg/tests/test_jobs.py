import pytest

from jobs import nightly_backtest
from sire.synthetic import CohortSpec, generate_cohort


@pytest.fixture
def holdout_cohort():
    return generate_cohort(CohortSpec(n_companies=4, sectors=["software"], length=(20, 20), seed=6))


def test_run_backtest_stats(holdout_cohort, monkeypatch):
    monkeypatch.setattr(nightly_backtest, "DEFAULT_TRIALS", 2)
    report, stats = nightly_backtest.run_backtest(holdout_cohort, horizon=3, seed=1)
    assert stats["companies"] == 4
    assert stats["cells"] == 4
    assert stats["scored"] + stats["excluded"] == stats["cells"]
    assert stats["leakage"] == 0
    assert report.methods == ["sire", "persistence"]
    assert report.counts["sire"]["all"] == report.counts["persistence"]["all"]
    assert report.config["job"] == "nightly_backtest"


def test_main_writes_the_metric_csv(tmp_path, monkeypatch, holdout_cohort):
    out = tmp_path / "metrics.csv"
    monkeypatch.setattr(nightly_backtest, "BACKTEST_OUTPUT", str(out))
    monkeypatch.setattr(nightly_backtest, "BACKTEST_HORIZON", 2)
    monkeypatch.setattr(nightly_backtest, "DEFAULT_TRIALS", 2)
    monkeypatch.setattr(nightly_backtest, "load_dataset", lambda: holdout_cohort)
    monkeypatch.setattr(
        nightly_backtest, "run_backtest",
        lambda dataset, _run=nightly_backtest.run_backtest: _run(dataset, horizon=2, seed=0),
    )
    nightly_backtest.main()
    text = out.read_text()
    assert text.startswith("# sire-config: ")
    assert "persistence" in text


def test_load_dataset_reads_a_csv(tmp_path, holdout_cohort):
    path = tmp_path / "cohort.csv"
    holdout_cohort.to_csv(str(path))
    assert nightly_backtest.load_dataset(str(path)) == holdout_cohort
