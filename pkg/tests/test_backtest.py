import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divtrack.backtest import (
    DEFAULT_LAMBDA1_GRID,
    DEFAULT_LAMBDA2_GRID,
    BacktestConfig,
    BacktestError,
    count_holdings,
    evaluate_grid,
    grid_search,
    month_end_dates,
    run_backtest,
    tracking_error_metrics,
)
from divtrack.ingest import PricePanel
from divtrack.spectral import assignment_matrix
from divtrack.synthetic import PanelSpec, generate_panel
from divtrack.tracker import Portfolio

TABLE_ROWS = {  # method: (negative, positive, sum, mean %)
    "Baseline": (145.35, 5.36, 150.71, 3.86),
    "Ridge": (131.56, 5.28, 136.84, 3.51),
    "Sector": (397.22, 16.69, 413.91, 10.61),
    "Cluster": (21.42, 237.17, 258.59, 6.63),
}


def test_metrics_two_days():
    # first day is the common origin; then +1% and -2%
    m = tracking_error_metrics([1.0, 1.01 * 1.1, 0.98 * 1.2], [1.0, 1.1, 1.2])
    assert m.positive_sum == pytest.approx(0.01)
    assert m.negative_sum == pytest.approx(0.02)
    assert m.total_sum == pytest.approx(0.03)
    assert m.n_days == 3
    two = tracking_error_metrics([1.01, 0.98], [1.0, 1.0])
    # rebasing makes the first day exact, so only the second counts
    assert two.negative_sum == pytest.approx(1 - 0.98 / 1.01)
    assert two.positive_sum == 0.0


def test_metrics_mean_is_per_day():
    e = np.array([0.01, -0.02])
    y = np.ones(3)
    yhat = np.r_[1.0, 1.0 + e]
    m = tracking_error_metrics(yhat, y)
    assert m.total_sum == pytest.approx(0.03)
    assert m.mean_pct == pytest.approx(100 * 0.03 / 3)
    # two-day series of only the errors: mean 1.5%
    assert 100 * m.total_sum / 2 == pytest.approx(1.5)


def test_metrics_identical_series():
    v = np.linspace(100, 120, 50)
    m = tracking_error_metrics(v, v)
    assert (m.negative_sum, m.positive_sum, m.total_sum, m.mean_pct) == (0, 0, 0, 0)


@pytest.mark.parametrize("method", TABLE_ROWS)
def test_table_rows_imply_per_day_mean(method):
    neg, pos, total, mean = TABLE_ROWS[method]
    assert neg + pos == pytest.approx(total, abs=0.011)
    assert total / (mean / 100) == pytest.approx(3900, rel=0.005)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 300), st.floats(0.01, 100))
def test_metrics_sum_over_mean_is_days(seed, n, scale):
    rng = np.random.default_rng(seed)
    y = np.exp(np.cumsum(0.01 * rng.standard_normal(n)))
    yhat = y * np.exp(0.005 * rng.standard_normal(n))
    m = tracking_error_metrics(yhat, y)
    if m.total_sum:
        assert m.total_sum / (m.mean_pct / 100) == pytest.approx(n, rel=1e-12)
    r = tracking_error_metrics(scale * yhat, scale * y)
    assert r.total_sum == pytest.approx(m.total_sum, rel=1e-9, abs=1e-15)
    assert r.negative_sum == pytest.approx(m.negative_sum, rel=1e-9, abs=1e-15)


def test_count_holdings():
    assert count_holdings(Portfolio({str(j): 1 / 500 for j in range(500)})) == 500
    assert count_holdings(Portfolio({})) == 0
    assert count_holdings(None) == 0
    assert count_holdings({"a": 0.5, "b": 1e-7}) == 1


def test_grid_single_pair():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((20, 4)), rng.standard_normal(20)
    assert grid_search(X, Y, None, ((3.0,), (0.0,))) == (3.0, 0.0)


def test_grid_tie_goes_to_larger_lambda2():
    # one asset: every pair gives w = 1 and the same validation error
    rng = np.random.default_rng(1)
    X, Y = rng.standard_normal((20, 1)), rng.standard_normal(20)
    Z = np.ones((1, 1))
    assert grid_search(X, Y, Z, ((1.0, 2.0), (5.0, 7.0, 6.0))) == (2.0, 7.0)


def test_grid_never_fits_on_validation_rows():
    rng = np.random.default_rng(2)
    X, Y = rng.standard_normal((30, 5)), rng.standard_normal(30)
    Z = assignment_matrix([0, 0, 1, 1, 2])
    grids = ((0.5, 2.0), (0.0, 3.0))
    clean = evaluate_grid(X, Y, Z, grids)
    Xp, Yp = X.copy(), Y.copy()
    Xp[24:] = 1e6
    Yp[24:] = -1e6
    poisoned = evaluate_grid(Xp, Yp, Z, grids)
    for a, b in zip(clean, poisoned):
        np.testing.assert_array_equal(a.weights, b.weights)
        assert a.mse != b.mse


def test_grid_split_too_short():
    with pytest.raises(ValueError):
        grid_search(np.ones((4, 2)), np.ones(4), None, ((0.0,), (0.0,)))


def planted_duplicates(seed, D=30, n_spurious=40):
    # one group of near-copies carries the index; singletons are pure noise
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal(D)
    X = np.column_stack([latent[:, None] + 0.05 * rng.standard_normal((D, 20)), rng.standard_normal((D, n_spurious))])
    Y = latent + 0.5 * rng.standard_normal(D)
    labels = np.r_[np.zeros(20, int), np.arange(1, n_spurious + 1)]
    return X, Y, assignment_matrix(labels)


def test_grid_selects_positive_lambda2_on_duplicates():
    wins, ratios = 0, []
    for seed in range(20):
        X, Y, Z = planted_duplicates(seed)
        points = evaluate_grid(X, Y, Z, ((0.0,), (0.0, 1.0, 10.0)))
        l1, l2 = grid_search(X, Y, Z, ((0.0,), (0.0, 1.0, 10.0)))
        chosen = next(p for p in points if p.lambda2 == l2)
        wins += l2 > 0
        ratios.append(chosen.mse / points[0].mse)
    assert wins >= 14
    assert np.median(ratios) < 0.95


def test_month_end_dates():
    dates = [dt.date(2020, 1, 30), dt.date(2020, 1, 31), dt.date(2020, 2, 3), dt.date(2020, 2, 28), dt.date(2020, 3, 2)]
    # 2020-03-02 leaves weekdays in March, so that month is incomplete
    assert month_end_dates(dates, dates[0], dates[-1]) == [dates[1], dates[3]]
    assert month_end_dates(dates[:4], dates[0], dates[3]) == [dates[1], dates[3]]
    assert month_end_dates(dates, dt.date(2020, 2, 1), dt.date(2020, 2, 28)) == [dates[3]]


def test_default_grid_sizes():
    assert len(DEFAULT_LAMBDA1_GRID) == 20 and len(DEFAULT_LAMBDA2_GRID) == 200
    assert DEFAULT_LAMBDA1_GRID[0] == 1 and DEFAULT_LAMBDA1_GRID[-1] == 10
    assert DEFAULT_LAMBDA2_GRID[0] == 800 and DEFAULT_LAMBDA2_GRID[-1] == 1000


@pytest.fixture(scope="module")
def small_panel():
    return generate_panel(PanelSpec(n_assets=12, n_days=160, n_industries=3, seed=5))


def small_config(panel, **kw):
    base = dict(end=panel.dates[-1], method="baseline", lookback_days=40, validation_fraction=0.25, threads=1)
    base.update(kw)
    if "start" not in base:
        base["start"] = panel.dates[41]
    return BacktestConfig(**base)


def test_self_tracking_single_asset():
    panel = generate_panel(PanelSpec(n_assets=1, n_days=120, seed=1))
    cfg = small_config(panel, fee_per_trade=0.0, fractional_shares=True)
    report = run_backtest(panel, cfg)
    assert all(r.portfolio.weights == {"S0000": 1.0} for r in report.rebalances)
    assert max(abs(d.pct_error) for d in report.daily) < 1e-12


def test_replication_identity(small_panel):
    panel = small_panel
    cfg = small_config(panel, fee_per_trade=0.0, fractional_shares=True)
    report = run_backtest(panel, cfg)
    assert len(report.rebalances) >= 3
    pos_of = {d: i for i, d in enumerate(panel.dates)}
    rebal = {r.date: r for r in report.rebalances}
    current = None
    for day in report.daily:
        if day.date in rebal:
            current = rebal[day.date]
            base = panel.prices[pos_of[day.date]]
        weights = current.portfolio.weights
        row = panel.prices[pos_of[day.date]]
        blended = current.value_before * sum(
            w * row[panel.column(t)] / base[panel.column(t)] for t, w in weights.items()
        )
        assert day.portfolio_value == pytest.approx(blended, rel=1e-10)


def test_day_one_return_is_weighted_asset_return(small_panel):
    panel = small_panel
    report = run_backtest(panel, small_config(panel, fee_per_trade=0.0, fractional_shares=True))
    first = report.rebalances[0]
    i = panel.dates.index(first.date)
    asset_ret = panel.prices[i + 1] / panel.prices[i] - 1
    expected = sum(w * asset_ret[panel.column(t)] for t, w in first.portfolio.weights.items())
    got = report.daily[1].portfolio_value / report.daily[0].portfolio_value - 1
    assert got == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("method", ["baseline", "cluster"])
def test_cash_conservation(small_panel, method):
    panel = small_panel
    cfg = small_config(panel, method=method, fee_per_trade=5.0, initial_capital=50_000.0,
                       lambda1_grid=(1.0,), lambda2_grid=(10.0,))
    report = run_backtest(panel, cfg)
    for r in report.rebalances:
        total = r.holdings_value + r.fees_paid + r.cash
        assert abs(total - r.value_before) <= 4 * np.spacing(r.value_before)
        assert r.cash >= 0
        i = panel.dates.index(r.date)
        assert r.cash < panel.prices[i].max()
        assert all(float(s).is_integer() for s in r.shares.values())
        assert r.fees_paid == 5.0 * r.n_trades


def test_fees_are_charged_once_per_changed_position(small_panel):
    panel = small_panel
    free = run_backtest(panel, small_config(panel, fee_per_trade=0.0))
    paid = run_backtest(panel, small_config(panel, fee_per_trade=5.0))
    assert paid.rebalances[0].n_trades == len(paid.rebalances[0].shares)
    assert paid.daily[-1].portfolio_value < free.daily[-1].portfolio_value


def test_fees_exhaust_capital(small_panel):
    panel = small_panel
    report = run_backtest(panel, small_config(panel, fee_per_trade=1e4, initial_capital=1e4))
    assert report.bankrupt
    assert report.rebalances == []


def test_membership_change_respected():
    base = generate_panel(PanelSpec(n_assets=6, n_days=100, seed=2))
    late = base.dates[70]
    membership = {base.dates[0]: frozenset(base.tickers[:5]), late: frozenset(base.tickers)}
    panel = PricePanel(base.dates, base.tickers, base.prices, membership, base.sector_of, base.index_prices)
    report = run_backtest(panel, small_config(panel, lookback_days=30, start=base.dates[31]))
    for r in report.rebalances:
        held = set(r.portfolio.weights)
        if r.date < late:
            assert "S0005" not in held
    assert any(r.date >= late for r in report.rebalances)


def test_no_full_window():
    panel = generate_panel(PanelSpec(n_assets=3, n_days=30, seed=0))
    with pytest.raises(BacktestError, match="lookback"):
        run_backtest(panel, small_config(panel, start=panel.dates[1], lookback_days=40))


def test_report_files(tmp_path, small_panel):
    report = run_backtest(small_panel, small_config(small_panel))
    paths = report.write(tmp_path)
    assert [p.split("/")[-1] for p in paths] == ["report.json", "daily.csv", "rebalances.csv"]
    assert (tmp_path / "daily.csv").read_text().splitlines()[0] == "date,portfolio_value,index_value,pct_error"
    assert (tmp_path / "rebalances.csv").read_text().splitlines()[0] == "date,n_holdings,turnover,fees"
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["metrics"]["n_days"] == len(report.daily)
    assert report.daily[0].pct_error == 0.0


@pytest.fixture(scope="module")
def five_group_runs():
    panel = generate_panel(PanelSpec(n_assets=200, n_days=790, n_industries=5, industries_per_sector=1, seed=0))
    runs = {}
    for method in ("baseline", "cluster"):
        cfg = BacktestConfig(
            start=panel.dates[751], end=panel.dates[-1], method=method,
            lambda1_grid=(1.0, 5.5, 10.0), lambda2_grid=(800.0, 900.0, 1000.0),
        )
        runs[method] = run_backtest(panel, cfg)
    return runs


def test_five_group_panel_ordering(five_group_runs):
    base = [r.n_holdings for r in five_group_runs["baseline"].rebalances]
    clus = [r.n_holdings for r in five_group_runs["cluster"].rebalances]
    assert len(base) == len(clus) == 2
    assert all(c < b for c, b in zip(clus, base))
    assert all(r.n_clusters == 5 for r in five_group_runs["cluster"].rebalances)


@pytest.mark.xfail(strict=True, reason="cluster-level penalties leave the within-cluster split free; see README")
def test_five_group_panel_absolute_counts(five_group_runs):
    assert all(r.n_holdings <= 15 for r in five_group_runs["cluster"].rebalances)
    assert all(r.n_holdings >= 50 for r in five_group_runs["baseline"].rebalances)
