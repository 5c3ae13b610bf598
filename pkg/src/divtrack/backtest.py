"""Rolling-rebalance backtest, hyper-parameter grid search and error metrics."""
from __future__ import annotations

import bisect
import csv
import datetime as dt
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ingest import DataError, PricePanel, ReturnsMatrix, log_returns
from .spectral import ClusterModel, cluster_assets
from .tracker import (
    Portfolio,
    TrackerParams,
    TrackingError,
    TrackingGram,
    diversity_loss,
    sector_clusters,
    solve_weights,
    sparsify,
)

log = logging.getLogger(__name__)

__all__ = [
    "BacktestConfig",
    "BacktestError",
    "Rebalance",
    "DailyRecord",
    "ErrorMetrics",
    "BacktestReport",
    "GridPoint",
    "evaluate_grid",
    "grid_search",
    "tracking_error_metrics",
    "count_holdings",
    "month_end_dates",
    "cluster_strategy",
    "run_backtest",
]

DEFAULT_LAMBDA1_GRID = tuple(np.linspace(1.0, 10.0, 20).tolist())
DEFAULT_LAMBDA2_GRID = tuple(np.linspace(800.0, 1000.0, 200).tolist())


class BacktestError(RuntimeError):
    pass


@dataclass(frozen=True)
class BacktestConfig:
    start: dt.date
    end: dt.date
    method: str = "cluster"
    lookback_days: int = 750  # return rows per estimation window
    rebalance: str | tuple[dt.date, ...] = "monthly"
    initial_capital: float = 1_000_000.0
    fee_per_trade: float = 5.0
    weight_threshold: float = 1e-6
    lambda1_grid: tuple[float, ...] = DEFAULT_LAMBDA1_GRID
    lambda2_grid: tuple[float, ...] = DEFAULT_LAMBDA2_GRID
    validation_fraction: float = 0.2
    fractional_shares: bool = False
    strict: bool = False  # fail on assets with gaps instead of dropping them
    index_ticker: str | None = None
    seed: int = 0
    threads: int | None = None
    cluster_k: int | None = None
    cluster_sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", str(self.method).lower())
        TrackerParams(self.method)  # validates the name
        if self.lookback_days < 2:
            raise ValueError("lookback_days must be >= 2")
        if not self.start < self.end:
            raise ValueError("start must precede end")
        if self.initial_capital <= 0 or self.fee_per_trade < 0:
            raise ValueError("initial_capital must be positive and fee_per_trade non-negative")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        object.__setattr__(self, "lambda1_grid", tuple(float(v) for v in self.lambda1_grid))
        object.__setattr__(self, "lambda2_grid", tuple(float(v) for v in self.lambda2_grid))
        if self.method in ("ridge", "sector", "cluster") and not self.lambda1_grid:
            raise ValueError(f"{self.method} needs a non-empty lambda1 grid")
        if self.method in ("sector", "cluster") and not self.lambda2_grid:
            raise ValueError(f"{self.method} needs a non-empty lambda2 grid")
        if not isinstance(self.rebalance, str):
            object.__setattr__(self, "rebalance", tuple(sorted(self.rebalance)))
        elif self.rebalance != "monthly":
            raise ValueError(f"unknown rebalance schedule {self.rebalance!r}")

    def grids(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        """The (lambda1, lambda2) grids actually searched for this method."""
        if self.method == "baseline":
            return (0.0,), (0.0,)
        if self.method == "ridge":
            return self.lambda1_grid, (0.0,)
        return self.lambda1_grid, self.lambda2_grid


@dataclass(frozen=True)
class Rebalance:
    date: dt.date
    portfolio: Portfolio
    n_holdings: int
    turnover: float
    fees_paid: float
    n_trades: int
    lambda1: float
    lambda2: float
    n_clusters: int | None
    value_before: float  # marked-to-market value including cash, before trading
    holdings_value: float  # after trading
    cash: float  # after trading and fees
    shares: dict = field(repr=False, default_factory=dict)


@dataclass(frozen=True)
class DailyRecord:
    date: dt.date
    portfolio_value: float
    index_value: float
    pct_error: float


@dataclass(frozen=True)
class ErrorMetrics:
    negative_sum: float
    positive_sum: float
    total_sum: float
    mean_pct: float
    n_days: int

    def summary(self) -> str:
        return (
            f"Negative {self.negative_sum:.2f}  Positive {self.positive_sum:.2f}  "
            f"Sum {self.total_sum:.2f}  Mean {self.mean_pct:.2f}%"
        )


def tracking_error_metrics(portfolio_values, index_values) -> ErrorMetrics:
    """Sums of absolute daily percentage errors ``(yhat - y) / y``.

    Both series are rebased to 1 at their first entry. Magnitudes are
    fractions (0.01 is one percent); ``mean_pct`` is in percent.
    """
    yhat = np.asarray(portfolio_values, dtype=float)
    y = np.asarray(index_values, dtype=float)
    if yhat.shape != y.shape or yhat.ndim != 1:
        raise ValueError("portfolio and index series must be 1-d and aligned")
    if yhat.size == 0:
        return ErrorMetrics(0.0, 0.0, 0.0, 0.0, 0)
    if np.any(y <= 0):
        raise ValueError("index values must be positive")
    e = _pct_errors(yhat, y)
    neg = float(np.abs(e[e < 0]).sum())
    pos = float(e[e > 0].sum())
    total = neg + pos
    return ErrorMetrics(neg, pos, total, 100.0 * total / e.size, int(e.size))


def _pct_errors(yhat, y):
    yhat = yhat / yhat[0]
    y = y / y[0]
    return (yhat - y) / y


def count_holdings(portfolio, threshold: float | None = None) -> int:
    """Number of weights strictly above the threshold (``None`` or empty gives 0)."""
    if portfolio is None:
        return 0
    weights = portfolio.weights if isinstance(portfolio, Portfolio) else portfolio
    if threshold is None:
        threshold = portfolio.threshold if isinstance(portfolio, Portfolio) else 1e-6
    values = weights.values() if hasattr(weights, "values") else weights
    return sum(1 for v in values if v > threshold)


@dataclass(frozen=True)
class GridPoint:
    lambda1: float
    lambda2: float
    mse: float  # mean squared validation error
    diversity_loss: float
    n_holdings: int
    weights: np.ndarray = field(repr=False)


def _split(n_rows: int, validation_fraction: float) -> int:
    n_val = int(round(n_rows * validation_fraction))
    n_train = n_rows - n_val
    if n_train < 2 or n_val < 2:
        raise ValueError(
            f"{n_rows} rows cannot be split into >= 2 training and >= 2 validation rows"
        )
    return n_train


def evaluate_grid(
    X,
    Y,
    Z,
    grids: tuple[Sequence[float], Sequence[float]],
    validation_fraction: float = 0.2,
    weight_threshold: float = 1e-6,
    threads: int | None = None,
) -> list[GridPoint]:
    """Fit every (lambda1, lambda2) pair on the earlier rows and score it on the later rows.

    Rows are split in time order: the first ``1 - validation_fraction`` for
    fitting, the rest for validation. Pairs whose QP fails are logged and
    omitted. Results follow the grid order (lambda1 outer, lambda2 inner).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n_train = _split(X.shape[0], validation_fraction)
    gram = TrackingGram(X[:n_train], Y[:n_train])
    X_val, Y_val = X[n_train:], Y[n_train:]
    Zm = None if Z is None else (Z.Z if isinstance(Z, ClusterModel) else np.asarray(Z))
    pairs = [(float(a), float(b)) for a in grids[0] for b in grids[1]]

    def fit(pair):
        l1, l2 = pair
        try:
            w, _ = solve_weights(gram, Zm, l1, l2)
        except TrackingError as exc:
            log.warning("grid pair skipped: %s", exc)
            return None
        w = sparsify(np.maximum(w, 0.0), weight_threshold)
        r = X_val @ w - Y_val
        div = float(w @ w) if Zm is None else diversity_loss(w, Zm)
        return GridPoint(l1, l2, float(r @ r) / r.size, div, int((w > weight_threshold).sum()), w)

    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fit, pairs))
    else:
        results = [fit(p) for p in pairs]
    return [r for r in results if r is not None]


def _mse_key(point: GridPoint):
    # lowest error, then larger lambda2, then larger lambda1
    return (point.mse, -point.lambda2, -point.lambda1)


def grid_search(
    X,
    Y,
    Z,
    grids: tuple[Sequence[float], Sequence[float]],
    validation_fraction: float = 0.2,
    weight_threshold: float = 1e-6,
    threads: int | None = None,
    key: Callable[[GridPoint], object] = _mse_key,
) -> tuple[float, float]:
    """Pick ``(lambda1, lambda2)`` minimising ``key`` over a time-ordered validation split.

    The default key is validation MSE, ties going to the larger lambda2 and
    then the larger lambda1.
    """
    points = evaluate_grid(X, Y, Z, grids, validation_fraction, weight_threshold, threads)
    if not points:
        raise TrackingError("every grid pair failed to solve")
    best = min(points, key=key)
    return best.lambda1, best.lambda2


def month_end_dates(dates: Sequence[dt.date], start: dt.date, end: dt.date) -> list[dt.date]:
    """Last available trading date of each calendar month within ``[start, end]``.

    A month cut short by the end of ``dates`` contributes no date.
    """
    out = []
    for d, nxt in zip(dates, list(dates[1:]) + [None]):
        if d < start or d > end:
            continue
        if nxt is None:
            # the final date only counts when no weekday of its month remains
            first_next = dt.date(d.year + d.month // 12, d.month % 12 + 1, 1)
            if np.busday_count(d + dt.timedelta(days=1), first_next) == 0:
                out.append(d)
        elif (nxt.year, nxt.month) != (d.year, d.month):
            out.append(d)
    return out


ClusterStrategy = Callable[[ReturnsMatrix, PricePanel], "ClusterModel | None"]


def cluster_strategy(config: BacktestConfig) -> ClusterStrategy:
    """Default per-window Z for the configured method."""
    if config.method == "cluster":

        def spectral(rm: ReturnsMatrix, panel: PricePanel):
            return cluster_assets(rm.X, sigma=config.cluster_sigma, k=config.cluster_k, seed=config.seed)

        return spectral
    if config.method == "sector":
        return lambda rm, panel: sector_clusters(rm.tickers, panel.sector_of)
    return lambda rm, panel: None


@dataclass
class BacktestReport:
    config: BacktestConfig
    rebalances: list[Rebalance]
    daily: list[DailyRecord]
    metrics: ErrorMetrics
    bankrupt: bool = False

    def to_dict(self) -> dict:
        cfg = {
            k: (v.isoformat() if isinstance(v, dt.date) else
                [x.isoformat() for x in v] if k == "rebalance" and not isinstance(v, str) else
                list(v) if isinstance(v, tuple) else v)
            for k, v in self.config.__dict__.items()
        }
        return {
            "config": cfg,
            "bankrupt": self.bankrupt,
            "metrics": self.metrics.__dict__,
            "rebalances": [
                {
                    "date": r.date.isoformat(),
                    "n_holdings": r.n_holdings,
                    "n_trades": r.n_trades,
                    "turnover": r.turnover,
                    "fees": r.fees_paid,
                    "lambda1": r.lambda1,
                    "lambda2": r.lambda2,
                    "n_clusters": r.n_clusters,
                    "value_before": r.value_before,
                    "holdings_value": r.holdings_value,
                    "cash": r.cash,
                    "weights": {t: float(v) for t, v in r.portfolio.weights.items()},
                    "shares": {t: float(v) for t, v in r.shares.items()},
                }
                for r in self.rebalances
            ],
            "daily": [
                {
                    "date": d.date.isoformat(),
                    "portfolio_value": d.portfolio_value,
                    "index_value": d.index_value,
                    "pct_error": d.pct_error,
                }
                for d in self.daily
            ],
        }

    def write(self, directory) -> list[str]:
        """Write ``report.json``, ``daily.csv`` and ``rebalances.csv``."""
        os.makedirs(directory, exist_ok=True)
        paths = [os.path.join(directory, n) for n in ("report.json", "daily.csv", "rebalances.csv")]
        with open(paths[0], "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "portfolio_value", "index_value", "pct_error"])
            for d in self.daily:
                w.writerow([d.date.isoformat(), repr(d.portfolio_value), repr(d.index_value), repr(d.pct_error)])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "n_holdings", "turnover", "fees"])
            for r in self.rebalances:
                w.writerow([r.date.isoformat(), r.n_holdings, repr(r.turnover), repr(r.fees_paid)])
        return paths


def _trade(
    weights: np.ndarray,
    prices: np.ndarray,
    old_shares: np.ndarray,
    value: float,
    fee: float,
    fractional: bool,
):
    """Target share counts for ``weights`` given total value ``value``.

    Returns ``(shares, n_trades, fees, cash)`` with
    ``value == shares @ prices + fees + cash`` and ``cash >= 0``.
    """
    target = weights > 0
    candidates = int(np.count_nonzero(target | (old_shares != 0)))
    budget = value - fee * candidates
    if budget <= 0:
        raise BacktestError(f"capital {value:.2f} exhausted by fees for {candidates} trades")
    if fractional:
        shares = weights * budget / prices
    else:
        shares = np.floor(weights * budget / prices)
        # spend the rounding residue one share at a time, largest shortfall first
        while True:
            changed = shares != old_shares
            cash = value - float(shares @ prices) - fee * int(np.count_nonzero(changed))
            cost = prices + np.where(changed, 0.0, fee)
            shortfall = np.where(target & (cost <= cash), weights * budget - shares * prices, -np.inf)
            j = int(np.argmax(shortfall))
            if not np.isfinite(shortfall[j]):
                break
            shares[j] += 1
    changed = shares != old_shares
    n_trades = int(np.count_nonzero(changed))
    fees = fee * n_trades
    cash = value - float(shares @ prices) - fees
    return shares, n_trades, fees, cash


def _forward_fill(col: np.ndarray) -> np.ndarray:
    out = col.copy()
    for i in range(1, out.size):
        if not out[i] > 0:
            out[i] = out[i - 1]
    return out


def run_backtest(
    panel: PricePanel,
    config: BacktestConfig,
    clusters_per_window: ClusterStrategy | None = None,
) -> BacktestReport:
    """Monthly-rebalanced out-of-sample tracking backtest.

    At each rebalance date the universe is the index members with a full
    price history over the lookback window; ``(lambda1, lambda2)`` come from
    a time-ordered grid search on that window, the weights from the full
    window. Weights are turned into share counts at that day's close (whole
    shares unless ``fractional_shares``), each changed position costs
    ``fee_per_trade``, and positions are held until the next rebalance.
    """
    strategy = clusters_per_window or cluster_strategy(config)
    dates = panel.dates
    if isinstance(config.rebalance, str):
        schedule = month_end_dates(dates, config.start, config.end)
    else:
        schedule = [d for d in config.rebalance if config.start <= d <= config.end]
    schedule = [d for d in schedule if bisect.bisect_left(dates, d) >= config.lookback_days]
    if not schedule:
        raise BacktestError("no rebalance date has a full lookback window")
    end_pos = bisect.bisect_right(dates, config.end) - 1

    if config.index_ticker is not None:
        index_series = panel.prices[:, panel.column(config.index_ticker)]
    elif panel.index_prices is not None:
        index_series = panel.index_prices
    else:
        raise BacktestError("panel has no index series and no index_ticker is configured")

    n_assets = len(panel.tickers)
    shares = np.zeros(n_assets)
    cash = config.initial_capital
    marks = np.full(n_assets, np.nan)  # last seen price per asset
    rebalances: list[Rebalance] = []
    daily: list[DailyRecord] = []
    bankrupt = False
    grids = config.grids()
    first_pos = dates.index(schedule[0])
    rebalance_at = {dates.index(d): d for d in schedule}

    for pos in range(first_pos, end_pos + 1):
        row = panel.prices[pos]
        seen = row > 0
        marks[seen] = row[seen]
        value = cash + float(np.nansum(shares * marks))

        if pos in rebalance_at and not bankrupt:
            date = rebalance_at[pos]
            members = sorted(panel.members_at(date))
            if config.index_ticker is not None:
                members = [t for t in members if t != config.index_ticker]
            if not members:
                raise BacktestError(f"empty universe on {date}")
            window = (dates[pos - config.lookback_days], date)
            rm = log_returns(panel, window, members, config.index_ticker, strict=config.strict)
            if not rm.tickers:
                raise BacktestError(f"no member has a full history for the window ending {date}")
            Z = strategy(rm, panel)
            if len(grids[0]) * len(grids[1]) == 1:
                l1, l2 = grids[0][0], grids[1][0]
            else:
                l1, l2 = grid_search(
                    rm.X, rm.Y, Z, grids, config.validation_fraction,
                    config.weight_threshold, config.threads,
                )
            w, _ = solve_weights(
                TrackingGram(rm.X, rm.Y),
                Z,
                l1,
                l2,
                context=f"{config.method} window ending {date}",
            )
            w = sparsify(np.maximum(w, 0.0), config.weight_threshold)

            full_w = np.zeros(n_assets)
            cols = [panel.column(t) for t in rm.tickers]
            full_w[cols] = w
            price_now = np.where(marks > 0, marks, 1.0)
            try:
                new_shares, n_trades, fees, cash = _trade(
                    full_w, price_now, shares, value, config.fee_per_trade, config.fractional_shares
                )
            except BacktestError as exc:
                log.warning("bankrupt on %s: %s", date, exc)
                bankrupt = True
            else:
                turnover = float(np.abs(new_shares - shares) @ price_now) / value
                shares = new_shares
                holdings_value = float(shares @ price_now)
                rebalances.append(
                    Rebalance(
                        date=date,
                        portfolio=Portfolio(
                            {t: float(v) for t, v in zip(rm.tickers, w) if v > 0},
                            as_of=date,
                            threshold=config.weight_threshold,
                        ),
                        n_holdings=int(np.count_nonzero(w > config.weight_threshold)),
                        turnover=turnover,
                        fees_paid=fees,
                        n_trades=n_trades,
                        lambda1=l1,
                        lambda2=l2,
                        n_clusters=None if Z is None else int(Z.K),
                        value_before=value,
                        holdings_value=holdings_value,
                        cash=cash,
                        shares={panel.tickers[j]: float(shares[j]) for j in np.flatnonzero(shares)},
                    )
                )
                value = cash + holdings_value
        if value <= 0:
            bankrupt = True
        daily.append(DailyRecord(dates[pos], value, float(index_series[pos]), 0.0))

    pv = np.array([d.portfolio_value for d in daily])
    iv = np.array([d.index_value for d in daily])
    errors = _pct_errors(pv, iv)
    daily = [DailyRecord(d.date, d.portfolio_value, d.index_value, float(e)) for d, e in zip(daily, errors)]
    return BacktestReport(
        config=config,
        rebalances=rebalances,
        daily=daily,
        metrics=tracking_error_metrics(pv, iv),
        bankrupt=bankrupt,
    )
