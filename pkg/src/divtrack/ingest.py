"""Price/membership loading and log-return windows."""
from __future__ import annotations

import bisect
import csv
import datetime as dt
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DataError",
    "PricePanel",
    "ReturnsMatrix",
    "load_price_panel",
    "write_price_panel",
    "log_returns",
]

PRICES_HEADER = ("date", "ticker", "adj_close")
MEMBERSHIP_HEADER = ("date", "ticker")
SECTORS_HEADER = ("ticker", "sector")
INDEX_HEADER = ("date", "index_value")


class DataError(ValueError):
    """Input data violates a file schema or a panel invariant."""


@dataclass(frozen=True)
class PricePanel:
    """Adjusted close prices on a date x ticker grid.

    ``prices`` holds NaN where no row was supplied. ``membership`` maps each
    snapshot date to the full constituent list; a snapshot holds until the
    next snapshot date.
    """

    dates: tuple[dt.date, ...]
    tickers: tuple[str, ...]
    prices: np.ndarray
    membership: Mapping[dt.date, frozenset[str]]
    sector_of: Mapping[str, str] | None = None
    index_prices: np.ndarray | None = None
    _col: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly increasing")
        prices = np.array(self.prices, dtype=float)
        if prices.shape != (len(self.dates), len(self.tickers)):
            raise DataError(
                f"prices shape {prices.shape} does not match "
                f"{len(self.dates)} dates x {len(self.tickers)} tickers"
            )
        prices.setflags(write=False)
        object.__setattr__(self, "prices", prices)
        if self.index_prices is not None:
            idx = np.array(self.index_prices, dtype=float)
            if idx.shape != (len(self.dates),):
                raise DataError("index series length does not match dates")
            idx.setflags(write=False)
            object.__setattr__(self, "index_prices", idx)
        object.__setattr__(self, "_col", {t: j for j, t in enumerate(self.tickers)})
        self._validate()

    def _validate(self):
        col = self._col
        snaps = sorted(self.membership)
        for k, snap in enumerate(snaps):
            unknown = sorted(t for t in self.membership[snap] if t not in col)
            if unknown:
                raise DataError(f"membership on {snap} references unknown ticker {unknown[0]!r}")
            lo = bisect.bisect_left(self.dates, snap)
            hi = bisect.bisect_left(self.dates, snaps[k + 1]) if k + 1 < len(snaps) else len(self.dates)
            if lo >= hi:
                continue
            cols = [col[t] for t in sorted(self.membership[snap])]
            block = self.prices[lo:hi, cols]
            bad = ~(block > 0)
            if bad.any():
                i, j = np.argwhere(bad)[0]
                ticker = self.tickers[cols[j]]
                raise DataError(
                    f"member {ticker} has missing or non-positive price on {self.dates[lo + i]}"
                )
        if self.sector_of is not None:
            members = set().union(*self.membership.values()) if self.membership else set()
            missing = sorted(members - set(self.sector_of))
            if missing:
                raise DataError(f"sector map does not cover member {missing[0]!r}")

    def column(self, ticker: str) -> int:
        return self._col[ticker]

    def date_position(self, date: dt.date) -> int:
        """Index of ``date`` in ``dates``; raises KeyError if absent."""
        i = bisect.bisect_left(self.dates, date)
        if i == len(self.dates) or self.dates[i] != date:
            raise KeyError(date)
        return i

    def members_at(self, date: dt.date) -> frozenset[str]:
        """Constituents from the latest snapshot on or before ``date``."""
        snaps = sorted(self.membership)
        k = bisect.bisect_right(snaps, date)
        if k == 0:
            return frozenset()
        return self.membership[snaps[k - 1]]

    def __eq__(self, other):
        if not isinstance(other, PricePanel):
            return NotImplemented
        same_index = (self.index_prices is None) == (other.index_prices is None) and (
            self.index_prices is None
            or np.array_equal(self.index_prices, other.index_prices, equal_nan=True)
        )
        return (
            self.dates == other.dates
            and self.tickers == other.tickers
            and np.array_equal(self.prices, other.prices, equal_nan=True)
            and dict(self.membership) == dict(other.membership)
            and (dict(self.sector_of) if self.sector_of is not None else None)
            == (dict(other.sector_of) if other.sector_of is not None else None)
            and same_index
        )

    __hash__ = None


@dataclass(frozen=True)
class ReturnsMatrix:
    """Per-asset log returns ``X`` (D x N) and index log returns ``Y``."""

    X: np.ndarray
    Y: np.ndarray
    tickers: tuple[str, ...]
    window: tuple[dt.date, dt.date]
    dropped: tuple[str, ...] = ()

    @property
    def shape(self):
        return self.X.shape


def _parse_date(text: str, path, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse date {text!r}") from None


def _read_rows(path, header: Sequence[str]):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(c.strip() for c in first) != tuple(header):
            raise DataError(f"{path}:1: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}"
                )
            yield reader.line_num, [c.strip() for c in row]


def load_price_panel(
    prices_path,
    membership_path,
    sectors_path=None,
    index_path=None,
) -> PricePanel:
    """Read and validate the CSV inputs.

    Parameters
    ----------
    prices_path : path
        ``date,ticker,adj_close`` rows, one per (date, ticker).
    membership_path : path
        ``date,ticker`` rows; the rows sharing a date form one full snapshot.
    sectors_path : path, optional
        ``ticker,sector`` rows.
    index_path : path, optional
        ``date,index_value`` rows giving the benchmark level on every date.

    Raises
    ------
    DataError
        Malformed rows (with line number), unparseable dates, unknown
        tickers, or members with missing or non-positive prices.
    """
    records: dict[tuple[dt.date, str], float] = {}
    for line, (d, ticker, value) in _read_rows(prices_path, PRICES_HEADER):
        date = _parse_date(d, prices_path, line)
        try:
            price = float(value)
        except ValueError:
            raise DataError(f"{prices_path}:{line}: bad price {value!r}") from None
        if not ticker:
            raise DataError(f"{prices_path}:{line}: empty ticker")
        if not np.isfinite(price) or price <= 0:
            raise DataError(f"{prices_path}:{line}: non-positive price for {ticker} on {date}")
        if (date, ticker) in records:
            raise DataError(f"{prices_path}:{line}: duplicate row for {ticker} on {date}")
        records[(date, ticker)] = price

    dates = sorted({d for d, _ in records})
    tickers = sorted({t for _, t in records})
    row = {d: i for i, d in enumerate(dates)}
    col = {t: j for j, t in enumerate(tickers)}
    prices = np.full((len(dates), len(tickers)), np.nan)
    for (d, t), v in records.items():
        prices[row[d], col[t]] = v

    membership: dict[dt.date, set[str]] = {}
    for line, (d, ticker) in _read_rows(membership_path, MEMBERSHIP_HEADER):
        date = _parse_date(d, membership_path, line)
        if ticker not in col:
            raise DataError(f"{membership_path}:{line}: unknown ticker {ticker!r}")
        membership.setdefault(date, set()).add(ticker)

    sector_of = None
    if sectors_path is not None:
        sector_of = {}
        for line, (ticker, sector) in _read_rows(sectors_path, SECTORS_HEADER):
            if ticker in sector_of:
                raise DataError(f"{sectors_path}:{line}: duplicate ticker {ticker!r}")
            sector_of[ticker] = sector

    index_prices = None
    if index_path is not None:
        levels = {}
        for line, (d, value) in _read_rows(index_path, INDEX_HEADER):
            date = _parse_date(d, index_path, line)
            try:
                levels[date] = float(value)
            except ValueError:
                raise DataError(f"{index_path}:{line}: bad index value {value!r}") from None
        index_prices = np.array([levels.get(d, np.nan) for d in dates])
        if not np.all(index_prices > 0):
            missing = dates[int(np.argmin(index_prices > 0))]
            raise DataError(f"{index_path}: missing or non-positive index value on {missing}")

    return PricePanel(
        dates=tuple(dates),
        tickers=tuple(tickers),
        prices=prices,
        membership={d: frozenset(s) for d, s in membership.items()},
        sector_of=sector_of,
        index_prices=index_prices,
    )


def write_price_panel(panel: PricePanel, directory) -> dict[str, str]:
    """Write ``panel`` in the CSV schemas read by :func:`load_price_panel`."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "prices": os.path.join(directory, "prices.csv"),
        "membership": os.path.join(directory, "membership.csv"),
    }
    with open(paths["prices"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICES_HEADER)
        for i, d in enumerate(panel.dates):
            for j, t in enumerate(panel.tickers):
                v = panel.prices[i, j]
                if np.isfinite(v):
                    w.writerow([d.isoformat(), t, repr(float(v))])
    with open(paths["membership"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEMBERSHIP_HEADER)
        for d in sorted(panel.membership):
            for t in sorted(panel.membership[d]):
                w.writerow([d.isoformat(), t])
    if panel.sector_of is not None:
        paths["sectors"] = os.path.join(directory, "sectors.csv")
        with open(paths["sectors"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SECTORS_HEADER)
            for t in sorted(panel.sector_of):
                w.writerow([t, panel.sector_of[t]])
    if panel.index_prices is not None:
        paths["index"] = os.path.join(directory, "index.csv")
        with open(paths["index"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(INDEX_HEADER)
            for d, v in zip(panel.dates, panel.index_prices):
                w.writerow([d.isoformat(), repr(float(v))])
    return paths


def _window_slice(panel: PricePanel, window) -> slice:
    start, end = window
    lo = bisect.bisect_left(panel.dates, start)
    hi = bisect.bisect_right(panel.dates, end)
    return slice(lo, hi)


def log_returns(
    panel: PricePanel,
    window: tuple[dt.date, dt.date],
    universe: Iterable[str],
    index_series: str | None = None,
    strict: bool = True,
) -> ReturnsMatrix:
    """Log returns of ``universe`` and of the index over an inclusive date window.

    ``index_series`` names a ticker column used as the benchmark; when None
    the panel's separate index series is used. With ``strict=False`` assets
    with a gap inside the window are dropped (and listed in ``dropped``)
    instead of raising.
    """
    sl = _window_slice(panel, window)
    n_dates = sl.stop - sl.start
    if n_dates < 2:
        raise DataError(f"window {window[0]}..{window[1]} contains {n_dates} dates, need >= 2")
    universe = list(universe)
    unknown = [t for t in universe if t not in panel._col]
    if unknown:
        raise DataError(f"unknown ticker {unknown[0]!r}")

    block = panel.prices[sl][:, [panel.column(t) for t in universe]]
    complete = np.all(block > 0, axis=0)
    dropped = tuple(t for t, ok in zip(universe, complete) if not ok)
    if dropped and strict:
        raise DataError(f"ticker {dropped[0]} has a gap in window {window[0]}..{window[1]}")
    keep = [t for t, ok in zip(universe, complete) if ok]
    block = block[:, complete]

    if index_series is None:
        if panel.index_prices is None:
            raise DataError("panel has no index series; name an index ticker")
        idx = panel.index_prices[sl]
    else:
        idx = panel.prices[sl, panel.column(index_series)]
    if not np.all(idx > 0):
        raise DataError(f"index series has a gap in window {window[0]}..{window[1]}")

    X = np.diff(np.log(block), axis=0)
    Y = np.diff(np.log(idx))
    X.setflags(write=False)
    Y.setflags(write=False)
    return ReturnsMatrix(
        X=X,
        Y=Y,
        tickers=tuple(keep),
        window=(panel.dates[sl.start], panel.dates[sl.stop - 1]),
        dropped=dropped,
    )
