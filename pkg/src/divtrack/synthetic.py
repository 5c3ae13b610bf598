"""Synthetic data with planted structure.

``generate_toy`` builds the duplicated-latent regression problem: a few
latent return series, each cloned a random number of times, with the target
an equal-weight mix. ``generate_panel`` builds a dated price panel with
industry factors, coarser sector labels and a constituent-weighted index,
for backtests.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .ingest import PricePanel

__all__ = ["ToySpec", "ToyInstance", "generate_toy", "PanelSpec", "generate_panel"]


@dataclass(frozen=True)
class ToySpec:
    n_groups: int = 5
    dims: int = 750
    group_size_range: tuple[int, int] = (50, 200)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.group_size_range
        if self.n_groups < 1 or self.dims < 2:
            raise ValueError("need n_groups >= 1 and dims >= 2")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad group_size_range {self.group_size_range}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class ToyInstance:
    X: np.ndarray  # dims x N
    Y: np.ndarray  # dims
    group_of: np.ndarray  # N group labels
    true_group_weight: np.ndarray
    latents: np.ndarray  # dims x n_groups

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=len(self.true_group_weight))

    def oracle_weights(self) -> np.ndarray:
        """One asset per group (its first copy) at the group's true weight."""
        w = np.zeros(self.X.shape[1])
        for g, weight in enumerate(self.true_group_weight):
            w[np.flatnonzero(self.group_of == g)[0]] = weight
        return w


def generate_toy(spec: ToySpec = ToySpec()) -> ToyInstance:
    """Draw a toy tracking problem; deterministic for a given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.group_size_range
    sizes = rng.integers(lo, hi + 1, size=spec.n_groups)
    latents = rng.standard_normal((spec.dims, spec.n_groups))
    group_of = np.repeat(np.arange(spec.n_groups), sizes)
    weight = np.full(spec.n_groups, 1.0 / spec.n_groups)
    X = latents[:, group_of] + spec.noise_std * rng.standard_normal((spec.dims, group_of.size))
    Y = latents @ weight + spec.noise_std * rng.standard_normal(spec.dims)
    return ToyInstance(X=X, Y=Y, group_of=group_of, true_group_weight=weight, latents=latents)


@dataclass(frozen=True)
class PanelSpec:
    n_assets: int = 200
    n_days: int = 1260  # about five years of trading days
    n_industries: int = 10
    industries_per_sector: int = 2
    market_vol: float = 0.010  # daily
    industry_vol: float = 0.012
    idio_vol: float = 0.006
    start: dt.date = dt.date(2010, 1, 4)
    seed: int = 0

    def __post_init__(self):
        if self.n_assets < 1 or self.n_days < 2 or self.n_industries < 1:
            raise ValueError("n_assets, n_days and n_industries must be positive (n_days >= 2)")
        if self.industries_per_sector < 1:
            raise ValueError("industries_per_sector must be >= 1")


def _business_days(start: dt.date, n: int) -> list[dt.date]:
    days = np.busday_offset(np.datetime64(start), np.arange(n), roll="forward")
    return [d.astype(object) for d in days]


def generate_panel(spec: PanelSpec = PanelSpec()) -> PricePanel:
    """Price panel driven by market + industry factors.

    Each asset belongs to one industry; sector labels group
    ``industries_per_sector`` consecutive industries, so sectors are coarser
    than the true return structure. The index is the initial-equal-weight
    buy-and-hold portfolio of all assets (all assets are members throughout).
    """
    rng = np.random.default_rng(spec.seed)
    industry = np.sort(rng.integers(0, spec.n_industries, size=spec.n_assets))
    beta = rng.uniform(0.8, 1.2, size=spec.n_assets)
    market = spec.market_vol * rng.standard_normal(spec.n_days - 1)
    factors = spec.industry_vol * rng.standard_normal((spec.n_days - 1, spec.n_industries))
    idio = spec.idio_vol * rng.standard_normal((spec.n_days - 1, spec.n_assets))
    drift = 0.0002
    R = drift + market[:, None] * beta + factors[:, industry] + idio
    start_px = rng.uniform(20.0, 200.0, size=spec.n_assets)
    log_px = np.vstack([np.zeros(spec.n_assets), np.cumsum(R, axis=0)])
    prices = start_px * np.exp(log_px)

    index = 100.0 * (prices / start_px).mean(axis=1)
    dates = _business_days(spec.start, spec.n_days)
    tickers = tuple(f"S{j:04d}" for j in range(spec.n_assets))
    sector_of = {t: f"SEC{industry[j] // spec.industries_per_sector:02d}" for j, t in enumerate(tickers)}
    return PricePanel(
        dates=tuple(dates),
        tickers=tickers,
        prices=prices,
        membership={dates[0]: frozenset(tickers)},
        sector_of=sector_of,
        index_prices=index,
    )
