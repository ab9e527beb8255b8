"""Price panels: CSV ingest, cleaning, returns, chronological splits, scaling,
look-back windows, the ADF stationarity check, and a synthetic generator."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

MIN_TICKERS = 2
MIN_ROWS = 50


@dataclass(frozen=True)
class PricePanel:
    """N x T prices, rows in fixed ticker order. NaN marks a missing cell."""

    tickers: tuple[str, ...]
    dates: tuple[str, ...]
    prices: np.ndarray

    def __post_init__(self):
        if self.prices.shape != (len(self.tickers), len(self.dates)):
            raise DataError(
                f"price matrix {self.prices.shape} does not match "
                f"{len(self.tickers)} tickers x {len(self.dates)} dates")
        self.prices.setflags(write=False)

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.prices).sum())


@dataclass(frozen=True)
class ReturnPanel:
    """Simple returns; column t is the move from price day t to day t+1.

    ``segment`` records which chronological slice this is ("full", "train",
    "val", "test"); ``offset`` is the index of column 0 within the full panel.
    """

    tickers: tuple[str, ...]
    dates: tuple[str, ...]
    returns: np.ndarray
    segment: str = "full"
    offset: int = 0

    def __post_init__(self):
        self.returns.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.returns.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15

    def boundaries(self, n: int) -> tuple[int, int]:
        """End indices of train and val; floor rounding, remainder goes to test."""
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        n_train = math.floor(n * self.train + 1e-9)
        n_val = math.floor(n * self.val + 1e-9)
        return n_train, n_train + n_val


@dataclass(frozen=True)
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: tuple[str, ...] = ()

    @property
    def warnings(self) -> list[str]:
        return [f"zero training std for {t}; std set to 1" for t in self.degenerate]


@dataclass(frozen=True)
class SyntheticConfig:
    """Sector-factor returns under a two-state (calm / turbulent) Markov regime."""

    sector_sizes: tuple[int, ...] = (4, 4, 4)
    n_days: int = 1500
    factor_vol: float | tuple[float, ...] = 0.01
    idio_vol: float = 0.01
    switch_prob: float = 0.02
    high_vol_mult: float = 2.5
    start_price: float = 100.0
    tail_df: float | None = 3.0  # Student-t innovations (unit variance); None for Gaussian
    seed: int = 42
    start_date: str = "2016-01-04"

    @property
    def n_stocks(self) -> int:
        return int(sum(self.sector_sizes))

    def factor_vols(self) -> np.ndarray:
        fv = self.factor_vol
        if isinstance(fv, (int, float)):
            return np.full(len(self.sector_sizes), float(fv))
        if len(fv) != len(self.sector_sizes):
            raise ConfigError("factor_vol needs one entry per sector")
        return np.asarray(fv, dtype=float)

    def validate(self):
        if not self.sector_sizes or min(self.sector_sizes) < 1:
            raise ConfigError("sector_sizes must be positive")
        if np.any(self.factor_vols() < 0) or self.idio_vol < 0:
            raise ConfigError("volatilities must be non-negative")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ConfigError("switch_prob must lie in [0, 1]")
        if self.high_vol_mult <= 0 or self.start_price <= 0:
            raise ConfigError("high_vol_mult and start_price must be positive")
        if self.tail_df is not None and self.tail_df <= 2:
            raise ConfigError("tail_df must exceed 2 so innovations have unit variance")
        if self.n_days < 2:
            raise ConfigError("n_days must be at least 2")


# ------------------------------------------------------------------- ingest

def load_price_csv(path) -> PricePanel:
    """Read ``date,TICKER1,...`` rows. Empty cells become NaN (missing)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 1 + MIN_TICKERS or header[0].strip().lower() != "date":
            raise DataError(f"{path}: header must be date,TICKER1,...,TICKERN with >= {MIN_TICKERS} tickers")
        tickers = tuple(h.strip() for h in header[1:])
        if len(set(tickers)) != len(tickers):
            raise DataError(f"{path}: duplicate ticker in header")
        dates, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            day = row[0].strip()
            try:
                dt.date.fromisoformat(day)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad ISO date {day!r}") from None
            if dates and day == dates[-1]:
                raise DataError(f"{path}:{lineno}: duplicate date {day}")
            if dates and day < dates[-1]:
                raise DataError(f"{path}:{lineno}: dates not ascending ({day} after {dates[-1]})")
            vals = []
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: unparseable price {cell!r}") from None
            dates.append(day)
            rows.append(vals)
    if len(rows) < MIN_ROWS:
        raise DataError(f"{path}: need at least {MIN_ROWS} rows, got {len(rows)}")
    prices = np.array(rows, dtype=float).T
    return PricePanel(tickers, tuple(dates), prices)


def write_price_csv(panel: PricePanel, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *panel.tickers])
        for t, day in enumerate(panel.dates):
            w.writerow([day, *("" if np.isnan(v) else format(v, ".17g") for v in panel.prices[:, t])])


def clean_panel(panel: PricePanel, max_missing_frac: float = 0.10) -> PricePanel:
    """Drop days with too many missing stocks, then forward- then back-fill."""
    missing = np.isnan(panel.prices)
    n = len(panel.tickers)
    keep = missing.sum(axis=0) <= max_missing_frac * n + 1e-12
    prices = panel.prices[:, keep].copy()
    dates = tuple(d for d, k in zip(panel.dates, keep) if k)
    for i, ticker in enumerate(panel.tickers):
        row = prices[i]
        if np.all(np.isnan(row)):
            raise DataError(f"stock {ticker} has no observed prices")
        for t in range(1, row.size):
            if np.isnan(row[t]):
                row[t] = row[t - 1]
        for t in range(row.size - 2, -1, -1):
            if np.isnan(row[t]):
                row[t] = row[t + 1]
        if np.any(row <= 0):
            raise DataError(f"stock {ticker} has non-positive prices")
    return PricePanel(panel.tickers, dates, prices)


def compute_returns(panel: PricePanel) -> ReturnPanel:
    p = panel.prices
    if np.isnan(p).any():
        raise DataError("compute_returns needs a cleaned panel (missing cells present)")
    if np.any(p[:, :-1] == 0):
        bad = panel.tickers[int(np.argwhere(p[:, :-1] == 0)[0, 0])]
        raise DataError(f"zero price for {bad}")
    r = p[:, 1:] / p[:, :-1] - 1.0
    return ReturnPanel(panel.tickers, panel.dates[1:], r)


def chronological_split(returns: ReturnPanel, spec: SplitSpec = SplitSpec(),
                        lookback: int = 40) -> tuple[ReturnPanel, ReturnPanel, ReturnPanel]:
    n = returns.n_steps
    if n < 3 * lookback:
        raise DataError(f"{n} return steps cannot hold three segments with lookback {lookback}")
    a, b = spec.boundaries(n)
    parts = []
    for name, lo, hi in (("train", 0, a), ("val", a, b), ("test", b, n)):
        if hi - lo < lookback + 1:
            raise DataError(f"{name} segment has {hi - lo} steps, need at least {lookback + 1}")
        parts.append(ReturnPanel(returns.tickers, returns.dates[lo:hi],
                                 returns.returns[:, lo:hi].copy(), name, returns.offset + lo))
    return tuple(parts)


def _require_train(seg: ReturnPanel, who: str):
    if seg.segment != "train":
        raise ConfigError(f"{who} accepts only the training segment, got '{seg.segment}'")


def fit_scaler(train: ReturnPanel) -> ScalerStats:
    _require_train(train, "fit_scaler")
    if train.n_steps == 0:
        raise DataError("empty training segment")
    mean = train.returns.mean(axis=1)
    std = train.returns.std(axis=1)
    bad = std <= 0
    std = np.where(bad, 1.0, std)
    return ScalerStats(mean, std, tuple(t for t, b in zip(train.tickers, bad) if b))


def apply_scaler(values: np.ndarray, stats: ScalerStats) -> np.ndarray:
    return (values - stats.mean[:, None]) / stats.std[:, None]


def invert_scaler(values: np.ndarray, stats: ScalerStats) -> np.ndarray:
    return values * stats.std[:, None] + stats.mean[:, None]


def make_window(scaled: np.ndarray, t: int, lookback: int = 40) -> np.ndarray:
    """Columns t-L .. t-1 of an N x T array; the target column t is excluded."""
    if t < lookback:
        raise DataError(f"target index {t} has fewer than {lookback} past steps")
    if t > scaled.shape[1]:
        raise DataError(f"target index {t} beyond data of length {scaled.shape[1]}")
    return scaled[:, t - lookback:t]


# ---------------------------------------------------------------------- ADF

ADF_CRITICAL = {"1%": -3.43, "5%": -2.86, "10%": -2.57}


def adf_statistic(series, max_lag: int | None = None) -> tuple[float, bool]:
    """Constant-only augmented Dickey-Fuller t-ratio and the 5% rejection flag."""
    y = np.asarray(series, dtype=float)
    n = y.size
    if n < 25:
        raise DataError(f"ADF needs at least 25 observations, got {n}")
    lag = int(math.floor(12.0 * (n / 100.0) ** 0.25))
    if max_lag is not None:
        lag = min(lag, max_lag)
    lag = max(0, min(lag, n // 2 - 2))
    dy = np.diff(y)
    rows = dy.size - lag
    cols = [y[lag:-1], np.ones(rows)]
    for k in range(1, lag + 1):
        cols.append(dy[lag - k:dy.size - k])
    X = np.column_stack(cols)
    target = dy[lag:]
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError("ADF regression is singular")
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ beta
    dof = rows - X.shape[1]
    sigma2 = resid @ resid / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    stat = float(beta[0] / math.sqrt(cov[0, 0]))
    return stat, stat < ADF_CRITICAL["5%"]


# ---------------------------------------------------------------- synthetic

def _business_days(start: str, n: int) -> tuple[str, ...]:
    day = dt.date.fromisoformat(start)
    out = []
    while len(out) < n:
        if day.weekday() < 5:
            out.append(day.isoformat())
        day += dt.timedelta(days=1)
    return tuple(out)


def synthesize_panel(cfg: SyntheticConfig) -> PricePanel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_ret = cfg.n_days - 1
    n_sec = len(cfg.sector_sizes)
    sector_of = np.repeat(np.arange(n_sec), cfg.sector_sizes)

    regime = np.empty(n_ret, dtype=int)
    state = 0
    switches = rng.random(n_ret)
    for t in range(n_ret):
        if switches[t] < cfg.switch_prob:
            state = 1 - state
        regime[t] = state
    mult = np.where(regime == 1, cfg.high_vol_mult, 1.0)

    def innovations(shape):
        if cfg.tail_df is None:
            return rng.standard_normal(shape)
        return rng.standard_t(cfg.tail_df, shape) * np.sqrt((cfg.tail_df - 2.0) / cfg.tail_df)

    factors = innovations((n_sec, n_ret)) * cfg.factor_vols()[:, None]
    idio = innovations((cfg.n_stocks, n_ret)) * cfg.idio_vol
    returns = (factors[sector_of] + idio) * mult[None, :]
    if np.any(returns <= -1.0):
        raise ConfigError("synthetic volatility too high: a return fell to -100%")

    prices = np.empty((cfg.n_stocks, cfg.n_days))
    prices[:, 0] = cfg.start_price
    prices[:, 1:] = cfg.start_price * np.cumprod(1.0 + returns, axis=1)
    tickers = tuple(f"S{s}_{k}" for s, size in enumerate(cfg.sector_sizes) for k in range(size))
    return PricePanel(tickers, _business_days(cfg.start_date, cfg.n_days), prices)


@dataclass
class PreparedData:
    """Everything training and evaluation read, derived once from a clean panel."""

    panel: PricePanel
    returns: ReturnPanel
    train: ReturnPanel
    val: ReturnPanel
    test: ReturnPanel
    scaler: ScalerStats
    scaled: np.ndarray
    lookback: int
    warnings: list[str] = field(default_factory=list)

    @property
    def bounds(self) -> tuple[int, int, int]:
        """Start indices of val and test, and the total number of return steps."""
        return self.val.offset, self.test.offset, self.returns.n_steps

    def train_targets(self) -> np.ndarray:
        return np.arange(self.lookback, self.val.offset)

    def val_targets(self) -> np.ndarray:
        return np.arange(self.val.offset, self.test.offset)

    def test_targets(self) -> np.ndarray:
        return np.arange(self.test.offset, self.returns.n_steps)


def prepare(panel: PricePanel, lookback: int = 40, split: SplitSpec = SplitSpec()) -> PreparedData:
    returns = compute_returns(panel)
    train, val, test = chronological_split(returns, split, lookback)
    scaler = fit_scaler(train)
    scaled = apply_scaler(returns.returns, scaler)
    scaled.setflags(write=False)
    return PreparedData(panel, returns, train, val, test, scaler, scaled, lookback, scaler.warnings)
