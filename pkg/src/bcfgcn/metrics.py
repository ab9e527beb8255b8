"""Interval and point forecast metrics, CWC, and the Diebold-Mariano test."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class MetricsConfig:
    winkler_alpha: float = 0.10
    cwc_gamma: float = 0.90
    cwc_eta: float = 50.0
    piaw_eps: float = 1e-8
    dm_lag: int | None = None  # None picks floor(n ** (1/3))

    def __post_init__(self):
        if not 0.0 < self.winkler_alpha < 1.0:
            raise ConfigError("winkler_alpha must lie in (0, 1)")
        if not 0.0 < self.cwc_gamma < 1.0:
            raise ConfigError("cwc_gamma must lie in (0, 1)")
        if self.cwc_eta <= 0:
            raise ConfigError("cwc_eta must be positive")
        if self.piaw_eps <= 0:
            raise ConfigError("piaw_eps must be positive")
        if self.dm_lag is not None and self.dm_lag < 0:
            raise ConfigError("dm_lag must be non-negative")


def _arrays(*xs, min_len=1):
    arrs = [np.asarray(x, dtype=float).reshape(-1) for x in xs]
    n = arrs[0].size
    if any(a.size != n for a in arrs):
        raise DataError(f"length mismatch: {[a.size for a in arrs]}")
    if n < min_len:
        raise DataError(f"need at least {min_len} observations, got {n}")
    return arrs


def picp(lower, upper, y) -> float:
    lo, up, y = _arrays(lower, upper, y)
    return float(np.mean((lo <= y) & (y <= up)))


def piaw(lower, upper, y, cfg: MetricsConfig = MetricsConfig()) -> float:
    lo, up, y = _arrays(lower, upper, y)
    return float(np.mean((up - lo) / (y.max() - y.min() + cfg.piaw_eps)))


def winkler_scores(lower, upper, y, cfg: MetricsConfig = MetricsConfig()) -> np.ndarray:
    """Per-observation interval score: width plus 2/alpha times the miss distance."""
    lo, up, y = _arrays(lower, upper, y)
    k = 2.0 / cfg.winkler_alpha
    return (up - lo) + k * np.maximum(lo - y, 0.0) + k * np.maximum(y - up, 0.0)


def winkler(lower, upper, y, cfg: MetricsConfig = MetricsConfig()) -> float:
    return float(np.mean(winkler_scores(lower, upper, y, cfg)))


def cwc(picp_val: float, piaw_val: float, cfg: MetricsConfig = MetricsConfig()) -> float:
    if picp_val >= cfg.cwc_gamma:
        return float(piaw_val)
    return float(piaw_val * math.exp(-cfg.cwc_eta * (picp_val - cfg.cwc_gamma)))


def smape(y, y_hat) -> float:
    y, y_hat = _arrays(y, y_hat)
    denom = (np.abs(y) + np.abs(y_hat)) / 2.0
    num = np.abs(y - y_hat)
    safe = np.where(denom > 0, denom, 1.0)
    return float(np.mean(np.where(denom > 0, num / safe, 0.0)))


def dstat(y, y_hat) -> float:
    """Share of steps where the predicted and realized changes share a sign (0 matches 0)."""
    y, y_hat = _arrays(y, y_hat, min_len=2)
    return float(np.mean(np.sign(np.diff(y)) == np.sign(np.diff(y_hat))))


def theils_u(y, y_hat) -> float:
    """RMSE ratio against the previous-value forecast, first step excluded."""
    y, y_hat = _arrays(y, y_hat, min_len=2)
    naive = np.mean((y[1:] - y[:-1]) ** 2)
    if naive == 0:
        raise DataError("Theil's U undefined: naive forecast error is zero (constant series)")
    return float(math.sqrt(np.mean((y[1:] - y_hat[1:]) ** 2) / naive))


@dataclass(frozen=True)
class DMResult:
    stat: float
    p_value: float
    better: str  # "A", "B" or "none"
    n: int
    lag: int


def newey_west_variance(d: np.ndarray, lag: int) -> float:
    """Bartlett-weighted long-run variance of a demeaned series."""
    n = d.size
    e = d - d.mean()
    omega = float(e @ e) / n
    for k in range(1, lag + 1):
        omega += 2.0 * (1.0 - k / (lag + 1.0)) * float(e[k:] @ e[:-k]) / n
    return omega


def diebold_mariano(loss_a, loss_b, cfg: MetricsConfig = MetricsConfig()) -> DMResult:
    """Negative statistic means A has the lower expected loss."""
    a, b = _arrays(loss_a, loss_b, min_len=30)
    d = a - b
    n = d.size
    lag = cfg.dm_lag if cfg.dm_lag is not None else int(math.floor(n ** (1.0 / 3.0) + 1e-12))
    lag = min(lag, n - 1)
    mean = float(d.mean())
    omega = newey_west_variance(d, lag)
    if omega <= 0 or not np.isfinite(omega):
        if mean == 0:
            return DMResult(0.0, 1.0, "none", n, lag)
        stat = math.copysign(math.inf, mean)
        return DMResult(stat, 0.0, "A" if stat < 0 else "B", n, lag)
    stat = mean / math.sqrt(omega / n)
    p = math.erfc(abs(stat) / math.sqrt(2.0))
    better = "A" if stat < 0 else "B" if stat > 0 else "none"
    return DMResult(stat, p, better, n, lag)


# ------------------------------------------------------------------ reports

@dataclass
class MetricsReport:
    model: str
    variant: str
    seed: int
    horizon: str
    level: str
    pool: str
    n: int
    PICP: float
    PIAW: float
    Winkler: float
    CWC: float
    SMAPE: float = float("nan")
    DStat: float = float("nan")
    TheilsU: float = float("nan")
    best_epoch: int = -1
    best_val_loss: float = float("nan")


REPORT_COLUMNS = tuple(f.name for f in fields(MetricsReport))


def interval_report(lower, upper, y, cfg: MetricsConfig = MetricsConfig(), **tags) -> MetricsReport:
    p = picp(lower, upper, y)
    w = piaw(lower, upper, y, cfg)
    return MetricsReport(PICP=p, PIAW=w, Winkler=winkler(lower, upper, y, cfg), CWC=cwc(p, w, cfg),
                         n=int(np.size(y)), **tags)


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_metrics_csv(reports, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            row = asdict(r)
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def read_metrics_csv(path) -> list[MetricsReport]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise DataError(f"{path}: metrics header does not match {','.join(REPORT_COLUMNS)}")
    types = {f.name: f.type for f in fields(MetricsReport)}
    out = []
    for row in rows[1:]:
        vals = {}
        for c, v in zip(REPORT_COLUMNS, row):
            t = types[c]
            vals[c] = int(v) if t == "int" else float(v) if t == "float" else v
        out.append(MetricsReport(**vals))
    return out
