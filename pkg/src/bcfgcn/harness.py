"""Training loop, rolling evaluation, multi-step backtests, ablations and seed sweeps."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (PreparedData, SplitSpec, SyntheticConfig, clean_panel, load_price_csv, make_window,
                   prepare, synthesize_panel)
from .errors import ConfigError, DataError
from .graph import Hypergraph, MarketGraph, build_correlation_graph, build_hypergraph
from .metrics import MetricsConfig, MetricsReport, dstat, interval_report, smape, theils_u
from .models import (MODEL_KINDS, IntervalModel, LubeConfig, ModelConfig, build_model, load_checkpoint,
                     lube_loss, save_checkpoint, to_bounds)
from .optim import AdamState, PlateauScheduler, adam_step, clip_grad_norm

DEFAULT_EPOCHS = {"bcf-gcn": 200, "lstm": 60, "gru": 60, "gcn": 80, "hgnn": 120}
DISPLAY_NAMES = {"bcf-gcn": "BCF-GCN", "lstm": "LSTM", "gru": "GRU", "gcn": "GCN", "hgnn": "HGNN"}
ABLATION_VARIANTS = (
    ("Full (Proposed)", {}),
    ("Static Alpha", {"static_alpha": True}),
    ("No Log Chaos", {"no_log_chaos": True}),
    ("No Regime Gate", {"no_regime_gate": True}),
    ("No Tent Chaos", {"no_tent_chaos": True}),
)
ABLATION_FLAGS = ("static_alpha", "no_log_chaos", "no_regime_gate", "no_tent_chaos")


# ------------------------------------------------------------------ config

@dataclass
class ExperimentConfig:
    model: str = "bcf-gcn"
    seed: int = 42
    lookback: int = 40
    max_epochs: int | None = None  # None picks the per-model default
    dropout: float | None = None  # None: 0.15 for bcf-gcn, 0.10 for baselines
    lr: float = 0.001
    weight_decay: float = 0.0001
    grad_clip: float = 3.0
    patience: int = 40
    scheduler_patience: int = 10
    scheduler_factor: float = 0.5
    min_lr: float = 1e-5
    train_snapshots: int = 40
    val_snapshots: int = 20
    graph_threshold: float = 0.30
    horizon: int = 5
    split: dict = field(default_factory=lambda: {"train": 0.70, "val": 0.15, "test": 0.15})
    network: dict = field(default_factory=dict)  # extra ModelConfig fields
    ablation: dict = field(default_factory=dict)  # ABLATION_FLAGS -> bool
    lube: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"synthetic": {}})

    def validate(self) -> "ExperimentConfig":
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model: unknown kind {self.model!r}; expected one of {MODEL_KINDS}")
        sources = [k for k in ("csv", "synthetic") if k in self.data]
        if len(sources) != 1 or set(self.data) - {"csv", "synthetic"}:
            raise ConfigError("data: exactly one of 'csv' or 'synthetic' is required")
        bad = set(self.ablation) - set(ABLATION_FLAGS)
        if bad:
            raise ConfigError(f"ablation: unknown flags {sorted(bad)}")
        if any(self.ablation.values()) and self.model != "bcf-gcn":
            raise ConfigError("ablation: flags apply only to the bcf-gcn model")
        for name in ("lookback", "patience", "train_snapshots", "val_snapshots", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be a positive integer")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ConfigError("max_epochs: must be a positive integer")
        if self.lr <= 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive; weight_decay non-negative")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout: must lie in [0, 1)")
        # the remaining sections validate themselves on construction
        self.model_config(), self.lube_config(), self.metrics_config(), self.split_spec()
        if "synthetic" in self.data:
            self.synthetic_config().validate()
        return self

    @property
    def epochs(self) -> int:
        return self.max_epochs if self.max_epochs is not None else DEFAULT_EPOCHS[self.model]

    def model_config(self) -> ModelConfig:
        known = {f.name for f in fields(ModelConfig)} - {"kind", "dropout", *ABLATION_FLAGS}
        bad = set(self.network) - known
        if bad:
            raise ConfigError(f"network: unknown fields {sorted(bad)}")
        dropout = self.dropout if self.dropout is not None else (0.15 if self.model == "bcf-gcn" else 0.10)
        return ModelConfig(kind=self.model, dropout=dropout, **self.network,
                           **{k: bool(v) for k, v in self.ablation.items()})

    def lube_config(self) -> LubeConfig:
        return _build(LubeConfig, self.lube, "lube")

    def metrics_config(self) -> MetricsConfig:
        return _build(MetricsConfig, self.metrics, "metrics")

    def split_spec(self) -> SplitSpec:
        return _build(SplitSpec, self.split, "split")

    def synthetic_config(self) -> SyntheticConfig:
        raw = dict(self.data["synthetic"])
        for k in ("sector_sizes", "factor_vol"):
            if isinstance(raw.get(k), list):
                raw[k] = tuple(raw[k])
        return _build(SyntheticConfig, raw, "data.synthetic")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        bad = set(raw) - known
        if bad:
            raise ConfigError(f"unknown config fields {sorted(bad)}")
        return cls(**copy.deepcopy(raw)).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``dotted.key=value`` strings; values parse as JSON, else stay strings."""
        raw = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, text = item.split("=", 1)
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = text
            parts = key.split(".")
            node = raw
            for part in parts[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"override {key!r}: {part} is not a section")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(raw)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _build(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"{section}: unknown fields {sorted(bad)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def load_data(cfg: ExperimentConfig) -> PreparedData:
    if "csv" in cfg.data:
        panel = clean_panel(load_price_csv(cfg.data["csv"]))
    else:
        panel = synthesize_panel(cfg.synthetic_config())
    return prepare(panel, cfg.lookback, cfg.split_spec())


# ---------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    is_best: bool


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stop_epoch: int = 0
    warnings: list[str] = field(default_factory=list)

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "is_best"])
            for r in self.epochs:
                w.writerow([r.epoch, format(r.train_loss, ".17g"), format(r.val_loss, ".17g"),
                            format(r.lr, ".17g"), int(r.is_best)])


@dataclass
class TrainResult:
    model: IntervalModel
    log: TrainLog
    data: PreparedData
    graph: MarketGraph
    hypergraph: Hypergraph | None
    target_range: float
    config: ExperimentConfig


def build_structures(cfg: ExperimentConfig, data: PreparedData):
    mc = cfg.model_config()
    graph = build_correlation_graph(data.train, cfg.graph_threshold, mc.symmetric_norm)
    hypergraph = build_hypergraph(data.train, mc.hyperedges) if cfg.model == "hgnn" else None
    return graph, hypergraph


def _sample(rng, pool: np.ndarray, k: int, log: TrainLog, what: str) -> np.ndarray:
    if pool.size >= k:
        return rng.choice(pool, size=k, replace=False)
    msg = f"{what}: only {pool.size} targets for {k} snapshots; sampling with replacement"
    if msg not in log.warnings:
        log.warnings.append(msg)
    return rng.choice(pool, size=k, replace=True)


def snapshot_loss(model: IntervalModel, data: PreparedData, t: int, lube: LubeConfig,
                  target_range: float, training: bool, rng=None):
    window = make_window(data.scaled, t, data.lookback)
    center, width = model.forward(window, training=training, rng=rng)
    lower, upper = to_bounds(center, width)
    return lube_loss(lower, upper, data.scaled[:, t:t + 1], lube, target_range)


def train(cfg: ExperimentConfig, data: PreparedData | None = None, progress=None) -> TrainResult:
    """Snapshot-sampled training with plateau LR decay, early stopping and best-state restore.

    One generator seeded from ``cfg.seed`` is consumed in a fixed order:
    weight init, then per epoch train sampling, dropout masks, val sampling.
    """
    cfg.validate()
    data = data if data is not None else load_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    graph, hypergraph = build_structures(cfg, data)
    model = build_model(cfg.model_config(), rng, graph, hypergraph)
    lube = cfg.lube_config()

    train_pool, val_pool = data.train_targets(), data.val_targets()
    val_start, test_start, _ = data.bounds
    target_range = float(np.ptp(data.scaled[:, train_pool]))
    if target_range <= 0:
        raise DataError("training targets have zero range")

    params = model.parameters()
    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(lr=cfg.lr, patience=cfg.scheduler_patience,
                             factor=cfg.scheduler_factor, min_lr=cfg.min_lr)
    log = TrainLog(warnings=list(data.warnings) + list(graph.warnings))
    best_state, since_best = model.state(), 0

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for t in _sample(rng, train_pool, cfg.train_snapshots, log, "train"):
            assert data.lookback <= t < val_start, f"train target {t} outside train segment"
            loss = snapshot_loss(model, data, int(t), lube, target_range, True, rng)
            T.backward(loss)
            clip_grad_norm(params, cfg.grad_clip)
            adam_step(params, adam)
            losses.append(float(loss.value[0, 0]))

        val_losses = []
        with T.no_grad():
            for t in _sample(rng, val_pool, cfg.val_snapshots, log, "val"):
                assert val_start <= t < test_start, f"val target {t} outside val segment"
                val_losses.append(float(snapshot_loss(model, data, int(t), lube, target_range,
                                                      False).value[0, 0]))
        val_loss = float(np.mean(val_losses))
        adam.lr = sched.step(val_loss)

        improved = val_loss < log.best_val_loss
        if improved:
            log.best_val_loss, log.best_epoch = val_loss, epoch
            best_state, since_best = model.state(), 0
        else:
            since_best += 1
        log.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, adam.lr, improved))
        log.stop_epoch = epoch
        if progress is not None:
            progress(log.epochs[-1])
        if since_best >= cfg.patience:
            break

    model.load_state(best_state)
    return TrainResult(model, log, data, graph, hypergraph, target_range, cfg)


# -------------------------------------------------------------- evaluation

@dataclass
class LeakAudit:
    checks: int = 0
    violations: list[str] = field(default_factory=list)

    def check(self, ok: bool, msg: str):
        self.checks += 1
        if not ok:
            self.violations.append(msg)


def audit_fit_sources(data: PreparedData, audit: LeakAudit, first_target: int):
    """The graph and scaler read only the training segment, which precedes every target."""
    audit.check(data.train.segment == "train" and data.train.offset == 0,
                "graph/scaler source is not the training segment")
    train_end = data.train.offset + data.train.n_steps
    audit.check(train_end <= first_target, f"training data reaches index {train_end - 1} "
                f">= first target {first_target}")
    expected = data.returns.returns[:, :train_end]
    audit.check(np.array_equal(data.train.returns, expected), "training segment differs from its range")


@dataclass
class Forecasts:
    """Per-target interval forecasts, arrays shaped (targets, stocks)."""

    targets: np.ndarray
    dates: tuple[str, ...]
    tickers: tuple[str, ...]
    lower: np.ndarray
    center: np.ndarray
    upper: np.ndarray
    actual: np.ndarray
    level: str = "return"

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "ticker", "lower", "center", "upper", "level", "actual"])
            for k, date in enumerate(self.dates):
                for i, tic in enumerate(self.tickers):
                    w.writerow([date, tic, format(self.lower[k, i], ".17g"),
                                format(self.center[k, i], ".17g"), format(self.upper[k, i], ".17g"),
                                self.level, format(self.actual[k, i], ".17g")])


def read_forecasts_csv(path) -> Forecasts:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"forecasts file not found: {p}")
    with p.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    need = {"date", "ticker", "lower", "center", "upper", "level", "actual"}
    if not rows or not need <= set(rows[0]):
        raise DataError(f"{p}: expected columns {sorted(need)}")
    dates = tuple(dict.fromkeys(r["date"] for r in rows))
    tickers = tuple(dict.fromkeys(r["ticker"] for r in rows))
    if len(rows) != len(dates) * len(tickers):
        raise DataError(f"{p}: rows do not form a full date x ticker grid")
    shape = (len(dates), len(tickers))

    def col(name):
        return np.array([float(r[name]) for r in rows]).reshape(shape)

    return Forecasts(np.arange(len(dates)), dates, tickers, col("lower"), col("center"),
                     col("upper"), col("actual"), rows[0]["level"])


def _point_metrics(actual: np.ndarray, center: np.ndarray) -> tuple[float, float, float]:
    """SMAPE pooled; DStat and Theil's U averaged over per-stock series."""
    s = smape(actual, center)
    ds, tu = [], []
    for i in range(actual.shape[1]):
        if actual.shape[0] >= 2:
            ds.append(dstat(actual[:, i], center[:, i]))
            try:
                tu.append(theils_u(actual[:, i], center[:, i]))
            except DataError:
                pass
    return s, (float(np.mean(ds)) if ds else math.nan), (float(np.mean(tu)) if tu else math.nan)


def rolling_evaluate(result: TrainResult, targets: np.ndarray | None = None,
                     audit: LeakAudit | None = None) -> tuple[Forecasts, MetricsReport]:
    """One-step-ahead forecasts over the test segment with frozen parameters."""
    model, data, cfg = result.model, result.data, result.config
    targets = data.test_targets() if targets is None else np.asarray(targets)
    audit = audit if audit is not None else LeakAudit()
    audit_fit_sources(data, audit, int(targets.min()))
    before = model.state_hash()
    n = data.scaled.shape[0]
    lower, center, upper = (np.empty((targets.size, n)) for _ in range(3))
    for k, t in enumerate(targets):
        t = int(t)
        window = make_window(data.scaled, t, data.lookback)
        cols = np.arange(t - data.lookback, t)
        audit.check(cols.max() < t and np.array_equal(window, data.scaled[:, cols]),
                    f"window for target {t} reads index >= {t}")
        c, w = model.predict(window)
        lower[k], center[k], upper[k] = c - w, c, c + w
    if model.state_hash() != before:
        raise RuntimeError("model parameters changed during evaluation")
    actual = data.scaled[:, targets].T.copy()
    fc = Forecasts(targets, tuple(data.returns.dates[int(t)] for t in targets), data.returns.tickers,
                   lower, center, upper, actual, "return")
    report = evaluate_forecasts(fc, cfg.metrics_config(), model=DISPLAY_NAMES[cfg.model],
                                variant="", seed=cfg.seed, horizon="D1", pool="test:stock-x-step",
                                best_epoch=result.log.best_epoch, best_val_loss=result.log.best_val_loss)
    return fc, report


def evaluate_forecasts(fc: Forecasts, mcfg: MetricsConfig, **tags) -> MetricsReport:
    rep = interval_report(fc.lower, fc.upper, fc.actual, mcfg, level=fc.level, **tags)
    rep.SMAPE, rep.DStat, rep.TheilsU = _point_metrics(fc.actual, fc.center)
    return rep


def constant_width_baseline(result: TrainResult, coverage: float = 0.90,
                            targets: np.ndarray | None = None) -> tuple[Forecasts, MetricsReport, float]:
    """Center 0, half-width = training quantile of |y| giving the requested empirical coverage."""
    data, cfg = result.data, result.config
    y_train = np.abs(data.scaled[:, data.train_targets()]).reshape(-1)
    half = float(np.quantile(y_train, coverage, method="higher"))
    targets = data.test_targets() if targets is None else np.asarray(targets)
    actual = data.scaled[:, targets].T.copy()
    zero = np.zeros_like(actual)
    fc = Forecasts(targets, tuple(data.returns.dates[int(t)] for t in targets), data.returns.tickers,
                   zero - half, zero, zero + half, actual, "return")
    rep = evaluate_forecasts(fc, cfg.metrics_config(), model="ConstantWidth", variant="", seed=cfg.seed,
                             horizon="D1", pool="test:stock-x-step")
    return fc, rep, half


def multi_step_backtest(result: TrainResult, horizon: int | None = None,
                        targets: np.ndarray | None = None) -> tuple[dict[str, Forecasts], dict[str, MetricsReport], list[str]]:
    """Price-level D1 and pooled D1..DH intervals from recursive one-step forecasts.

    Return index t maps prices[:, t] -> prices[:, t + 1]. At step h the point path
    grows by the predicted center and the half-width is w_1 * sqrt(h), both in raw
    return units, applied to the previous point price.
    """
    model, data, cfg = result.model, result.data, result.config
    horizon = horizon if horizon is not None else cfg.horizon
    targets = data.test_targets() if targets is None else np.asarray(targets)
    prices = data.panel.prices
    mean, std = data.scaler.mean, data.scaler.std
    n_steps = data.returns.n_steps
    warnings = []
    before = model.state_hash()

    rows = {"lower": [], "center": [], "upper": [], "actual": [], "h": [], "origin": []}
    for t in targets:
        t = int(t)
        h_max = min(horizon, n_steps - t)
        if h_max < horizon:
            warnings.append(f"origin {data.returns.dates[t]}: horizon truncated to {h_max}")
        window = make_window(data.scaled, t, data.lookback).copy()
        base = prices[:, t].copy()
        w1 = None
        for h in range(1, h_max + 1):
            c, w = model.predict(window)
            if w1 is None:
                w1 = w * std
            c_raw = c * std + mean
            half = w1 * math.sqrt(h)
            rows["lower"].append(base * (1.0 + c_raw - half))
            rows["upper"].append(base * (1.0 + c_raw + half))
            base = base * (1.0 + c_raw)
            rows["center"].append(base)
            rows["actual"].append(prices[:, t + h])
            rows["h"].append(h)
            rows["origin"].append(t)
            window = np.concatenate([window[:, 1:], c[:, None]], axis=1)
    if model.state_hash() != before:
        raise RuntimeError("model parameters changed during backtest")

    arr = {k: np.asarray(v) for k, v in rows.items()}
    mcfg = cfg.metrics_config()
    tags = dict(model=DISPLAY_NAMES[cfg.model], variant="", seed=cfg.seed,
                best_epoch=result.log.best_epoch, best_val_loss=result.log.best_val_loss)
    forecasts, reports = {}, {}
    for name, mask in (("D1", arr["h"] == 1), (f"D1-D{horizon}", arr["h"] >= 1)):
        sel_origins = arr["origin"][mask]
        fc = Forecasts(sel_origins, tuple(data.returns.dates[int(t)] for t in sel_origins),
                       data.returns.tickers, arr["lower"][mask], arr["center"][mask],
                       arr["upper"][mask], arr["actual"][mask], "price")
        rep = interval_report(fc.lower, fc.upper, fc.actual, mcfg, level="price", horizon=name,
                              pool=f"test:stock-x-origin-x-h<={1 if name == 'D1' else horizon}", **tags)
        # point metrics run along each (stock, h) series of origins
        s_list, d_list, u_list = [], [], []
        for h in np.unique(arr["h"][mask]):
            hm = arr["h"] == h
            s, d, u = _point_metrics(arr["actual"][hm], arr["center"][hm])
            s_list.append(s)
            d_list.append(d)
            u_list.append(u)
        rep.SMAPE = float(np.mean(s_list))
        rep.DStat = float(np.nanmean(d_list))
        rep.TheilsU = float(np.nanmean(u_list))
        forecasts[name], reports[name] = fc, rep
    return forecasts, reports, warnings


# ---------------------------------------------------------- sweeps / grids

def run_ablation(base: ExperimentConfig, data: PreparedData | None = None, progress=None):
    """Train and evaluate the five ablation variants on identical data and seed."""
    if base.model != "bcf-gcn":
        raise ConfigError("ablation runs only for the bcf-gcn model")
    data = data if data is not None else load_data(base)
    out = []
    for name, flags in ABLATION_VARIANTS:
        cfg = replace(base, ablation={k: bool(flags.get(k, False)) for k in ABLATION_FLAGS}).validate()
        res = train(cfg, data, progress)
        fc, rep = rolling_evaluate(res)
        rep.variant = name
        out.append((name, res, fc, rep))
    return out


def summarize_seeds(reports: list[MetricsReport]) -> list[MetricsReport]:
    """Per-seed rows followed by mean and std (population) rows per model."""
    out = list(reports)
    metrics = ("PICP", "PIAW", "Winkler", "CWC", "SMAPE", "DStat", "TheilsU", "best_val_loss")
    for model in dict.fromkeys(r.model for r in reports):
        rows = [r for r in reports if r.model == model]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            vals = {m: float(fn([getattr(r, m) for r in rows])) for m in metrics}
            out.append(MetricsReport(model=model, variant=rows[0].variant, seed=-1, horizon=rows[0].horizon,
                                     level=rows[0].level, pool=f"{stat}-over-{len(rows)}-seeds",
                                     n=rows[0].n, best_epoch=int(round(np.mean([r.best_epoch for r in rows])))
                                     if stat == "mean" else -1, **vals))
    return out


def multi_seed_run(base: ExperimentConfig, seeds=(42, 123, 456), data: PreparedData | None = None,
                   progress=None):
    data = data if data is not None else load_data(base)
    runs = []
    for seed in seeds:
        cfg = replace(base, seed=int(seed)).validate()
        res = train(cfg, data, progress)
        fc, rep = rolling_evaluate(res)
        runs.append((seed, res, fc, rep))
    return runs, summarize_seeds([r[3] for r in runs])


# ------------------------------------------------------------- persistence

def save_run_checkpoint(result: TrainResult, path):
    save_checkpoint(result.model, path, result.config.config_hash(), result.config.seed,
                    extra={"best_epoch": result.log.best_epoch,
                           "best_val_loss": result.log.best_val_loss,
                           "stop_epoch": result.log.stop_epoch,
                           "target_range": result.target_range})


def restore_run(cfg: ExperimentConfig, checkpoint_path, data: PreparedData | None = None) -> TrainResult:
    """Rebuild a trained model from its config and checkpoint without retraining."""
    doc = load_checkpoint(checkpoint_path)
    if doc["config_hash"] != cfg.config_hash():
        raise ConfigError(f"{checkpoint_path}: checkpoint was trained with a different config")
    data = data if data is not None else load_data(cfg)
    graph, hypergraph = build_structures(cfg, data)
    model = build_model(cfg.model_config(), np.random.default_rng(cfg.seed), graph, hypergraph)
    model.load_state(doc)
    extra = doc.get("extra", {})
    log = TrainLog(best_epoch=int(extra.get("best_epoch", 0)),
                   best_val_loss=float(extra.get("best_val_loss", math.nan)),
                   stop_epoch=int(extra.get("stop_epoch", 0)))
    return TrainResult(model, log, data, graph, hypergraph, float(extra.get("target_range", math.nan)), cfg)
