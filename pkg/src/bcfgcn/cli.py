"""Command-line entry point: ``bcfgcn <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import re
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import adf_statistic, clean_panel, compute_returns, load_price_csv, synthesize_panel, write_price_csv
from .errors import ConfigError, DataError, NumericError, UsageError
from .graph import write_edge_list
from .harness import (ExperimentConfig, constant_width_baseline, multi_seed_run, multi_step_backtest,
                      read_forecasts_csv, restore_run, rolling_evaluate, run_ablation,
                      save_run_checkpoint, train)
from .metrics import (MetricsConfig, MetricsReport, diebold_mariano, read_metrics_csv,
                      winkler_scores, write_metrics_csv)

OUT_ENV = "BCFGCN_OUT"
COMMANDS = ("synth", "ingest", "train", "eval", "backtest", "ablate", "seeds", "dm", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config_required=False):
    p.add_argument("--config", required=config_required, help="experiment config JSON")
    p.add_argument("--out", default=None, help=f"output root (default ${OUT_ENV} or ./runs)")
    p.add_argument("--run-id", default=None, help="run directory name (default derived from the config)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key config override, repeatable")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bcfgcn", description="Graph-based prediction-interval forecasting.")
    parser.add_argument("--version", action="version", version=f"bcfgcn {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    _common(sub.add_parser("synth", help="generate a synthetic price panel"))
    p = sub.add_parser("ingest", help="clean a price CSV and report diagnostics")
    _common(p)
    p.add_argument("--csv", required=True, help="price CSV: date,TICKER1,...")
    p = sub.add_parser("train", help="train a model and evaluate it on the test segment")
    _common(p)
    p.add_argument("--no-eval", action="store_true", help="skip the rolling test evaluation")
    for name, text in (("eval", "rolling one-step evaluation of a trained run"),
                       ("backtest", "price-level D1 and multi-step backtest of a trained run")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--run", required=True, help="run directory written by 'train'")
    _common(sub.add_parser("ablate", help="train and evaluate the five ablation variants"))
    p = sub.add_parser("seeds", help="train and evaluate over several seeds")
    _common(p)
    p.add_argument("--seeds", default="42,123,456", help="comma-separated seeds")
    p = sub.add_parser("dm", help="Diebold-Mariano test on two forecast files")
    p.add_argument("--a", required=True, help="forecasts CSV of model A")
    p.add_argument("--b", required=True, help="forecasts CSV of model B")
    p.add_argument("--alpha", type=float, default=0.10, help="Winkler miscoverage level")
    p.add_argument("--lag", type=int, default=None, help="Newey-West truncation lag")
    p.add_argument("--out", default=None, help="optional output root for a dm.json run")
    p.add_argument("--run-id", default=None)
    p.add_argument("--force", action="store_true")
    p = sub.add_parser("report", help="merge metrics from run directories into comparison tables")
    p.add_argument("runs", nargs="*", help="run directories holding metrics.csv")
    p.add_argument("--out", default=None)
    p.add_argument("--run-id", default="report")
    p.add_argument("--force", action="store_true")
    return parser


# ------------------------------------------------------------------ helpers

def _say(args, *parts):
    if not getattr(args, "quiet", False):
        print(*parts)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return cfg.with_overrides(overrides) if overrides else cfg.validate()


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def _run_dir(args, default_id: str) -> Path:
    path = _out_root(args) / (args.run_id or default_id)
    if path.exists():
        if not args.force:
            raise UsageError(f"run directory {path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_manifest(run: Path, command: str, argv, cfg: ExperimentConfig | None, started: str, extra=None):
    doc = {
        "command": command,
        "argv": list(argv),
        "config_hash": cfg.config_hash() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "versions": {"bcfgcn": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "started": started,
        "finished": _now(),
        **(extra or {}),
    }
    (run / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save_config(run: Path, cfg: ExperimentConfig):
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _progress(args):
    if args.quiet:
        return None
    return lambda r: print(f"  epoch {r.epoch:4d}  train {r.train_loss:.4f}  val {r.val_loss:.4f}"
                           f"  lr {r.lr:.2e}{'  *' if r.is_best else ''}", flush=True)


def _show(reports, args):
    if not args.quiet:
        print(format_table(reports, ("model", "variant", "seed", "horizon", "level", "PICP", "PIAW",
                                     "Winkler", "CWC")))


def _restore(run_path):
    run = Path(run_path)
    if not (run / "config.json").is_file() or not (run / "checkpoint.json").is_file():
        raise DataError(f"{run}: not a trained run (config.json and checkpoint.json required)")
    cfg = ExperimentConfig.load(run / "config.json")
    return restore_run(cfg, run / "checkpoint.json")


# ----------------------------------------------------------------- commands

def cmd_synth(args, argv):
    started = _now()
    cfg = _load_config(args)
    if "synthetic" not in cfg.data:
        raise ConfigError("data: synth needs a 'synthetic' data section")
    scfg = cfg.synthetic_config()
    panel = synthesize_panel(scfg)
    run = _run_dir(args, f"synth-{cfg.config_hash()}")
    write_price_csv(panel, run / "prices.csv")
    _save_config(run, cfg)
    _write_manifest(run, "synth", argv, cfg, started, {"n_stocks": len(panel.tickers), "n_days": len(panel.dates)})
    _say(args, f"wrote {run / 'prices.csv'} ({len(panel.tickers)} stocks x {len(panel.dates)} days)")


def cmd_ingest(args, argv):
    started = _now()
    raw = load_price_csv(args.csv)
    panel = clean_panel(raw)
    returns = compute_returns(panel)
    run = _run_dir(args, f"ingest-{Path(args.csv).stem}")
    write_price_csv(panel, run / "prices_clean.csv")
    rows = []
    for i, tic in enumerate(panel.tickers):
        stat, reject = adf_statistic(returns.returns[i])
        rows.append((tic, stat, reject))
    with (run / "adf.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "adf_stat", "stationary_5pct"])
        for tic, stat, reject in rows:
            w.writerow([tic, format(stat, ".17g"), int(reject)])
    _write_manifest(run, "ingest", argv, None, started,
                    {"source": str(args.csv), "rows_in": len(raw.dates), "rows_kept": len(panel.dates),
                     "missing_cells_in": raw.n_missing})
    _say(args, f"kept {len(panel.dates)} of {len(raw.dates)} days; "
               f"{sum(r[2] for r in rows)} of {len(rows)} return series stationary at 5%")


def cmd_train(args, argv):
    started = _now()
    cfg = _load_config(args)
    run = _run_dir(args, f"train-{cfg.model}-{cfg.config_hash()}-s{cfg.seed}")
    _save_config(run, cfg)
    _say(args, f"training {cfg.model} (seed {cfg.seed}) -> {run}")
    result = train(cfg, progress=_progress(args))
    save_run_checkpoint(result, run / "checkpoint.json")
    result.log.write_csv(run / "trainlog.csv")
    write_edge_list(result.graph, run / "edges.csv", result.data.returns.tickers)
    extra = {"best_epoch": result.log.best_epoch, "stop_epoch": result.log.stop_epoch,
             "warnings": result.log.warnings, "n_parameters": result.model.n_parameters()}
    if not args.no_eval:
        fc, rep = rolling_evaluate(result)
        fc.write_csv(run / "forecasts.csv")
        write_metrics_csv([rep], run / "metrics.csv")
        _show([rep], args)
    _write_manifest(run, "train", argv, cfg, started, extra)


def cmd_eval(args, argv):
    started = _now()
    result = _restore(args.run)
    cfg = result.config
    run = _run_dir(args, f"eval-{Path(args.run).name}")
    fc, rep = rolling_evaluate(result)
    _, base_rep, half = constant_width_baseline(result)
    fc.write_csv(run / "forecasts.csv")
    write_metrics_csv([rep, base_rep], run / "metrics.csv")
    _write_manifest(run, "eval", argv, cfg, started, {"source_run": str(args.run),
                                                      "constant_half_width": half})
    _show([rep, base_rep], args)


def cmd_backtest(args, argv):
    started = _now()
    result = _restore(args.run)
    cfg = result.config
    run = _run_dir(args, f"backtest-{Path(args.run).name}")
    forecasts, reports, warnings = multi_step_backtest(result)
    for name, fc in forecasts.items():
        fc.write_csv(run / f"forecasts_{name}.csv")
    write_metrics_csv(list(reports.values()), run / "metrics.csv")
    _write_manifest(run, "backtest", argv, cfg, started, {"source_run": str(args.run), "warnings": warnings})
    if not args.quiet:
        print(format_table(list(reports.values()), ("model", "horizon", "SMAPE", "DStat", "TheilsU",
                                                    "PICP", "PIAW", "Winkler")))


def cmd_ablate(args, argv):
    started = _now()
    cfg = _load_config(args)
    if cfg.model != "bcf-gcn":
        raise ConfigError("model: ablations apply only to bcf-gcn")
    run = _run_dir(args, f"ablate-{cfg.config_hash()}-s{cfg.seed}")
    _save_config(run, cfg)
    rows = run_ablation(cfg, progress=_progress(args))
    for name, _, fc, _ in rows:
        fc.write_csv(run / f"forecasts_{_slug(name)}.csv")
    write_metrics_csv([r[3] for r in rows], run / "metrics.csv")
    _write_manifest(run, "ablate", argv, cfg, started,
                    {"n_parameters": {name: res.model.n_parameters() for name, res, _, _ in rows}})
    _show([r[3] for r in rows], args)


def cmd_seeds(args, argv):
    started = _now()
    cfg = _load_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds: {exc}") from exc
    if not seeds:
        raise UsageError("--seeds: at least one seed required")
    run = _run_dir(args, f"seeds-{cfg.model}-{cfg.config_hash()}")
    _save_config(run, cfg)
    runs, summary = multi_seed_run(cfg, seeds, progress=_progress(args))
    for seed, _, fc, _ in runs:
        fc.write_csv(run / f"forecasts_s{seed}.csv")
    write_metrics_csv(summary, run / "metrics.csv")
    _write_manifest(run, "seeds", argv, cfg, started, {"seeds": seeds})
    _show(summary, args)


def dm_from_files(path_a, path_b, mcfg: MetricsConfig):
    fa, fb = read_forecasts_csv(path_a), read_forecasts_csv(path_b)
    if fa.dates != fb.dates or fa.tickers != fb.tickers:
        raise DataError(f"{path_a} and {path_b} cover different dates or tickers")
    if not np.array_equal(fa.actual, fb.actual):
        raise DataError(f"{path_a} and {path_b} disagree on realized values")
    la = winkler_scores(fa.lower, fa.upper, fa.actual, mcfg)
    lb = winkler_scores(fb.lower, fb.upper, fb.actual, mcfg)
    return diebold_mariano(la, lb, mcfg)


def cmd_dm(args, argv):
    started = _now()
    mcfg = MetricsConfig(winkler_alpha=args.alpha, dm_lag=args.lag)
    res = dm_from_files(args.a, args.b, mcfg)
    print(f"DM {res.stat!r}  p {res.p_value!r}  better {res.better}  (n={res.n}, lag={res.lag})")
    if args.out:
        run = _run_dir(args, "dm")
        doc = {"a": str(args.a), "b": str(args.b), "stat": res.stat, "p_value": res.p_value,
               "better": res.better, "n": res.n, "lag": res.lag, "alpha": args.alpha}
        (run / "dm.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _write_manifest(run, "dm", argv, None, started)


def cmd_report(args, argv):
    if not args.runs:
        raise UsageError("report: at least one run directory is required")
    reports, dms = [], []
    for r in args.runs:
        path = Path(r) / "metrics.csv"
        if (Path(r) / "dm.json").is_file():
            dms.append(json.loads((Path(r) / "dm.json").read_text(encoding="utf-8")))
            continue
        if not path.is_file():
            raise DataError(f"{path}: metrics file missing")
        reports.extend(read_metrics_csv(path))
    reports.sort(key=lambda r: (r.model, r.seed, r.variant, r.horizon))
    run = _run_dir(args, args.run_id)
    write_metrics_csv(reports, run / "merged.csv")
    text = render_report(reports, dms)
    (run / "tables.txt").write_text(text, encoding="utf-8")
    print(text, end="")


# ------------------------------------------------------------------ tables

def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(reports, columns) -> str:
    rows = [[_cell(getattr(r, c)) for c in columns] for r in reports]
    widths = [max(len(c), *(len(row[k]) for row in rows)) if rows else len(c) for k, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def render_report(reports: list[MetricsReport], dms: list[dict]) -> str:
    """Group rows into the comparison, ablation, seed, backtest and DM table shapes."""
    parts = []
    ablation = [r for r in reports if r.variant]
    summary = [r for r in reports if r.seed < 0]
    price = [r for r in reports if r.level == "price"]
    plain = [r for r in reports if not r.variant and r.level == "return" and r.seed >= 0]
    seeds_seen = {(r.model, r.seed) for r in plain}
    if plain and len({s for _, s in seeds_seen}) <= 1:
        parts.append("Model comparison\n" + format_table(plain, ("model", "PICP", "PIAW", "Winkler", "CWC")))
    elif plain:
        parts.append("Multi-seed results\n" + format_table(
            plain, ("seed", "model", "best_epoch", "best_val_loss", "PICP", "PIAW", "Winkler", "CWC")))
    if summary:
        parts.append("Seed summary\n" + format_table(summary, ("model", "pool", "PICP", "PIAW", "Winkler", "CWC")))
    if ablation:
        parts.append("Ablation\n" + format_table(ablation, ("variant", "seed", "PICP", "PIAW", "Winkler", "CWC")))
    if price:
        parts.append("Backtest\n" + format_table(price, ("model", "horizon", "SMAPE", "DStat", "TheilsU",
                                                         "PICP", "PIAW", "Winkler")))
    if dms:
        lines = ["Comparison  DM statistic  p_value  Better_model"]
        for d in sorted(dms, key=lambda d: (d["a"], d["b"])):
            lines.append(f"{Path(d['a']).parent.name} vs {Path(d['b']).parent.name}  {d['stat']:.4f}  "
                         f"{d['p_value']:.4f}  {d['better']}")
        parts.append("Diebold-Mariano\n" + "\n".join(lines) + "\n")
    return "\n".join(parts)


HANDLERS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
            "backtest": cmd_backtest, "ablate": cmd_ablate, "seeds": cmd_seeds, "dm": cmd_dm,
            "report": cmd_report}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"bcfgcn: a command is required, one of {', '.join(COMMANDS)}")
        HANDLERS[args.command](args, argv)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
