import json
import math

import numpy as np
import pytest

from bcfgcn.errors import ConfigError
from bcfgcn.harness import (ABLATION_VARIANTS, ExperimentConfig, LeakAudit, TrainLog, constant_width_baseline,
                            load_data, multi_seed_run, multi_step_backtest, read_forecasts_csv, restore_run,
                            rolling_evaluate, run_ablation, save_run_checkpoint, train)
from bcfgcn.metrics import write_metrics_csv

SMALL_NET = {"embed_dim": 4, "graph_hidden": 8, "lstm_hidden": 12, "baseline_hidden": 8}
SMALL_DATA = {"synthetic": {"sector_sizes": [2, 2, 2], "n_days": 320}}


def small_cfg(**kw):
    base = dict(lookback=10, max_epochs=4, train_snapshots=6, val_snapshots=4, network=dict(SMALL_NET),
                data=json.loads(json.dumps(SMALL_DATA)))
    base.update(kw)
    return ExperimentConfig(**base).validate()


@pytest.fixture(scope="module")
def small_run():
    cfg = small_cfg()
    return train(cfg)


# ------------------------------------------------------------------ config

def test_config_round_trip_and_hash(tmp_path):
    cfg = small_cfg()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.load(path)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert len(cfg.config_hash()) == 16
    assert small_cfg(seed=1).config_hash() != cfg.config_hash()


def test_config_overrides():
    cfg = small_cfg().with_overrides(["seed=7", "lube.steepness=20", "ablation.no_tent_chaos=true",
                                      "data.synthetic.n_days=400"])
    assert cfg.seed == 7 and cfg.lube_config().steepness == 20
    assert cfg.model_config().no_tent_chaos is True
    assert cfg.synthetic_config().n_days == 400
    with pytest.raises(ConfigError, match="key=value"):
        cfg.with_overrides(["seed"])


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(tmp_path / "bad.json")
    with pytest.raises(ConfigError, match="unknown config fields"):
        ExperimentConfig.from_dict({"epochz": 3})
    with pytest.raises(ConfigError, match="lube"):
        ExperimentConfig.from_dict({"lube": {"k": 3}})
    with pytest.raises(ConfigError, match="exactly one"):
        ExperimentConfig.from_dict({"data": {"csv": "a.csv", "synthetic": {}}})
    with pytest.raises(ConfigError, match="only to the bcf-gcn"):
        ExperimentConfig.from_dict({"model": "lstm", "ablation": {"no_tent_chaos": True}})
    with pytest.raises(ConfigError, match="model"):
        ExperimentConfig.from_dict({"model": "mlp"})


def test_default_epochs_and_dropout():
    assert ExperimentConfig().epochs == 200
    assert ExperimentConfig(model="hgnn").epochs == 120
    assert ExperimentConfig().model_config().dropout == 0.15
    assert ExperimentConfig(model="gru").model_config().dropout == 0.10


# ---------------------------------------------------------------- training

def test_training_is_deterministic(small_run, tmp_path):
    again = train(small_cfg())
    assert again.model.state_hash() == small_run.model.state_hash()
    small_run.log.write_csv(tmp_path / "a.csv")
    again.log.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_best_state_restored(small_run):
    log = small_run.log
    best = [r for r in log.epochs if r.is_best]
    assert [r.val_loss for r in best] == sorted([r.val_loss for r in best], reverse=True)
    assert log.best_epoch == best[-1].epoch
    assert log.best_val_loss == min(r.val_loss for r in log.epochs)


def test_early_stopping_after_patience():
    # lr is tiny so validation loss barely moves; patience 2 stops soon after the last best
    res = train(small_cfg(max_epochs=30, patience=2, lr=1e-9, weight_decay=0.0))
    log = res.log
    assert log.stop_epoch < 30
    assert log.stop_epoch - log.best_epoch == 2
    assert not any(r.is_best for r in log.epochs if r.epoch > log.best_epoch)


def test_sampling_with_replacement_warns():
    res = train(small_cfg(max_epochs=1, val_snapshots=500))
    assert any("with replacement" in w for w in res.log.warnings)


def test_training_loss_drops_on_six_stocks():
    cfg = small_cfg(max_epochs=40, train_snapshots=20, val_snapshots=10,
                    data={"synthetic": {"sector_sizes": [2, 2, 2], "n_days": 600}})
    log = train(cfg).log
    first = log.epochs[0].train_loss
    best = log.epochs[log.best_epoch - 1].train_loss
    assert best <= 0.7 * first


# -------------------------------------------------------------- evaluation

def test_rolling_forecasts_shape_and_determinism(small_run, tmp_path):
    audit = LeakAudit()
    fc, rep = rolling_evaluate(small_run, audit=audit)
    n_test = small_run.data.test_targets().size
    assert fc.lower.shape == (n_test, 6) and rep.n == n_test * 6
    assert not audit.violations and audit.checks == n_test + 3
    assert np.all(fc.lower < fc.upper)
    fc2, rep2 = rolling_evaluate(small_run)
    assert np.array_equal(fc.center, fc2.center) and repr(rep) == repr(rep2)
    fc.write_csv(tmp_path / "f.csv")
    back = read_forecasts_csv(tmp_path / "f.csv")
    assert np.array_equal(back.upper, fc.upper) and back.dates == fc.dates
    assert len((tmp_path / "f.csv").read_text().splitlines()) == n_test * 6 + 1


def test_constant_width_baseline_is_calibrated(small_run):
    _, rep, half = constant_width_baseline(small_run)
    y = np.abs(small_run.data.scaled[:, small_run.data.train_targets()])
    assert np.mean(y <= half) >= 0.90
    assert rep.PICP > 0.5 and half > 0


def test_backtest_h1_matches_rolling(small_run):
    fc_ret, _ = rolling_evaluate(small_run)
    fcs, reps, warnings = multi_step_backtest(small_run, horizon=1)
    d1 = fcs["D1"]
    data = small_run.data
    t = data.test_targets()
    p0 = data.panel.prices[:, t].T
    std, mean = data.scaler.std, data.scaler.mean
    assert np.allclose(d1.lower, p0 * (1 + fc_ret.lower * std + mean), rtol=1e-12)
    assert np.allclose(d1.upper, p0 * (1 + fc_ret.upper * std + mean), rtol=1e-12)
    assert np.all(d1.lower < d1.center) and np.all(d1.center < d1.upper)
    assert warnings == []


def test_backtest_width_grows_with_horizon(small_run):
    before = small_run.model.state_hash()
    fcs, reps, warnings = multi_step_backtest(small_run, horizon=5)
    assert set(reps) == {"D1", "D1-D5"}
    assert reps["D1-D5"].PIAW >= reps["D1"].PIAW
    assert len(warnings) == 4  # the last four origins run out of future prices
    assert small_run.model.state_hash() == before
    assert reps["D1"].level == "price"


def test_checkpoint_restore(small_run, tmp_path):
    save_run_checkpoint(small_run, tmp_path / "ck.json")
    back = restore_run(small_run.config, tmp_path / "ck.json")
    assert back.model.state_hash() == small_run.model.state_hash()
    assert back.target_range == small_run.target_range
    assert back.log.best_epoch == small_run.log.best_epoch
    with pytest.raises(ConfigError, match="different config"):
        restore_run(small_cfg(seed=5), tmp_path / "ck.json")


# ------------------------------------------------------------------ sweeps

def test_ablation_rows(tmp_path):
    cfg = small_cfg(max_epochs=1)
    rows = run_ablation(cfg, load_data(cfg))
    assert [r[0] for r in rows] == [v[0] for v in ABLATION_VARIANTS]
    counts = [r[1].model.n_parameters() for r in rows]
    assert all(c < counts[0] for c in counts[1:])
    with pytest.raises(ConfigError):
        run_ablation(small_cfg(model="lstm"))


def test_multi_seed_rows(tmp_path):
    cfg = small_cfg(max_epochs=1)
    runs, table = multi_seed_run(cfg, seeds=(1, 2, 1), data=load_data(cfg))
    assert len(table) == 3 + 2
    assert repr(table[0]) == repr(table[2])
    mean, std = table[3], table[4]
    assert mean.pool == "mean-over-3-seeds" and std.pool == "std-over-3-seeds"
    assert math.isclose(mean.PICP, np.mean([r.PICP for r in table[:3]]), rel_tol=1e-12)
    write_metrics_csv(table, tmp_path / "m.csv")


@pytest.mark.parametrize("kind", ["lstm", "gru", "gcn", "hgnn"])
def test_baselines_train_and_evaluate(kind):
    res = train(small_cfg(model=kind, max_epochs=2))
    fc, rep = rolling_evaluate(res)
    assert 0.0 <= rep.PICP <= 1.0 and rep.model == kind.upper()
    assert np.all(fc.upper - fc.lower >= 0.004)
