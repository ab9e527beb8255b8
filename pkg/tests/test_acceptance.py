"""Acceptance criteria, one test and one PASS/FAIL line each.

The synthetic-benchmark runs (12 stocks, 1500 days, 60 epochs) are trained once and shared.
Run only this file with ``pytest tests/test_acceptance.py -v``.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

import oracles
from bcfgcn import metrics as M
from bcfgcn import tensor as T
from bcfgcn.chaos import ChaosBranch, RegimeGate, chaotic_branch, iterate_logistic, logistic_map, tent_map
from bcfgcn.graph import (BlockOps, GcnLayer, HgnnLayer, MarketGraph, gcn_layer_forward,
                          hypergraph_from_incidence, hgnn_layer_forward, normalize_adjacency)
from bcfgcn.harness import (ExperimentConfig, LeakAudit, constant_width_baseline, load_data,
                            rolling_evaluate, train)
from bcfgcn.models import (BcfGcn, IntervalHead, LubeConfig, ModelConfig, build_model, gru_layer,
                           lstm_layer, lube_loss, to_bounds)
from bcfgcn.optim import finite_difference_check
from bcfgcn.tensor import Tensor

LINES = []
SEEDS = (42, 123, 456)
VARIANTS = {"full": [], "no_tent": ["ablation.no_tent_chaos=true"], "lstm": ["model=lstm"]}


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    LINES.append(line)
    print(line)
    return ok


class Benchmark:
    """Lazily trained synthetic-benchmark runs keyed by (seed, variant)."""

    def __init__(self):
        self.base = ExperimentConfig(max_epochs=60)
        self.data = load_data(self.base)
        self.runs = {}

    def config(self, seed, variant):
        return self.base.with_overrides([f"seed={seed}", *VARIANTS[variant]])

    def run(self, seed, variant):
        if (seed, variant) not in self.runs:
            t0 = time.perf_counter()
            result = train(self.config(seed, variant), self.data)
            audit = LeakAudit()
            fc, rep = rolling_evaluate(result, audit=audit)
            self.runs[seed, variant] = dict(result=result, fc=fc, rep=rep, audit=audit,
                                            seconds=time.perf_counter() - t0)
        return self.runs[seed, variant]


@pytest.fixture(scope="module")
def bench():
    return Benchmark()


# ------------------------------------------------------------ fast criteria

def _toy_graph(rng, n):
    a = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    a = a + a.T
    return MarketGraph(a, normalize_adjacency(a), 0.3)


def _weighted_sum(fn, shape, rng):
    w = Tensor(rng.normal(size=shape))
    return lambda: T.sum_all(T.mul(fn(), w))


def test_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {}

    p = normalize_adjacency(_toy_graph(rng, 5).adjacency)
    ops = BlockOps(p, 3)
    x = Tensor(rng.normal(size=(15, 3)), requires_grad=True)
    gcn = GcnLayer(3, 4, rng, "g")
    gcn.norm.running_var[...] = 0.7
    for mode in (True, False):
        errs[f"gcn(training={mode})"] = finite_difference_check(
            _weighted_sum(lambda: gcn_layer_forward(ops, x, gcn, mode), (15, 4), rng),
            [x, *gcn.params()], eps=1e-5, grad_floor=1e-5)

    hg = hypergraph_from_incidence(np.array([[1, 0], [1, 0], [1, 1], [0, 1], [0, 1.0]]))
    hx = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    hgnn = HgnnLayer(3, 4, rng, "h")
    errs["hgnn"] = finite_difference_check(_weighted_sum(lambda: hgnn_layer_forward(hg, hx, hgnn), (5, 4), rng),
                                           [hx, *hgnn.params()])

    for name, layer, gates in (("lstm", lstm_layer, 4), ("gru", gru_layer, 3)):
        sx = Tensor(rng.normal(size=(15, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(10, gates * 6)) * 0.5, requires_grad=True)
        b = Tensor(rng.normal(size=(1, gates * 6)) * 0.5, requires_grad=True)
        errs[name] = finite_difference_check(_weighted_sum(lambda: layer(sx, w, b, 3), (15, 6), rng), [sx, w, b])

    z = Tensor(np.tanh(rng.normal(size=(15, 4))), requires_grad=True)
    for kind in ("logistic", "tent"):
        branch = ChaosBranch(kind, 4, rng, "c")
        errs[f"chaos-{kind}"] = finite_difference_check(
            _weighted_sum(lambda: chaotic_branch(z, branch, ops), (15, 4), rng), [z, *branch.params()])
    gate = RegimeGate(4, rng)
    errs["gate"] = finite_difference_check(_weighted_sum(lambda: gate(z), (15, 1), rng), [z, *gate.params()])

    head = IntervalHead(6, rng)
    hh = Tensor(rng.normal(size=(8, 6)), requires_grad=True)
    y8 = rng.normal(scale=0.3, size=(8, 1))

    def head_loss():
        lo, up = to_bounds(*head(hh))
        return lube_loss(lo, up, y8, LubeConfig(), 2.0)

    errs["head+lube"] = finite_difference_check(head_loss, [hh, *head.params()])

    model = BcfGcn(_toy_graph(rng, 4), ModelConfig(), rng)
    window = rng.normal(size=(4, 6))
    y4 = rng.normal(scale=0.3, size=(4, 1))

    def full_loss():
        c, w = model.forward(window, training=True, rng=np.random.default_rng(0))
        lo, up = to_bounds(c, w)
        return lube_loss(lo, up, y4, LubeConfig(), 2.0)

    errs["bcf-gcn(N=4,L=6)"] = finite_difference_check(full_loss, model.parameters(), eps=1e-5,
                                                       n_samples=8, grad_floor=1e-4)
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and secs < 30
    record("gradient correctness", ok, f"max rel err {worst:.2e} over {len(errs)} checks, {secs:.1f} s")
    assert ok, {k: f"{v:.2e}" for k, v in errs.items()}


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    cfg = M.MetricsConfig()
    worst = {k: 0.0 for k in ("PICP", "PIAW", "Winkler", "CWC", "SMAPE", "DStat", "TheilsU")}
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        y = rng.normal(size=n)
        c = y + rng.normal(scale=0.8, size=n)
        w = rng.exponential(0.7, size=n)
        lo, up, f = c - w, c + w, y + rng.normal(size=n)
        L = [a.tolist() for a in (lo, up, y, f)]
        p = M.picp(lo, up, y)
        aw = M.piaw(lo, up, y, cfg)
        pairs = {"PICP": (p, oracles.picp(*L[:3])), "PIAW": (aw, oracles.piaw(*L[:3])),
                 "Winkler": (M.winkler(lo, up, y, cfg), oracles.winkler(*L[:3])),
                 "CWC": (M.cwc(p, aw, cfg), oracles.cwc(p, aw)),
                 "SMAPE": (M.smape(y, f), oracles.smape(L[2], L[3])),
                 "DStat": (M.dstat(y, f), oracles.dstat(L[2], L[3])),
                 "TheilsU": (M.theils_u(y, f), oracles.theils_u(L[2], L[3]))}
        for k, (got, want) in pairs.items():
            worst[k] = max(worst[k], abs(got - want) / max(1.0, abs(want)))

    # hand cases on [0, 1] at alpha 0.1; for y = 1.2 the reference is the exact rational value of the
    # formula at the stored double, correctly rounded (5 is not reachable from the nearest double to 1.2)
    got = [M.winkler([0.0], [1.0], [v]) for v in (0.5, 1.2, -0.1)]
    y12 = Fraction(1.2)
    exact12 = float(1 + 20 * (y12 - 1))
    hand_ok = got[0] == 1.0 and got[2] == 3.0 and got[1] == exact12 and abs(got[1] - 5.0) <= 1e-15 * 5
    ok = max(worst.values()) < 1e-12 and hand_ok
    record("metric oracle equivalence", ok,
           f"worst rel diff {max(worst.values()):.1e} over 7 metrics x 1000 instances; "
           f"Winkler hand cases {got}")
    assert ok


def test_chaotic_map_properties():
    fixed = logistic_map(Tensor(0.75), 4.0).item() == 0.75
    peak = tent_map(Tensor(0.5)).item() == 1.0
    rng = np.random.default_rng(0)
    x = rng.random((1000, 1000))
    r = 3.57 + 0.43 * rng.random((1000, 1000))
    lo = logistic_map(Tensor(x), Tensor(r)).value
    te = tent_map(Tensor(x)).value
    bounded = lo.min() >= 0 and lo.max() <= 1 and te.min() >= 0 and te.max() <= 1
    gap = abs(iterate_logistic(0.3, 4.0, 30) - iterate_logistic(0.3 + 1e-6, 4.0, 30))
    ok = fixed and peak and bounded and gap > 0.1
    record("chaotic-map properties", ok, f"fixed point {fixed}, tent peak {peak}, bounded over 1e6 "
                                         f"{bounded}, divergence after 30 steps {gap:.3f}")
    assert ok


@pytest.mark.slow
def test_interval_contracts():
    rng = np.random.default_rng(77)
    n, lookback = 4, 6
    hg = hypergraph_from_incidence(np.array([[1, 0], [1, 0], [0, 1], [0, 1.0]]))
    kinds = ["bcf-gcn"] * 6 + ["lstm", "gru", "gcn", "hgnn"]
    per_model = 10_000
    forwards = bad = 0
    for k, kind in enumerate(kinds):
        mrng = np.random.default_rng(1000 + k)
        small = {"embed_dim": 4, "graph_hidden": 8, "lstm_hidden": 12, "baseline_hidden": 8}
        model = build_model(ModelConfig(kind=kind, **small), mrng, graph=_toy_graph(mrng, n), hypergraph=hg)
        for p in model.parameters():
            p.value *= mrng.uniform(0.5, 3.0)
        for _ in range(per_model):
            scale = 10.0 ** rng.uniform(-2, 1.5)
            c, w = model.predict(rng.normal(scale=scale, size=(n, lookback)))
            lo, up = to_bounds(c, w)
            bad += int(np.sum(~(lo < up)) + np.sum(np.abs(c) > 0.5) + np.sum(w < 0.002))
            forwards += 1
    ok = bad == 0 and forwards >= 100_000
    record("interval contracts", ok, f"{bad} violations over {forwards} forwards ({forwards * n} intervals)")
    assert ok


def test_dm_sign_convention():
    b = np.arange(40) / 4.0
    const = M.diebold_mariano(b - 0.125, b)
    rng = np.random.default_rng(3)
    lb = rng.exponential(1.0, size=300)
    noisy = M.diebold_mariano(lb - 0.3 + rng.normal(scale=0.05, size=300), lb)
    ok = const.stat < 0 and const.better == "A" and noisy.stat < 0 and noisy.better == "A"
    record("DM sign convention", ok, f"constant margin stat {const.stat}, better {const.better}; "
                                     f"noisy margin stat {noisy.stat:.2f}, better {noisy.better}")
    assert ok


# ------------------------------------------------------ benchmark criteria

@pytest.mark.slow
def test_end_to_end_synthetic_benchmark(bench):
    run = bench.run(42, "full")
    _, base_rep, half = constant_width_baseline(run["result"])
    rep = run["rep"]
    ok = 0.85 <= rep.PICP <= 0.99 and rep.Winkler <= base_rep.Winkler and run["seconds"] < 300
    record("end-to-end synthetic benchmark", ok,
           f"PICP {rep.PICP:.4f}, Winkler {rep.Winkler:.4f} vs constant-width {base_rep.Winkler:.4f} "
           f"(half-width {half:.3f}), best epoch {run['result'].log.best_epoch}, {run['seconds']:.0f} s")
    assert ok


@pytest.mark.slow
def test_relative_ordering_soft(bench):
    wins, parts = 0, []
    for seed in SEEDS:
        a, b = bench.run(seed, "full")["rep"].Winkler, bench.run(seed, "lstm")["rep"].Winkler
        wins += a < b
        parts.append(f"s{seed} {a:.4f} vs {b:.4f}")
    ok = wins >= 2
    record("relative ordering (soft)", ok, f"BCF-GCN beats LSTM Winkler in {wins}/3 seeds: " + "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_ablation_direction_soft(bench):
    hits, parts = 0, []
    for seed in SEEDS:
        full, no_tent = bench.run(seed, "full")["rep"].PIAW, bench.run(seed, "no_tent")["rep"].PIAW
        hits += no_tent > full
        parts.append(f"s{seed} {no_tent:.4f} vs {full:.4f}")
    ok = hits >= 2
    record("ablation direction (soft)", ok, f"no-tent PIAW above full in {hits}/3 seeds: " + "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_determinism(bench, tmp_path):
    first = bench.run(42, "full")
    again = train(bench.config(42, "full"), load_data(bench.config(42, "full")))
    _, rep = rolling_evaluate(again)
    M.write_metrics_csv([first["rep"]], tmp_path / "a.csv")
    M.write_metrics_csv([rep], tmp_path / "b.csv")
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ok = same and again.model.state_hash() == first["result"].model.state_hash()
    record("determinism", ok, f"metrics CSV byte-identical {same}, model state hash "
                              f"{again.model.state_hash()[:12]}")
    assert ok


@pytest.mark.slow
def test_leakage_audit(bench):
    run = bench.run(42, "full")
    data = run["result"].data
    audit = run["audit"]
    n_test = data.test_targets().size
    # the graph and scaler were fitted on the training segment only
    val_start = data.bounds[0]
    fit_ok = (run["result"].graph.source == "train-returns" and data.train.n_steps == val_start
              and np.array_equal(data.scaler.mean, data.returns.returns[:, :val_start].mean(axis=1)))
    ok = not audit.violations and audit.checks == n_test + 3 and fit_ok
    record("leakage audit", ok, f"{len(audit.violations)} violations over {audit.checks} checks "
                                f"({n_test} test windows), fit sources train-only {fit_ok}")
    assert ok
