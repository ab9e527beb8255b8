"""Recurrent layers, the interval head, the LUBE loss, the chaotic-fusion
graph model and its four baselines, plus JSON checkpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .chaos import ChaosBranch, RegimeGate, fuse
from .errors import ConfigError
from .graph import (BlockOps, GcnLayer, HgnnLayer, Hypergraph, MarketGraph, clip_embedding,
                    hgnn_layer_forward, init_uniform)
from .tensor import Tensor

WIDTH_FLOOR = 0.002
CENTER_SCALE = 0.5


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ------------------------------------------------------------ recurrent core

def lstm_layer(x_seq: Tensor, weight: Tensor, bias: Tensor, n_rows: int) -> Tensor:
    """All hidden states of one LSTM layer over a stacked sequence.

    ``x_seq`` holds L blocks of ``n_rows`` rows (block t = step t). ``weight``
    is (hidden + d_in) x 4*hidden acting on [h_{t-1}, x_t]; gate column
    order is forget, input, candidate, output. h_0 = c_0 = 0.
    """
    total, d_in = x_seq.shape
    h = weight.shape[1] // 4
    if weight.shape[0] != h + d_in or total % n_rows:
        raise ConfigError(f"lstm weight {weight.shape} does not fit input {x_seq.shape}")
    steps = total // n_rows
    w_h, w_x = weight.value[:h], weight.value[h:]
    xw = x_seq.value @ w_x + bias.value
    hs = np.zeros((steps + 1, n_rows, h))
    cs = np.zeros((steps + 1, n_rows, h))
    gates = np.empty((steps, n_rows, 4 * h))
    tc = np.empty((steps, n_rows, h))
    for t in range(steps):
        pre = xw[t * n_rows:(t + 1) * n_rows] + hs[t] @ w_h
        act = gates[t]
        act[:, :2 * h] = _sig(pre[:, :2 * h])
        act[:, 2 * h:3 * h] = np.tanh(pre[:, 2 * h:3 * h])
        act[:, 3 * h:] = _sig(pre[:, 3 * h:])
        f, i, g, o = act[:, :h], act[:, h:2 * h], act[:, 2 * h:3 * h], act[:, 3 * h:]
        cs[t + 1] = f * cs[t] + i * g
        tc[t] = np.tanh(cs[t + 1])
        hs[t + 1] = o * tc[t]
    out = hs[1:].reshape(total, h)

    def bw(grad):
        d_out = grad.reshape(steps, n_rows, h)
        d_pre = np.empty((steps, n_rows, 4 * h))
        dh_next = np.zeros((n_rows, h))
        dc_next = np.zeros((n_rows, h))
        w_h_t = np.ascontiguousarray(w_h.T)
        for t in range(steps - 1, -1, -1):
            act = gates[t]
            f, i, g, o = act[:, :h], act[:, h:2 * h], act[:, 2 * h:3 * h], act[:, 3 * h:]
            dh = d_out[t] + dh_next
            dc = dh * o * (1.0 - tc[t] ** 2) + dc_next
            dp = d_pre[t]
            dp[:, :h] = dc * cs[t] * f * (1.0 - f)
            dp[:, h:2 * h] = dc * g * i * (1.0 - i)
            dp[:, 2 * h:3 * h] = dc * i * (1.0 - g * g)
            dp[:, 3 * h:] = dh * tc[t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dp @ w_h_t
        flat = d_pre.reshape(total, 4 * h)
        dw_h = hs[:-1].reshape(total, h).T @ flat
        if weight.requires_grad:
            weight._accumulate(np.vstack([dw_h, x_seq.value.T @ flat]))
        if bias.requires_grad:
            bias._accumulate(flat.sum(axis=0, keepdims=True))
        if x_seq.requires_grad:
            x_seq._accumulate(flat @ w_x.T)

    return T.make_op("lstm_layer", out, (x_seq, weight, bias), bw)


def gru_layer(x_seq: Tensor, weight: Tensor, bias: Tensor, n_rows: int) -> Tensor:
    """All hidden states of one GRU layer; gate column order update, reset, candidate.

    The candidate reads [r * h_{t-1}, x_t]; h_t = (1 - z) h_{t-1} + z h~_t.
    """
    total, d_in = x_seq.shape
    h = weight.shape[1] // 3
    if weight.shape[0] != h + d_in or total % n_rows:
        raise ConfigError(f"gru weight {weight.shape} does not fit input {x_seq.shape}")
    steps = total // n_rows
    w_h, w_x = weight.value[:h], weight.value[h:]
    xw = x_seq.value @ w_x + bias.value
    hs = np.zeros((steps + 1, n_rows, h))
    zs = np.empty((steps, n_rows, h))
    rs = np.empty((steps, n_rows, h))
    ns = np.empty((steps, n_rows, h))
    for t in range(steps):
        xt = xw[t * n_rows:(t + 1) * n_rows]
        zr = _sig(xt[:, :2 * h] + hs[t] @ w_h[:, :2 * h])
        zs[t], rs[t] = zr[:, :h], zr[:, h:]
        ns[t] = np.tanh(xt[:, 2 * h:] + (rs[t] * hs[t]) @ w_h[:, 2 * h:])
        hs[t + 1] = (1.0 - zs[t]) * hs[t] + zs[t] * ns[t]
    out = hs[1:].reshape(total, h)

    def bw(grad):
        d_out = grad.reshape(steps, n_rows, h)
        d_pre = np.empty((steps, n_rows, 3 * h))
        dw_h = np.zeros_like(w_h)
        dh_next = np.zeros((n_rows, h))
        w_zr_t = np.ascontiguousarray(w_h[:, :2 * h].T)
        w_n_t = np.ascontiguousarray(w_h[:, 2 * h:].T)
        for t in range(steps - 1, -1, -1):
            z, r, n, hp = zs[t], rs[t], ns[t], hs[t]
            dh = d_out[t] + dh_next
            dn = dh * z * (1.0 - n * n)
            d_rh = dn @ w_n_t
            dp = d_pre[t]
            dp[:, :h] = dh * (n - hp) * z * (1.0 - z)
            dp[:, h:2 * h] = d_rh * hp * r * (1.0 - r)
            dp[:, 2 * h:] = dn
            dw_h[:, :2 * h] += hp.T @ dp[:, :2 * h]
            dw_h[:, 2 * h:] += (r * hp).T @ dn
            dh_next = dh * (1.0 - z) + d_rh * r + dp[:, :2 * h] @ w_zr_t
        flat = d_pre.reshape(total, 3 * h)
        if weight.requires_grad:
            weight._accumulate(np.vstack([dw_h, x_seq.value.T @ flat]))
        if bias.requires_grad:
            bias._accumulate(flat.sum(axis=0, keepdims=True))
        if x_seq.requires_grad:
            x_seq._accumulate(flat @ w_x.T)

    return T.make_op("gru_layer", out, (x_seq, weight, bias), bw)


class RecurrentStack:
    """Stacked LSTM or GRU with inverted dropout between layers (training only)."""

    def __init__(self, cell: str, d_in: int, hidden: int, n_layers: int, dropout: float,
                 rng: np.random.Generator, prefix: str):
        if cell not in ("lstm", "gru"):
            raise ConfigError(f"unknown recurrent cell {cell!r}")
        self.cell, self.hidden, self.dropout = cell, hidden, dropout
        n_gates = 4 if cell == "lstm" else 3
        self.weights, self.biases = [], []
        for layer in range(n_layers):
            fan_in = hidden + (d_in if layer == 0 else hidden)
            w = init_uniform(rng, hidden, (fan_in, n_gates * hidden), f"{prefix}.l{layer}.weight")
            b = init_uniform(rng, hidden, (1, n_gates * hidden), f"{prefix}.l{layer}.bias")
            if cell == "lstm":
                b.value[:, :hidden] = 1.0
            self.weights.append(w)
            self.biases.append(b)

    def params(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x_seq: Tensor, n_rows: int, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        """Final hidden state of the top layer, shape n_rows x hidden."""
        layer_fn = lstm_layer if self.cell == "lstm" else gru_layer
        out = x_seq
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if k > 0 and training and self.dropout > 0:
                if rng is None:
                    raise ConfigError("dropout in training mode needs an rng")
                keep = 1.0 - self.dropout
                mask = (rng.random(out.shape) < keep) / keep
                out = T.mul(out, Tensor(mask))
            out = layer_fn(out, w, b, n_rows)
        return T.row_select(out, slice(out.shape[0] - n_rows, out.shape[0]))


def lstm_forward(seq: Sequence[Tensor], stack: RecurrentStack, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """h* = last hidden state for a list of per-step (rows x features) inputs."""
    if not seq:
        raise ConfigError("empty sequence")
    return stack(T.concat_rows(seq), seq[0].shape[0], training, rng)


gru_forward = lstm_forward


# -------------------------------------------------------------- interval head

class IntervalHead:
    def __init__(self, d: int, rng: np.random.Generator, split: bool = False, prefix: str = "head"):
        self.split = split
        if split and d % 2:
            raise ConfigError("split head needs an even input width")
        dc = d // 2 if split else d
        self.wc = init_uniform(rng, dc, (dc, 1), f"{prefix}.center.weight")
        self.bc = init_uniform(rng, dc, (1, 1), f"{prefix}.center.bias")
        self.ww = init_uniform(rng, dc, (dc, 1), f"{prefix}.width.weight")
        self.bw = init_uniform(rng, dc, (1, 1), f"{prefix}.width.bias")

    def params(self) -> list[Tensor]:
        return [self.wc, self.bc, self.ww, self.bw]

    def __call__(self, h_star: Tensor) -> tuple[Tensor, Tensor]:
        return interval_head(h_star, self)


def interval_head(h_star: Tensor, head: IntervalHead) -> tuple[Tensor, Tensor]:
    if head.split:
        half = h_star.shape[1] // 2
        hc, hw = T.col_slice(h_star, 0, half), T.col_slice(h_star, half, h_star.shape[1])
    else:
        hc = hw = h_star
    center = T.tanh(hc @ head.wc + head.bc) * CENTER_SCALE
    width = T.softplus(hw @ head.ww + head.bw) + WIDTH_FLOOR
    return center, width


def to_bounds(center, width):
    """Symmetric interval; works on tensors and arrays alike."""
    return center - width, center + width


# -------------------------------------------------------------------- LUBE

@dataclass(frozen=True)
class LubeConfig:
    coverage: float = 0.90
    lambda_width: float = 30.0
    lambda_under: float = 10.0
    lambda_over: float = 15.0
    steepness: float = 50.0

    def __post_init__(self):
        if not 0.0 < self.coverage < 1.0:
            raise ConfigError("LUBE coverage must lie in (0, 1)")
        if min(self.lambda_width, self.lambda_under, self.lambda_over, self.steepness) <= 0:
            raise ConfigError("LUBE weights and steepness must be positive")


def soft_picp(lower: Tensor, upper: Tensor, y, steepness: float) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(y)
    inside = T.mul(T.sigmoid((y - lower) * steepness), T.sigmoid((upper - y) * steepness))
    return T.mean_all(inside)


def lube_loss(lower: Tensor, upper: Tensor, y, cfg: LubeConfig, target_range: float) -> Tensor:
    """Width penalty plus hinge penalties on soft coverage either side of the target.

    ``target_range`` is the training-set target spread, fixed at fit time.
    """
    if lower.shape != upper.shape or lower.shape != np.shape(getattr(y, "value", y)):
        raise ConfigError("lower, upper and targets must share a shape")
    picp = soft_picp(lower, upper, y, cfg.steepness)
    piaw = T.mean_all(upper - lower) * (1.0 / target_range)
    return (piaw * cfg.lambda_width
            + T.relu(cfg.coverage - picp) * cfg.lambda_under
            + T.relu(picp - cfg.coverage) * cfg.lambda_over)


# ------------------------------------------------------------------ models

@dataclass(frozen=True)
class ModelConfig:
    kind: str = "bcf-gcn"
    embed_dim: int = 16
    graph_hidden: int = 64
    lstm_hidden: int = 128
    baseline_hidden: int = 64
    rnn_layers: int = 2
    dropout: float = 0.15
    static_alpha: bool = False
    static_alpha_value: float = 0.1
    no_log_chaos: bool = False
    no_regime_gate: bool = False
    no_tent_chaos: bool = False
    split_head: bool = False
    symmetric_norm: bool = True
    hyperedges: int = 3


MODEL_KINDS = ("bcf-gcn", "lstm", "gru", "gcn", "hgnn")


class IntervalModel:
    """Shared bookkeeping: ordered parameters, buffers, state round trips."""

    kind = "base"

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        return {"params": {k: p.value.copy() for k, p in self.named_parameters().items()},
                "buffers": {k: v.copy() for k, v in self.buffers().items()}}

    def load_state(self, state):
        named = self.named_parameters()
        if set(named) != set(state["params"]):
            missing = set(named) ^ set(state["params"])
            raise ConfigError(f"checkpoint parameters do not match model: {sorted(missing)[:5]}")
        for k, arr in state["params"].items():
            arr = np.asarray(arr, dtype=float).reshape(named[k].shape)
            named[k].value = arr.copy()
        bufs = self.buffers()
        for k, arr in state.get("buffers", {}).items():
            bufs[k][...] = np.asarray(arr, dtype=float).reshape(bufs[k].shape)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for group in (self.named_parameters(), self.buffers()):
            for k in sorted(group):
                v = group[k].value if isinstance(group[k], Tensor) else group[k]
                h.update(k.encode())
                h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def forward(self, window: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def predict(self, window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with T.no_grad():
            c, w = self.forward(window, training=False)
        return c.value[:, 0].copy(), w.value[:, 0].copy()


def _stack_window(window: np.ndarray) -> Tensor:
    """N x L window -> (L*N) x 1, row t*N + i holding node i at step t."""
    return Tensor(np.ascontiguousarray(window.T).reshape(-1, 1))


class BcfGcn(IntervalModel):
    """Graph encoder -> bi-level chaotic fusion -> stacked LSTM -> interval head."""

    kind = "bcf-gcn"

    def __init__(self, graph: MarketGraph, cfg: ModelConfig, rng: np.random.Generator):
        self.graph, self.cfg = graph, cfg
        d, e = cfg.graph_hidden, cfg.embed_dim
        self.embed_w = init_uniform(rng, 1, (1, e), "embed.weight")
        self.embed_b = init_uniform(rng, 1, (1, e), "embed.bias")
        self.gcn1 = GcnLayer(e, d, rng, "gcn1")
        self.gcn2 = GcnLayer(d, d, rng, "gcn2")
        alpha = cfg.static_alpha_value if cfg.static_alpha else None
        self.logistic = None if cfg.no_log_chaos else ChaosBranch("logistic", d, rng, "chaos.logistic", alpha)
        self.tent = None if cfg.no_tent_chaos else ChaosBranch("tent", d, rng, "chaos.tent", alpha)
        self.gate = None if cfg.no_regime_gate else RegimeGate(d, rng)
        self.lstm = RecurrentStack("lstm", 2 * d, cfg.lstm_hidden, cfg.rnn_layers, cfg.dropout, rng, "lstm")
        self.head = IntervalHead(cfg.lstm_hidden, rng, cfg.split_head)
        self._ops: dict[int, BlockOps] = {}

    def parameters(self) -> list[Tensor]:
        out = [self.embed_w, self.embed_b, *self.gcn1.params(), *self.gcn2.params()]
        for part in (self.logistic, self.tent, self.gate):
            if part is not None:
                out += part.params()
        return out + self.lstm.params() + self.head.params()

    def buffers(self):
        return {**self.gcn1.norm.buffers(), **self.gcn2.norm.buffers()}

    def block_ops(self, steps: int) -> BlockOps:
        if steps not in self._ops:
            self._ops[steps] = BlockOps(self.graph.propagation, steps)
        return self._ops[steps]

    def encode(self, window: np.ndarray, training: bool) -> tuple[Tensor, dict[str, Tensor]]:
        """Fused per-step embeddings, stacked (L*N) x 2d, and the intermediates."""
        n, steps = window.shape
        if n != self.graph.n_nodes:
            raise ConfigError(f"window has {n} stocks, graph has {self.graph.n_nodes}")
        ops = self.block_ops(steps)
        x = _stack_window(window) @ self.embed_w + self.embed_b
        z_raw = clip_embedding(self.gcn2(self.gcn1(x, ops, training), ops, training))
        z_center = z_raw if self.logistic is None else self.logistic(z_raw, ops)
        z_width = z_raw if self.tent is None else self.tent(z_raw, ops)
        g = Tensor(np.full((z_raw.shape[0], 1), 0.5)) if self.gate is None else self.gate(z_raw)
        fused = fuse(z_center, z_width, g)
        return fused, {"z_raw": z_raw, "z_center": z_center, "z_width": z_width, "gate": g}

    def forward(self, window, training=False, rng=None):
        fused, _ = self.encode(window, training)
        h_star = self.lstm(fused, window.shape[0], training, rng)
        return self.head(h_star)


class RecurrentBaseline(IntervalModel):
    """Each stock encoded alone from its own return history."""

    def __init__(self, cell: str, cfg: ModelConfig, rng: np.random.Generator):
        self.kind, self.cfg = cell, cfg
        self.rnn = RecurrentStack(cell, 1, cfg.baseline_hidden, cfg.rnn_layers, cfg.dropout, rng, cell)
        self.head = IntervalHead(cfg.baseline_hidden, rng, cfg.split_head)

    def parameters(self):
        return self.rnn.params() + self.head.params()

    def forward(self, window, training=False, rng=None):
        h_star = self.rnn(_stack_window(window), window.shape[0], training, rng)
        return self.head(h_star)


class GcnBaseline(IntervalModel):
    """Two graph convolutions over the window's time-mean; no temporal model."""

    kind = "gcn"

    def __init__(self, graph: MarketGraph, cfg: ModelConfig, rng: np.random.Generator):
        self.graph, self.cfg = graph, cfg
        d = cfg.baseline_hidden
        self.gcn1 = GcnLayer(1, d, rng, "gcn1")
        self.gcn2 = GcnLayer(d, d, rng, "gcn2")
        self.head = IntervalHead(d, rng, cfg.split_head)
        self.ops = BlockOps(graph.propagation, 1)

    def parameters(self):
        return [*self.gcn1.params(), *self.gcn2.params(), *self.head.params()]

    def buffers(self):
        return {**self.gcn1.norm.buffers(), **self.gcn2.norm.buffers()}

    def forward(self, window, training=False, rng=None):
        x = Tensor(window.mean(axis=1, keepdims=True))
        h = self.gcn2(self.gcn1(x, self.ops, training), self.ops, training)
        return self.head(h)


class HgnnBaseline(IntervalModel):
    kind = "hgnn"

    def __init__(self, hypergraph: Hypergraph, cfg: ModelConfig, rng: np.random.Generator):
        self.hypergraph, self.cfg = hypergraph, cfg
        d = cfg.baseline_hidden
        self.layer1 = HgnnLayer(1, d, rng, "hgnn1")
        self.layer2 = HgnnLayer(d, d, rng, "hgnn2")
        self.head = IntervalHead(d, rng, cfg.split_head)

    def parameters(self):
        return [*self.layer1.params(), *self.layer2.params(), *self.head.params()]

    def forward(self, window, training=False, rng=None):
        x = Tensor(window.mean(axis=1, keepdims=True))
        h = hgnn_layer_forward(self.hypergraph, hgnn_layer_forward(self.hypergraph, x, self.layer1),
                               self.layer2)
        return self.head(h)


def build_model(cfg: ModelConfig, rng: np.random.Generator, graph: MarketGraph | None = None,
                hypergraph: Hypergraph | None = None) -> IntervalModel:
    ablated = cfg.static_alpha or cfg.no_log_chaos or cfg.no_regime_gate or cfg.no_tent_chaos
    if ablated and cfg.kind != "bcf-gcn":
        raise ConfigError("ablation flags apply only to the bcf-gcn model")
    if cfg.kind == "bcf-gcn":
        return BcfGcn(graph, cfg, rng)
    if cfg.kind in ("lstm", "gru"):
        return RecurrentBaseline(cfg.kind, cfg, rng)
    if cfg.kind == "gcn":
        return GcnBaseline(graph, cfg, rng)
    if cfg.kind == "hgnn":
        return HgnnBaseline(hypergraph, cfg, rng)
    raise ConfigError(f"unknown model kind {cfg.kind!r}; expected one of {MODEL_KINDS}")


# -------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "bcfgcn-checkpoint/1"


def save_checkpoint(model: IntervalModel, path, config_hash: str, seed: int, extra: dict | None = None):
    state = model.state()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model": model.kind,
        "config_hash": config_hash,
        "seed": seed,
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in sorted(state["params"].items())},
        "buffers": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                    for k, v in sorted(state["buffers"].items())},
        "extra": extra or {},
    }
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(doc, indent=None, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    for group in ("params", "buffers"):
        doc[group] = {k: np.array(v["data"], dtype=float).reshape(v["shape"])
                      for k, v in doc[group].items()}
    return doc
