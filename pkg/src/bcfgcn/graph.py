"""Correlation graphs, hypergraphs, and the graph-convolution layers built on them."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from . import tensor as T
from .data import ReturnPanel, _require_train
from .errors import ConfigError, DataError
from .tensor import Tensor

NORM_EPS = 1e-5


@dataclass(frozen=True)
class MarketGraph:
    adjacency: np.ndarray
    propagation: np.ndarray
    threshold: float
    source: str = "train-returns"
    warnings: tuple[str, ...] = ()

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return sorted(zip(i.tolist(), j.tolist()))


@dataclass(frozen=True)
class Hypergraph:
    incidence: np.ndarray
    edge_weights: np.ndarray
    node_degree: np.ndarray
    edge_degree: np.ndarray
    propagation: np.ndarray = field(repr=False)

    @property
    def n_edges(self) -> int:
        return self.incidence.shape[1]


def pearson_matrix(returns: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Correlation matrix with zero-variance rows defined as uncorrelated."""
    x = returns - returns.mean(axis=1, keepdims=True)
    norms = np.sqrt((x * x).sum(axis=1))
    flat = [i for i, s in enumerate(norms) if s <= 0]
    safe = np.where(norms > 0, norms, 1.0)
    corr = (x @ x.T) / np.outer(safe, safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0), flat


def normalize_adjacency(adjacency: np.ndarray, symmetric: bool = True) -> np.ndarray:
    """Self-looped, degree-normalized propagation matrix.

    ``symmetric=False`` gives the D^-1 (A+I) D^-1 form, kept for comparison only.
    """
    a = np.asarray(adjacency, dtype=float)
    a_tilde = a + np.eye(a.shape[0])
    deg = a_tilde.sum(axis=1)
    if symmetric:
        d = deg ** -0.5
    else:
        d = 1.0 / deg
    return d[:, None] * a_tilde * d[None, :]


def build_correlation_graph(train: ReturnPanel, threshold: float = 0.30,
                            symmetric: bool = True) -> MarketGraph:
    _require_train(train, "build_correlation_graph")
    if train.n_steps < 30:
        raise DataError(f"need >= 30 training observations per stock, got {train.n_steps}")
    corr, flat = pearson_matrix(train.returns)
    adj = (np.abs(corr) >= threshold).astype(float)
    adj[flat, :] = 0.0
    adj[:, flat] = 0.0
    np.fill_diagonal(adj, 0.0)
    warnings = tuple(f"zero variance for {train.tickers[i]}; no edges" for i in flat)
    return MarketGraph(adj, normalize_adjacency(adj, symmetric), threshold, warnings=warnings)


def write_edge_list(graph: MarketGraph, path, tickers=None):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        for i, j in graph.edges():
            w.writerow([tickers[i], tickers[j]] if tickers else [i, j])


def hypergraph_from_incidence(incidence: np.ndarray, weights: np.ndarray | None = None) -> Hypergraph:
    h = np.asarray(incidence, dtype=float)
    n, e = h.shape
    w = np.ones(e) if weights is None else np.asarray(weights, dtype=float)
    if np.any(h.sum(axis=0) < 2):
        raise ConfigError("every hyperedge needs at least two nodes")
    dv = h @ w
    de = h.sum(axis=0)
    if np.any(dv <= 0):
        raise ConfigError("a node belongs to no hyperedge")
    dv_is = dv ** -0.5
    prop = (dv_is[:, None] * h * w[None, :] / de[None, :]) @ h.T * dv_is[None, :]
    return Hypergraph(h, np.diag(w), np.diag(dv), np.diag(de), prop)


def build_hypergraph(train: ReturnPanel, k: int) -> Hypergraph:
    """Average-linkage clusters on 1-|corr| become unit-weight hyperedges."""
    _require_train(train, "build_hypergraph")
    n = len(train.tickers)
    if k < 2 or k >= n:
        raise ConfigError(f"hyperedge count must satisfy 2 <= k < N={n}, got {k}")
    corr, _ = pearson_matrix(train.returns)
    dist = 1.0 - np.abs(corr)
    np.fill_diagonal(dist, 0.0)
    dist = (dist + dist.T) / 2.0
    labels = fcluster(linkage(squareform(dist, checks=False), method="average"), k, "maxclust") - 1

    clusters = [list(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    big = [c for c in clusters if len(c) >= 2]
    if len(big) < 2:
        raise ConfigError("fewer than two multi-node clusters remain after merging singletons")
    for c in clusters:
        if len(c) == 1:
            v = c[0]
            nearest = min(range(len(big)), key=lambda b: dist[v, big[b]].mean())
            big[nearest].append(v)
    inc = np.zeros((n, len(big)))
    for e, members in enumerate(big):
        inc[members, e] = 1.0
    return hypergraph_from_incidence(inc)


# ------------------------------------------------------------------- layers

def init_uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class BlockOps:
    """Per-snapshot operators for L stacked snapshots.

    Row ``t * N + i`` of a stacked tensor holds node i at step t.
    """

    def __init__(self, propagation: np.ndarray, n_blocks: int):
        n = propagation.shape[0]
        self.n_nodes = n
        self.n_blocks = n_blocks
        self._prop = np.asarray(propagation, dtype=float)
        self._mean = np.full((n, n), 1.0 / n)

    @property
    def n_rows(self) -> int:
        return self.n_nodes * self.n_blocks

    def propagate(self, x: Tensor) -> Tensor:
        return T.block_matmul(self._prop, x, self.n_blocks)

    def node_mean(self, x: Tensor) -> Tensor:
        """Per-snapshot feature means, repeated on every node row."""
        return T.block_matmul(self._mean, x, self.n_blocks)


def node_stats(x: Tensor, ops: BlockOps) -> tuple[Tensor, Tensor]:
    """Per-snapshot, per-feature mean and centred input, both shaped like x."""
    mean = ops.node_mean(x)
    return mean, x - mean


class NodeNorm:
    """Standardise each feature across the nodes of a snapshot, then scale and shift.

    Evaluation mode uses running statistics updated with momentum 0.1.
    """

    def __init__(self, dim: int, prefix: str, momentum: float = 0.1):
        self.gamma = Tensor(np.ones((1, dim)), requires_grad=True, name=f"{prefix}.gamma")
        self.beta = Tensor(np.zeros((1, dim)), requires_grad=True, name=f"{prefix}.beta")
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.momentum = momentum
        self.prefix = prefix

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}.running_mean": self.running_mean,
                f"{self.prefix}.running_var": self.running_var}

    def __call__(self, x: Tensor, ops: BlockOps, training: bool) -> Tensor:
        if training:
            _, centred = node_stats(x, ops)
            var = ops.node_mean(centred * centred)
            normed = centred * T.power(var + NORM_EPS, -0.5)
            n, blocks = ops.n_nodes, ops.n_blocks
            bm = x.value.reshape(blocks, n, -1).mean(axis=1).mean(axis=0)
            bv = var.value.reshape(blocks, n, -1)[:, 0, :].mean(axis=0)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * bm
            self.running_var[...] = (1 - m) * self.running_var + m * bv
        else:
            scale = (self.running_var + NORM_EPS) ** -0.5
            normed = (x - Tensor(self.running_mean)) * Tensor(scale)
        return normed * self.gamma + self.beta


class GcnLayer:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, prefix: str):
        self.weight = init_uniform(rng, d_in, (d_in, d_out), f"{prefix}.weight")
        self.bias = init_uniform(rng, d_in, (1, d_out), f"{prefix}.bias")
        self.norm = NodeNorm(d_out, f"{prefix}.norm")

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias, *self.norm.params()]

    def __call__(self, x: Tensor, ops: BlockOps, training: bool) -> Tensor:
        return gcn_layer_forward(ops, x, self, training)


def gcn_layer_forward(ops: BlockOps, h_in: Tensor, layer: GcnLayer, training: bool) -> Tensor:
    """relu(node_norm(P H W + b)) applied to every stacked snapshot."""
    if h_in.shape[1] != layer.weight.shape[0]:
        raise ConfigError(f"gcn input has {h_in.shape[1]} features, layer expects {layer.weight.shape[0]}")
    if h_in.shape[0] != ops.n_rows:
        raise ConfigError(f"gcn input has {h_in.shape[0]} rows, graph expects {ops.n_rows}")
    z = ops.propagate(h_in @ layer.weight) + layer.bias
    return T.relu(layer.norm(z, ops, training))


def clip_embedding(h: Tensor) -> Tensor:
    return T.tanh(h * 3.0)


class HgnnLayer:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, prefix: str):
        self.weight = init_uniform(rng, d_in, (d_in, d_out), f"{prefix}.weight")
        self.bias = init_uniform(rng, d_in, (1, d_out), f"{prefix}.bias")

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


def hgnn_layer_forward(hg: Hypergraph, h_in: Tensor, layer: HgnnLayer) -> Tensor:
    """relu(Dv^-1/2 H W De^-1 H^T Dv^-1/2 X Theta + b)."""
    if h_in.shape[0] != hg.propagation.shape[0]:
        raise ConfigError(f"hgnn input has {h_in.shape[0]} rows, hypergraph has {hg.propagation.shape[0]} nodes")
    return T.relu(Tensor(hg.propagation) @ (h_in @ layer.weight) + layer.bias)
