"""Bi-level chaotic feature transformation: logistic and tent branches with
per-node adaptive perturbation strength, plus the volatility-regime gate."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .graph import NORM_EPS, BlockOps, init_uniform, node_stats
from .tensor import Tensor

R_LOW, R_SPAN = 3.57, 0.43
TENT_SLOPE = 2.0
ALPHA_MAX = 0.2
ALPHA_HIDDEN = 16
GATE_HIDDEN = 32


def logistic_map(x, r) -> Tensor:
    """r * x * (1 - x); ``r`` may be a float or a (1, 1) tensor."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    core = x - x * x
    return core * r if isinstance(r, (int, float)) else T.mul(core, r)


def tent_map(x) -> Tensor:
    """2x below 0.5, 2(1-x) from 0.5 on, written as 2x - 4 relu(x - 0.5).

    relu's zero subgradient at the kink makes x = 0.5 take the left slope.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x * TENT_SLOPE - T.relu(x - 0.5) * (2.0 * TENT_SLOPE)


def logistic_rate(rho: Tensor) -> Tensor:
    """Map an unconstrained parameter into the chaotic band (3.57, 4.0)."""
    return T.sigmoid(rho) * R_SPAN + R_LOW


def iterate_logistic(x0: float, r: float, steps: int) -> float:
    x = x0
    for _ in range(steps):
        x = r * x * (1.0 - x)
    return x


class ChaosBranch:
    """One chaotic sub-pathway shared by all nodes, with a per-node alpha."""

    def __init__(self, kind: str, d: int, rng: np.random.Generator, prefix: str,
                 static_alpha: float | None = None):
        if kind not in ("logistic", "tent"):
            raise ValueError(f"unknown chaotic map {kind!r}")
        self.kind = kind
        self.static_alpha = static_alpha
        self.rho = (Tensor(np.zeros((1, 1)), requires_grad=True, name=f"{prefix}.rho")
                    if kind == "logistic" else None)
        if static_alpha is None:
            self.w1 = init_uniform(rng, d, (d, ALPHA_HIDDEN), f"{prefix}.alpha.w1")
            self.b1 = init_uniform(rng, d, (1, ALPHA_HIDDEN), f"{prefix}.alpha.b1")
            self.w2 = init_uniform(rng, ALPHA_HIDDEN, (ALPHA_HIDDEN, 1), f"{prefix}.alpha.w2")
            self.b2 = init_uniform(rng, ALPHA_HIDDEN, (1, 1), f"{prefix}.alpha.b2")

    def params(self) -> list[Tensor]:
        out = [self.rho] if self.rho is not None else []
        if self.static_alpha is None:
            out += [self.w1, self.b1, self.w2, self.b2]
        return out

    @property
    def r(self) -> float:
        return float(R_LOW + R_SPAN / (1.0 + np.exp(-self.rho.value[0, 0])))

    def alpha(self, z_raw: Tensor) -> Tensor:
        if self.static_alpha is not None:
            return Tensor(np.full((z_raw.shape[0], 1), self.static_alpha))
        hidden = T.tanh(z_raw @ self.w1 + self.b1)
        return T.sigmoid(hidden @ self.w2 + self.b2) * ALPHA_MAX

    def __call__(self, z_raw: Tensor, ops: BlockOps, alpha: Tensor | None = None) -> Tensor:
        return chaotic_branch(z_raw, self, ops, alpha)


def chaotic_branch(z_raw: Tensor, branch: ChaosBranch, ops: BlockOps,
                   alpha: Tensor | None = None) -> Tensor:
    """z_raw + alpha * (2 C(sigmoid(norm(z_raw))) - 1) * sigma_f.

    Mean and std are taken per feature over the nodes of each snapshot. The
    feature mean is not added back; the residual already carries location.
    """
    _, centred = node_stats(z_raw, ops)
    sigma = T.power(ops.node_mean(centred * centred) + NORM_EPS ** 2, 0.5)
    u = T.sigmoid(T.mul(centred, T.power(sigma, -1.0)))
    if branch.kind == "logistic":
        c = logistic_map(u, logistic_rate(branch.rho))
    else:
        c = tent_map(u)
    perturb = T.mul(c * 2.0 - 1.0, sigma)
    if alpha is None:
        alpha = branch.alpha(z_raw)
    return z_raw + T.mul(perturb, alpha)


class RegimeGate:
    def __init__(self, d: int, rng: np.random.Generator, prefix: str = "gate"):
        self.w1 = init_uniform(rng, d, (d, GATE_HIDDEN), f"{prefix}.fc1.weight")
        self.b1 = init_uniform(rng, d, (1, GATE_HIDDEN), f"{prefix}.fc1.bias")
        self.w2 = init_uniform(rng, GATE_HIDDEN, (GATE_HIDDEN, 1), f"{prefix}.fc2.weight")
        self.b2 = init_uniform(rng, GATE_HIDDEN, (1, 1), f"{prefix}.fc2.bias")

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, z_raw: Tensor) -> Tensor:
        return regime_gate(z_raw, self)


def regime_gate(z_raw: Tensor, gate: RegimeGate) -> Tensor:
    hidden = T.relu(z_raw @ gate.w1 + gate.b1)
    return T.sigmoid(hidden @ gate.w2 + gate.b2)


def fuse(z_center: Tensor, z_width: Tensor, g) -> Tensor:
    """[g * z_center | (1 - g) * z_width] along features; g broadcasts per node."""
    g = g if isinstance(g, Tensor) else Tensor(g)
    return T.concat_cols([T.mul(z_center, g), T.mul(z_width, 1.0 - g)])
