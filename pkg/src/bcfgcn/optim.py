"""Adam, global-norm gradient clipping, plateau LR schedule, gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def clip_grad_norm(params: Sequence[Tensor], max_norm: float = 3.0) -> float:
    """Scale all grads in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0001
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState):
    """One Adam update with bias correction and decoupled weight decay.

    Moments are keyed by position in ``params``, so callers must pass the
    parameters in the same order every step. Grads are cleared afterwards.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.value)
            state.v[k] = np.zeros_like(p.value)
        v = state.v[k]
        if m.shape != p.value.shape:
            raise RuntimeError(f"adam state shape {m.shape} drifted from param {p.value.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.value = p.value - state.lr * (update + state.weight_decay * p.value)
        p.grad = None


@dataclass
class PlateauScheduler:
    """Halve the LR after ``patience`` epochs without a new best (lower) metric."""

    lr: float = 0.001
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-5
    best: float = float("inf")
    wait: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"plateau factor must lie in (0, 1), got {self.factor}")

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


def finite_difference_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                            eps: float = 1e-6, n_samples: int | None = None,
                            rng: np.random.Generator | None = None, grad_floor: float = 1e-8) -> float:
    """Max relative error between backprop grads and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and must
    be deterministic. With ``n_samples`` set, up to that many coordinates are
    drawn from each parameter; otherwise every coordinate is checked.
    The relative error's denominator is floored at ``grad_floor``, so gradients
    smaller than that are compared on an absolute scale.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    coords = []
    for i, p in enumerate(params):
        idx = np.arange(p.value.size)
        if n_samples is not None and n_samples < idx.size:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(idx.size, size=n_samples, replace=False))
        coords += [(i, int(j)) for j in idx]

    worst = 0.0
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = loss_fn().item()
        flat[j] = orig - eps
        down = loss_fn().item()
        flat[j] = orig
        numeric = (up - down) / (2.0 * eps)
        exact = analytic[i].reshape(-1)[j]
        err = abs(exact - numeric) / max(grad_floor, abs(exact), abs(numeric))
        worst = max(worst, err)
    return worst
