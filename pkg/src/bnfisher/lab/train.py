"""Momentum gradient descent with divergence detection.

The update is the heavy-ball rule

    theta_{t+1} = theta_t - eta * grad L(theta_t) + mu * (theta_t - theta_{t-1})

and a run counts as diverged once the loss is non-finite or the parameter
norm exceeds ``EXPLODE`` times its initial value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..arch import ArchSpec
from ..nnkernel import FULL, MIN_BN_BATCH, backward, forward, param_grads, sample_network, substream
from .data import Dataset

EXPLODE = 1e6


@dataclass(frozen=True)
class RunOutcome:
    gamma: float | None
    eta: float
    seed: int
    final_test_loss: float | None
    diverged: bool
    epochs_run: int
    sigma_w_sq: float | None = None
    train_losses: tuple[float, ...] = ()
    error: str | None = None


@dataclass
class MomentumState:
    theta: np.ndarray
    prev: np.ndarray = field(default=None)
    ref_norm: float = 0.0

    def __post_init__(self):
        if self.prev is None:
            self.prev = self.theta.copy()
        self.ref_norm = float(np.linalg.norm(self.theta))

    def step(self, grad: np.ndarray, eta: float, mu: float) -> None:
        new = self.theta - eta * grad + mu * (self.theta - self.prev)
        self.prev, self.theta = self.theta, new

    def exploded(self, threshold: float = EXPLODE) -> bool:
        norm = float(np.linalg.norm(self.theta))
        return not math.isfinite(norm) or norm > threshold * max(self.ref_norm, 1e-300)


def momentum_gd(grad: Callable[[np.ndarray], np.ndarray], theta0, eta: float, mu: float,
                steps: int, threshold: float = EXPLODE) -> tuple[np.ndarray, bool, int]:
    """Run heavy-ball GD; returns (theta, diverged, steps_taken)."""
    st = MomentumState(np.array(theta0, dtype=float))
    for t in range(1, steps + 1):
        st.step(grad(st.theta), eta, mu)
        if st.exploded(threshold):
            return st.theta, True, t
    return st.theta, False, steps


def quadratic_diverges(curvatures, eta: float, mu: float, steps: int = 2000) -> bool:
    """Heavy-ball GD on L = sum_i lambda_i theta_i^2 / 2 from theta = 1."""
    lam = np.atleast_1d(np.asarray(curvatures, dtype=float))
    _, diverged, _ = momentum_gd(lambda th: lam * th, np.ones_like(lam), eta, mu, steps)
    return diverged


def mse_loss(out: np.ndarray, targets: np.ndarray) -> float:
    """(1/m) sum_i |f(x_i) - y_i|^2 / 2."""
    return float(0.5 * ((out - targets) ** 2).sum(axis=1).mean())


def _batches(n: int, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def evaluate(net, train: Dataset, test: Dataset) -> tuple[float, float]:
    """Train and test loss; BN statistics come from the full training set."""
    tape = forward(net, train.inputs, min_batch=1)
    stats = tape.stats()
    test_out = forward(net, test.inputs, stats=stats).output
    return mse_loss(tape.output, train.targets), mse_loss(test_out, test.targets)


def train(spec: ArchSpec, data: Dataset, test: Dataset, eta: float, epochs: int, *,
          seed: int = 0, momentum: float | None = None, batch_size: int | None = None,
          threshold: float = EXPLODE) -> RunOutcome:
    """Train a freshly sampled net with full-BN back-propagation.

    ``batch_size=None`` is full-batch (one update per epoch); otherwise each
    epoch visits shuffled batches of exactly ``batch_size`` examples and BN
    statistics are those of the update batch.
    """
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    if batch_size is not None and spec.has_batch_norm and batch_size < MIN_BN_BATCH:
        raise ValueError(f"BatchNorm batches need at least {MIN_BN_BATCH} examples")
    mu = spec.init.momentum if momentum is None else momentum
    net = sample_network(spec, seed)
    st = MomentumState(net.flat_params())
    gamma = next((lay.gamma for lay in spec.layers if lay.batch_norm), None)
    meta = dict(gamma=gamma, eta=float(eta), seed=int(seed), sigma_w_sq=spec.init.sigma_w_sq)
    losses = [evaluate(net, data, test)[0]]
    test_loss = None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(1, epochs + 1):
            for idx in _batches(len(data), batch_size, substream(seed, 5, epoch)):
                x, y = data.inputs[idx], data.targets[idx]
                tape = forward(net, x, min_batch=1)
                loss = mse_loss(tape.output, y)
                if not math.isfinite(loss):
                    return RunOutcome(**meta, final_test_loss=None, diverged=True, epochs_run=epoch,
                                      train_losses=tuple(losses))
                backward(net, tape, (tape.output - y) / len(idx), FULL)
                g = np.concatenate([a.ravel() for d in param_grads(net, tape) for a in d.values()])
                st.step(g, eta, mu)
                if st.exploded(threshold):
                    return RunOutcome(**meta, final_test_loss=None, diverged=True, epochs_run=epoch,
                                      train_losses=tuple(losses))
                net.set_flat_params(st.theta)
            train_loss, test_loss = evaluate(net, data, test)
            losses.append(train_loss)
            if not (math.isfinite(train_loss) and math.isfinite(test_loss)):
                return RunOutcome(**meta, final_test_loss=None, diverged=True, epochs_run=epoch,
                                  train_losses=tuple(losses))
    return RunOutcome(**meta, final_test_loss=test_loss, diverged=False, epochs_run=epochs,
                      train_losses=tuple(losses))
