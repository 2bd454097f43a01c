"""Deterministic mini-batch training with AdamW."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import NumericFailure, ValidationError
from .model import (
    ModelSpec,
    ParamVector,
    _ce_from_logits,
    backward,
    evaluate_accuracy,
    forward_cached,
    init_params,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0 or self.weight_decay < 0 or self.learning_rate <= 0:
            raise ValidationError("need eps > 0, learning_rate > 0, weight_decay >= 0")


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, size: int) -> "OptimizerState":
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    final_accuracy: float = float("nan")
    seconds: float = 0.0


def _adamw_inplace(theta, m, v, t, g, lr, beta1, beta2, eps, wd) -> None:
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta -= lr * (m_hat / (np.sqrt(v_hat) + eps)) + lr * wd * theta


def adamw_step(params: ParamVector, state: OptimizerState, grad: ParamVector | np.ndarray,
               config: TrainConfig) -> tuple[ParamVector, OptimizerState]:
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    if not (g.size == params.values.size == state.first_moment.size == state.second_moment.size):
        raise ValidationError("parameter, gradient and moment lengths differ")
    theta = params.values.copy()
    m = state.first_moment.copy()
    v = state.second_moment.copy()
    t = state.step_count + 1
    _adamw_inplace(theta, m, v, t, g, config.learning_rate, config.beta1, config.beta2,
                   config.eps, config.weight_decay)
    return ParamVector(theta, params.spec_hash), OptimizerState(m, v, t)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(spec: ModelSpec, dataset: Dataset, config: TrainConfig,
          init: ParamVector | None = None) -> tuple[ParamVector, TrainLog]:
    """Train from ``init_params(spec, config.seed)`` (or ``init``) for ``config.epochs`` epochs.

    Rows are consumed in the order given, reshuffled each epoch; callers that
    need order independence should pass ``dataset.canonical()``.
    """
    n = len(dataset)
    if n == 0:
        raise ValidationError("cannot train on an empty dataset")
    if dataset.dim != spec.input_dim:
        raise ValidationError(f"dataset has {dataset.dim} features, spec expects {spec.input_dim}")
    start = time.perf_counter()
    theta = (init if init is not None else init_params(spec, config.seed)).values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    x, y = dataset.features, dataset.labels
    bs = config.batch_size
    log = TrainLog()
    for epoch in range(config.epochs):
        order = epoch_order(n, config.seed, epoch)
        total = 0.0
        for lo in range(0, n, bs):
            rows = order[lo:lo + bs]
            logits, cache = forward_cached(theta, spec, x[rows])
            loss, dlogits = _ce_from_logits(logits, y[rows])
            g = backward(spec, cache, dlogits)
            t += 1
            _adamw_inplace(theta, m, v, t, g, config.learning_rate, config.beta1,
                           config.beta2, config.eps, config.weight_decay)
            total += loss * rows.size
        log.epoch_loss.append(total / n)
    if not np.all(np.isfinite(theta)):
        raise NumericFailure("non-finite parameters after training")
    params = ParamVector(theta, spec.digest)
    log.seconds = time.perf_counter() - start
    log.final_accuracy = evaluate_accuracy(params, spec, dataset)
    return params, log


def perf(params: ParamVector, spec: ModelSpec, testset: Dataset) -> float:
    """Task metric for utilities: classification accuracy."""
    if len(testset) == 0:
        raise ValidationError("test set is empty")
    return evaluate_accuracy(params, spec, testset)
