"""Approximate unlearning by regularised gradient ascent, plus a retraining oracle.

The objective minimised for a forget set ``U`` and alignment set ``T`` is::

    -CE(U) + lambda1 * ||theta - theta_full||^2 + lambda2 * KL(f_theta(x) || f_full(x)),  x ~ T

The reference logits ``f_full`` are constants.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ContractViolation, NumericFailure, ValidationError
from .model import (
    Batch,
    ModelSpec,
    ParamVector,
    _ce_from_logits,
    backward,
    forward_cached,
    init_params,
    kl_and_dlogits,
)
from .training import TrainConfig, TrainLog, _adamw_inplace, train


@dataclass(frozen=True)
class UnlearnConfig:
    steps: int = 100
    batch_size: int = 32
    learning_rate: float = 2e-5
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    optimizer: str = "sgd"
    l2_reduction: str = "sum"
    split_test: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValidationError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("lambda1 and lambda2 must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValidationError("optimizer must be 'sgd' or 'adamw'")
        if self.l2_reduction not in ("sum", "mean"):
            raise ValidationError("l2_reduction must be 'sum' or 'mean'")


def _objective(theta, theta_full, spec, xu, yu, xt, q_logits, lambda1, lambda2, reduction):
    logits_u, cache_u = forward_cached(theta, spec, xu)
    ce, d_u = _ce_from_logits(logits_u, yu)
    grad = -backward(spec, cache_u, d_u)
    loss = -ce
    diff = theta - theta_full
    scale = 1.0 / diff.size if reduction == "mean" else 1.0
    if lambda1:
        loss += lambda1 * scale * float(diff @ diff)
        grad += (2.0 * lambda1 * scale) * diff
    if lambda2:
        logits_t, cache_t = forward_cached(theta, spec, xt)
        kl, d_t = kl_and_dlogits(logits_t, q_logits)
        loss += lambda2 * kl
        grad += lambda2 * backward(spec, cache_t, d_t)
    return loss, grad


def unlearn_loss_and_grad(theta: ParamVector, theta_full: ParamVector, spec: ModelSpec,
                          unlearn_batch: Batch, test_batch: Batch, lambda1: float = 1.0,
                          lambda2: float = 1.0, l2_reduction: str = "sum"
                          ) -> tuple[float, ParamVector]:
    for p in (theta, theta_full):
        if p.spec_hash != spec.digest or len(p) != spec.num_params:
            raise ContractViolation("theta and theta_full must be bound to the same spec")
    for b in (unlearn_batch, test_batch):
        if b.features.shape[1] != spec.input_dim:
            raise ContractViolation("batch feature width does not match spec")
    q_logits, _ = forward_cached(theta_full.values, spec, test_batch.features)
    loss, grad = _objective(theta.values, theta_full.values, spec, unlearn_batch.features,
                            unlearn_batch.labels, test_batch.features, q_logits,
                            lambda1, lambda2, l2_reduction)
    return loss, ParamVector(grad, spec.digest)


class BatchStream:
    """Endless mini-batches over ``n`` rows, reshuffling at each pass."""

    def __init__(self, n: int, batch_size: int, seed: int, stream: int):
        self.n = n
        self.size = min(batch_size, n)
        self.seed = seed
        self.stream = stream
        self.passes = 0
        self.buffer = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self.buffer.size < self.size:
            rng = np.random.default_rng([self.seed, self.stream, self.passes])
            self.buffer = np.concatenate([self.buffer, rng.permutation(self.n)])
            self.passes += 1
        out, self.buffer = self.buffer[:self.size], self.buffer[self.size:]
        return out


def unlearn(model_full: ParamVector, spec: ModelSpec, unlearn_set: Dataset, test_set: Dataset,
            config: UnlearnConfig, full_test_logits: np.ndarray | None = None
            ) -> tuple[ParamVector, TrainLog]:
    """Run ``config.steps`` first-order steps on the unlearning objective starting at ``model_full``.

    ``full_test_logits`` may carry precomputed ``f_full(test_set)`` to skip a forward pass.
    """
    if len(unlearn_set) == 0:
        raise ValidationError("unlearn set is empty")
    if len(test_set) == 0:
        raise ValidationError("test set is empty")
    if model_full.spec_hash != spec.digest:
        raise ContractViolation("model is not bound to this spec")
    start = time.perf_counter()
    theta_full = model_full.values
    theta = theta_full.copy()
    if full_test_logits is None:
        full_test_logits, _ = forward_cached(theta_full, spec, test_set.features)
    xu, yu = unlearn_set.features, unlearn_set.labels
    xt = test_set.features
    forget = BatchStream(len(unlearn_set), config.batch_size, config.seed, 0)
    align = BatchStream(len(test_set), config.batch_size, config.seed, 1)
    adam = config.optimizer == "adamw"
    if adam:
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
    log = TrainLog()
    for step in range(config.steps):
        ru = forget.next()
        rt = align.next()
        loss, grad = _objective(theta, theta_full, spec, xu[ru], yu[ru], xt[rt],
                                full_test_logits[rt], config.lambda1, config.lambda2,
                                config.l2_reduction)
        if adam:
            _adamw_inplace(theta, m, v, step + 1, grad, config.learning_rate, 0.9, 0.999, 1e-8, 0.0)
        else:
            theta -= config.learning_rate * grad
        log.epoch_loss.append(loss)
    if not np.all(np.isfinite(theta)):
        raise NumericFailure("non-finite parameters after unlearning")
    log.seconds = time.perf_counter() - start
    return ParamVector(theta, spec.digest), log


def oracle_unlearn(full_dataset: Dataset, coalition_ids, spec: ModelSpec,
                   train_config: TrainConfig) -> ParamVector:
    """Perfect unlearning: retrain on the complement (fresh init if nothing remains)."""
    remaining = full_dataset.without_ids(coalition_ids)
    if len(remaining) == 0:
        return init_params(spec, train_config.seed)
    params, _ = train(spec, remaining.canonical(), train_config)
    return params
