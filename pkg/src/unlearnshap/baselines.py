"""Reference valuators: exact KNN Shapley, Beta semivalues, Hessian-free influence."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import Dataset
from .errors import ValidationError
from .model import ModelSpec, ParamVector, _activation_grad, forward_cached, log_softmax
from .shapley import ConvergenceCriterion, Utility, ValuationResult, fixed_budget, permutation_estimate


def knn_order(train_x: np.ndarray, train_ids: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Training rows sorted nearest first (Euclidean), ties by ascending id."""
    dist = np.sqrt(((train_x - x) ** 2).sum(axis=1))
    return np.lexsort((train_ids, dist))


def knn_shapley(train: Dataset, test: Dataset, k: int) -> np.ndarray:
    """Exact Shapley values of the unweighted KNN classification utility.

    The per-test-point utility of a set ``S`` is the number of correctly
    labelled points among its ``min(k, |S|)`` nearest members, divided by ``k``.
    Values are computed with the farthest-to-nearest recursion and averaged
    over test points.
    """
    n = len(train)
    if n == 0 or len(test) == 0:
        raise ValidationError("train and test sets must be non-empty")
    if not 1 <= k <= n:
        raise ValidationError(f"k must lie in [1, {n}], got {k}")
    values = np.zeros(n)
    for x, y in zip(test.features, test.labels):
        order = knn_order(train.features, train.ids, x)
        match = (train.labels[order] == y).astype(np.float64)
        s = np.zeros(n)
        s[n - 1] = match[n - 1] / n
        for i in range(n - 2, -1, -1):
            rank = i + 1  # 1-based position of order[i]
            s[i] = s[i + 1] + (match[i] - match[i + 1]) / k * min(k, rank) / rank
        values[order] += s
    return values / len(test)


@dataclass(frozen=True)
class BetaParams:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError("Beta parameters must be positive")


def _beta_fn_exact(a: int, b: int) -> Fraction:
    return Fraction(math.factorial(a - 1) * math.factorial(b - 1), math.factorial(a + b - 1))


def _integer_params(params: BetaParams) -> tuple[int, int] | None:
    if float(params.alpha).is_integer() and float(params.beta).is_integer():
        return int(params.alpha), int(params.beta)
    return None


def _exact_probabilities(n: int, a: int, b: int) -> list[Fraction]:
    norm = _beta_fn_exact(a, b)
    return [math.comb(n - 1, s) * _beta_fn_exact(s + b, n - 1 - s + a) / norm for s in range(n)]


def cardinality_probabilities(n: int, params: BetaParams) -> np.ndarray:
    """Probability mass the Beta(alpha, beta) semivalue puts on each prefix size ``0..n-1``.

    ``p[s] = C(n-1, s) * B(s + beta, n - 1 - s + alpha) / B(alpha, beta)``; sums to one.
    """
    ints = _integer_params(params)
    if ints is not None:
        return np.array([float(p) for p in _exact_probabilities(n, *ints)])
    a, b = params.alpha, params.beta
    log_p = np.array([
        math.lgamma(n) - math.lgamma(s + 1) - math.lgamma(n - s)
        + math.lgamma(s + b) + math.lgamma(n - 1 - s + a) - math.lgamma(n - 1 + a + b)
        - math.lgamma(a) - math.lgamma(b) + math.lgamma(a + b)
        for s in range(n)
    ])
    return np.exp(log_p)


def beta_weights(n: int, params: BetaParams) -> np.ndarray:
    """Importance weights turning uniform-position permutation marginals into Beta semivalues.

    Integer parameters are handled in exact arithmetic, so Beta(1, 1) gives exactly 1.0.
    """
    ints = _integer_params(params)
    if ints is not None:
        return np.array([float(n * p) for p in _exact_probabilities(n, *ints)])
    return n * cardinality_probabilities(n, params)


def beta_shapley(utility: Utility, num_players: int, params: BetaParams, num_samples: int,
                 seed: int, criterion: ConvergenceCriterion | None = None,
                 workers: int = 1) -> ValuationResult:
    """Permutation estimate of the Beta(alpha, beta) semivalue.

    Uses the same permutation stream as :func:`mc_shapley` for a given seed.
    Without ``criterion`` exactly ``num_samples`` permutations are drawn.
    """
    crit = criterion or fixed_budget(num_samples)
    return permutation_estimate(utility, num_players, crit, seed,
                                beta_weights(num_players, params), workers)


def _per_sample_factors(params: ParamVector, spec: ModelSpec, data: Dataset):
    """Per-layer (input activations, output deltas) for each point's own CE loss."""
    logits, (layers, inputs, pre) = forward_cached(params.values, spec, data.features)
    delta = np.exp(log_softmax(logits))
    delta[np.arange(len(data)), data.labels] -= 1.0
    factors = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        factors[idx] = (inputs[idx], delta)
        if idx > 0:
            w, _ = layers[idx]
            delta = (delta @ w.T) * _activation_grad(pre[idx - 1], inputs[idx], spec.activation)
    return factors


def influence_scores(model: ParamVector, spec: ModelSpec, train: Dataset, test: Dataset) -> np.ndarray:
    """Mean over test points of the gradient inner product <grad L(x_i), grad L(x_t)>.

    The per-layer gradient of one point is ``outer(a_in, delta)`` plus the bias
    part ``delta``, so the inner product factorises as ``(a_i . a_t + 1)(delta_i . delta_t)``.
    """
    if len(train) == 0 or len(test) == 0:
        raise ValidationError("train and test sets must be non-empty")
    tr = _per_sample_factors(model, spec, train)
    te = _per_sample_factors(model, spec, test)
    gram = np.zeros((len(train), len(test)))
    for (a_i, d_i), (a_t, d_t) in zip(tr, te):
        gram += (a_i @ a_t.T + 1.0) * (d_i @ d_t.T)
    return gram.mean(axis=1)
