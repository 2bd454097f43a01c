"""Coalition utilities and Shapley estimators.

Players are integers ``0..n-1``. A coalition is canonically encoded as an
integer bitmask, which doubles as the memo key. Marginal contributions are
always ``v(S + {i}) - v(S)``; for the unlearning utility this is the extra
performance drop caused by also unlearning ``i``, which makes the oracle
variant coincide with the retraining Shapley value.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Dataset, Partition, train_test_split
from .errors import CapabilityError, ValidationError
from .model import ModelSpec, ParamVector, forward_cached, init_params
from .training import TrainConfig, perf, train
from .unlearning import UnlearnConfig, oracle_unlearn, unlearn

EXACT_MAX_PLAYERS = 12


def coalition_mask(coalition: Iterable[int]) -> int:
    mask = 0
    for i in coalition:
        mask |= 1 << int(i)
    return mask


def mask_members(mask: int, n: int) -> tuple[int, ...]:
    return tuple(i for i in range(n) if (mask >> i) & 1)


class Utility:
    """Memoised coalition -> value map.

    ``evaluate`` receives the coalition as an ascending tuple of players.
    Concurrent lookups of one key compute it once; other callers wait.
    """

    def __init__(self, evaluate: Callable[[tuple[int, ...]], float], num_players: int,
                 cache: bool = True):
        self._evaluate = evaluate
        self.num_players = num_players
        self.cache_enabled = cache
        self._memo: dict[int, float] = {}
        self._pending: dict[int, threading.Event] = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    def __call__(self, coalition: Iterable[int]) -> float:
        return self.value_mask(coalition_mask(coalition))

    def value_mask(self, mask: int) -> float:
        if not self.cache_enabled:
            self.evaluations += 1
            return float(self._evaluate(mask_members(mask, self.num_players)))
        while True:
            with self._lock:
                if mask in self._memo:
                    return self._memo[mask]
                event = self._pending.get(mask)
                if event is None:
                    event = self._pending[mask] = threading.Event()
                    owner = True
                else:
                    owner = False
            if not owner:
                event.wait()
                continue
            try:
                value = float(self._evaluate(mask_members(mask, self.num_players)))
                with self._lock:
                    self._memo[mask] = value
                    self.evaluations += 1
                return value
            finally:
                with self._lock:
                    del self._pending[mask]
                event.set()

    @classmethod
    def from_function(cls, fn: Callable[[tuple[int, ...]], float], num_players: int,
                      cache: bool = True) -> "Utility":
        return cls(fn, num_players, cache)

    @classmethod
    def from_table(cls, table: Sequence[float], num_players: int) -> "Utility":
        """Game given as values indexed by coalition bitmask."""
        if len(table) != 1 << num_players:
            raise ValidationError("table must hold 2**num_players values")
        values = [float(v) for v in table]
        return cls(lambda members: values[coalition_mask(members)], num_players)


@dataclass
class ValuationResult:
    values: np.ndarray
    sample_counts: np.ndarray
    running_variances: np.ndarray
    converged: bool = False
    permutations_used: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.values.size

    def standard_errors(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            se = np.sqrt(self.running_variances / self.sample_counts)
        return np.where(self.sample_counts > 0, se, np.inf)


@dataclass(frozen=True)
class ConvergenceCriterion:
    """Stop when the mean |change| of all estimates over ``window`` permutations
    falls below the threshold, or after ``max_permutations``.

    With ``relative=True`` the threshold is multiplied by the current value range.
    """

    max_permutations: int = 1000
    window: int = 50
    mean_abs_change_threshold: float = 0.005
    relative: bool = True

    def __post_init__(self):
        if self.max_permutations < 1 or self.window < 1:
            raise ValidationError("max_permutations and window must be >= 1")
        if self.mean_abs_change_threshold <= 0:
            raise ValidationError("mean_abs_change_threshold must be > 0")


def fixed_budget(num_permutations: int) -> ConvergenceCriterion:
    """A criterion that never stops early."""
    return ConvergenceCriterion(num_permutations, window=num_permutations + 1,
                                mean_abs_change_threshold=1.0, relative=False)


# ---------------------------------------------------------------------------
# concrete utilities


def _coalition_data(dataset: Dataset, partition: Partition, members: tuple[int, ...]) -> Dataset:
    return dataset.take(partition.rows(members)).canonical()


def make_retrain_utility(dataset: Dataset, partition: Partition, spec: ModelSpec,
                         train_config: TrainConfig, test_set: Dataset, cache: bool = True) -> Utility:
    """``v(S)`` = test accuracy of a model trained from scratch on the union of ``S``."""
    if len(test_set) == 0:
        raise ValidationError("test set is empty")
    empty_value = perf(init_params(spec, train_config.seed), spec, test_set)

    def evaluate(members):
        if not members:
            return empty_value
        params, _ = train(spec, _coalition_data(dataset, partition, members), train_config)
        return perf(params, spec, test_set)

    return Utility(evaluate, len(partition), cache)


def split_alignment(test_set: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Split a test set into (alignment, metric) halves."""
    metric, align = train_test_split(test_set, len(test_set) // 2, seed)
    return align, metric


def make_unlearn_utility(model_full: ParamVector, dataset: Dataset, partition: Partition,
                         spec: ModelSpec, unlearn_config: UnlearnConfig, test_set: Dataset,
                         mode: str = "approx", train_config: TrainConfig | None = None,
                         cache: bool = True) -> Utility:
    """``v(S)`` = perf(model_full) - perf(model_full with ``S`` unlearned); ``v(empty) = 0``.

    ``mode="oracle"`` replaces approximate unlearning by retraining on the
    complement and needs ``train_config``.
    """
    if mode not in ("approx", "oracle"):
        raise ValidationError("mode must be 'approx' or 'oracle'")
    if mode == "oracle" and train_config is None:
        raise ValidationError("oracle mode needs the training config")
    align_set = metric_set = test_set
    if unlearn_config.split_test:
        align_set, metric_set = split_alignment(test_set, unlearn_config.seed)
    base = perf(model_full, spec, metric_set)
    full_logits, _ = forward_cached(model_full.values, spec, align_set.features)

    def evaluate(members):
        if not members:
            return 0.0
        if mode == "oracle":
            ids = dataset.ids[partition.rows(members)]
            reduced = oracle_unlearn(dataset, ids, spec, train_config)
        else:
            forget = _coalition_data(dataset, partition, members)
            reduced, _ = unlearn(model_full, spec, forget, align_set, unlearn_config, full_logits)
        return base - perf(reduced, spec, metric_set)

    return Utility(evaluate, len(partition), cache)


# ---------------------------------------------------------------------------
# estimators


def exact_shapley(utility: Utility, num_players: int) -> ValuationResult:
    """Shapley values by summing weighted marginals over all ``2**n`` coalitions."""
    n = num_players
    if n > EXACT_MAX_PLAYERS:
        raise CapabilityError(
            f"exact enumeration is limited to {EXACT_MAX_PLAYERS} players (got {n}); use mc_shapley"
        )
    if n < 1:
        raise ValidationError("need at least one player")
    masks = np.arange(1 << n)
    v = np.array([utility.value_mask(int(m)) for m in masks])
    sizes = np.array([bin(int(m)).count("1") for m in masks])
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                       for s in range(n)])
    phi = np.zeros(n)
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = float(np.sum(weight[sizes[without]] * (v[without | (1 << i)] - v[without])))
    return ValuationResult(phi, np.full(n, 1 << (n - 1)), np.zeros(n), True, 0)


def permutation(seed: int, index: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, index]).permutation(n)


def _walk(utility: Utility, perm: np.ndarray) -> np.ndarray:
    """Utilities of every prefix of ``perm``, starting with the empty set."""
    out = np.empty(perm.size + 1)
    mask = 0
    out[0] = utility.value_mask(0)
    for k, p in enumerate(perm):
        mask |= 1 << int(p)
        out[k + 1] = utility.value_mask(mask)
    return out


def permutation_estimate(utility: Utility, num_players: int, criterion: ConvergenceCriterion,
                         seed: int, weights: np.ndarray | None = None,
                         workers: int = 1) -> ValuationResult:
    """Permutation Monte Carlo over marginals, each scaled by ``weights[prefix_size]``."""
    n = num_players
    if n < 1:
        raise ValidationError("need at least one player")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    mean = np.zeros(n)
    m2 = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    history: deque[np.ndarray] = deque(maxlen=criterion.window)
    converged = False
    used = 0
    chunk = max(1, workers)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while used < criterion.max_permutations and not converged:
            idx = range(used, min(used + chunk, criterion.max_permutations))
            perms = [permutation(seed, k, n) for k in idx]
            if pool is None:
                walks = [_walk(utility, p) for p in perms]
            else:
                walks = list(pool.map(lambda p: _walk(utility, p), perms))
            for perm, values in zip(perms, walks):
                marginals = np.diff(values) * w
                count[perm] += 1
                delta = marginals - mean[perm]
                mean[perm] += delta / count[perm]
                m2[perm] += delta * (marginals - mean[perm])
                used += 1
                if len(history) == criterion.window:
                    change = float(np.mean(np.abs(mean - history[0])))
                    threshold = criterion.mean_abs_change_threshold
                    if criterion.relative:
                        threshold *= float(mean.max() - mean.min())
                    if change < threshold or change == 0.0:
                        converged = True
                        break
                history.append(mean.copy())
    finally:
        if pool is not None:
            pool.shutdown()
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(count > 1, m2 / np.maximum(count - 1, 1), 0.0)
    return ValuationResult(mean, count, var, converged, used)


def mc_shapley(utility: Utility, num_players: int, criterion: ConvergenceCriterion | None = None,
               seed: int = 0, workers: int = 1) -> ValuationResult:
    return permutation_estimate(utility, num_players, criterion or ConvergenceCriterion(), seed,
                                None, workers)


# ---------------------------------------------------------------------------
# two-player (partial) valuation


@dataclass(frozen=True)
class PartialComponents:
    perf_full: float
    perf_unlearn: float
    perf_tgt: float
    perf_random: float

    @property
    def v_tgt(self) -> float:
        return self.perf_full - self.perf_unlearn

    @property
    def v_remain(self) -> float:
        return self.perf_full - self.perf_tgt

    @property
    def v_full(self) -> float:
        return self.perf_full - self.perf_random

    def as_dict(self) -> dict:
        return {
            "perf_full": self.perf_full,
            "perf_unlearn": self.perf_unlearn,
            "perf_tgt": self.perf_tgt,
            "perf_random": self.perf_random,
            "v_tgt": self.v_tgt,
            "v_remain": self.v_remain,
            "v_full": self.v_full,
        }


def two_player_value(v_tgt: float, v_full: float, v_remain: float, v_empty: float = 0.0) -> float:
    """``(v(T) - v(empty)) / 2 + (v(N) - v(R)) / 2`` for the game {target, remainder}."""
    return 0.5 * (v_tgt + v_full - v_remain - v_empty)


def partial_value(model_full: ParamVector, spec: ModelSpec, d_tgt: Dataset, test_set: Dataset,
                  train_config: TrainConfig, unlearn_config: UnlearnConfig, mode: str = "approx",
                  full_dataset: Dataset | None = None) -> tuple[float, PartialComponents]:
    """Value a target set using only the pre-trained model and the target itself.

    ``mode="oracle"`` substitutes retraining on ``full_dataset`` minus the target for
    approximate unlearning; it exists for cross-checks and needs ``full_dataset``.
    """
    if len(d_tgt) == 0:
        raise ValidationError("target dataset is empty")
    p_full = perf(model_full, spec, test_set)
    if mode == "oracle":
        if full_dataset is None:
            raise ValidationError("oracle mode needs the full dataset")
        reduced = oracle_unlearn(full_dataset, d_tgt.ids, spec, train_config)
    elif mode == "approx":
        reduced, _ = unlearn(model_full, spec, d_tgt.canonical(), test_set, unlearn_config)
    else:
        raise ValidationError("mode must be 'approx' or 'oracle'")
    m_tgt, _ = train(spec, d_tgt.canonical(), train_config)
    m_random = init_params(spec, train_config.seed)
    parts = PartialComponents(p_full, perf(reduced, spec, test_set), perf(m_tgt, spec, test_set),
                              perf(m_random, spec, test_set))
    return two_player_value(parts.v_tgt, parts.v_full, parts.v_remain), parts


def exact_partial_reference(dataset: Dataset, d_tgt_ids, spec: ModelSpec, train_config: TrainConfig,
                            test_set: Dataset, subtract_empty: bool = False) -> float:
    """Two-player retraining Shapley value of the target ids.

    By default ``v(empty)`` is left out of the sum; ``subtract_empty=True`` gives
    the strict two-player expansion. An empty target is a null player and gets 0.
    """
    tgt_ids = list(d_tgt_ids)
    if not tgt_ids:
        return 0.0

    def fit_perf(subset: Dataset) -> float:
        if len(subset) == 0:
            return perf(init_params(spec, train_config.seed), spec, test_set)
        params, _ = train(spec, subset.canonical(), train_config)
        return perf(params, spec, test_set)

    rows = dataset.rows_for_ids(tgt_ids)
    v_tgt = fit_perf(dataset.take(rows))
    v_full = fit_perf(dataset)
    v_remain = fit_perf(dataset.without_ids(tgt_ids))
    v_empty = perf(init_params(spec, train_config.seed), spec, test_set) if subtract_empty else 0.0
    return two_player_value(v_tgt, v_full, v_remain, v_empty)
