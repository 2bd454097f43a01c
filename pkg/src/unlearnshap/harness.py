"""Evaluation tasks: noisy-data detection, data removal, partial-valuation studies, timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .audit import spearman
from .data import Dataset, NoiseMask, Partition, partition as make_partition, round_half_up
from .errors import ValidationError
from .model import ModelSpec, init_params
from .shapley import partial_value, two_player_value
from .training import TrainConfig, perf, train
from .unlearning import UnlearnConfig, unlearn

DEFAULT_REMOVAL_GRID = tuple(round(0.05 * k, 2) for k in range(20))


@dataclass
class DetectionCurve:
    bins_inspected_fraction: np.ndarray
    noisy_found_fraction: np.ndarray


@dataclass
class RemovalCurve:
    removal_fraction: np.ndarray
    test_accuracy: np.ndarray
    direction: str
    skipped: list[float] = field(default_factory=list)

    def area(self) -> float:
        ok = np.isfinite(self.test_accuracy)
        return float(np.trapezoid(self.test_accuracy[ok], self.removal_fraction[ok]))


def noisy_detection_curve(values, mask: NoiseMask | np.ndarray, bin_fraction: float = 0.05) -> DetectionCurve:
    """Share of noisy players found when inspecting players from the lowest value upward."""
    values = np.asarray(values, dtype=np.float64).ravel()
    flipped = mask.flipped if isinstance(mask, NoiseMask) else np.asarray(mask, dtype=bool)
    if values.size != flipped.size:
        raise ValidationError("values and mask lengths differ")
    if not 0 < bin_fraction <= 1:
        raise ValidationError("bin_fraction must lie in (0, 1]")
    n = values.size
    step = max(1, round_half_up(bin_fraction * n))
    edges = list(range(step, n, step)) + [n]
    order = np.argsort(values, kind="stable")
    found = np.cumsum(flipped[order])
    total = int(flipped.sum())
    inspected = np.array(edges, dtype=np.float64) / n
    if total == 0:
        return DetectionCurve(inspected, np.ones(len(edges)))
    return DetectionCurve(inspected, found[np.array(edges) - 1] / total)


def removal_curve(dataset: Dataset, partition: Partition, values, direction: str,
                  fractions, spec: ModelSpec, train_config: TrainConfig,
                  test_set: Dataset) -> RemovalCurve:
    """Retrain after dropping the highest (or lowest) valued players, for each fraction."""
    values = np.asarray(values, dtype=np.float64).ravel()
    m = len(partition)
    if values.size != m:
        raise ValidationError("need one value per player")
    if direction not in ("highest_first", "lowest_first"):
        raise ValidationError("direction must be 'highest_first' or 'lowest_first'")
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or np.any(fractions > 0.95) or np.any(np.diff(fractions) <= 0):
        raise ValidationError("fractions must increase strictly within [0, 0.95]")
    order = np.argsort(values, kind="stable")
    if direction == "highest_first":
        order = np.argsort(-values, kind="stable")
    acc = np.full(fractions.size, np.nan)
    skipped = []
    for j, frac in enumerate(fractions):
        k = round_half_up(frac * m)
        keep = np.sort(order[k:])
        rows = partition.rows(keep.tolist())
        if rows.size == 0:
            skipped.append(float(frac))
            continue
        params, _ = train(spec, dataset.take(rows).canonical(), train_config)
        acc[j] = perf(params, spec, test_set)
    return RemovalCurve(fractions, acc, direction, skipped)


@dataclass
class PartialStudy:
    spc_vs_retrain_perf: float
    spc_vs_exact: float
    table: list[dict]
    per_seed: list[tuple[float, float]] = field(default_factory=list)


def _round(x: float) -> float:
    # accuracies are multiples of 1/|T|; keep float rounding from splitting ties
    return round(x, 12)


def _spc_or_nan(xs, ys) -> float:
    try:
        return spearman(xs, ys)
    except ValidationError:
        return float("nan")


def partial_study(dataset: Dataset, num_subsets: int, spec: ModelSpec, train_config: TrainConfig,
                  unlearn_config: UnlearnConfig, test_set: Dataset, seeds=(0,), mode: str = "approx",
                  partition: Partition | None = None, subtract_empty: bool = False) -> PartialStudy:
    """Rank-correlate partial Unlearning Shapley values with the retraining reference.

    For each seed the dataset is split into ``num_subsets`` random players (or
    ``partition`` is used as given), a full model is trained, and each subset
    is valued from the full model and the subset alone. Returned coefficients
    are means over seeds; ``per_seed`` keeps the individual pairs.
    """
    if num_subsets < 4:
        raise ValidationError("need at least 4 subsets for a rank correlation")
    table, per_seed = [], []
    for seed in seeds:
        part = partition or make_partition(dataset, "subset", num_subsets, seed)
        cfg = TrainConfig(**{**train_config.__dict__, "seed": seed})
        ucfg = UnlearnConfig(**{**unlearn_config.__dict__, "seed": seed})
        full_data = dataset.canonical()
        model_full, _ = train(spec, full_data, cfg)
        p_full = perf(model_full, spec, test_set)
        p_empty = perf(init_params(spec, cfg.seed), spec, test_set)
        rows = []
        for i, members in enumerate(part.players):
            d_tgt = dataset.take(members).canonical()
            phi_unlearn, parts = partial_value(model_full, spec, d_tgt, test_set, cfg, ucfg,
                                               mode=mode, full_dataset=full_data)
            m_remain, _ = train(spec, dataset.without_ids(d_tgt.ids).canonical(), cfg)
            p_remain = perf(m_remain, spec, test_set)
            # parts.perf_tgt is the retraining utility of the target alone
            phi_exact = two_player_value(parts.perf_tgt, p_full, p_remain,
                                         p_empty if subtract_empty else 0.0)
            rows.append({
                "seed": seed,
                "subset": i,
                "size": int(members.size),
                "phi_unlearn": _round(phi_unlearn),
                "phi_exact": _round(phi_exact),
                "perf_retrain": p_remain,
                **parts.as_dict(),
            })
        per_seed.append((
            _spc_or_nan([r["phi_unlearn"] for r in rows], [r["perf_retrain"] for r in rows]),
            _spc_or_nan([r["phi_unlearn"] for r in rows], [r["phi_exact"] for r in rows]),
        ))
        table.extend(rows)
    spc = np.array(per_seed)
    return PartialStudy(float(np.nanmean(spc[:, 0])), float(np.nanmean(spc[:, 1])), table, per_seed)


@dataclass
class TimingResult:
    train_seconds: tuple[float, float]
    unlearn_seconds: tuple[float, float]
    speedup: float
    train_runs: list[float] = field(default_factory=list)
    unlearn_runs: list[float] = field(default_factory=list)


def bench_timing(dataset: Dataset, spec: ModelSpec, train_config: TrainConfig,
                 unlearn_config: UnlearnConfig, repeats: int = 3,
                 test_set: Dataset | None = None) -> TimingResult:
    """Wall-clock of training to budget vs unlearning the same data from the trained model."""
    if repeats < 3:
        raise ValidationError("repeats must be >= 3")
    data = dataset.canonical()
    align = test_set if test_set is not None else data
    model, _ = train(spec, data, train_config)  # warm-up, and the model to unlearn from
    unlearn(model, spec, data, align, unlearn_config)
    t_train, t_unlearn = [], []
    for _ in range(repeats):
        start = time.perf_counter()
        train(spec, data, train_config)
        t_train.append(time.perf_counter() - start)
        start = time.perf_counter()
        unlearn(model, spec, data, align, unlearn_config)
        t_unlearn.append(time.perf_counter() - start)
    tr = (float(np.mean(t_train)), float(np.std(t_train, ddof=1)))
    un = (float(np.mean(t_unlearn)), float(np.std(t_unlearn, ddof=1)))
    return TimingResult(tr, un, tr[0] / max(un[0], 1e-12), t_train, t_unlearn)
