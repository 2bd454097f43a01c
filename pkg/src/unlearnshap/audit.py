"""Unlearning fidelity metrics and rank statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .errors import ValidationError
from .model import (
    ModelSpec,
    ParamVector,
    forward_logits,
    init_params,
    kl_divergence_logits,
    per_point_losses,
)
from .training import TrainConfig, perf, train
from .unlearning import UnlearnConfig, unlearn


def lkd(m_unlearn: ParamVector, m_retrain: ParamVector, spec: ModelSpec, d_remain: Dataset) -> float:
    """Mean KL(softmax f_unlearn || softmax f_retrain) over the remaining set."""
    if len(d_remain) == 0:
        raise ValidationError("remaining set is empty")
    return kl_divergence_logits(forward_logits(m_unlearn, spec, d_remain),
                                forward_logits(m_retrain, spec, d_remain))


def lmse(m_unlearn: ParamVector, m_retrain: ParamVector, spec: ModelSpec, d_remain: Dataset) -> float:
    """Mean squared logit difference over all points and classes."""
    if len(d_remain) == 0:
        raise ValidationError("remaining set is empty")
    diff = forward_logits(m_unlearn, spec, d_remain) - forward_logits(m_retrain, spec, d_remain)
    return float(np.mean(diff * diff))


def kr_raw(m_unlearn: ParamVector, m_full: ParamVector, m_random: ParamVector, spec: ModelSpec,
           d_eval: Dataset) -> float:
    p_unl = perf(m_unlearn, spec, d_eval)
    p_full = perf(m_full, spec, d_eval)
    p_rand = perf(m_random, spec, d_eval)
    if abs(p_full - p_rand) < 1e-9:
        raise ValidationError("full and random models perform alike on the evaluation set")
    return (p_unl - p_rand) / (p_full - p_rand)


def kr(m_unlearn: ParamVector, m_full: ParamVector, m_random: ParamVector, spec: ModelSpec,
       d_eval: Dataset) -> float:
    """Knowledge retention, clipped to [0, 1]. 0 means the evaluated knowledge is gone."""
    return float(np.clip(kr_raw(m_unlearn, m_full, m_random, spec, d_eval), 0.0, 1.0))


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.size != ys.size or xs.size < 2:
        raise ValidationError("spearman needs two equal-length vectors of length >= 2")
    rx = rankdata(xs, method="average")
    ry = rankdata(ys, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        raise ValidationError("rank variance is zero; correlation undefined")
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


def loss_histogram(params: ParamVector, spec: ModelSpec, dataset: Dataset,
                   num_bins: int) -> tuple[np.ndarray, np.ndarray]:
    if num_bins < 2:
        raise ValidationError("num_bins must be >= 2")
    losses = per_point_losses(params, spec, dataset)
    counts, edges = np.histogram(losses, bins=num_bins)
    return edges, counts


@dataclass
class AuditReport:
    lkd: float
    lmse: float
    kr: float
    kr_raw: float
    spc: float | None
    random_lkd: float
    random_lmse: float
    per_subset: list[dict] = field(default_factory=list)


def class_subsets(dataset: Dataset) -> list[np.ndarray]:
    return [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)
            if np.any(dataset.labels == c)]


def unlearning_audit(model_full: ParamVector, spec: ModelSpec, dataset: Dataset, test_set: Dataset,
                     train_config: TrainConfig, unlearn_config: UnlearnConfig,
                     subsets: list[np.ndarray] | None = None, kr_on: str = "forget") -> AuditReport:
    """Unlearn each subset from ``model_full`` and compare with retraining on the rest.

    Subsets default to one per class. Metrics are averaged over subsets; SPC
    rank-correlates perf(unlearned) with perf(retrained) on ``test_set``.
    """
    if kr_on not in ("forget", "remain"):
        raise ValidationError("kr_on must be 'forget' or 'remain'")
    subsets = class_subsets(dataset) if subsets is None else subsets
    m_random = init_params(spec, train_config.seed)
    rows = []
    for i, idx in enumerate(subsets):
        forget = dataset.take(idx).canonical()
        remain = dataset.without_ids(forget.ids).canonical()
        m_unl, _ = unlearn(model_full, spec, forget, test_set, unlearn_config)
        m_ret, _ = train(spec, remain, train_config)
        d_eval = forget if kr_on == "forget" else remain
        try:
            raw = kr_raw(m_unl, model_full, m_random, spec, d_eval)
        except ValidationError:
            raw = float("nan")
        rows.append({
            "subset": i,
            "size": len(forget),
            "lkd": lkd(m_unl, m_ret, spec, remain),
            "lmse": lmse(m_unl, m_ret, spec, remain),
            "random_lkd": lkd(m_random, m_ret, spec, remain),
            "random_lmse": lmse(m_random, m_ret, spec, remain),
            "kr_raw": raw,
            "kr": float(np.clip(raw, 0.0, 1.0)) if np.isfinite(raw) else float("nan"),
            "perf_unlearn": perf(m_unl, spec, test_set),
            "perf_retrain": perf(m_ret, spec, test_set),
        })

    def avg(key):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    try:
        spc = spearman([r["perf_unlearn"] for r in rows], [r["perf_retrain"] for r in rows])
    except ValidationError:
        spc = None
    return AuditReport(avg("lkd"), avg("lmse"), avg("kr"), avg("kr_raw"), spc,
                       avg("random_lkd"), avg("random_lmse"), rows)
