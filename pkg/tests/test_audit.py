import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from unlearnshap.audit import kr, kr_raw, lkd, lmse, loss_histogram, spearman, unlearning_audit
from unlearnshap.data import Dataset, generate_synthetic, train_test_split
from unlearnshap.errors import ValidationError
from unlearnshap.model import ModelSpec, ParamVector, forward_logits, init_params, per_point_losses
from unlearnshap.training import TrainConfig, train
from unlearnshap.unlearning import UnlearnConfig

from conftest import random_net


@pytest.fixture(scope="module")
def models():
    ds = generate_synthetic(300, 2, 2, 4.0, seed=0)
    tr, te = train_test_split(ds, 100, seed=0)
    spec = ModelSpec(2, (8,), 2)
    cfg = TrainConfig(epochs=5, learning_rate=0.01)
    full, _ = train(spec, tr, cfg)
    return tr, te, spec, cfg, full, init_params(spec, cfg.seed)


def test_kr_anchors(models):
    tr, te, spec, _, full, rand = models
    assert kr(full, full, rand, spec, te) == 1.0
    assert kr(rand, full, rand, spec, te) == 0.0


def test_kr_arithmetic_and_clipping():
    spec = ModelSpec(1, (), 2)
    p = lambda w, b: ParamVector.for_spec(spec, [0.0, w, 0.0, b])  # logit1 = w x + b
    x = np.arange(10, dtype=float).reshape(-1, 1)
    ds = Dataset(x, np.ones(10, dtype=int), np.arange(10), 2)
    full, rand, mid = p(0.0, 1.0), p(0.0, -1.0), p(1.0, -3.5)  # accuracies 1.0, 0.0, 0.6
    assert kr_raw(mid, full, rand, spec, ds) == pytest.approx(0.6)
    # perf triple (0.6, 0.9, 0.1) worked by hand
    assert (0.6 - 0.1) / (0.9 - 0.1) == pytest.approx(0.625)
    assert kr_raw(rand, full, mid, spec, ds) == pytest.approx(-1.5)
    assert kr(rand, full, mid, spec, ds) == 0.0
    assert kr(full, mid, rand, spec, ds) == 1.0
    with pytest.raises(ValidationError):
        kr_raw(mid, full, full, spec, ds)


def test_divergences_zero_for_identical_and_positive_otherwise(models):
    tr, te, spec, _, full, rand = models
    assert lkd(full, full, spec, tr) == 0.0
    assert lmse(full, full, spec, tr) == 0.0
    assert lkd(rand, full, spec, tr) > 0
    assert lmse(rand, full, spec, tr) > 0


def test_lkd_matches_manual_average():
    spec, a = random_net(1)
    _, b = random_net(2)
    ds = Dataset(np.random.default_rng(3).normal(size=(5, 2)), [0, 1, 0, 1, 1], np.arange(5), 2)
    la, lb = forward_logits(a, spec, ds), forward_logits(b, spec, ds)
    manual = 0.0
    for ra, rb in zip(la, lb):
        pa = np.exp(ra) / np.exp(ra).sum()
        pb = np.exp(rb) / np.exp(rb).sum()
        manual += sum(pa[j] * math.log(pa[j] / pb[j]) for j in range(2))
    assert lkd(a, b, spec, ds) == pytest.approx(manual / 5, abs=1e-12)
    naive = np.mean([(la[i, j] - lb[i, j]) ** 2 for i in range(5) for j in range(2)])
    assert lmse(a, b, spec, ds) == pytest.approx(naive, abs=1e-12)


def test_lmse_constant_offset():
    spec = ModelSpec(2, (), 3)
    rng = np.random.default_rng(0)
    values = rng.normal(size=spec.num_params)
    shifted = values.copy()
    shifted[-3:] += 2.0
    ds = Dataset(rng.normal(size=(4, 2)), [0, 1, 2, 0], np.arange(4), 3)
    assert lmse(ParamVector.for_spec(spec, values), ParamVector.for_spec(spec, shifted), spec, ds) == pytest.approx(4.0)


def test_spearman_anchors():
    assert spearman([1, 2, 3, 4], [2, 4, 6, 9]) == 1.0
    assert spearman([1, 2, 3, 4], [9, 6, 4, 2]) == -1.0
    with pytest.raises(ValidationError):
        spearman([1, 1, 1], [1, 2, 3])


def rank_oracle(v):
    v = list(v)
    ranks = []
    for x in v:
        below = sum(1 for y in v if y < x)
        equal = sum(1 for y in v if y == x)
        ranks.append(below + (equal + 1) / 2)
    return np.array(ranks)


def test_spearman_ties_match_rank_oracle():
    rx, ry = rank_oracle([1, 2, 2, 4]), rank_oracle([10, 20, 30, 40])
    expected = np.corrcoef(rx, ry)[0, 1]
    assert spearman([1, 2, 2, 4], [10, 20, 30, 40]) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=3, max_size=25))
def test_spearman_range_monotone_invariance_and_scipy(pairs):
    xs = np.array([p[0] for p in pairs], dtype=float)
    ys = np.array([p[1] for p in pairs], dtype=float)
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return
    r = spearman(xs, ys)
    assert -1.0 <= r <= 1.0
    assert spearman(np.exp(xs), ys ** 3) == pytest.approx(r, abs=1e-12)
    assert r == pytest.approx(spearmanr(xs, ys).statistic, abs=1e-12)


def test_loss_histogram(models):
    tr, _, spec, _, full, _ = models
    edges, counts = loss_histogram(full, spec, tr, 10)
    assert counts.sum() == len(tr)
    losses = per_point_losses(full, spec, tr)
    manual = np.zeros(10, dtype=int)
    for v in losses:
        manual[min(int(np.searchsorted(edges, v, side="right")) - 1, 9)] += 1
    assert np.array_equal(counts, manual)


def test_loss_histogram_constant():
    spec = ModelSpec(2, (), 2)
    zero = ParamVector.for_spec(spec, np.zeros(spec.num_params))
    ds = Dataset(np.random.default_rng(0).normal(size=(6, 2)), [0, 1, 0, 1, 0, 1], np.arange(6), 2)
    _, counts = loss_histogram(zero, spec, ds, 5)
    assert np.count_nonzero(counts) == 1


def test_unlearning_audit_report(models):
    tr, te, spec, cfg, full, _ = models
    report = unlearning_audit(full, spec, tr, te, cfg, UnlearnConfig(learning_rate=0.05))
    assert len(report.per_subset) == 2
    assert report.lkd >= 0 and report.lmse >= 0
    assert 0.0 <= report.kr <= 1.0
    assert report.random_lmse > 0
    with pytest.raises(ValidationError):
        unlearning_audit(full, spec, tr, te, cfg, UnlearnConfig(), kr_on="both")
