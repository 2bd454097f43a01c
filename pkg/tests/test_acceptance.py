"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are collected and repeated in the pytest terminal summary.
"""

import itertools
import time

import numpy as np

from unlearnshap.audit import kr, lkd, lmse, spearman
from unlearnshap.baselines import BetaParams, beta_shapley, knn_shapley
from unlearnshap.cli import main
from unlearnshap.data import Dataset, flip_labels, generate_synthetic, partition, round_half_up, train_test_split
from unlearnshap.harness import bench_timing, noisy_detection_curve, partial_study, removal_curve
from unlearnshap.model import Batch, ModelSpec, ParamVector, cross_entropy_and_grad, init_params
from unlearnshap.shapley import (
    Utility,
    exact_shapley,
    fixed_budget,
    make_retrain_utility,
    make_unlearn_utility,
    mc_shapley,
)
from unlearnshap.training import TrainConfig, train
from unlearnshap.unlearning import UnlearnConfig, unlearn_loss_and_grad

from conftest import numeric_grad, rel_err

RESULTS: list[str] = []


def report(number, ok, detail, started):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} ({time.perf_counter() - started:.1f}s) {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def random_table(n, rng):
    return rng.uniform(-1, 1, 1 << n)


def perm_oracle(table, n):
    phi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for perm in perms:
        mask = 0
        for p in perm:
            phi[p] += table[mask | (1 << p)] - table[mask]
            mask |= 1 << p
    return phi / len(perms)


def test_criterion_01_shapley_axioms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"efficiency": 0.0, "symmetry": 0.0, "dummy": 0.0, "linearity": 0.0}
    for g in range(20):
        n = int(rng.integers(3, 9))
        table = random_table(n, rng)
        # make player 0 and 1 symmetric and player n-1 a dummy
        for mask in range(1 << n):
            swapped = (mask & ~0b11) | ((mask & 1) << 1) | ((mask >> 1) & 1)
            table[swapped] = table[mask] if swapped > mask else table[swapped]
        for mask in range(1 << n):
            if (mask >> (n - 1)) & 1:
                table[mask] = table[mask & ~(1 << (n - 1))]
        other = random_table(n, rng)
        phi = exact_shapley(Utility.from_table(table, n), n).values
        phi_o = exact_shapley(Utility.from_table(other, n), n).values
        phi_sum = exact_shapley(Utility.from_table(table + other, n), n).values
        worst["efficiency"] = max(worst["efficiency"], abs(phi.sum() - (table[-1] - table[0])))
        worst["symmetry"] = max(worst["symmetry"], abs(phi[0] - phi[1]))
        worst["dummy"] = max(worst["dummy"], abs(phi[-1]))
        worst["linearity"] = max(worst["linearity"], np.max(np.abs(phi_sum - phi - phi_o)))
    ok = (worst["efficiency"] < 1e-9 and worst["symmetry"] < 1e-12 and worst["dummy"] < 1e-12
          and worst["linearity"] < 1e-9 and time.perf_counter() - t0 < 10)
    report(1, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()), t0)


def test_criterion_02_permutation_form():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    err = 0.0
    for _ in range(10):
        table = random_table(4, rng)
        err = max(err, np.max(np.abs(exact_shapley(Utility.from_table(table, 4), 4).values - perm_oracle(table, 4))))
    report(2, err < 1e-12 and time.perf_counter() - t0 < 5, f"max error {err:.1e}", t0)


def test_criterion_03_mc_convergence():
    t0 = time.perf_counter()
    table = random_table(8, np.random.default_rng(3))
    u = Utility.from_table(table, 8)
    exact = exact_shapley(u, 8).values
    est = mc_shapley(u, 8, fixed_budget(2000), seed=0).values
    err = np.max(np.abs(est - exact))
    bound = 0.02 * (table.max() - table.min())
    report(3, err < bound and time.perf_counter() - t0 < 60, f"max error {err:.4f} < {bound:.4f}", t0)


def test_criterion_04_oracle_equivalence():
    t0 = time.perf_counter()
    ds = generate_synthetic(300, 2, 2, 3.0, seed=0)
    tr, te = train_test_split(ds, 100, seed=0)
    spec = ModelSpec(2, (8,), 2, "relu")
    cfg = TrainConfig(epochs=3, learning_rate=0.01)
    part = partition(tr, "subset", 5, seed=0)
    full, _ = train(spec, tr.canonical(), cfg)
    retrain = exact_shapley(make_retrain_utility(tr, part, spec, cfg, te), 5).values
    unl = exact_shapley(make_unlearn_utility(full, tr, part, spec, UnlearnConfig(), te, "oracle", cfg), 5).values
    err = np.max(np.abs(retrain - unl))
    report(4, err < 1e-9 and time.perf_counter() - t0 < 300, f"{len(tr)} points, 5 players, max diff {err:.1e}", t0)


def test_criterion_05_gradient_fidelity():
    t0 = time.perf_counter()
    worst_ce = worst_obj = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        act = "tanh" if seed % 2 else "relu"
        spec = ModelSpec(3, (int(rng.integers(2, 5)),), int(rng.integers(2, 4)), act)
        full = ParamVector.for_spec(spec, rng.normal(scale=0.7, size=spec.num_params))
        theta = full.values + rng.normal(scale=0.2, size=spec.num_params)
        ub = Batch(rng.normal(size=(6, 3)), rng.integers(0, spec.num_classes, 6))
        tb = Batch(rng.normal(size=(5, 3)))

        def ce(t):
            return cross_entropy_and_grad(ParamVector.for_spec(spec, t), spec, ub)[0]

        def obj(t):
            return unlearn_loss_and_grad(ParamVector.for_spec(spec, t), full, spec, ub, tb)[0]

        g_ce = cross_entropy_and_grad(ParamVector.for_spec(spec, theta), spec, ub)[1].values
        g_obj = unlearn_loss_and_grad(ParamVector.for_spec(spec, theta), full, spec, ub, tb)[1].values
        worst_ce = max(worst_ce, rel_err(g_ce, numeric_grad(ce, theta)))
        worst_obj = max(worst_obj, rel_err(g_obj, numeric_grad(obj, theta)))
    ok = worst_ce < 1e-4 and worst_obj < 1e-4 and time.perf_counter() - t0 < 30
    report(5, ok, f"cross-entropy {worst_ce:.1e}, unlearning objective {worst_obj:.1e}", t0)


def _knn_brute(train, test, k):
    n = len(train)
    total = np.zeros(n)
    for x, y in zip(test.features, test.labels):
        def v(members):
            if not members:
                return 0.0
            m = np.array(members)
            dist = np.sqrt(((train.features[m] - x) ** 2).sum(1))
            near = m[np.lexsort((train.ids[m], dist))][:k]
            return float(np.sum(train.labels[near] == y)) / k

        total += exact_shapley(Utility.from_function(v, n), n).values
    return total / len(test)


def test_criterion_06_knn_exactness():
    t0 = time.perf_counter()
    err = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        tr = Dataset(rng.normal(size=(8, 2)), rng.integers(0, 2, 8), np.arange(8), 2)
        te = Dataset(rng.normal(size=(4, 2)), rng.integers(0, 2, 4), np.arange(4), 2)
        for k in (1, 3):
            err = max(err, np.max(np.abs(knn_shapley(tr, te, k) - _knn_brute(tr, te, k))))
    report(6, err < 1e-9 and time.perf_counter() - t0 < 10, f"max error {err:.1e}", t0)


def test_criterion_07_beta_reduction():
    t0 = time.perf_counter()
    table = random_table(8, np.random.default_rng(5))
    a = beta_shapley(Utility.from_table(table, 8), 8, BetaParams(1, 1), 200, seed=13).values
    b = mc_shapley(Utility.from_table(table, 8), 8, fixed_budget(200), seed=13).values
    report(7, bool(np.array_equal(a, b)), "bitwise equal" if np.array_equal(a, b) else "differs", t0)


# 500 training points in 50 dimensions, 20% of labels flipped; a linear model
NOISY_DIM = 50


def noisy_problem(seed):
    ds = generate_synthetic(700, NOISY_DIM, 2, 3.0, seed)
    tr, te = train_test_split(ds, 200, seed)
    noisy, mask = flip_labels(tr, 0.2, seed)
    spec = ModelSpec(NOISY_DIM, (), 2, "relu")
    cfg = TrainConfig(epochs=5, batch_size=64, learning_rate=0.05, seed=seed)
    return noisy, mask, te, spec, cfg


def test_criterion_08_noisy_detection():
    t0 = time.perf_counter()
    curves = []
    for seed in range(3):
        noisy, mask, te, spec, cfg = noisy_problem(seed)
        part = partition(noisy)
        values = mc_shapley(make_retrain_utility(noisy, part, spec, cfg, te), len(part),
                            fixed_budget(150), seed).values
        curve = noisy_detection_curve(values, mask, 0.05)
        curves.append(curve.noisy_found_fraction)
    mean = np.mean(curves, axis=0)
    diag = curve.bins_inspected_fraction
    # the last bin is (1, 1) for every curve, so dominance is checked from bin 2 up to the one before it
    margins = mean[1:-1] - diag[1:-1]
    ok = bool(np.all(margins > 0)) and time.perf_counter() - t0 < 1200
    report(8, ok, f"min margin over bins 2-19 {margins.min():+.3f}; curve {np.round(mean, 2).tolist()}", t0)


def test_criterion_09_removal_asymmetry():
    t0 = time.perf_counter()
    gaps = []
    for seed in range(3):
        noisy, _, te, spec, cfg = noisy_problem(seed)
        full, _ = train(spec, noisy.canonical(), cfg)
        ucfg = UnlearnConfig(steps=20, batch_size=32, learning_rate=0.01, seed=seed)
        part = partition(noisy)
        u = make_unlearn_utility(full, noisy, part, spec, ucfg, te)
        values = mc_shapley(u, len(part), fixed_budget(30), seed).values
        top = removal_curve(noisy, part, values, "highest_first", [0.25], spec, cfg, te)
        bottom = removal_curve(noisy, part, values, "lowest_first", [0.25], spec, cfg, te)
        gaps.append(bottom.test_accuracy[0] - top.test_accuracy[0])
    gap = float(np.mean(gaps))
    ok = gap >= 0.05 and time.perf_counter() - t0 < 1200
    report(9, ok, f"mean accuracy gap {gap:.3f} (per seed {np.round(gaps, 3).tolist()})", t0)


def graded_subsets(seed, d=10, slope=0.1):
    """Ten providers whose label quality degrades linearly: subset i has 10*i % flipped labels."""
    ds = generate_synthetic(700, d, 2, 3.0, seed)
    tr, te = train_test_split(ds, 200, seed)
    part = partition(tr, "subset", 10, seed)
    labels = tr.labels.copy()
    rng = np.random.default_rng(seed)
    for i, rows in enumerate(part.players):
        pick = rng.choice(rows, round_half_up(slope * i * rows.size), replace=False)
        labels[pick] = 1 - labels[pick]
    return tr.with_labels(labels), te, part, ModelSpec(d, (), 2, "relu")


def test_criterion_10_partial_signs():
    t0 = time.perf_counter()
    pairs = []
    for seed in range(3):
        tr, te, part, spec = graded_subsets(seed)
        cfg = TrainConfig(epochs=5, batch_size=64, learning_rate=0.05, seed=seed)
        ucfg = UnlearnConfig(steps=100, learning_rate=0.01, seed=seed)
        study = partial_study(tr, 10, spec, cfg, ucfg, te, seeds=[seed], partition=part)
        pairs.append(study.per_seed[0])
    pairs = np.array(pairs)
    neg = int(np.sum(pairs[:, 0] < 0))
    pos = int(np.sum(pairs[:, 1] > 0))
    ok = neg >= 2 and pos >= 2 and time.perf_counter() - t0 < 1800
    report(10, ok, f"spc vs retrain perf {np.round(pairs[:, 0], 3).tolist()}, "
                   f"spc vs exact {np.round(pairs[:, 1], 3).tolist()}", t0)


def test_criterion_11_timing():
    t0 = time.perf_counter()
    ds = generate_synthetic(2200, 50, 2, 3.0, seed=0)
    tr, te = train_test_split(ds, 200, seed=0)
    res = bench_timing(tr, ModelSpec(50, (512,), 2, "relu"), TrainConfig(), UnlearnConfig(), 3, te)
    ok = res.speedup >= 2 and time.perf_counter() - t0 < 300
    report(11, ok, f"train {res.train_seconds[0]:.3f}s, unlearn {res.unlearn_seconds[0]:.3f}s, "
                   f"speedup {res.speedup:.1f}x", t0)


def test_criterion_12_audit_anchors():
    t0 = time.perf_counter()
    ds = generate_synthetic(300, 2, 2, 4.0, seed=1)
    tr, te = train_test_split(ds, 100, seed=1)
    spec = ModelSpec(2, (8,), 2, "relu")
    full, _ = train(spec, tr, TrainConfig(epochs=5, learning_rate=0.01))
    rand = init_params(spec, 0)
    checks = {
        "kr(full)=1": kr(full, full, rand, spec, te) == 1.0,
        "kr(random)=0": kr(rand, full, rand, spec, te) == 0.0,
        "lkd same=0": lkd(full, full, spec, tr) == 0.0,
        "lmse same=0": lmse(full, full, spec, tr) == 0.0,
        "lkd differ>0": lkd(rand, full, spec, tr) > 0,
        "lmse differ>0": lmse(rand, full, spec, tr) > 0,
        "spearman monotone=1": spearman([1, 3, 7, 9], [0.1, 0.2, 5, 6]) == 1.0,
        "spearman reversed=-1": spearman([1, 3, 7, 9], [6, 5, 0.2, 0.1]) == -1.0,
    }
    failed = [k for k, v in checks.items() if not v]
    report(12, not failed, "all anchors hold" if not failed else f"failed: {failed}", t0)


def test_criterion_13_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    ini = """
[experiment]
kind = {kind}
seed = 5
[data]
n = {n}
n_test = 80
flip_fraction = 0.2
{data}
[model]
hidden_dims = 8
activation = relu
[train]
epochs = 3
learning_rate = 0.01
[unlearn]
learning_rate = 0.01
steps = 20
[valuation]
max_permutations = 4
[task]
removal_fractions = 0, 0.2, 0.4
num_subsets = 5
"""
    kinds = {"value": (20, ""), "eval-noisy": (20, ""), "eval-removal": (20, ""),
             "partial": (100, ""), "audit": (60, "")}
    mismatched = []
    for kind, (n, data) in kinds.items():
        path = tmp_path / f"{kind}.ini"
        path.write_text(ini.format(kind=kind, n=n, data=data))
        for run in ("a", "b"):
            assert main(["run", str(path), "--out", str(tmp_path / kind / run)]) == 0
        for csv_file in sorted((tmp_path / kind / "a").glob("*.csv")):
            twin = tmp_path / kind / "b" / csv_file.name
            if csv_file.read_bytes() != twin.read_bytes():
                mismatched.append(f"{kind}/{csv_file.name}")
    report(13, not mismatched, "all result CSVs byte-identical" if not mismatched else f"differ: {mismatched}", t0)
