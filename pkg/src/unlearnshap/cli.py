"""``unlearnshap run <config>`` and ``unlearnshap validate <config>``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .audit import loss_histogram, unlearning_audit
from .baselines import BetaParams, beta_shapley, influence_scores, knn_shapley
from .config import ConfigError, ExperimentConfig, load_config, validate
from .data import (
    Dataset,
    NoiseMask,
    Partition,
    flip_labels,
    flip_players,
    generate_synthetic,
    load_csv,
    partition,
    train_test_split,
)
from .errors import NumericFailure, ParseError, UnlearnShapError, ValidationError
from .harness import bench_timing, noisy_detection_curve, partial_study, removal_curve
from .model import ModelSpec
from .shapley import (
    ConvergenceCriterion,
    ValuationResult,
    exact_shapley,
    make_retrain_utility,
    make_unlearn_utility,
    mc_shapley,
)
from .training import TrainConfig, train
from .unlearning import UnlearnConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

STAGES = ("data", "split", "noise", "partition", "train", "unlearn", "valuation", "partial")


class DataError(UnlearnShapError):
    pass


def stage_seeds(master: int) -> dict[str, int]:
    """Independent per-stage seeds derived from the master seed."""
    return {name: int(np.random.SeedSequence([master, i]).generate_state(1)[0])
            for i, name in enumerate(STAGES)}


@dataclass
class Workspace:
    cfg: ExperimentConfig
    seeds: dict[str, int]
    spec: ModelSpec
    train_cfg: TrainConfig
    unlearn_cfg: UnlearnConfig
    train_set: Dataset
    test_set: Dataset
    partition: Partition
    noise: NoiseMask | None


class OutputDir:
    """Writes files only below ``root`` and remembers what was written."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root).resolve()
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        target = (self.root / name).resolve()
        if self.root not in target.parents:
            raise ValidationError(f"refusing to write outside the output directory: {name}")
        return target

    def _atomic(self, name: str, text: str) -> None:
        target = self.path(name)
        self.root.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, target)
        if name not in self.files:
            self.files.append(name)

    def write_csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        self._atomic(name, buf.getvalue())

    def write_json(self, name: str, payload: dict) -> None:
        self._atomic(name, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _require_finite(name: str, values) -> None:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# setup


def load_data(cfg: ExperimentConfig, seeds: dict[str, int]) -> tuple[Dataset, Dataset]:
    d = cfg["data"]
    try:
        if d["source"] == "synthetic":
            full = generate_synthetic(d["n"] + d["n_test"], d["dim"], d["num_classes"],
                                      d["separation"], seeds["data"])
            return train_test_split(full, d["n_test"], seeds["split"])
        data = load_csv(d["path"], d["label_column"], d["num_classes"])
        if d["test_path"]:
            return data, load_csv(d["test_path"], d["label_column"], d["num_classes"])
        return train_test_split(data, d["n_test"], seeds["split"])
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    except (ParseError, ValidationError) as exc:
        raise DataError(str(exc)) from None


def prepare(cfg: ExperimentConfig) -> Workspace:
    seeds = stage_seeds(cfg["experiment"]["seed"])
    train_set, test_set = load_data(cfg, seeds)
    d = cfg["data"]
    if train_set.dim != test_set.dim:
        raise DataError("train and test files have different feature counts")
    spec = ModelSpec(train_set.dim, tuple(cfg["model"]["hidden_dims"]), d["num_classes"],
                     cfg["model"]["activation"])
    train_cfg = TrainConfig(**cfg["train"], seed=seeds["train"])
    unlearn_cfg = UnlearnConfig(**cfg["unlearn"], seed=seeds["unlearn"])

    granularity = d["granularity"]
    if cfg["experiment"]["kind"] == "partial":
        granularity = "subset"
    num_players = d["num_players"]
    if granularity == "subset" and num_players is None:
        num_players = cfg["task"]["num_subsets"]
    try:
        part = partition(train_set, granularity, num_players, seeds["partition"])
    except ValidationError as exc:
        raise ConfigError(f"data.num_players: {exc}", "data.num_players") from None

    noise = None
    if d["flip_fraction"] > 0:
        if granularity == "point":
            train_set, noise = flip_labels(train_set, d["flip_fraction"], seeds["noise"])
        else:
            train_set, noise = flip_players(train_set, part, d["flip_fraction"], seeds["noise"])
    return Workspace(cfg, seeds, spec, train_cfg, unlearn_cfg, train_set, test_set, part, noise)


# ---------------------------------------------------------------------------
# valuation


def compute_values(ws: Workspace, mode: str, workers: int) -> tuple[ValuationResult, dict]:
    v = ws.cfg["valuation"]
    method = v["method"]
    n = len(ws.partition)
    crit = ConvergenceCriterion(ws.cfg.resolved_permutations(), v["window"], v["threshold"],
                                v["relative_threshold"])
    summary: dict = {"method": method, "num_players": n}

    if method in ("knn-shapley", "influence"):
        if method == "knn-shapley":
            if ws.partition.granularity != "point":
                raise ConfigError("valuation.method = knn-shapley requires data.granularity = point",
                                  "valuation.method")
            point = knn_shapley(ws.train_set, ws.test_set, v["k"])
        else:
            model, _ = train(ws.spec, ws.train_set.canonical(), ws.train_cfg)
            point = influence_scores(model, ws.spec, ws.train_set, ws.test_set)
        values = np.array([point[p].sum() for p in ws.partition.players])
        return ValuationResult(values, np.ones(n, dtype=np.int64), np.zeros(n), True, 0), summary

    if method == "unlearning-shapley":
        model_full, _ = train(ws.spec, ws.train_set.canonical(), ws.train_cfg)
        utility = make_unlearn_utility(model_full, ws.train_set, ws.partition, ws.spec,
                                       ws.unlearn_cfg, ws.test_set, mode=mode,
                                       train_config=ws.train_cfg)
        summary["mode"] = mode
    else:
        utility = make_retrain_utility(ws.train_set, ws.partition, ws.spec, ws.train_cfg, ws.test_set)

    if method == "beta-shapley":
        params = BetaParams(v["beta_alpha"], v["beta_beta"])
        result = beta_shapley(utility, n, params, crit.max_permutations, ws.seeds["valuation"],
                              crit, workers)
    elif v["estimator"] == "exact":
        result = exact_shapley(utility, n)
    else:
        result = mc_shapley(utility, n, crit, ws.seeds["valuation"], workers)

    summary["v_full"] = utility.value_mask((1 << n) - 1)
    summary["v_empty"] = utility.value_mask(0)
    summary["sum_values"] = float(np.sum(result.values))
    summary["utility_evaluations"] = utility.evaluations
    return result, summary


def _write_values(out: OutputDir, ws: Workspace, result: ValuationResult) -> None:
    _require_finite("values", result.values)
    sizes = ws.partition.sizes()
    noisy = ws.noise.flipped if ws.noise is not None else np.zeros(len(ws.partition), dtype=bool)
    out.write_csv("values.csv", ["player", "size", "value", "samples", "variance", "noisy"],
                  ((i, sizes[i], result.values[i], result.sample_counts[i],
                    result.running_variances[i], noisy[i]) for i in range(len(result))))


# ---------------------------------------------------------------------------
# experiment kinds


def run_value(ws, out, mode, workers):
    result, summary = compute_values(ws, mode, workers)
    _write_values(out, ws, result)
    summary.update(converged=result.converged, permutations_used=result.permutations_used)
    return summary


def run_eval_noisy(ws, out, mode, workers):
    if ws.noise is None:
        raise ConfigError("experiment.kind = eval-noisy requires data.flip_fraction > 0",
                          "data.flip_fraction")
    result, summary = compute_values(ws, mode, workers)
    _write_values(out, ws, result)
    curve = noisy_detection_curve(result.values, ws.noise, ws.cfg["task"]["bin_fraction"])
    out.write_csv("detection_curve.csv", ["inspected_fraction", "noisy_found_fraction"],
                  zip(curve.bins_inspected_fraction, curve.noisy_found_fraction))
    summary["noisy_players"] = ws.noise.count
    summary["detection_area"] = float(np.trapezoid(
        np.r_[0.0, curve.noisy_found_fraction], np.r_[0.0, curve.bins_inspected_fraction]))
    return summary


def run_eval_removal(ws, out, mode, workers):
    result, summary = compute_values(ws, mode, workers)
    _write_values(out, ws, result)
    rows = []
    for direction in ("highest_first", "lowest_first"):
        curve = removal_curve(ws.train_set, ws.partition, result.values, direction,
                              ws.cfg["task"]["removal_fractions"], ws.spec, ws.train_cfg, ws.test_set)
        summary[f"area_{direction}"] = curve.area()
        summary[f"skipped_{direction}"] = curve.skipped
        for f, acc in zip(curve.removal_fraction, curve.test_accuracy):
            rows.append((direction, f, acc, bool(np.isnan(acc))))
    out.write_csv("removal_curve.csv", ["direction", "fraction", "test_accuracy", "skipped"], rows)
    return summary


def run_partial(ws, out, mode, workers):
    task = ws.cfg["task"]
    target = task["target_subset"]
    if target >= len(ws.partition):
        raise ConfigError(f"task.target_subset = {target} violates constraint: must be < "
                          f"{len(ws.partition)}", "task.target_subset")
    seeds = [int(np.random.SeedSequence([ws.seeds["partial"], r]).generate_state(1)[0])
             for r in range(task["replicates"])]
    study = partial_study(ws.train_set, len(ws.partition), ws.spec, ws.train_cfg, ws.unlearn_cfg,
                          ws.test_set, seeds=seeds, mode=mode, partition=ws.partition,
                          subtract_empty=task["subtract_empty"])
    columns = ["seed", "subset", "size", "phi_unlearn", "phi_exact", "perf_retrain", "perf_full",
               "perf_unlearn", "perf_tgt", "perf_random", "v_tgt", "v_remain", "v_full"]
    out.write_csv("partial_table.csv", columns, ([r[c] for c in columns] for r in study.table))
    row = next(r for r in study.table if r["subset"] == target)
    _require_finite("partial values", [r["phi_unlearn"] for r in study.table])
    return {
        "mode": mode,
        "target_subset": target,
        "phi_tgt": row["phi_unlearn"],
        "v_tgt": row["v_tgt"],
        "v_remain": row["v_remain"],
        "v_full": row["v_full"],
        "spc_vs_retrain_perf": study.spc_vs_retrain_perf,
        "spc_vs_exact": study.spc_vs_exact,
        "per_seed": [{"seed": s, "spc_vs_retrain_perf": a, "spc_vs_exact": b}
                     for s, (a, b) in zip(seeds, study.per_seed)],
    }


def run_audit(ws, out, mode, workers):
    model_full, _ = train(ws.spec, ws.train_set.canonical(), ws.train_cfg)
    report = unlearning_audit(model_full, ws.spec, ws.train_set, ws.test_set, ws.train_cfg,
                              ws.unlearn_cfg, kr_on=ws.cfg["task"]["kr_on"])
    columns = ["subset", "size", "lkd", "lmse", "random_lkd", "random_lmse", "kr_raw", "kr",
               "perf_unlearn", "perf_retrain"]
    out.write_csv("audit_subsets.csv", columns, ([r[c] for c in columns] for r in report.per_subset))
    edges, counts = loss_histogram(model_full, ws.spec, ws.train_set, ws.cfg["task"]["histogram_bins"])
    out.write_csv("loss_histogram.csv", ["bin_low", "bin_high", "count"],
                  zip(edges[:-1], edges[1:], counts))
    _require_finite("audit metrics", [report.lkd, report.lmse])
    return {"lkd": report.lkd, "lmse": report.lmse, "kr": report.kr, "kr_raw": report.kr_raw,
            "spc": report.spc, "random_lkd": report.random_lkd, "random_lmse": report.random_lmse}


def run_bench(ws, out, mode, workers):
    res = bench_timing(ws.train_set, ws.spec, ws.train_cfg, ws.unlearn_cfg,
                       ws.cfg["task"]["repeats"], ws.test_set)
    # wall-clock numbers are not reproducible, so they go to the JSON summary only
    return {"train_seconds_mean": res.train_seconds[0], "train_seconds_sd": res.train_seconds[1],
            "unlearn_seconds_mean": res.unlearn_seconds[0], "unlearn_seconds_sd": res.unlearn_seconds[1],
            "speedup": res.speedup, "train_runs": res.train_runs, "unlearn_runs": res.unlearn_runs}


RUNNERS = {
    "value": run_value,
    "eval-noisy": run_eval_noisy,
    "eval-removal": run_eval_removal,
    "partial": run_partial,
    "audit": run_audit,
    "bench": run_bench,
}


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> dict:
    """Execute one experiment and write its outputs; returns the JSON summary."""
    started = datetime.now(timezone.utc).isoformat()
    exp = cfg["experiment"]
    out = OutputDir(out_dir if out_dir is not None else exp["output_dir"])
    ws = prepare(cfg)
    metrics = RUNNERS[exp["kind"]](ws, out, cfg["valuation"]["mode"], exp["workers"])
    manifest = {
        "config_digest": cfg.digest(),
        "version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "master_seed": exp["seed"],
        "stage_seeds": ws.seeds,
        "outputs": sorted(out.files),
    }
    summary = {"kind": exp["kind"], "metrics": metrics, "config": cfg.to_json(), "manifest": manifest}
    out.write_json("summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnshap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    run.add_argument("--seed", type=int, help="master seed (overrides experiment.seed)")
    run.add_argument("--workers", type=int, help="worker threads for permutation sampling")
    run.add_argument("--mode", choices=("approx", "oracle"), help="unlearning mode")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        report = validate(args.config)
        print(report.render())
        return EXIT_OK if report.ok else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.override("experiment.output_dir", args.out)
        if args.seed is not None:
            cfg.override("experiment.seed", args.seed)
        if args.workers is not None:
            cfg.override("experiment.workers", args.workers)
        if args.mode is not None:
            cfg.override("valuation.mode", args.mode)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(_jsonable(summary["metrics"]), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
