"""Datasets, synthetic blobs, CSV ingestion, label corruption and player partitions."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ParseError, ValidationError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        ids = np.asarray(self.ids, dtype=np.int64).ravel()
        for arr in (x, y, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "ids", ids)
        if not (x.shape[0] == y.size == ids.size):
            raise ContractViolation("features, labels and ids must have the same length")
        if np.unique(ids).size != ids.size:
            raise ContractViolation("dataset ids must be unique")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, rows: Sequence[int] | np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.labels[rows], self.ids[rows], self.num_classes)

    def canonical(self) -> "Dataset":
        """Rows reordered by ascending id."""
        return self.take(np.argsort(self.ids, kind="stable"))

    def rows_for_ids(self, ids: Iterable[int]) -> np.ndarray:
        lookup = {int(v): i for i, v in enumerate(self.ids)}
        try:
            return np.array(sorted(lookup[int(v)] for v in ids), dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"unknown point id {exc.args[0]}") from None

    def without_ids(self, ids: Iterable[int]) -> "Dataset":
        drop = set(int(v) for v in ids)
        unknown = drop - set(self.ids.tolist())
        if unknown:
            raise ValidationError(f"unknown point ids: {sorted(unknown)[:5]}")
        keep = np.array([i for i, v in enumerate(self.ids) if int(v) not in drop], dtype=np.int64)
        return self.take(keep)

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(self.features, labels, self.ids, self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass(frozen=True)
class Partition:
    """Ordered, disjoint groups of dataset rows; each group is one player."""

    players: tuple[np.ndarray, ...]
    granularity: str = "point"

    def __post_init__(self):
        players = tuple(np.asarray(p, dtype=np.int64).ravel() for p in self.players)
        object.__setattr__(self, "players", players)
        if self.granularity not in ("point", "subset"):
            raise ValidationError("granularity must be 'point' or 'subset'")
        flat = np.concatenate(players) if players else np.array([], dtype=np.int64)
        if any(p.size == 0 for p in players):
            raise ContractViolation("players must be non-empty")
        if np.unique(flat).size != flat.size:
            raise ContractViolation("players must be pairwise disjoint")
        if self.granularity == "point" and any(p.size != 1 for p in players):
            raise ContractViolation("point granularity requires singleton players")

    def __len__(self) -> int:
        return len(self.players)

    def rows(self, coalition: Iterable[int]) -> np.ndarray:
        chunks = [self.players[i] for i in coalition]
        if not chunks:
            return np.array([], dtype=np.int64)
        return np.concatenate(chunks)

    def sizes(self) -> np.ndarray:
        return np.array([p.size for p in self.players])


@dataclass(frozen=True)
class NoiseMask:
    flipped: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "flipped", np.asarray(self.flipped, dtype=bool).ravel())

    @property
    def count(self) -> int:
        return int(self.flipped.sum())


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def class_means(d: int, num_classes: int, separation: float) -> np.ndarray:
    """Class centres with pairwise (or adjacent, when d is small) distance ``separation``."""
    means = np.zeros((num_classes, d))
    if d >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = separation / math.sqrt(2.0)
    elif d == 1:
        means[:, 0] = separation * (np.arange(num_classes) - (num_classes - 1) / 2)
    else:
        # regular polygon whose adjacent vertices are `separation` apart
        radius = separation / (2.0 * math.sin(math.pi / num_classes))
        angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


def generate_synthetic(n: int, d: int, num_classes: int, separation: float, seed: int) -> Dataset:
    """Balanced isotropic Gaussian blobs with unit variance."""
    if n < num_classes or d < 1 or separation < 0:
        raise ValidationError("need n >= num_classes, d >= 1 and separation >= 0")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    means = class_means(d, num_classes, separation)
    features = means[labels] + rng.standard_normal((n, d))
    return Dataset(features, labels, np.arange(n), num_classes)


def train_test_split(dataset: Dataset, test_size: int, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_size < len(dataset):
        raise ValidationError("test_size must leave both splits non-empty")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.take(np.sort(order[test_size:])), dataset.take(np.sort(order[:test_size]))


def load_csv(path: str | os.PathLike, label_column: str, num_classes: int) -> Dataset:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required", line=1) from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ParseError(f"{path}: label column {label_column!r} not in header", line=1)
        label_idx = header.index(label_column)
        feats, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}", line=line)
            try:
                values = [float(c) for j, c in enumerate(row) if j != label_idx]
                raw = float(row[label_idx])
            except ValueError as exc:
                raise ParseError(f"{path}: row {line}: {exc}", line=line) from None
            if raw != int(raw):
                raise ParseError(f"{path}: row {line}: label {row[label_idx]!r} is not an integer", line=line)
            label = int(raw)
            if not 0 <= label < num_classes:
                raise ValidationError(f"{path}: row {line}: label {label} outside [0, {num_classes})")
            feats.append(values)
            labels.append(label)
    if not labels:
        raise ParseError(f"{path}: no data rows")
    n = len(labels)
    return Dataset(np.array(feats, dtype=np.float64), np.array(labels), np.arange(n), num_classes)


def write_csv(dataset: Dataset, path: str | os.PathLike, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(dataset.dim)] + [label_column])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def _flip(labels: np.ndarray, rows: np.ndarray, num_classes: int, rng) -> np.ndarray:
    out = labels.copy()
    # shift by 1..C-1 to pick uniformly among the other classes
    out[rows] = (labels[rows] + rng.integers(1, num_classes, size=rows.size)) % num_classes
    return out


def flip_labels(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, NoiseMask]:
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("fraction must lie in [0, 1]")
    n = len(dataset)
    k = round_half_up(fraction * n)
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(n, size=k, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[rows] = True
    return dataset.with_labels(_flip(dataset.labels, rows, dataset.num_classes, rng)), NoiseMask(mask)


def flip_players(dataset: Dataset, partition: Partition, fraction: float, seed: int) -> tuple[Dataset, NoiseMask]:
    """Flip every label of ``round(fraction * num_players)`` randomly chosen players."""
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("fraction must lie in [0, 1]")
    m = len(partition)
    k = round_half_up(fraction * m)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(m, size=k, replace=False))
    mask = np.zeros(m, dtype=bool)
    mask[chosen] = True
    rows = np.sort(partition.rows(chosen.tolist()))
    return dataset.with_labels(_flip(dataset.labels, rows, dataset.num_classes, rng)), NoiseMask(mask)


def partition(dataset: Dataset, granularity: str = "point", num_players: int | None = None,
              seed: int = 0) -> Partition:
    n = len(dataset)
    if granularity == "point":
        if num_players is not None and num_players != n:
            raise ValidationError(f"point granularity needs num_players == n ({n}), got {num_players}")
        order = np.argsort(dataset.ids, kind="stable")
        return Partition(tuple(order[i:i + 1] for i in range(n)), "point")
    if granularity != "subset":
        raise ValidationError("granularity must be 'point' or 'subset'")
    if num_players is None or not 1 <= num_players <= n:
        raise ValidationError(f"num_players must lie in [1, {n}], got {num_players}")
    order = np.random.default_rng(seed).permutation(n)
    return Partition(tuple(np.sort(block) for block in np.array_split(order, num_players)), "subset")
