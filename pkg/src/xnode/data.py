"""Datasets, synthetic clusters and the cross-validation split plan."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import load_features, save_features

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetBundle:
    X: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        n = self.X.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != n:
            raise ValueError(f"{n} feature rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError(f"label indices must lie in [0, {len(self.class_names)})")
        masks = [np.asarray(m, dtype=bool) for m in (self.train_mask, self.val_mask, self.test_mask)]
        if any(len(m) != n for m in masks):
            raise ValueError("split masks must have one entry per node")
        if (masks[0].astype(int) + masks[1] + masks[2] != 1).any():
            raise ValueError("split masks must be disjoint and cover all nodes")
        self.train_mask, self.val_mask, self.test_mask = masks

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def with_split(self, split: "Split") -> "DatasetBundle":
        return DatasetBundle(self.X, self.labels, self.class_names, split.train, split.val, split.test)


@dataclass(frozen=True)
class CvPlan:
    folds: int = 3
    seeds: tuple[int, ...] = (42, 43, 44)
    val_fraction: float = 0.2


@dataclass
class Split:
    seed: int
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_cv_splits(n: int, plan: CvPlan = CvPlan()) -> list[Split]:
    """One split per (seed, fold): the fold is the test set, the remaining
    nodes are shuffled and divided into train and validation."""
    if n < max(10, plan.folds):
        raise ValueError(f"need at least 10 nodes for {plan.folds}-fold splits, got {n}")
    out = []
    for seed in plan.seeds:
        perm = np.random.default_rng(seed).permutation(n)
        folds = np.array_split(perm, plan.folds)
        for f in range(plan.folds):
            pool = np.concatenate([folds[j] for j in range(plan.folds) if j != f])
            pool = np.random.default_rng([seed, f]).permutation(pool)
            n_val = int(round(plan.val_fraction * len(pool)))
            masks = [np.zeros(n, dtype=bool) for _ in range(3)]
            masks[0][pool[n_val:]] = True
            masks[1][pool[:n_val]] = True
            masks[2][folds[f]] = True
            out.append(Split(seed, f, *masks))
    return out


def generate_synthetic(n: int = 300, d: int = 16, n_classes: int = 3, cluster_sep: float = 6.0,
                       label_noise: float = 0.05, seed: int = 42, plan: CvPlan = CvPlan()) -> DatasetBundle:
    """Unit-variance Gaussian clusters whose means are pairwise ``cluster_sep`` apart.

    Means sit on scaled basis vectors, so ``n_classes <= d`` is required.
    Each label is moved to a different random class with probability
    ``label_noise``. Splits are the first (seed, fold 0) split of ``plan``
    run with this seed.
    """
    if not 1 <= n_classes <= n:
        raise ValueError(f"need 1 <= n_classes <= n, got {n_classes} classes for {n} nodes")
    if n_classes > d:
        raise ValueError(f"cluster means are basis directions: need n_classes <= d, got {n_classes} > {d}")
    if cluster_sep <= 0:
        raise ValueError("cluster_sep must be positive")
    if not 0 <= label_noise <= 1:
        raise ValueError("label_noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    means = np.eye(d)[:n_classes] * (cluster_sep / np.sqrt(2))
    clusters = np.arange(n) % n_classes
    rng.shuffle(clusters)
    X = means[clusters] + rng.normal(size=(n, d))
    labels = clusters.copy()
    if n_classes > 1:
        flip = rng.random(n) < label_noise
        shift = rng.integers(1, n_classes, size=n)
        labels[flip] = (labels[flip] + shift[flip]) % n_classes
    split = make_cv_splits(n, CvPlan(plan.folds, (seed,), plan.val_fraction))[0]
    return DatasetBundle(X, labels, [f"class-{c}" for c in range(n_classes)],
                         split.train, split.val, split.test)


def save_dataset(bundle: DatasetBundle, directory, binary: bool = False) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "features": directory / ("features.bin" if binary else "features.csv"),
        "labels": directory / "labels.csv",
        "classes": directory / "classes.csv",
        "splits": directory / "splits.csv",
    }
    save_features(bundle.X, paths["features"], binary=binary)
    _write_rows(paths["labels"], ("node", "label"), enumerate(bundle.labels.tolist()))
    _write_rows(paths["classes"], ("index", "name"), enumerate(bundle.class_names))
    _write_rows(paths["splits"], ("node", "split"), enumerate(split_names(bundle)))
    return paths


def split_names(bundle: DatasetBundle) -> list[str]:
    return [SPLIT_NAMES[int(np.flatnonzero([t, v, s])[0])]
            for t, v, s in zip(bundle.train_mask, bundle.val_mask, bundle.test_mask)]


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_indexed(path, header) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(c.strip() for c in first) != header:
            raise ValueError(f"{path}: expected header {','.join(header)}")
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or row[0].strip() != str(len(values)):
                raise ValueError(f"{path}: line {lineno}: expected consecutive '{header[0]},{header[1]}' rows")
            values.append(row[1].strip())
    return values


def read_labels(path) -> np.ndarray:
    return np.array([int(v) for v in _read_indexed(path, ("node", "label"))], dtype=np.int64)


def read_classes(path) -> list[str]:
    return _read_indexed(path, ("index", "name"))


def read_splits(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    names = np.array(_read_indexed(path, ("node", "split")))
    unknown = set(names) - set(SPLIT_NAMES)
    if unknown:
        raise ValueError(f"{path}: unknown split names {sorted(unknown)}")
    return tuple(names == s for s in SPLIT_NAMES)


def load_dataset(features_path, labels_path, splits_path=None, classes_path=None,
                 seed: int = 42) -> DatasetBundle:
    """Read features, labels and optional class names and splits.

    Without a splits file the first split of the CV plan for ``seed`` is used.
    """
    X = load_features(features_path)
    labels = read_labels(labels_path)
    if len(labels) != X.shape[0]:
        raise ValueError(f"{features_path} has {X.shape[0]} rows but {labels_path} has {len(labels)} labels")
    if classes_path is not None:
        names = read_classes(classes_path)
    else:
        names = [f"class-{c}" for c in range(int(labels.max()) + 1)]
    if len(labels) and labels.max() >= len(names):
        raise ValueError(f"label index {labels.max()} has no class name")
    if splits_path is not None:
        train, val, test = read_splits(splits_path)
        if len(train) != X.shape[0]:
            raise ValueError(f"{splits_path} covers {len(train)} nodes, features have {X.shape[0]}")
    else:
        s = make_cv_splits(X.shape[0], CvPlan(seeds=(seed,)))[0]
        train, val, test = s.train, s.val, s.test
    return DatasetBundle(X, labels, names, train, val, test)
