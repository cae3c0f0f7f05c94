"""Labeled feature data: synthetic generation, CSV ingestion and class splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Base class for dataset construction and parsing failures."""


class ParseError(DatasetError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DimensionMismatchError(DatasetError):
    def __init__(self, row: int, expected: int, got: int):
        self.row = row
        self.expected = expected
        self.got = got
        super().__init__(
            f"row {row}: expected {expected} features, got {got}")


class EmptyDatasetError(DatasetError):
    pass


class SplitError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix with integer class labels.

    ``features`` is (n_samples, feature_dim) float64 and ``labels`` is
    (n_samples,) int64.  ``modes`` optionally carries the generator's latent
    mode index per sample (synthetic data only); it is never used for
    training.
    """

    features: np.ndarray
    labels: np.ndarray
    modes: np.ndarray | None = field(default=None)

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise DatasetError("features must be a 2-D array")
        if y.shape != (X.shape[0],):
            raise DatasetError("labels must have one entry per sample")
        if X.shape[0] and y.min() < 0:
            raise DatasetError("class labels must be non-negative")
        if not np.all(np.isfinite(X)):
            raise DatasetError("features contain non-finite values")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.modes is not None:
            m = np.ascontiguousarray(self.modes, dtype=np.int64)
            m.setflags(write=False)
            object.__setattr__(self, "modes", m)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def class_count(self) -> int:
        return len(self.classes)

    def subset(self, mask_or_index) -> "LabeledDataset":
        modes = None if self.modes is None else self.modes[mask_or_index]
        return LabeledDataset(self.features[mask_or_index],
                              self.labels[mask_or_index], modes)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the hierarchical Gaussian-mixture generator.

    Class centers are drawn from N(0, inter_class_sigma^2 I).  Each class
    owns ``mode_count_per_class`` mode centers placed around its class center
    with standard deviation ``mode_spread * inter_class_sigma``, and samples
    cycle through the modes of their class, each drawn with standard
    deviation ``intra_mode_sigma`` around its mode center.

    With ``nuisance_dims > 0`` the last ``nuisance_dims`` of the
    ``feature_dim`` coordinates carry no class information: they are pure
    N(0, nuisance_sigma^2) noise shared by all classes.
    """

    class_count: int = 32
    samples_per_class: int = 50
    feature_dim: int = 20
    mode_count_per_class: int = 2
    intra_mode_sigma: float = 0.3
    inter_class_sigma: float = 1.0
    mode_spread: float = 1.0
    nuisance_dims: int = 0
    nuisance_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("class_count", "samples_per_class", "feature_dim",
                     "mode_count_per_class"):
            if int(getattr(self, name)) < 1:
                raise DatasetError(f"{name} must be >= 1")
        if min(self.intra_mode_sigma, self.inter_class_sigma,
               self.mode_spread, self.nuisance_sigma) < 0:
            raise DatasetError("sigmas must be non-negative")
        if not 0 <= self.nuisance_dims < self.feature_dim:
            raise DatasetError("nuisance_dims must lie in [0, feature_dim)")


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    rng = np.random.default_rng(spec.seed)
    C, M, p = spec.class_count, spec.mode_count_per_class, spec.feature_dim
    centers = rng.normal(0.0, spec.inter_class_sigma, size=(C, p))
    mode_centers = centers[:, None, :] + rng.normal(
        0.0, spec.mode_spread * spec.inter_class_sigma, size=(C, M, p))
    n_per = spec.samples_per_class
    labels = np.repeat(np.arange(C), n_per)
    # samples cycle through modes so every mode is populated when n_per >= M
    modes = np.tile(np.arange(n_per) % M, C)
    noise = rng.normal(0.0, spec.intra_mode_sigma, size=(C * n_per, p))
    X = mode_centers[labels, modes] + noise
    if spec.nuisance_dims:
        q = spec.nuisance_dims
        X[:, p - q:] = rng.normal(0.0, spec.nuisance_sigma,
                                  size=(C * n_per, q))
    return LabeledDataset(X, labels, labels * M + modes)


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_features(path) -> LabeledDataset:
    """Read ``class_id,feat_0,...,feat_{p-1}`` rows; a header row is optional."""
    labels, rows = [], []
    dim = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not t.strip() for t in record):
                continue
            if lineno == 1 and not _is_number(record[0].strip()):
                continue
            if len(record) < 2:
                raise ParseError(lineno, "expected class_id and features")
            try:
                label = int(record[0])
            except ValueError:
                raise ParseError(lineno, f"bad class id {record[0]!r}") from None
            try:
                feats = [float(t) for t in record[1:]]
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if dim is None:
                dim = len(feats)
            elif len(feats) != dim:
                raise DimensionMismatchError(lineno, dim, len(feats))
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise EmptyDatasetError(f"{path}: no samples")
    return LabeledDataset(np.array(rows), np.array(labels))


def save_features(dataset: LabeledDataset, path, header: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(["class_id"] + [f"feat_{j}"
                                       for j in range(dataset.feature_dim)])
        for y, x in zip(dataset.labels, dataset.features):
            w.writerow([int(y)] + [repr(float(v)) for v in x])


def zero_shot_split(dataset: LabeledDataset, train_fraction: float = 0.5,
                    seed: int | None = None):
    """Split by class so train and test label sets are disjoint.

    Classes are taken in label order unless ``seed`` is given, in which case
    the class order is permuted first.  The first
    ``ceil(train_fraction * n_classes)`` classes go to train.
    """
    if not 0.0 < train_fraction < 1.0:
        raise SplitError("train_fraction must lie in (0, 1)")
    classes = dataset.classes
    if len(classes) < 2:
        raise SplitError("need at least 2 classes to split")
    if seed is not None:
        classes = np.random.default_rng(seed).permutation(classes)
    n_train = min(math.ceil(train_fraction * len(classes)), len(classes) - 1)
    train_mask = np.isin(dataset.labels, classes[:n_train])
    return dataset.subset(train_mask), dataset.subset(~train_mask)


def load_group_map(path) -> dict[int, int]:
    """Class-to-group map for label grouping, JSON ``{"class": group}``."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(k): int(v) for k, v in raw.items()}
