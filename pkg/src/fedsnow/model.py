"""Datasets, linear classifiers, metrics and label-flipping attacks.

Everything here is a pure function of its inputs and seed. Labels are binary
``{0, 1}``; a model is a :class:`WeightVector` holding coefficients, intercept
and the number of examples that produced it (needed for sample-weighted
federated averaging).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, EmptyDataError, IoError, SchemaError


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {x.shape}")
        if x.shape[1] < 1:
            raise DimensionError("dataset needs at least one feature column")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise DimensionError(f"{y.shape[0] if y.ndim == 1 else y.shape} labels for {x.shape[0]} rows")
        if y.size and not np.isin(y, (0, 1)).all():
            raise SchemaError("labels must be 0 or 1")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Sequence[int] | np.ndarray, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], name or self.name)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Linear model parameters exchanged between nodes, validators and the
    coordinator. Finiteness is checked by training and serialization, not at
    construction, so that corrupted vectors can still be represented."""

    coefficients: np.ndarray
    intercept: float = 0.0
    sample_count: int = 0

    def __post_init__(self) -> None:
        coef = np.array(self.coefficients, dtype=np.float64).reshape(-1)
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "intercept", float(self.intercept))
        if int(self.sample_count) < 0:
            raise ConfigError("sample_count must be nonnegative")
        object.__setattr__(self, "sample_count", int(self.sample_count))

    @classmethod
    def zeros(cls, n_features: int) -> "WeightVector":
        return cls(np.zeros(n_features), 0.0, 0)

    @classmethod
    def from_array(cls, flat: np.ndarray, sample_count: int = 0) -> "WeightVector":
        """Inverse of :meth:`as_array`: last entry is the intercept."""
        flat = np.asarray(flat, dtype=np.float64)
        return cls(flat[:-1], float(flat[-1]), sample_count)

    @property
    def dim(self) -> int:
        return int(self.coefficients.shape[0])

    def as_array(self) -> np.ndarray:
        return np.append(self.coefficients, self.intercept)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.coefficients).all() and math.isfinite(self.intercept))

    def with_count(self, sample_count: int) -> "WeightVector":
        return WeightVector(self.coefficients, self.intercept, sample_count)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return (
            np.array_equal(self.coefficients, other.coefficients)
            and self.intercept == other.intercept
            and self.sample_count == other.sample_count
        )

    def __repr__(self) -> str:
        coef = np.array2string(self.coefficients, precision=4, threshold=6)
        return f"WeightVector(coef={coef}, intercept={self.intercept:.4f}, n={self.sample_count})"


class ModelKind(str, Enum):
    LOGISTIC_REGRESSION = "logistic_regression"
    SGD_HINGE = "sgd_hinge"


class ClassWeighting(str, Enum):
    BALANCED = "balanced"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 20
    l2_penalty: float = 0.01
    class_weighting: ClassWeighting = ClassWeighting.UNIFORM
    seed: int = 0
    model_kind: ModelKind = ModelKind.LOGISTIC_REGRESSION
    # None means one full-batch step per epoch
    batch_size: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_weighting", ClassWeighting(self.class_weighting))
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs}")
        if not self.l2_penalty >= 0:
            raise ConfigError(f"l2_penalty must be >= 0, got {self.l2_penalty}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class AttackConfig:
    flip: int = 0
    proportion: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.flip < 0:
            raise ConfigError(f"flip must be >= 0, got {self.flip}")
        if not 0 <= self.proportion <= 8:
            raise ConfigError(f"proportion must be in [0, 8], got {self.proportion}")

    def check_validators(self, n_validators: int) -> None:
        if self.flip > n_validators:
            raise ConfigError(f"flip={self.flip} exceeds the {n_validators} validators")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    recall: dict[int, float] = field(default_factory=dict)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_dims(weights: WeightVector, data: Dataset) -> None:
    if weights.dim != data.n_features:
        raise DimensionError(f"weights have {weights.dim} coefficients, data has {data.n_features} features")


def class_weights(labels: np.ndarray, scheme: ClassWeighting | str) -> np.ndarray:
    """Per-example weights. ``balanced`` gives class c the weight n / (2 * count(c))."""
    labels = np.asarray(labels)
    if ClassWeighting(scheme) is ClassWeighting.UNIFORM:
        return np.ones(labels.shape[0])
    n = labels.shape[0]
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    per_class = np.divide(n, 2.0 * counts, out=np.zeros(2), where=counts > 0)
    return per_class[labels]


def decision_function(weights: WeightVector, features: np.ndarray) -> np.ndarray:
    return features @ weights.coefficients + weights.intercept


def predict(weights: WeightVector, features: np.ndarray) -> np.ndarray:
    return (decision_function(weights, features) > 0).astype(np.int64)


def training_loss(weights: WeightVector, data: Dataset, cfg: TrainConfig) -> float:
    """Regularized, class-weighted empirical loss minimized by :func:`train_local`."""
    _check_dims(weights, data)
    s = class_weights(data.labels, cfg.class_weighting)
    z = decision_function(weights, data.features)
    if cfg.model_kind is ModelKind.LOGISTIC_REGRESSION:
        per_example = np.logaddexp(0.0, z) - data.labels * z
    else:
        t = 2.0 * data.labels - 1.0
        per_example = np.maximum(0.0, 1.0 - t * z)
    reg = 0.5 * cfg.l2_penalty * float(weights.coefficients @ weights.coefficients)
    return float(np.mean(s * per_example)) + reg


def _gradient(
    w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, s: np.ndarray, cfg: TrainConfig
) -> tuple[np.ndarray, float]:
    z = x @ w + b
    if cfg.model_kind is ModelKind.LOGISTIC_REGRESSION:
        r = s * (_sigmoid(z) - y)
    else:
        t = 2.0 * y - 1.0
        r = np.where(t * z < 1.0, -s * t, 0.0)
    m = x.shape[0]
    return x.T @ r / m + cfg.l2_penalty * w, float(r.sum() / m)


def train_local(data: Dataset, init: WeightVector, cfg: TrainConfig) -> WeightVector:
    """Train a linear classifier from ``init`` by (mini-)batch gradient descent.

    With ``cfg.batch_size`` unset each epoch is one full-batch step, which makes
    the result independent of ``cfg.seed``; otherwise the seed drives the
    per-epoch shuffle.
    """
    if len(data) == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    _check_dims(init, data)
    x, y = data.features, data.labels.astype(np.float64)
    s = class_weights(data.labels, cfg.class_weighting)
    w = np.array(init.coefficients, dtype=np.float64)
    b = init.intercept
    n = len(data)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        if cfg.batch_size is None or cfg.batch_size >= n:
            batches = [slice(None)]
        else:
            order = rng.permutation(n)
            batches = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for batch in batches:
            gw, gb = _gradient(w, b, x[batch], y[batch], s[batch], cfg)
            w -= cfg.learning_rate * gw
            b -= cfg.learning_rate * gb
    out = WeightVector(w, b, n)
    if not out.is_finite():
        raise ConfigError("training diverged to non-finite weights; lower learning_rate")
    return out


def evaluate(weights: WeightVector, data: Dataset) -> Metrics:
    _check_dims(weights, data)
    if len(data) == 0:
        raise EmptyDataError("cannot evaluate on an empty dataset")
    pred = predict(weights, data.features)
    correct = pred == data.labels
    recall = {}
    for c in (0, 1):
        mask = data.labels == c
        recall[c] = float(correct[mask].mean()) if mask.any() else float("nan")
    return Metrics(float(correct.mean()), recall)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def flip_count(n: int, proportion: int) -> int:
    return _round_half_up(n * proportion / 10)


def flip_labels(data: Dataset, proportion: int, seed: int) -> Dataset:
    """Invert ``round(|data| * proportion / 10)`` labels chosen uniformly without
    replacement. Applying it twice with the same arguments is the identity."""
    if int(proportion) != proportion or not 0 <= proportion <= 8:
        raise ConfigError(f"proportion must be an integer in [0, 8], got {proportion}")
    n = len(data)
    count = flip_count(n, int(proportion))
    if count == 0:
        return data
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=count, replace=False)
    labels = data.labels.copy()
    labels[idx] = 1 - labels[idx]
    return Dataset(data.features, labels, data.name)


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 1000
    n_features: int = 2
    class_sep: float = 2.0
    imbalance_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        _check_synthetic(self.n_samples, self.n_features, self.class_sep, self.imbalance_ratio)


def _check_synthetic(n_samples: int, n_features: int, class_sep: float, imbalance_ratio: float) -> None:
    if n_samples < 2:
        raise ConfigError(f"n_samples must be >= 2, got {n_samples}")
    if n_features < 1:
        raise ConfigError(f"n_features must be >= 1, got {n_features}")
    if not 0.0 < imbalance_ratio < 1.0:
        raise ConfigError(f"imbalance_ratio must be in (0, 1), got {imbalance_ratio}")
    if not (class_sep >= 0 and math.isfinite(class_sep)):
        raise ConfigError(f"class_sep must be a finite nonnegative number, got {class_sep}")


def make_synthetic(
    n_samples: int = 1000,
    n_features: int = 2,
    class_sep: float = 2.0,
    imbalance_ratio: float = 0.5,
    seed: int = 0,
    name: str = "synthetic",
) -> Dataset:
    """Two unit-variance Gaussian blobs whose means are ``class_sep`` apart along
    a random direction. ``imbalance_ratio`` is the fraction of class 1."""
    _check_synthetic(n_samples, n_features, class_sep, imbalance_ratio)
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)
    n_pos = min(max(_round_half_up(n_samples * imbalance_ratio), 1), n_samples - 1)
    labels = np.zeros(n_samples, dtype=np.int64)
    labels[:n_pos] = 1
    centers = np.where(labels[:, None] == 1, 0.5, -0.5) * class_sep * direction
    features = centers + rng.standard_normal((n_samples, n_features))
    order = rng.permutation(n_samples)
    return Dataset(features[order], labels[order], name)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(data)
    n_test = _round_half_up(n * test_fraction)
    if n_test < 1 or n_test >= n:
        raise ConfigError(f"test_fraction={test_fraction} leaves an empty split of {n} rows")
    order = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(order[n_test:]), f"{data.name}/train"), data.subset(
        np.sort(order[:n_test]), f"{data.name}/test"
    )


def _as_float(value: str) -> float | None:
    try:
        return float(value)
    except ValueError:
        return None


def load_csv(
    path: str | Path,
    label_column: str,
    categorical_encoding: str = "onehot",
    positive_label: str | None = None,
) -> Dataset:
    """Load a headed CSV file into a binary-label :class:`Dataset`.

    A column is numeric when every cell parses as a float; numeric columns are
    min-max scaled to [0, 1] (constant columns become 0). Other columns are
    categorical and encoded one-hot, or as scaled ordinal codes, with
    categories ordered by first appearance.

    Labels must be 0/1 unless ``positive_label`` is given, in which case that
    value maps to 1 and the single other value to 0.
    """
    if categorical_encoding not in ("onehot", "ordinal"):
        raise ConfigError(f"unknown categorical_encoding {categorical_encoding!r}")
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path} is empty; a header row is required")
    header, body = [h.strip() for h in rows[0]], [r for r in rows[1:] if r]
    if label_column not in header:
        raise SchemaError(f"label column {label_column!r} not in header {header}")
    if not body:
        raise SchemaError(f"{path} has a header but no data rows")
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
    columns = {name: [row[j].strip() for row in body] for j, name in enumerate(header)}

    raw_labels = columns.pop(label_column)
    if positive_label is not None:
        distinct = set(raw_labels)
        if len(distinct) > 2 or (len(distinct) == 2 and positive_label not in distinct):
            raise SchemaError(f"label column {label_column!r} is not binary: {sorted(distinct)}")
        labels = np.array([v == positive_label for v in raw_labels], dtype=np.int64)
    else:
        parsed = [_as_float(v) for v in raw_labels]
        bad = sorted({v for v, p in zip(raw_labels, parsed) if p not in (0.0, 1.0)})
        if bad:
            raise SchemaError(f"label column {label_column!r} has non-binary values {bad}")
        labels = np.array(parsed, dtype=np.int64)

    blocks: list[np.ndarray] = []
    for name, cells in columns.items():
        numeric = [_as_float(v) for v in cells]
        if all(v is not None for v in numeric):
            col = np.array(numeric, dtype=np.float64)
            lo, hi = col.min(), col.max()
            scaled = (col - lo) / (hi - lo) if hi > lo else np.zeros_like(col)
            blocks.append(scaled[:, None])
            continue
        categories = {c: i for i, c in enumerate(dict.fromkeys(cells))}
        codes = np.array([categories[v] for v in cells])
        if categorical_encoding == "onehot":
            blocks.append(np.eye(len(categories))[codes])
        else:
            denom = max(len(categories) - 1, 1)
            blocks.append((codes / denom)[:, None])
    if not blocks:
        raise SchemaError(f"{path} has no feature columns besides {label_column!r}")
    return Dataset(np.hstack(blocks), labels, path.stem)
