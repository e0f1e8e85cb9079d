"""Synthetic ordinal datasets, CSV I/O and stratified k-fold indexing.

The generator draws a continuous latent severity, discretises it into
ordinal classes and then blurs it, so neighbouring classes overlap in
feature space the way graded clinical categories do.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError


@dataclass
class SyntheticConfig:
    num_samples: int = 2000
    num_classes: int = 5
    feature_dim: int = 8
    severity_noise: float = 0.5
    feature_noise: float = 0.5
    thresholds: list[float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1 or self.num_classes < 2 or self.feature_dim < 1:
            raise ConfigError("num_samples >= 1, num_classes >= 2 and feature_dim >= 1 required")
        if self.severity_noise < 0 or self.feature_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        cuts = self.cut_points()
        if len(cuts) != self.num_classes - 1 or np.any(np.diff(cuts) <= 0):
            raise ConfigError(f"need {self.num_classes - 1} strictly increasing thresholds, got {list(cuts)}")

    def cut_points(self) -> np.ndarray:
        """Interior class boundaries on the latent axis ``[0, K]``."""
        if self.thresholds is None:
            return np.arange(1, self.num_classes, dtype=np.float64)
        return np.asarray(self.thresholds, dtype=np.float64)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int = field(default=0)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.labels)
        if self.features.shape[0] != n or len(self.ids) != n:
            raise ConfigError("features, labels and ids must have the same length")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if len(np.unique(self.ids)) != n:
            raise ConfigError("sample ids must be unique")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.labels[rows], self.ids[rows], self.num_classes)

    def select_ids(self, ids) -> "Dataset":
        pos = {int(i): r for r, i in enumerate(self.ids)}
        return self.subset([pos[int(i)] for i in ids])


def generate(config: SyntheticConfig) -> tuple[Dataset, np.ndarray]:
    """Draw a dataset; also returns the unit severity direction used."""
    rng = np.random.default_rng(config.seed)
    k, d, n = config.num_classes, config.feature_dim, config.num_samples
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    severity = rng.uniform(0.0, float(k), size=n)
    labels = np.searchsorted(config.cut_points(), severity, side="right")
    observed = severity + config.severity_noise * rng.standard_normal(n)
    features = observed[:, None] * direction + config.feature_noise * rng.standard_normal((n, d))
    return Dataset(features, labels, np.arange(n), k), direction


def save_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    d = dataset.features.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", *[f"f{j}" for j in range(d)]])
        for sid, lab, row in zip(dataset.ids, dataset.labels, dataset.features):
            writer.writerow([int(sid), int(lab), *[format(float(v), ".17g") for v in row]])


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Read ``id,label,f0,f1,...``; labels outside ``[0, num_classes)`` are rejected."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise DataFormatError(f"{path}: empty dataset file")
    header = [c.strip() for c in rows[0]]
    if header[:2] != ["id", "label"] or len(header) < 3 or header[2:] != [f"f{j}" for j in range(len(header) - 2)]:
        raise DataFormatError(f"{path}: header must be id,label,f0,f1,...", line=1)
    body = [(i, r) for i, r in enumerate(rows[1:], start=2) if r]
    if not body:
        raise DataFormatError(f"{path}: dataset has no rows")
    d = len(header) - 2
    ids, labels, feats = [], [], []
    for line, row in body:
        if len(row) != d + 2:
            raise DataFormatError(f"expected {d + 2} fields, got {len(row)}", line=line)
        try:
            sid = int(row[0])
            lab = int(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise DataFormatError(f"unparseable value ({exc})", line=line) from None
        if lab < 0 or (num_classes is not None and lab >= num_classes):
            raise DataFormatError(f"label {lab} out of range", line=line)
        if not all(math.isfinite(v) for v in vals):
            raise DataFormatError("non-finite feature value", line=line)
        ids.append(sid)
        labels.append(lab)
        feats.append(vals)
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{path}: duplicate sample ids")
    k = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(np.array(feats), np.array(labels), np.array(ids), k)


def write_provenance(config: SyntheticConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")


def kfold_split(dataset: Dataset, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified folds as ``(train_ids, val_ids)`` pairs.

    Each class is shuffled and dealt round-robin, continuing the deal across
    classes so fold sizes differ by at most one.
    """
    n = len(dataset)
    if folds < 2 or folds > n:
        raise ConfigError(f"folds must be in [2, {n}], got {folds}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    cursor = 0
    for c in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.labels == c)
        if 0 < len(rows) < folds:
            warnings.warn(f"class {c} has {len(rows)} members, fewer than {folds} folds", stacklevel=2)
        rows = rng.permutation(rows)
        assignment[rows] = (cursor + np.arange(len(rows))) % folds
        cursor += len(rows)
    out = []
    for f in range(folds):
        val = dataset.ids[assignment == f]
        train = dataset.ids[assignment != f]
        out.append((train, val))
    return out
