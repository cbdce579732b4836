"""Synthetic concentric-circles data, CSV I/O and minibatching."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ParseError, SchemaError
from .rng import STREAM_TOY, make_rng


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    input_box: Optional[tuple] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.shape[0] != labels.shape[0]:
            raise SchemaError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
        if labels.size and labels.min() < 0:
            raise SchemaError("labels must be non-negative")
        if self.input_box is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (feats.shape[1],)) for b in self.input_box)
            if np.any(feats < lo) or np.any(feats > hi):
                raise SchemaError("features fall outside the declared input box")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.input_box)


@dataclass(frozen=True)
class ToyConfig:
    """Two noisy concentric circles in (x1, x2) with a uniform third feature.

    Class ``i`` (label ``i - 1``) has radius ``rho_i``; ``x3 ~ U(alpha_i, beta_i)``.
    """

    n_per_class: int = 500
    sigma: float = 0.2
    rho1: float = 0.35
    rho2: float = 1.0
    alpha1: float = 0.80
    beta1: float = 0.85
    alpha2: float = 0.80
    beta2: float = 0.85
    seed: int = 0

    def validate(self) -> None:
        if int(self.n_per_class) != self.n_per_class or self.n_per_class < 1:
            raise ConfigError(f"n_per_class must be a positive integer, got {self.n_per_class}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if not self.rho1 < self.rho2:
            raise ConfigError(f"rho1 must be < rho2, got rho1={self.rho1}, rho2={self.rho2}")
        for a, b, name in ((self.alpha1, self.beta1, "1"), (self.alpha2, self.beta2, "2")):
            if not a <= b:
                raise ConfigError(f"alpha{name} must be <= beta{name}, got {a} > {b}")

    def to_dict(self) -> dict:
        return asdict(self)


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` standard normal draws from pairs of uniforms."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]


def generate_toy(cfg: ToyConfig) -> LabeledDataset:
    cfg.validate()
    rng = make_rng(cfg.seed, STREAM_TOY)
    n = int(cfg.n_per_class)
    feats, labels = [], []
    for label, (rho, lo, hi) in enumerate(((cfg.rho1, cfg.alpha1, cfg.beta1), (cfg.rho2, cfg.alpha2, cfg.beta2))):
        z = rng.uniform(0.0, 2.0 * math.pi, n)
        noise = cfg.sigma * box_muller(rng, 2 * n).reshape(2, n)
        x3 = rng.uniform(lo, hi, n)
        feats.append(np.column_stack([rho * np.cos(z) + noise[0], rho * np.sin(z) + noise[1], x3]))
        labels.append(np.full(n, label, dtype=np.int64))
    return LabeledDataset(np.vstack(feats), np.concatenate(labels))


def save_csv(ds: LabeledDataset, path, header: bool = True) -> None:
    """Write features at 17 significant digits with the label as last column."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow([f"x{i + 1}" for i in range(ds.n_features)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([format(v, ".17g") for v in row] + [int(label)])


def _is_numeric(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, n_features: Optional[int] = None, input_box: Optional[tuple] = None) -> LabeledDataset:
    """Read a comma-separated file whose final column is an integer label.

    A first row containing any non-numeric cell is treated as a header.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    if rows and not all(_is_numeric(c) for c in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")

    width = len(rows[0][1])
    if n_features is not None and width != n_features + 1:
        raise SchemaError(f"{path}: expected {n_features} feature columns plus a label, found {width} columns")
    if width < 2:
        raise SchemaError(f"{path}: need at least one feature column and a label column")

    feats = np.empty((len(rows), width - 1))
    labels = np.empty(len(rows), dtype=np.int64)
    for k, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
        try:
            feats[k] = [float(c) for c in row[:-1]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric feature in {row[:-1]}") from None
        cell = row[-1].strip()
        try:
            labels[k] = int(cell)
        except ValueError:
            raise SchemaError(f"{path}:{lineno}: label {cell!r} is not an integer") from None
    return LabeledDataset(feats, labels, input_box)


def batches(ds: LabeledDataset, batch_size: int, rng: Optional[np.random.Generator] = None, shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise ConfigError("shuffling requires an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start: start + batch_size]
        yield ds.features[idx], ds.labels[idx]
