"""Robustness evaluation, decision-boundary and loss-landscape grids, and the
interpolation first-order check.

Argmax ties resolve to the lowest class index everywhere in this module.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .attacks import ATTACKS, AttackConfig
from .data import LabeledDataset
from .errors import ConfigError, DegenerateInputError, DimensionError, DomainError
from .model import Mlp, MlpSpec, ParamVector, layout_for
from .rng import STREAM_ATTACK, STREAM_EVAL_SUBSET, STREAM_LANDSCAPE, make_rng

TOY_X3_MIDPOINT = 0.825
LANDSCAPE_EVAL_SIZE = 256


# --- evaluation ------------------------------------------------------------

@dataclass
class EvalReport:
    clean_acc: float
    robust_acc: dict = field(default_factory=dict)
    per_attack_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "robust_acc": dict(self.robust_acc),
            "per_attack_config": {k: dict(v) for k, v in self.per_attack_config.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(model: Mlp, ds: LabeledDataset, attacks: Sequence[tuple] = (), seed: int = 0) -> EvalReport:
    """Clean accuracy plus robust accuracy under each ``(name, AttackConfig)``."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    report = EvalReport(clean_acc=model.accuracy(ds.features, ds.labels))
    for k, (name, cfg) in enumerate(attacks):
        if name not in ATTACKS:
            raise ConfigError(f"unknown attack {name!r}")
        rng = make_rng(seed, STREAM_ATTACK, k)
        x_adv = ATTACKS[name](model, None, ds.features, ds.labels, cfg, rng=rng)
        report.robust_acc[name] = model.accuracy(x_adv, ds.labels)
        report.per_attack_config[name] = cfg.to_dict()
    return report


# --- decision boundary -----------------------------------------------------

@dataclass
class BoundaryGrid:
    """Predictions on an (x1, x2) lattice; ``preds[i, j]`` is at ``(x1[i], x2[j])``."""

    x1_values: np.ndarray
    x2_values: np.ndarray
    x3: Optional[float]
    preds: np.ndarray
    margins: np.ndarray

    def same_geometry(self, other: "BoundaryGrid") -> bool:
        return (
            self.preds.shape == other.preds.shape
            and np.array_equal(self.x1_values, other.x1_values)
            and np.array_equal(self.x2_values, other.x2_values)
            and self.x3 == other.x3
        )

    def rows(self):
        for i, a in enumerate(self.x1_values):
            for j, b in enumerate(self.x2_values):
                yield a, b, int(self.preds[i, j]), self.margins[i, j]


def decision_boundary_grid(
    model: Mlp,
    x1_range: tuple = (-1.5, 1.5),
    x2_range: tuple = (-1.5, 1.5),
    x3_fixed: float = TOY_X3_MIDPOINT,
    resolution: int = 101,
) -> BoundaryGrid:
    """Evaluate the classifier on a square lattice with the third feature held fixed.

    The margin of a cell is the top logit minus the runner-up, so it is zero
    exactly on a tie.
    """
    if resolution < 2:
        raise DomainError(f"resolution must be >= 2, got {resolution}")
    d = model.spec.input_dim
    if d not in (2, 3):
        raise DimensionError(f"boundary grids need a 2- or 3-feature model, got input_dim={d}")
    x1 = np.linspace(x1_range[0], x1_range[1], resolution)
    x2 = np.linspace(x2_range[0], x2_range[1], resolution)
    g1, g2 = np.meshgrid(x1, x2, indexing="ij")
    cols = [g1.ravel(), g2.ravel()]
    if d == 3:
        cols.append(np.full(g1.size, float(x3_fixed)))
    logits = model.logits(np.column_stack(cols))
    preds = np.argmax(logits, axis=1)
    top2 = np.sort(logits, axis=1)[:, -2:] if logits.shape[1] > 1 else np.hstack([logits, logits])
    margins = top2[:, 1] - top2[:, 0]
    shape = (resolution, resolution)
    return BoundaryGrid(x1, x2, float(x3_fixed) if d == 3 else None, preds.reshape(shape), margins.reshape(shape))


def boundary_delta(grid_a: BoundaryGrid, grid_b: BoundaryGrid) -> float:
    """Fraction of lattice cells whose predicted class differs."""
    if not grid_a.same_geometry(grid_b):
        raise DimensionError("boundary grids have different geometry")
    return float(np.mean(grid_a.preds != grid_b.preds))


def mean_boundary_delta(grids: Sequence[BoundaryGrid]) -> float:
    """Average delta between consecutive grids of a sequence."""
    if len(grids) < 2:
        raise DomainError("need at least two grids")
    return float(np.mean([boundary_delta(a, b) for a, b in zip(grids[:-1], grids[1:])]))


def write_boundary_csv(grid: BoundaryGrid, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "pred", "margin"])
        for a, b, p, m in grid.rows():
            w.writerow([repr(float(a)), repr(float(b)), p, repr(float(m))])


# --- loss landscape --------------------------------------------------------

@dataclass
class LandscapeGrid:
    """``losses[i, j]`` is the loss at ``theta + m1[i] u + m2[j] v`` (unit u, v)."""

    m1_values: np.ndarray
    m2_values: np.ndarray
    losses: np.ndarray
    directions: tuple
    seed: int
    variant: str

    def rows(self):
        for i, a in enumerate(self.m1_values):
            for j, b in enumerate(self.m2_values):
                yield a, b, self.losses[i, j]


def symmetric_axis(n: int) -> np.ndarray:
    """``n`` points from -1 to 1, exactly antisymmetric, with an exact 0 for odd ``n``."""
    c = (n - 1) / 2.0
    return (np.arange(n) - c) / c


def random_directions(n_params: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = make_rng(seed, STREAM_LANDSCAPE)
    u = rng.standard_normal(n_params)
    v = rng.standard_normal(n_params)
    return u, v


def evaluation_subset(ds: LabeledDataset, size: int = LANDSCAPE_EVAL_SIZE, seed: int = 0) -> LabeledDataset:
    if len(ds) <= size:
        return ds
    idx = np.sort(make_rng(seed, STREAM_EVAL_SUBSET).choice(len(ds), size=size, replace=False))
    return ds.subset(idx)


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.sqrt(np.sum(v * v)))
    if n == 0.0:
        raise DegenerateInputError("landscape direction has zero norm")
    return v / n


def loss_landscape(
    model: Mlp,
    ds: LabeledDataset,
    grid_n: int = 21,
    seed: int = 0,
    variant: str = "clean",
    attack: Optional[AttackConfig] = None,
    directions: Optional[tuple] = None,
    eval_size: int = LANDSCAPE_EVAL_SIZE,
    threads: int = 1,
) -> LandscapeGrid:
    """Cross-entropy over the plane ``theta + m1 u/|u| + m2 v/|v|``, m in [-1, 1].

    ``variant="clean"`` scores the evaluation batch as is; ``"pgd"`` re-attacks
    every perturbed model with ``attack`` first. ``u`` and ``v`` are Gaussian
    draws from ``seed`` unless ``directions`` is given. The model is left with
    its original parameters. Results do not depend on ``threads``.
    """
    if grid_n < 3:
        raise DomainError(f"grid_n must be >= 3, got {grid_n}")
    if variant not in ("clean", "pgd"):
        raise ConfigError(f"landscape variant must be 'clean' or 'pgd', got {variant!r}")
    attack = attack or AttackConfig()
    theta = model.get_params()
    if directions is None:
        directions = random_directions(theta.values.size, seed)
    u, v = (_unit(np.asarray(d, dtype=np.float64)) for d in directions)
    batch = evaluation_subset(ds, eval_size, seed)
    m = symmetric_axis(grid_n)

    def cell_loss(probe: Mlp, i: int, j: int) -> float:
        probe.set_params(ParamVector(theta.values + m[i] * u + m[j] * v, theta.layout))
        x = batch.features
        if variant == "pgd":
            rng = make_rng(seed, STREAM_ATTACK, i, j)
            x = ATTACKS["pgd"](probe, None, x, batch.labels, attack, rng=rng)
        return nx.softmax_cross_entropy(probe.logits(x), batch.labels).item()

    def row(i: int) -> list:
        probe = model.clone()
        return [cell_loss(probe, i, j) for j in range(grid_n)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(grid_n)))
    else:
        rows = [row(i) for i in range(grid_n)]
    losses = np.array(rows)
    if not np.all(np.isfinite(losses)):
        raise DomainError("loss landscape produced non-finite values")
    return LandscapeGrid(m, m.copy(), losses, (u, v), seed, variant)


def flatness_score(grid: LandscapeGrid) -> float:
    """Population standard deviation of the landscape losses (lower is flatter)."""
    return float(np.std(grid.losses))


def write_landscape_csv(grid: LandscapeGrid, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m1", "m2", "loss"])
        for a, b, loss in grid.rows():
            w.writerow([repr(float(a)), repr(float(b)), repr(float(loss))])


# --- training-curve metrics ------------------------------------------------

def _robust_series(records) -> np.ndarray:
    return np.array([getattr(r, "robust_acc_pgd", r) for r in records], dtype=np.float64)


def oscillation_score(records, window: Optional[int] = None) -> float:
    """Std of epoch-to-epoch robust-accuracy differences over the last ``window`` epochs.

    ``records`` may be TrainRecords or plain accuracies.
    """
    series = _robust_series(records)
    window = series.size if window is None else int(window)
    if window > series.size:
        raise DomainError(f"window {window} exceeds the {series.size} available records")
    if window < 2:
        raise DomainError("window must cover at least two epochs")
    return float(np.std(np.diff(series[-window:])))


# --- interpolation first-order check ----------------------------------------

@dataclass(frozen=True)
class TheoremRow:
    lam: float
    shrink: float
    ratio: float

    @property
    def deviation(self) -> float:
        return abs(self.ratio - 1.0)


def theorem31_check(
    theta_i: ParamVector,
    theta_i1: ParamVector,
    model_spec: MlpSpec,
    probe_xs: np.ndarray,
    lambdas: Sequence[float] = (0.5, 0.9, 0.99),
    shrinks: Sequence[float] = (1e-2, 1e-3, 1e-4),
) -> list[TheoremRow]:
    """Ratio of the interpolated model's output shift to its first-order prediction.

    For each shrink ``s`` the second endpoint is pulled toward the first,
    ``theta_s = theta_i + s (theta_i1 - theta_i)``. For each ``lam`` with
    ``theta_t = lam theta_i + (1 - lam) theta_s`` the reported ratio is the
    probe-averaged ``|f_t(x) - f_i(x)| / ((1 - lam) |f_s(x) - f_i(x)|)``, which
    tends to 1 as ``s -> 0`` for any differentiable model and equals 1 for a
    model that is linear in its parameters.
    """
    theta_i.check_compatible(theta_i1)
    if tuple(theta_i.layout) != layout_for(model_spec):
        raise DimensionError("parameter layout does not match the model spec")
    if np.array_equal(theta_i.values, theta_i1.values):
        raise DegenerateInputError("the two parameter vectors are identical")
    for lam in lambdas:
        if not 0.0 <= lam < 1.0:
            raise DomainError(f"lambda must lie in [0, 1), got {lam}")
    x = np.asarray(probe_xs, dtype=np.float64)
    base = Mlp(model_spec, theta_i.values)
    probe = Mlp(model_spec)
    f_i = base.logits(x)
    delta = theta_i1.values - theta_i.values

    rows = []
    for s in shrinks:
        theta_s = theta_i.values + s * delta
        probe.set_params(ParamVector(theta_s, theta_i.layout))
        den = np.sqrt(np.sum((probe.logits(x) - f_i) ** 2, axis=1))
        if np.any(den == 0.0):
            raise DegenerateInputError(f"shrink {s}: a probe input has no output change")
        for lam in lambdas:
            theta_t = lam * theta_i.values + (1.0 - lam) * theta_s
            probe.set_params(ParamVector(theta_t, theta_i.layout))
            num = np.sqrt(np.sum((probe.logits(x) - f_i) ** 2, axis=1))
            rows.append(TheoremRow(float(lam), float(s), float(np.mean(num / ((1.0 - lam) * den)))))
    return rows


def write_theorem_csv(rows: Sequence[TheoremRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "shrink", "ratio", "deviation"])
        for r in rows:
            w.writerow([repr(r.lam), repr(r.shrink), repr(r.ratio), repr(r.deviation)])
