"""Adversarial training with optional end-of-epoch parameter interpolation.

Each epoch starts from the interpolated parameters of the previous one, runs
adversarial minibatch updates with heavy-ball SGD and finishes with::

    theta'_n = lam(n) * theta'_{n-1} + (1 - lam(n)) * theta_n

When interpolation is disabled ``theta'_n = theta_n`` and the loop is plain
PGD adversarial training. Momentum buffers are carried across the epoch
boundary untouched. Epochs are numbered from 1.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import numerics as nx
from .attacks import ATTACKS, AttackConfig
from .data import LabeledDataset, batches
from .errors import CheckpointFormatError, ConfigError, DomainError, TrainingError
from .model import Mlp, ParamVector, decode_checkpoint, encode_checkpoint, model_from_header, model_header
from .objectives import LossConfig, total_loss
from .rng import STREAM_ATTACK, STREAM_SHUFFLE, make_rng

logger = logging.getLogger(__name__)

STREAM_EVAL_ATTACK = 7
METRICS_HEADER = ("epoch", "lambda", "loss", "clean_acc", "robust_acc_pgd", "wall_ms")


@dataclass(frozen=True)
class LambdaSchedule:
    """``fixed``: constant ``value``; ``rational``: ``(a n + b) / (c n + d)``."""

    kind: str = "rational"
    value: float = 0.0
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 10.0

    def validate(self) -> None:
        if self.kind == "fixed":
            if not 0.0 <= self.value <= 1.0:
                raise ConfigError(f"fixed lambda must lie in [0, 1], got {self.value}")
        elif self.kind == "rational":
            if self.c < self.a or self.d < self.b:
                raise ConfigError(
                    f"rational schedule needs c >= a and d >= b, got a={self.a}, b={self.b}, c={self.c}, d={self.d}"
                )
            if self.a < 0 or self.b < 0 or self.c <= 0 or self.d <= 0:
                raise ConfigError("rational schedule needs a, b >= 0 and c, d > 0")
        else:
            raise ConfigError(f"schedule kind must be 'fixed' or 'rational', got {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "LambdaSchedule":
        """Parse ``fixed:<lam>`` or ``rational:<a>,<b>,<c>,<d>``."""
        kind, _, args = text.partition(":")
        try:
            if kind == "fixed":
                sched = cls(kind="fixed", value=float(args))
            elif kind == "rational":
                parts = [float(v) for v in args.split(",")] if args else [1.0, 1.0, 1.0, 10.0]
                if len(parts) != 4:
                    raise ValueError("need four coefficients")
                sched = cls("rational", 0.0, *parts)
            else:
                raise ValueError(f"unknown kind {kind!r}")
        except ValueError as exc:
            raise ConfigError(f"cannot parse lambda schedule {text!r}: {exc}") from None
        sched.validate()
        return sched

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PiatConfig:
    enabled: bool = True
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "schedule": self.schedule.to_dict()}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    attack_name: str = "pgd"
    attack: AttackConfig = field(default_factory=AttackConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    piat: PiatConfig = field(default_factory=PiatConfig)
    seed: int = 0
    # (first_epoch, lr) milestones; the latest milestone <= epoch wins
    lr_schedule: tuple = ()
    record_wall_time: bool = False

    def validate(self) -> None:
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if self.attack_name not in ATTACKS:
            raise ConfigError(f"attack_name must be one of {sorted(ATTACKS)}, got {self.attack_name!r}")
        for item in self.lr_schedule:
            if len(item) != 2 or item[0] < 1 or not item[1] > 0:
                raise ConfigError(f"lr_schedule entries must be (epoch >= 1, lr > 0), got {item!r}")
        self.attack.validate()
        self.loss.validate()
        self.piat.schedule.validate()

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for start, value in sorted(self.lr_schedule):
            if epoch >= start:
                lr = value
        return float(lr)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "attack_name": self.attack_name,
            "attack": self.attack.to_dict(),
            "loss": self.loss.to_dict(),
            "piat": self.piat.to_dict(),
            "seed": self.seed,
            "lr_schedule": [list(x) for x in self.lr_schedule],
            "record_wall_time": self.record_wall_time,
        }


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    lambda_used: float
    loss_mean: float
    clean_acc: float
    robust_acc_pgd: float
    wall_ms: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_at(schedule: LambdaSchedule, n: int) -> float:
    if n < 1:
        raise DomainError(f"epoch index starts at 1, got {n}")
    schedule.validate()
    if schedule.kind == "fixed":
        return float(schedule.value)
    return (schedule.a * n + schedule.b) / (schedule.c * n + schedule.d)


@dataclass
class SgdState:
    velocity: Optional[np.ndarray] = None


def sgd_momentum_step(params: np.ndarray, grads: np.ndarray, state: SgdState, lr: float, momentum: float, weight_decay: float = 0.0) -> np.ndarray:
    """Heavy-ball update ``v <- m v + (g + wd theta)``, ``theta <- theta - lr v``.

    ``state.velocity`` is updated in place (initialized to zero); the new
    parameters are returned and ``params`` is left unchanged.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise TrainingError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradient")
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    g = grads + weight_decay * params if weight_decay else grads
    state.velocity = momentum * state.velocity + g
    return params - lr * state.velocity


def interpolate_params(prev: ParamVector, cur: ParamVector, lam: float) -> ParamVector:
    prev.check_compatible(cur)
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    return ParamVector(lam * prev.values + (1.0 - lam) * cur.values, prev.layout)


@dataclass
class TrainState:
    """Everything needed to continue training after ``epoch`` completed epochs."""

    model: Mlp
    velocity: Optional[np.ndarray]
    epoch: int
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_robust_acc: float = -1.0
    best_clean_acc: float = 0.0
    best_params: Optional[np.ndarray] = None
    config: Optional[dict] = None


@dataclass
class TrainResult:
    model: Mlp
    records: list
    final: TrainState
    best: TrainState
    checkpoints: dict = field(default_factory=dict)


def save_checkpoint(model: Mlp, optimizer_state: Optional[SgdState], epoch: int, path, extra: Optional[dict] = None, best_params: Optional[np.ndarray] = None) -> None:
    header = model_header(model)
    header["epoch"] = int(epoch)
    header["extra"] = extra or {}
    arrays = {"params": model.get_params().values}
    if optimizer_state is not None and optimizer_state.velocity is not None:
        arrays["velocity"] = optimizer_state.velocity
    if best_params is not None:
        arrays["best_params"] = best_params
    blob = encode_checkpoint(header, arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    header, arrays = decode_checkpoint(Path(path).read_bytes())
    if "params" not in arrays:
        raise CheckpointFormatError("checkpoint has no parameter segment")
    model = model_from_header(header, arrays["params"])
    extra = header.get("extra", {})
    best = extra.get("best", {})
    return TrainState(
        model=model,
        velocity=arrays.get("velocity"),
        epoch=int(header.get("epoch", 0)),
        records=[TrainRecord(**r) for r in extra.get("records", [])],
        best_epoch=int(best.get("epoch", 0)),
        best_robust_acc=float(best.get("robust_acc", -1.0)),
        best_clean_acc=float(best.get("clean_acc", 0.0)),
        best_params=arrays.get("best_params"),
        config=extra.get("config"),
    )


def _state_extra(state: TrainState) -> dict:
    return {
        "records": [r.to_dict() for r in state.records],
        "best": {"epoch": state.best_epoch, "robust_acc": state.best_robust_acc, "clean_acc": state.best_clean_acc},
        "config": state.config,
    }


def write_metrics_csv(records, path) -> None:
    """Rewrite the metrics log atomically (temp file + rename)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in records:
        writer.writerow([r.epoch, repr(float(r.lambda_used)), repr(float(r.loss_mean)), repr(float(r.clean_acc)), repr(float(r.robust_acc_pgd)), int(r.wall_ms)])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def robust_accuracy(model: Mlp, ds: LabeledDataset, cfg: AttackConfig, rng=None, name: str = "pgd") -> float:
    if len(ds) == 0:
        return 0.0
    x_adv = ATTACKS[name](model, None, ds.features, ds.labels, cfg, rng=rng)
    return model.accuracy(x_adv, ds.labels)


EpochCallback = Callable[[int, Mlp, TrainRecord], None]


def train(
    cfg: TrainConfig,
    model: Mlp,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    resume: Optional[TrainState] = None,
    checkpoint_dir=None,
    metrics_path=None,
    on_epoch_end: Optional[EpochCallback] = None,
) -> TrainResult:
    """Run (or continue) adversarial training for ``cfg.epochs`` epochs.

    Args:
        cfg: training configuration.
        model: model to train in place; ignored when ``resume`` is given.
        train_ds, test_ds: training data and the held-out set used for the
            per-epoch clean / robust accuracy and best-checkpoint selection.
        resume: state loaded with :func:`load_checkpoint`; training continues
            at epoch ``resume.epoch + 1``.
        checkpoint_dir: when set, ``ckpt_best`` and ``ckpt_final`` are written there.
        metrics_path: when set, the metrics CSV is rewritten after every epoch.
        on_epoch_end: called with ``(epoch, model, record)`` after interpolation.

    Returns:
        A :class:`TrainResult`; ``result.model`` holds the final parameters.
    """
    cfg.validate()
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise ConfigError("training and test datasets must be nonempty")
    attack = ATTACKS[cfg.attack_name]
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    if resume is not None:
        model = resume.model
        state = resume
        opt = SgdState(None if resume.velocity is None else resume.velocity.copy())
    else:
        state = TrainState(model=model, velocity=None, epoch=0)
        opt = SgdState()
    state.config = cfg.to_dict()
    if state.best_params is None:
        state.best_params = model.get_params().values

    theta_prev = model.get_params()
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = make_rng(cfg.seed, STREAM_SHUFFLE, epoch)
        attack_rng = make_rng(cfg.seed, STREAM_ATTACK, epoch)
        lr = cfg.lr_at(epoch)
        losses = []
        for b, (xb, yb) in enumerate(batches(train_ds, cfg.batch_size, shuffle_rng, shuffle=True)):
            x_adv = attack(model, None, xb, yb, cfg.attack, rng=attack_rng)
            model.zero_grad()
            with nx.Tape() as tape:
                loss = total_loss(model, xb, x_adv, yb, cfg.loss)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            tape.backward(loss)
            try:
                new = sgd_momentum_step(model.get_params_view().values, model.grad_vector(), opt, lr, cfg.momentum, cfg.weight_decay)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {b}") from None
            model.set_params(ParamVector(new, model.layout))
            losses.append(value)

        theta_cur = model.get_params()
        if cfg.piat.enabled:
            lam = lambda_at(cfg.piat.schedule, epoch)
            theta_prev = interpolate_params(theta_prev, theta_cur, lam)
        else:
            lam = 0.0
            theta_prev = theta_cur
        model.set_params(theta_prev)

        eval_rng = make_rng(cfg.seed, STREAM_EVAL_ATTACK, epoch)
        clean = model.accuracy(test_ds.features, test_ds.labels)
        robust = robust_accuracy(model, test_ds, cfg.attack, eval_rng)
        wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_wall_time else 0
        record = TrainRecord(epoch, float(lam), float(np.mean(losses)), clean, robust, wall)
        state.records.append(record)
        state.epoch = epoch
        state.velocity = opt.velocity
        logger.info("epoch %d lambda=%.4f loss=%.4f clean=%.4f robust=%.4f", epoch, lam, record.loss_mean, clean, robust)

        if robust > state.best_robust_acc:
            state.best_epoch, state.best_robust_acc, state.best_clean_acc = epoch, robust, clean
            state.best_params = theta_prev.values.copy()
            if ckpt_dir is not None:
                best_model = model.clone()
                save_checkpoint(best_model, opt, epoch, ckpt_dir / "ckpt_best", _state_extra(state))
        if metrics_path is not None:
            write_metrics_csv(state.records, metrics_path)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, record)

    checkpoints = {}
    if ckpt_dir is not None:
        save_checkpoint(model, opt, state.epoch, ckpt_dir / "ckpt_final", _state_extra(state), best_params=state.best_params)
        checkpoints = {"best": ckpt_dir / "ckpt_best", "final": ckpt_dir / "ckpt_final"}

    best_model = Mlp(model.spec, state.best_params)
    best = replace(state, model=best_model, records=list(state.records))
    return TrainResult(model=model, records=list(state.records), final=state, best=best, checkpoints=checkpoints)
