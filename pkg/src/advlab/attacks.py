"""White-box gradient-sign attacks under an l-infinity budget.

Every attack works on a batch ``x`` (``B x d``) and returns ``x_adv`` with
``|x_adv - x|_inf <= epsilon`` per example and, when ``input_box`` is set,
``lo <= x_adv <= hi``. Parameters of the attacked model are never touched.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import numerics as nx
from .errors import AttackError, ConfigError

LossFn = Callable[[nx.Tensor, np.ndarray], nx.Tensor]
GradFn = Callable[[np.ndarray], np.ndarray]

L1_GUARD = 1e-12
_PROJ_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    alpha: float = 0.05
    steps: int = 5
    momentum_decay: float = 1.0
    random_start: bool = False
    input_box: Optional[tuple] = None

    def validate(self) -> None:
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be an integer >= 1, got {self.steps}")
        if not self.momentum_decay >= 0:
            raise ConfigError(f"momentum_decay must be >= 0, got {self.momentum_decay}")
        if self.input_box is not None and len(self.input_box) != 2:
            raise ConfigError("input_box must be a (lo, hi) pair")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.input_box is not None:
            d["input_box"] = [np.asarray(b).tolist() for b in self.input_box]
        return d


@dataclass
class AttackTrace:
    """Per-step diagnostics filled in when passed to an attack."""

    linf: list = field(default_factory=list)
    projection_active: list = field(default_factory=list)


def input_gradient(model, loss_fn: Optional[LossFn], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of ``loss_fn(model(x), y)`` with respect to ``x``."""
    loss_fn = loss_fn or nx.softmax_cross_entropy
    xt = nx.Tensor(x, requires_grad=True)
    with nx.Tape() as tape:
        loss = loss_fn(model.forward(xt, track_params=False), y)
    tape.backward(loss)
    grad = xt.grad
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite input gradient")
    return grad


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float, input_box=None) -> tuple[np.ndarray, bool]:
    """Clip onto the epsilon-ball around ``x`` and then into the input box.

    Returns the projected point and whether the ball constraint was binding.
    """
    lo, hi = x - epsilon, x + epsilon
    active = bool(np.any(x_adv < lo - _PROJ_TOL) or np.any(x_adv > hi + _PROJ_TOL))
    out = np.clip(x_adv, lo, hi)
    if input_box is not None:
        out = np.clip(out, input_box[0], input_box[1])
    return out, active


def _record(trace: Optional[AttackTrace], x_adv, x, active) -> None:
    if trace is not None:
        trace.linf.append(float(np.max(np.abs(x_adv - x))) if x.size else 0.0)
        trace.projection_active.append(active)


def sign_iterations(
    grad_fn: GradFn,
    x: np.ndarray,
    cfg: AttackConfig,
    momentum: bool = False,
    x_start: Optional[np.ndarray] = None,
    trace: Optional[AttackTrace] = None,
) -> np.ndarray:
    """``cfg.steps`` signed steps of size ``cfg.alpha``, projecting after each.

    With ``momentum`` the step direction is the sign of an accumulator
    ``g_t = mu * g_{t-1} + grad / |grad|_1`` (per-example 1-norm, zero when the
    norm is below ``L1_GUARD``).
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy() if x_start is None else np.asarray(x_start, dtype=np.float64).copy()
    acc = np.zeros_like(x)
    reduce_axes = tuple(range(1, x.ndim))
    for _ in range(int(cfg.steps)):
        grad = grad_fn(x_adv)
        if momentum:
            l1 = np.sum(np.abs(grad), axis=reduce_axes, keepdims=True)
            safe = np.where(l1 < L1_GUARD, 1.0, l1)
            normed = np.where(l1 < L1_GUARD, 0.0, grad / safe)
            acc = cfg.momentum_decay * acc + normed
            direction = np.sign(acc)
        else:
            direction = np.sign(grad)
        x_adv, active = project(x_adv + cfg.alpha * direction, x, cfg.epsilon, cfg.input_box)
        _record(trace, x_adv, x, active)
    return x_adv


def _grad_fn(model, loss_fn, y) -> GradFn:
    return lambda xa: input_gradient(model, loss_fn, xa, y)


def fgsm(model, loss_fn, x, y, cfg: AttackConfig, trace: Optional[AttackTrace] = None, **_) -> np.ndarray:
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    grad = input_gradient(model, loss_fn, x, y)
    x_adv, active = project(x + cfg.epsilon * np.sign(grad), x, cfg.epsilon, cfg.input_box)
    _record(trace, x_adv, x, active)
    return x_adv


def ifgsm(model, loss_fn, x, y, cfg: AttackConfig, trace: Optional[AttackTrace] = None, **_) -> np.ndarray:
    cfg.validate()
    return sign_iterations(_grad_fn(model, loss_fn, y), x, cfg, momentum=False, trace=trace)


def mifgsm(model, loss_fn, x, y, cfg: AttackConfig, trace: Optional[AttackTrace] = None, **_) -> np.ndarray:
    cfg.validate()
    return sign_iterations(_grad_fn(model, loss_fn, y), x, cfg, momentum=True, trace=trace)


def random_start_point(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    start = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    return project(start, x, cfg.epsilon, cfg.input_box)[0]


def pgd(
    model,
    loss_fn,
    x,
    y,
    cfg: AttackConfig,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[AttackTrace] = None,
) -> np.ndarray:
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    start = None
    if cfg.random_start:
        if rng is None:
            raise ConfigError("pgd with random_start needs an rng")
        start = random_start_point(x, cfg, rng)
    return sign_iterations(_grad_fn(model, loss_fn, y), x, cfg, momentum=False, x_start=start, trace=trace)


ATTACKS = {"fgsm": fgsm, "ifgsm": ifgsm, "mifgsm": mifgsm, "pgd": pgd}


def run_attack(name: str, model, x, y, cfg: AttackConfig, loss_fn: Optional[LossFn] = None, rng=None) -> np.ndarray:
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise ConfigError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}") from None
    return fn(model, loss_fn, x, y, cfg, rng=rng)
