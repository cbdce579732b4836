"""Adversarial training losses.

* ``ce_adv``: cross-entropy on adversarial examples.
* ``ce_plus_alp``: adds ``alp_weight`` times the mean squared logit distance.
* ``ce_plus_nmse``: adds ``mu`` times the normalized logit distance, weighted
  per example by ``1 - p_clean``.

All batch reductions are arithmetic means.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError

LOSS_KINDS = ("ce_adv", "ce_plus_alp", "ce_plus_nmse")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "ce_adv"
    mu: float = 5.0
    alp_weight: float = 1.0

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not (np.isfinite(self.mu) and self.mu >= 0):
            raise ConfigError(f"mu must be finite and >= 0, got {self.mu}")
        if not (np.isfinite(self.alp_weight) and self.alp_weight >= 0):
            raise ConfigError(f"alp_weight must be finite and >= 0, got {self.alp_weight}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(a: nx.Tensor, b: nx.Tensor) -> None:
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"logit tensors must share a B x C shape, got {a.shape} and {b.shape}")


def ce_adv_loss(model, x_adv, y) -> nx.Tensor:
    return nx.softmax_cross_entropy(model.forward(x_adv), y)


def alp_loss(logits_clean, logits_adv) -> nx.Tensor:
    lc, la = nx.as_tensor(logits_clean), nx.as_tensor(logits_adv)
    _check_pair(lc, la)
    d = lc - la
    return (d * d).sum(axis=1).mean()


def clean_true_class_prob(logits_clean, y) -> np.ndarray:
    """Softmax probability of the true class, as a constant (no gradient)."""
    probs = nx.softmax(nx.as_tensor(logits_clean).data)
    return probs[np.arange(probs.shape[0]), np.asarray(y)]


def nmse_loss(logits_clean, logits_adv, p_clean) -> nx.Tensor:
    lc, la = nx.as_tensor(logits_clean), nx.as_tensor(logits_adv)
    _check_pair(lc, la)
    p = np.asarray(p_clean, dtype=np.float64).reshape(-1)
    if p.shape[0] != lc.shape[0]:
        raise DimensionError(f"p_clean has {p.shape[0]} entries for a batch of {lc.shape[0]}")
    d = nx.normalize_rows(lc) - nx.normalize_rows(la)
    per_example = (d * d).sum(axis=1)
    return (per_example * nx.Tensor(1.0 - p)).mean()


def total_loss(model, x, x_adv, y, cfg: LossConfig) -> nx.Tensor:
    logits_adv = model.forward(x_adv)
    ce = nx.softmax_cross_entropy(logits_adv, y)
    if cfg.kind == "ce_adv":
        return ce
    logits_clean = model.forward(x)
    if cfg.kind == "ce_plus_alp":
        return ce + nx.scale(alp_loss(logits_clean, logits_adv), cfg.alp_weight)
    if cfg.kind == "ce_plus_nmse":
        p_clean = clean_true_class_prob(logits_clean, y)
        return ce + nx.scale(nmse_loss(logits_clean, logits_adv, p_clean), cfg.mu)
    raise ConfigError(f"unknown loss kind {cfg.kind!r}")
