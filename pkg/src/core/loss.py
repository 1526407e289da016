"""
Masked binary cross-entropy over proxy labels.

``batch_loss`` realises the per-slide risk terms: on a negative slide the
all-zero proxy gives the false-positive term weighted by c0, on a positive
slide the alpha-selected and beta-selected instances give the recall and
coverage terms weighted by c1.
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from config.settings import LOSS_CONFIG
from src.core.exceptions import ConfigError, ShapeError
from src.core.proxy_labeling import ProxyLabels
from src.models.pydantic_models import FrameworkConfig

CLAMP_EPSILON = LOSS_CONFIG["clamp_epsilon"]


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_wrt_pred: np.ndarray
    contributing_count: int

    def scaled(self, factor: float) -> "LossResult":
        return LossResult(
            value=factor * self.value,
            grad_wrt_pred=factor * self.grad_wrt_pred,
            contributing_count=self.contributing_count,
        )


def masked_bce(pred: Sequence[float], proxy: ProxyLabels) -> LossResult:
    values = np.asarray(pred, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != len(proxy):
        raise ShapeError(f"prediction length {values.shape} does not match proxy length {len(proxy)}")
    if not np.all(np.isfinite(values)) or np.any(values < 0.0) or np.any(values > 1.0):
        raise ConfigError("predictions must be probabilities in [0, 1]")

    grad = np.zeros_like(values)
    count = int(np.count_nonzero(proxy.mask))
    if count == 0:
        return LossResult(value=0.0, grad_wrt_pred=grad, contributing_count=0)

    p = values[proxy.mask]
    y = proxy.labels[proxy.mask].astype(np.float64)
    clamped = np.clip(p, CLAMP_EPSILON, 1.0 - CLAMP_EPSILON)
    losses = -(y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped))

    # d/dp of the clamped loss; zero where the clamp is active
    inside = (p >= CLAMP_EPSILON) & (p <= 1.0 - CLAMP_EPSILON)
    local = (-y / clamped + (1.0 - y) / (1.0 - clamped)) * inside
    grad[proxy.mask] = local / count
    return LossResult(value=float(np.sum(losses) / count), grad_wrt_pred=grad, contributing_count=count)


def batch_loss(pred: Sequence[float], proxy: ProxyLabels, bag_label: int, cfg: FrameworkConfig) -> LossResult:
    if bag_label not in (0, 1):
        raise ConfigError(f"bag label must be 0 or 1, got {bag_label}")
    weight = cfg.c0 if bag_label == 0 else cfg.c1
    return masked_bce(pred, proxy).scaled(weight)
