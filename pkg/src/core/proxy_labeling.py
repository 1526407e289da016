"""
Proxy label generation for weakly supervised multiple instance learning.

For a positive bag the floor(B * alpha) instances with the highest predicted
probability are labeled 1 and the floor(B * beta) instances with the lowest
are labeled 0; every other instance is masked out of the loss. A negative bag
labels all of its instances 0.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from config.settings import PROXY_CONFIG
from src.core.exceptions import ConfigError, ShapeError
from src.models.pydantic_models import FEASIBILITY_TOLERANCE, FrameworkConfig

logger = logging.getLogger(__name__)

COUNT_EPSILON = PROXY_CONFIG["count_epsilon"]


@dataclass(frozen=True)
class ProxyLabels:
    labels: np.ndarray  # int8, values in {0, 1}
    mask: np.ndarray  # bool, True = contributes to the loss

    def __post_init__(self):
        if self.labels.shape != self.mask.shape:
            raise ShapeError(f"labels {self.labels.shape} and mask {self.mask.shape} differ in shape")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask & (self.labels == 1))

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask & (self.labels == 0))


def proxy_count(batch_size: int, fraction: float) -> int:
    """floor(batch_size * fraction), tolerant of binary representation error."""
    return int(math.floor(batch_size * fraction + COUNT_EPSILON))


def as_prediction_vector(pred: Sequence[float]) -> np.ndarray:
    values = np.asarray(pred, dtype=np.float64)
    if values.ndim != 1:
        raise ShapeError(f"prediction vector must be one-dimensional, got shape {values.shape}")
    if values.size == 0:
        raise ShapeError("prediction vector is empty")
    if not np.all(np.isfinite(values)) or np.any(values < 0.0) or np.any(values > 1.0):
        raise ConfigError("predictions must be finite probabilities in [0, 1]")
    return values


def _check_config(cfg: FrameworkConfig) -> None:
    # FrameworkConfig validates on construction, but model_construct() skips it
    if cfg.alpha <= 0.0:
        raise ConfigError(f"alpha must be > 0, got {cfg.alpha}")
    if cfg.beta < 0.0:
        raise ConfigError(f"beta must be >= 0, got {cfg.beta}")
    if cfg.alpha + cfg.beta > 1.0 + FEASIBILITY_TOLERANCE:
        raise ConfigError(
            f"alpha + beta = {cfg.alpha + cfg.beta} exceeds 1 and would produce contradictory proxy labels"
        )


def descending_order(pred: np.ndarray) -> np.ndarray:
    """Indices from highest to lowest prediction; equal predictions keep ascending index order."""
    return np.argsort(-pred, kind="stable")


def assign_proxy_labels(pred: Sequence[float], bag_label: int, cfg: FrameworkConfig) -> ProxyLabels:
    values = as_prediction_vector(pred)
    _check_config(cfg)
    if bag_label not in (0, 1):
        raise ConfigError(f"bag label must be 0 or 1, got {bag_label}")

    size = values.shape[0]
    labels = np.zeros(size, dtype=np.int8)
    if bag_label == 0:
        return ProxyLabels(labels=labels, mask=np.ones(size, dtype=bool))

    n_positive = proxy_count(size, cfg.alpha)
    n_negative = proxy_count(size, cfg.beta)
    if n_positive == 0:
        logger.warning(f"floor({size} * {cfg.alpha}) = 0: no positive proxy labels for this batch")

    order = descending_order(values)
    mask = np.zeros(size, dtype=bool)
    top = order[:n_positive]
    labels[top] = 1
    mask[top] = True
    if n_negative:
        mask[order[size - n_negative:]] = True
    return ProxyLabels(labels=labels, mask=mask)


def percentile_subset(pred: Sequence[float], p_min: float, p_max: float) -> np.ndarray:
    """Indices whose rank cell lies inside the [p_min, p_max] percentile band.

    Ranks are nearest-rank over the ascending order that mirrors
    ``descending_order``; the instance at ascending rank ``a`` occupies the
    band [100 a / B, 100 (a + 1) / B]. Returned indices are sorted.
    """
    values = as_prediction_vector(pred)
    if not 0.0 <= p_min <= p_max <= 100.0:
        raise ConfigError(f"percentile bounds must satisfy 0 <= p_min <= p_max <= 100, got ({p_min}, {p_max})")

    size = values.shape[0]
    ascending = descending_order(values)[::-1]
    low = int(math.ceil(size * p_min / 100.0 - COUNT_EPSILON))
    high = int(math.floor(size * p_max / 100.0 + COUNT_EPSILON))
    if high <= low:
        return np.empty(0, dtype=np.int64)
    return np.sort(ascending[low:high])


def feasible_grid(step: float) -> List[FrameworkConfig]:
    """All lattice points of the feasible space with alpha > 0, ordered by (alpha, beta)."""
    if not 0.0 < step <= 1.0:
        raise ConfigError(f"grid step must lie in (0, 1], got {step}")
    divisions = round(1.0 / step)
    if abs(divisions * step - 1.0) > 1e-9:
        raise ConfigError(f"grid step {step} does not divide 1")

    grid = []
    for i in range(1, divisions + 1):
        for j in range(0, divisions - i + 1):
            grid.append(FrameworkConfig(alpha=i / divisions, beta=j / divisions, c0=1.0, c1=1.0))
    logger.debug(f"Feasible grid with step {step}: {len(grid)} configurations")
    return grid
