"""Long-tail loss helpers: focal loss and class-balanced weights."""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from hopgraph.errors import ConfigError, ValidationError
from hopgraph.numerics.ops import PROB_FLOOR

log = logging.getLogger(__name__)


def focal_loss(probs, target: int, gamma: float) -> float:
    """``-(1 - p_t)^gamma * log(p_t)`` for the target-class probability."""
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < probs.shape[0]:
        raise ValidationError(f"target {target} outside {probs.shape[0]} classes")
    pt = float(probs[target])
    if pt <= 0.0:
        log.warning("focal_loss: p_t=%g clamped to %g", pt, PROB_FLOOR)
        pt = PROB_FLOOR
    return -((1.0 - pt) ** gamma) * math.log(pt)


def class_balanced_weights(class_counts: Sequence[int], beta: float, normalize: bool = True) -> np.ndarray:
    """Per-class weights ``(1 - beta) / (1 - beta ** n_c)``.

    With ``normalize`` the weights are rescaled to mean 1.
    """
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"beta must lie in [0, 1), got {beta}")
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.size == 0 or (counts < 1).any():
        raise ValidationError("class counts must all be >= 1")
    raw = (1.0 - beta) / (1.0 - np.power(beta, counts))
    if normalize:
        raw = raw * (raw.size / raw.sum())
    return raw
