"""Plain SGD with a step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from hopgraph.errors import ConfigError, NumericError
from hopgraph.numerics.tensor import Parameter



def scaled_decay_epochs(epochs: int) -> tuple:
    """Decay points at 70% and 90% of the run (14 and 18 for 20 epochs), deduplicated for short runs."""
    return tuple(sorted({e for e in (int(0.7 * epochs), int(0.9 * epochs)) if 0 < e < epochs}))

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "SGD"
    learning_rate: float = 0.05
    decay_epochs: tuple = (14, 18)
    decay_factor: float = 0.1
    epochs: int = 20
    momentum: float = 0.0
    clip_norm: Optional[float] = None  # rescale the global gradient norm down to this value

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.kind != "SGD":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs or e < 0 for e in d):
            raise ConfigError(f"decay_epochs {d} must be strictly increasing and < epochs")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        passed = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.learning_rate * self.decay_factor**passed


class SGD:
    """Stateful SGD with optional heavy-ball momentum and per-parameter rate multipliers.

    ``lr_scale`` maps a name suffix to a multiplier; a parameter whose name
    ends with that suffix steps at ``multiplier * lr(epoch)``.
    """

    def __init__(self, params: Iterable[Parameter], config: OptimizerConfig,
                 lr_scale: Optional[Mapping[str, float]] = None):
        self.params = list(params)
        self.config = config
        self.lr_scale = dict(lr_scale or {})
        if any(v < 0 for v in self.lr_scale.values()):
            raise ConfigError("learning-rate multipliers must be non-negative")
        self._scale = [self._multiplier(p) for p in self.params]
        self._velocity = {id(p): np.zeros_like(p.data) for p in self.params} if config.momentum else None

    def _multiplier(self, p: Parameter) -> float:
        for suffix, mult in self.lr_scale.items():
            if p.name and p.name.endswith(suffix):
                return float(mult)
        return 1.0

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params)))

    def step(self, epoch: int) -> None:
        lr = self.config.lr_at(epoch)
        if self.config.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.config.clip_norm:
                lr *= self.config.clip_norm / norm
        for p, mult in zip(self.params, self._scale):
            update = p.grad
            if self._velocity is not None:
                v = self._velocity[id(p)]
                v *= self.config.momentum
                v += p.grad
                update = v
            with np.errstate(over="ignore", invalid="ignore"):  # reported just below as NumericError
                p.data -= (lr * mult) * update
            if not np.isfinite(p.data).all():
                raise NumericError(f"parameter {p.name or '?'} became non-finite at epoch {epoch} (lr {lr * mult:g})")


def sgd_step(params: Iterable[Parameter], config: OptimizerConfig, epoch: int) -> None:
    """``theta <- theta - lr(epoch) * grad`` for every parameter."""
    lr = config.lr_at(epoch)
    for p in params:
        p.data -= lr * p.grad


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
