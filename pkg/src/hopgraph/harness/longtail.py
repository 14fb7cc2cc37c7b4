"""Loss comparison on an exponentially imbalanced synthetic classification task."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hopgraph.errors import ConfigError
from hopgraph.numerics import ops
from hopgraph.numerics.losses import class_balanced_weights
from hopgraph.numerics.tensor import Parameter, backward
from hopgraph.pretrain import derive_seed


@dataclass(frozen=True)
class LossSpec:
    name: str
    gamma: float = 0.0
    beta: Optional[float] = None  # None disables class balancing

    def weights(self, counts: np.ndarray) -> Optional[np.ndarray]:
        return None if self.beta is None else class_balanced_weights(counts, self.beta)


DEFAULT_LOSSES = (
    LossSpec("CE"),
    LossSpec("focal", gamma=2.0),
    LossSpec("CE+CB", beta=0.999),
    LossSpec("focal+CB", gamma=2.0, beta=0.999),
)


@dataclass(frozen=True)
class LongTailConfig:
    classes: int = 10
    head_count: int = 500
    imbalance: float = 100.0  # head count / tail count
    test_per_class: int = 100
    feature_dim: int = 8
    class_spread: float = 1.2  # std of class means; noise std is 1
    epochs: int = 60
    learning_rate: float = 0.5
    tail_classes: int = 3

    def __post_init__(self):
        if self.classes < 2 or self.tail_classes < 1 or self.tail_classes > self.classes:
            raise ConfigError("need >= 2 classes and 1 <= tail_classes <= classes")
        if self.imbalance < 1.0 or self.head_count < 1:
            raise ConfigError("imbalance must be >= 1 and head_count positive")

    def class_counts(self) -> np.ndarray:
        """Exponential profile from ``head_count`` down to ``head_count / imbalance``."""
        ratios = self.imbalance ** (-np.arange(self.classes) / (self.classes - 1))
        return np.maximum(1, np.round(self.head_count * ratios)).astype(np.int64)


@dataclass
class LossResult:
    loss: str
    seed: int
    recall: np.ndarray  # per class
    tail_recall: float
    distinct_predicted: int
    accuracy: float


def make_split(cfg: LongTailConfig, seed: int, counts: Optional[np.ndarray] = None) -> tuple:
    """Train set drawn with ``counts`` per class, balanced test set."""
    counts = cfg.class_counts() if counts is None else np.asarray(counts)
    rng = np.random.default_rng(derive_seed(seed, 31))
    means = cfg.class_spread * rng.normal(size=(cfg.classes, cfg.feature_dim))

    def draw(per_class):
        y = np.repeat(np.arange(cfg.classes), per_class)
        return means[y] + rng.normal(size=(y.size, cfg.feature_dim)), y

    x_tr, y_tr = draw(counts)
    x_te, y_te = draw(np.full(cfg.classes, cfg.test_per_class))
    return (x_tr, y_tr), (x_te, y_te), counts


def train_probe(x: np.ndarray, y: np.ndarray, spec: LossSpec, counts: np.ndarray, cfg: LongTailConfig, seed: int) -> tuple:
    """Full-batch gradient descent on a linear softmax classifier; returns ``(w, b)`` arrays."""
    rng = np.random.default_rng(derive_seed(seed, 32))
    w = Parameter(rng.normal(0.0, 1.0 / math.sqrt(x.shape[1]), size=(x.shape[1], cfg.classes)), "probe.w")
    b = Parameter(np.zeros(cfg.classes), "probe.b")
    weights = spec.weights(counts)
    for _ in range(cfg.epochs):
        w.zero_grad()
        b.zero_grad()
        loss = ops.focal_cross_entropy(ops.linear(x, w, b), y, spec.gamma, weights)
        backward(loss)
        w.data -= cfg.learning_rate * w.grad
        b.data -= cfg.learning_rate * b.grad
    return w.data.copy(), b.data.copy()


def evaluate(w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray, cfg: LongTailConfig) -> tuple:
    pred = (x @ w + b).argmax(axis=1)
    recall = np.array([(pred[y == c] == c).mean() for c in range(cfg.classes)])
    return recall, int(np.unique(pred).size), float((pred == y).mean())


@dataclass
class LongTailTable:
    results: list

    def mean_tail_recall(self, loss: str) -> float:
        return float(np.mean([r.tail_recall for r in self.results if r.loss == loss]))

    def to_text(self, classes: int) -> str:
        names = list(dict.fromkeys(r.loss for r in self.results))
        head = ["loss", "tail_recall_mean", "tail_recall_std", "distinct_predicted_mean", "accuracy_mean"]
        head += [f"recall_c{c}" for c in range(classes)]
        lines = ["\t".join(head)]
        for name in names:
            rs = [r for r in self.results if r.loss == name]
            tail = np.array([r.tail_recall for r in rs])
            rec = np.mean([r.recall for r in rs], axis=0)
            row = [name, f"{tail.mean():.4f}", f"{tail.std():.4f}",
                   f"{np.mean([r.distinct_predicted for r in rs]):.2f}", f"{np.mean([r.accuracy for r in rs]):.4f}"]
            row += [f"{v:.4f}" for v in rec]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"


def run_longtail_study(cfg: LongTailConfig = LongTailConfig(), losses: Sequence[LossSpec] = DEFAULT_LOSSES,
                       seeds: Sequence[int] = (0, 1, 2, 3, 4), counts: Optional[Sequence[int]] = None) -> LongTailTable:
    """Per-class recall of each loss on the same data per seed.

    ``counts`` overrides the exponential profile, e.g. with a balanced one.
    The tail is the ``tail_classes`` classes with the fewest training samples.
    """
    results = []
    for seed in seeds:
        (x_tr, y_tr), (x_te, y_te), used = make_split(cfg, int(seed), counts)
        tail = np.argsort(used, kind="stable")[: cfg.tail_classes]
        for spec in losses:
            w, b = train_probe(x_tr, y_tr, spec, used, cfg, int(seed))
            recall, distinct, acc = evaluate(w, b, x_te, y_te, cfg)
            results.append(LossResult(spec.name, int(seed), recall, float(recall[tail].mean()), distinct, acc))
    return LongTailTable(results)
