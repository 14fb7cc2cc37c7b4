"""Four-way answer scoring with a linear layer over the pooled first token."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hopgraph.encoder import EmbeddingConfig, EncoderConfig, encoder_forward, init_encoder_params, make_input
from hopgraph.errors import NumericError, ValidationError
from hopgraph.graph import add_skip_edges, build_sequence, compute_distance_matrix
from hopgraph.harness.synth import ChoiceSample
from hopgraph.numerics import ops
from hopgraph.numerics.optim import SGD, OptimizerConfig
from hopgraph.numerics.tensor import Parameter, Tensor, backward
from hopgraph.pretrain import derive_seed


def init_scorer(hidden_dim: int, rng: np.random.Generator) -> dict:
    return {
        "scorer.w": Parameter(rng.normal(0.0, 1.0 / math.sqrt(hidden_dim), size=(hidden_dim, 1)), "scorer.w"),
        "scorer.b": Parameter(np.zeros(1), "scorer.b"),
    }


def _pair_inputs(sample: ChoiceSample, feature_dim: int):
    if len(sample.candidates) != 4:
        raise ValidationError(f"expected 4 candidates, got {len(sample.candidates)}")
    enhanced = add_skip_edges(sample.graph)
    items = []
    for cand in sample.candidates:
        seq = build_sequence(sample.graph, sample.question, segments=(cand,))
        items.append((seq, sample.graph, compute_distance_matrix(seq, enhanced)))
    return make_input(items, feature_dim)


def choice_logits(sample: ChoiceSample, params: dict, scorer: dict, emb: EmbeddingConfig, enc: EncoderConfig) -> Tensor:
    """Scores ``[4]``: one encoder pass per (question + candidate, graph) pair."""
    hidden = encoder_forward(_pair_inputs(sample, emb.visual_feature_dim), params, enc)
    pooled = ops.reshape(ops.take(hidden, [0], axis=1), (4, hidden.shape[-1]))
    return ops.reshape(ops.linear(pooled, scorer["scorer.w"], scorer["scorer.b"]), (1, 4))


def score_choices(sample: ChoiceSample, params: dict, scorer: dict, emb: EmbeddingConfig, enc: EncoderConfig) -> np.ndarray:
    """Softmax over the four candidate scores."""
    z = choice_logits(sample, params, scorer, emb, enc).data[0]
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class FinetuneResult:
    train_accuracy: list  # per epoch
    val_accuracy: float
    params: dict
    scorer: dict


def accuracy(samples: Sequence[ChoiceSample], params: dict, scorer: dict, emb: EmbeddingConfig, enc: EncoderConfig) -> float:
    if not samples:
        return float("nan")
    hits = sum(int(score_choices(s, params, scorer, emb, enc).argmax() == s.gold) for s in samples)
    return hits / len(samples)


def finetune_choices(train: Sequence[ChoiceSample], val: Sequence[ChoiceSample], emb: EmbeddingConfig,
                     enc: EncoderConfig, opt: OptimizerConfig, seed: int, params: Optional[dict] = None,
                     progress=None, kernel_lr_scale: float = 20.0) -> FinetuneResult:
    """Per-sample SGD on the 4-way cross-entropy; ``params`` continues from a checkpoint when given."""
    rng = np.random.default_rng(derive_seed(seed, 41))
    params = params if params is not None else init_encoder_params(emb, enc, rng)
    scorer = init_scorer(emb.hidden_dim, rng)
    optimizer = SGD(list(params.values()) + list(scorer.values()), opt, lr_scale={"kernel": kernel_lr_scale})
    history = []
    for epoch in range(opt.epochs):
        hits = 0
        for i in np.random.default_rng(derive_seed(seed, 42, epoch)).permutation(len(train)):
            s = train[i]
            optimizer.zero_grad()
            logits = choice_logits(s, params, scorer, emb, enc)
            loss = ops.cross_entropy(logits, [s.gold])
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite choice loss at epoch {epoch}, sample {int(i)}")
            backward(loss)
            optimizer.step(epoch)
            hits += int(logits.data[0].argmax() == s.gold)
        history.append(hits / len(train))
        if progress is not None:
            progress(epoch, history[-1])
    return FinetuneResult(history, accuracy(val, params, scorer, emb, enc), params, scorer)
