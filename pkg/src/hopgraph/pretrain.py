"""Triplet-constrained node masking and the masked-node-modelling objective."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hopgraph.encoder import (
    EmbeddingConfig,
    EncoderConfig,
    embed_components,
    encoder_layers,
    make_input,
)
from hopgraph.errors import ConfigError, NumericError, ValidationError
from hopgraph.graph import (
    Modality,
    SceneGraph,
    Special,
    TokenSequence,
    add_skip_edges,
    build_sequence,
    compute_distance_matrix,
)
from hopgraph.numerics import ops
from hopgraph.numerics.optim import SGD, OptimizerConfig
from hopgraph.numerics.tensor import Parameter, Tensor, backward

log = logging.getLogger(__name__)


class MaskTask(str, enum.Enum):
    SBJ = "SBJ"
    OBJ = "OBJ"
    REL = "REL"

    @property
    def modality(self) -> Modality:
        return Modality.PREDICATE if self is MaskTask.REL else Modality.ENTITY

    @property
    def triplet_slot(self) -> int:
        return {"SBJ": 0, "REL": 1, "OBJ": 2}[self.value]

    @property
    def head(self) -> str:
        return self.value.lower()


TASKS = (MaskTask.SBJ, MaskTask.OBJ, MaskTask.REL)


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))


def assign_task(rng_seed: int) -> MaskTask:
    """Uniformly pick one of the three prediction tasks."""
    return TASKS[int(np.random.default_rng(rng_seed).integers(3))]


def mask_count(num_eligible: int, ratio: float) -> int:
    if num_eligible == 0:
        return 0
    return max(1, math.floor(ratio * num_eligible + 1e-9))


@dataclass(frozen=True)
class MaskingPlan:
    task: MaskTask
    masked_node_ids: frozenset
    ratio: float = 0.30
    eligible: tuple = ()
    candidates: tuple = ()  # sampled before conflict dropping, in visiting order


def plan_masks(g: SceneGraph, task: MaskTask, ratio: float = 0.30, rng_seed: int = 0) -> MaskingPlan:
    """Sample nodes of the task's role, keeping at most one masked node per triplet."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1], got {ratio}")
    task = MaskTask(task)
    slot = task.triplet_slot
    eligible = tuple(sorted({t[slot] for t in g.triplets}))
    k = mask_count(len(eligible), ratio)
    if k == 0:
        return MaskingPlan(task, frozenset(), ratio, eligible, ())
    rng = np.random.default_rng(rng_seed)
    candidates = tuple(int(c) for c in rng.choice(np.array(eligible), size=k, replace=False))

    # triplet members in the masked node space: entities for SBJ/OBJ, predicates for REL
    if task is MaskTask.REL:
        members = [(t[1],) for t in g.triplets]
    else:
        members = [(t[0], t[2]) for t in g.triplets]
    masked: set = set()
    for node in candidates:
        if not any(node in mem and any(m in masked for m in mem if m != node) for mem in members):
            masked.add(node)
    return MaskingPlan(task, frozenset(masked), ratio, eligible, candidates)


@dataclass(frozen=True)
class MaskTarget:
    batch_index: int
    token_index: int
    node_id: int
    task: MaskTask
    class_id: int


def plan_targets(seq: TokenSequence, g: SceneGraph, plan: MaskingPlan, batch_index: int = 0) -> list:
    targets = []
    for node in sorted(plan.masked_node_ids):
        try:
            pos = seq.position_of(plan.task.modality, node)
        except ValidationError:
            raise ValidationError(f"masked node {node} has no token in the sequence") from None
        nodes = g.predicates if plan.task is MaskTask.REL else g.entities
        targets.append(MaskTarget(batch_index, pos, node, plan.task, int(nodes[node].class_id)))
    return targets


def mask_rows(content: Tensor, context: Tensor, rows: np.ndarray, mask_vector: Tensor) -> Tensor:
    """Replace the content part of flagged rows by ``mask_vector``; keep context."""
    m = np.asarray(rows, dtype=np.float64)[..., None]
    return content * (1.0 - m) + ops.mul(mask_vector, m) + context


def mask_vector(params: dict) -> Tensor:
    return ops.take(params["emb.special"], [int(Special.MASK)], axis=0)


def apply_masks(seq: TokenSequence, g: SceneGraph, components: tuple, plan: MaskingPlan, params: dict) -> tuple:
    """Masked embeddings ``[n, hidden]`` and the prediction targets of one sample."""
    content, context = components
    targets = plan_targets(seq, g, plan)
    rows = np.zeros(content.shape[:-1])
    for t in targets:
        rows[..., t.token_index] = 1.0
    if not targets:
        return content + context, []
    return mask_rows(content, context, rows, mask_vector(params)), targets


# ---------------------------------------------------------------------------
# heads and loss
# ---------------------------------------------------------------------------


def init_mnm_heads(emb: EmbeddingConfig, rng: np.random.Generator) -> dict:
    h = emb.hidden_dim
    sizes = {"sbj": emb.entity_class_count, "obj": emb.entity_class_count, "rel": emb.predicate_class_count}
    heads = {}
    for name, k in sizes.items():
        heads[f"head.{name}.w"] = Parameter(rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, k)), f"head.{name}.w")
        heads[f"head.{name}.b"] = Parameter(np.zeros(k), f"head.{name}.b")
    return heads


@dataclass
class MnmOutput:
    total: Tensor
    per_role: dict  # head name -> Tensor
    correct: dict  # head name -> int
    count: dict  # head name -> int


def mnm_loss(final_hiddens: Tensor, targets: Sequence[MaskTarget], heads: dict) -> MnmOutput:
    """Sum of per-role mean NLLs over masked positions; empty roles give 0."""
    if final_hiddens.ndim == 2:
        final_hiddens = ops.reshape(final_hiddens, (1,) + final_hiddens.shape)
    b, n, hdim = final_hiddens.shape
    flat = ops.reshape(final_hiddens, (b * n, hdim))
    per_role, correct, count = {}, {}, {}
    total = Tensor(0.0)
    for task in TASKS:
        name = task.head
        mine = [t for t in targets if t.task is task]
        count[name] = len(mine)
        if not mine:
            per_role[name] = Tensor(0.0)
            correct[name] = 0
            continue
        rows = ops.take(flat, [t.batch_index * n + t.token_index for t in mine], axis=0)
        logits = ops.linear(rows, heads[f"head.{name}.w"], heads[f"head.{name}.b"])
        gold = np.array([t.class_id for t in mine])
        loss = ops.cross_entropy(logits, gold)
        per_role[name] = loss
        correct[name] = int((logits.data.argmax(axis=1) == gold).sum())
        total = total + loss
    return MnmOutput(total, per_role, correct, count)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    ratio: float = 0.30
    batch_size: int = 1
    holdout_fraction: float = 0.1
    text_mask_ratio: float = 0.0  # optional text-side masking, off by default
    kernel_lr_scale: float = 50.0  # step multiplier for the kernel scalars

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("ratio must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if not 0.0 <= self.text_mask_ratio < 1.0:
            raise ConfigError("text_mask_ratio must lie in [0, 1)")
        if self.kernel_lr_scale < 0:
            raise ConfigError("kernel_lr_scale must be non-negative")


@dataclass
class Prepared:
    graph: SceneGraph
    seq: TokenSequence
    dist: object


def prepare(samples: Sequence[tuple]) -> list:
    """Precompute sequences and distance matrices for ``(graph, text_ids)`` pairs."""
    out = []
    for g, text_ids in samples:
        seq = build_sequence(g, text_ids)
        out.append(Prepared(g, seq, compute_distance_matrix(seq, add_skip_edges(g))))
    return out


def _batch_forward(batch: Sequence[Prepared], plans: Sequence[MaskingPlan], params: dict, heads: dict,
                   emb: EmbeddingConfig, enc: EncoderConfig, text_masks: Optional[Sequence] = None) -> tuple:
    inp = make_input([(p.seq, p.graph, p.dist) for p in batch], emb.visual_feature_dim)
    content, context = embed_components(inp, params)
    rows = np.zeros((inp.batch, inp.n))
    targets = []
    for bi, (p, plan) in enumerate(zip(batch, plans)):
        for t in plan_targets(p.seq, p.graph, plan, bi):
            rows[bi, t.token_index] = 1.0
            targets.append(t)
    text_targets = []
    if text_masks is not None:
        for bi, positions in enumerate(text_masks):
            for pos in positions:
                rows[bi, pos] = 1.0
                text_targets.append((bi, pos, int(inp.vocab[bi, pos])))
    x = mask_rows(content, context, rows, mask_vector(params)) if rows.any() else content + context
    hidden = encoder_layers(x, inp, params, enc)
    out = mnm_loss(hidden, targets, heads)
    if text_targets:
        b, n, h = hidden.shape
        flat = ops.reshape(hidden, (b * n, h))
        sel = ops.take(flat, [bi * n + pos for bi, pos, _ in text_targets], axis=0)
        logits = ops.linear(sel, heads["head.mlm.w"], heads["head.mlm.b"])
        out.total = out.total + ops.cross_entropy(logits, np.array([v for _, _, v in text_targets]))
    return out, inp


def _text_mask_positions(p: Prepared, ratio: float, seed: int) -> list:
    text = [i for i, tok in enumerate(p.seq.tokens) if tok.modality == Modality.TEXT]
    k = mask_count(len(text), ratio) if ratio > 0 else 0
    if not k:
        return []
    return sorted(int(i) for i in np.random.default_rng(seed).choice(np.array(text), size=k, replace=False))


@dataclass
class PretrainResult:
    metrics: list  # one dict per epoch
    params: dict
    heads: dict


METRIC_FIELDS = (
    "epoch", "lr", "L_MNM", "L_sbj", "L_obj", "L_rel", "acc_sbj", "acc_obj", "acc_rel",
    "val_acc_sbj", "val_acc_obj", "val_acc_rel",
)

_HOLDOUT_EPOCH = 1_000_003


def evaluate_masked(prepared: Sequence[Prepared], params: dict, heads: dict, emb: EmbeddingConfig,
                    enc: EncoderConfig, cfg: PretrainConfig, seed: int) -> dict:
    """Masked-node accuracy per role, every sample evaluated under every task."""
    correct = {t.head: 0 for t in TASKS}
    count = {t.head: 0 for t in TASKS}
    for start in range(0, len(prepared), cfg.batch_size):
        chunk = prepared[start : start + cfg.batch_size]
        for ti, task in enumerate(TASKS):
            plans = [plan_masks(p.graph, task, cfg.ratio, derive_seed(seed, _HOLDOUT_EPOCH, start + i, ti)) for i, p in enumerate(chunk)]
            out, _ = _batch_forward(chunk, plans, params, heads, emb, enc)
            correct[task.head] += out.correct[task.head]
            count[task.head] += out.count[task.head]
    return {k: correct[k] / count[k] if count[k] else float("nan") for k in correct}


def split_holdout(n: int, fraction: float, seed: int) -> tuple:
    order = np.random.default_rng(derive_seed(seed, 7)).permutation(n)
    n_val = int(round(n * fraction))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def pretrain_loop(samples: Sequence[tuple], emb: EmbeddingConfig, enc: EncoderConfig, params: dict, heads: dict,
                  opt: OptimizerConfig, seed: int, cfg: PretrainConfig = PretrainConfig(),
                  progress=None) -> PretrainResult:
    """Train encoder and heads on masked node modelling.

    ``samples`` are ``(SceneGraph, text_ids)`` pairs. A fixed fraction is held
    out for the per-role accuracy columns. Everything random derives from
    ``seed``, so two runs with equal inputs log identical metrics.
    """
    if not samples:
        raise ValidationError("pretraining corpus is empty")
    if cfg.text_mask_ratio > 0 and "head.mlm.w" not in heads:
        rng = np.random.default_rng(derive_seed(seed, 11))
        heads["head.mlm.w"] = Parameter(rng.normal(0, 1 / math.sqrt(emb.hidden_dim), (emb.hidden_dim, emb.text_vocab_size)), "head.mlm.w")
        heads["head.mlm.b"] = Parameter(np.zeros(emb.text_vocab_size), "head.mlm.b")
    prepared = prepare(samples)
    train_idx, val_idx = split_holdout(len(prepared), cfg.holdout_fraction, seed)
    if not train_idx:
        train_idx, val_idx = val_idx, []
    optimizer = SGD(list(params.values()) + list(heads.values()), opt, lr_scale={"kernel": cfg.kernel_lr_scale})
    metrics = []
    for epoch in range(opt.epochs):
        lr = opt.lr_at(epoch)
        order = np.random.default_rng(derive_seed(seed, epoch, 1)).permutation(train_idx)
        nll_sum = {t.head: 0.0 for t in TASKS}
        correct = {t.head: 0 for t in TASKS}
        count = {t.head: 0 for t in TASKS}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [prepared[i] for i in idx]
            plans = []
            for i in idx:
                task = assign_task(derive_seed(seed, epoch, int(i), 2))
                plans.append(plan_masks(prepared[i].graph, task, cfg.ratio, derive_seed(seed, epoch, int(i), 3)))
            text_masks = None
            if cfg.text_mask_ratio > 0:
                text_masks = [_text_mask_positions(prepared[i], cfg.text_mask_ratio, derive_seed(seed, epoch, int(i), 4)) for i in idx]
            optimizer.zero_grad()
            out, _ = _batch_forward(batch, plans, params, heads, emb, enc, text_masks)
            if not np.isfinite(out.total.data):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: samples {list(map(int, idx))}, "
                    f"tasks {[p.task.value for p in plans]}, per-role {[float(v.data) for v in out.per_role.values()]}"
                )
            backward(out.total)
            optimizer.step(epoch)
            for name in nll_sum:
                nll_sum[name] += float(out.per_role[name].data) * out.count[name]
                correct[name] += out.correct[name]
                count[name] += out.count[name]
        row = {"epoch": epoch + 1, "lr": lr}
        for name, key in (("sbj", "L_sbj"), ("obj", "L_obj"), ("rel", "L_rel")):
            row[key] = nll_sum[name] / count[name] if count[name] else 0.0
        row["L_MNM"] = row["L_sbj"] + row["L_obj"] + row["L_rel"]
        for name in ("sbj", "obj", "rel"):
            row[f"acc_{name}"] = correct[name] / count[name] if count[name] else float("nan")
        val = evaluate_masked([prepared[i] for i in val_idx], params, heads, emb, enc, cfg, seed) if val_idx else {}
        for name in ("sbj", "obj", "rel"):
            row[f"val_acc_{name}"] = val.get(name, float("nan"))
        metrics.append(row)
        log.info("epoch %d L_MNM %.4f", epoch + 1, row["L_MNM"])
        if progress is not None:
            progress(row)
    return PretrainResult(metrics, params, heads)
