"""Token embeddings and the multihop graph Transformer encoder.

Parameters live in a flat ``dict[str, Parameter]`` keyed by dotted names
(``layer0.attn.q.w`` ...), which is also the checkpoint layout. Every
forward function works on an :class:`EncoderInput` batch; the single-sample
helpers (:func:`embed_tokens`, :func:`multihop_attention`) wrap a batch of
one.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from hopgraph import _kernels
from hopgraph.errors import ConfigError, ShapeError, ValidationError
from hopgraph.graph import DistanceMatrix, Modality, SceneGraph, Special, TokenSequence
from hopgraph.numerics import ops
from hopgraph.numerics.tensor import Parameter, Tensor


class KernelKind(enum.IntEnum):
    RATIONAL_QUADRATIC = _kernels.RATIONAL_QUADRATIC
    GAUSSIAN = _kernels.GAUSSIAN
    LINEAR_IDENTITY = _kernels.LINEAR_IDENTITY
    OFF = _kernels.OFF

    @classmethod
    def parse(cls, value) -> "KernelKind":
        if isinstance(value, cls):
            return value
        aliases = {"rq": "RATIONAL_QUADRATIC", "identity": "LINEAR_IDENTITY", "linear": "LINEAR_IDENTITY"}
        key = str(value).strip()
        key = aliases.get(key.lower(), key).upper()
        try:
            return cls[key]
        except KeyError:
            raise ConfigError(f"unknown kernel kind {value!r}") from None


class QueryRole(enum.IntEnum):
    ENTITY = _kernels.ROLE_ENTITY
    PREDICATE = _kernels.ROLE_PREDICATE
    OTHER = _kernels.ROLE_OTHER


@dataclass(frozen=True)
class EmbeddingConfig:
    hidden_dim: int = 64
    text_vocab_size: int = 64
    entity_class_count: int = 12
    predicate_class_count: int = 8
    visual_feature_dim: int = 16
    position_feature_dim: int = 4
    max_text_positions: int = 128

    def __post_init__(self):
        for name in ("hidden_dim", "text_vocab_size", "entity_class_count", "predicate_class_count",
                     "visual_feature_dim", "max_text_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.position_feature_dim != 4:
            raise ConfigError("position features are the 4 box coordinates")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    hop_limit: Optional[int] = 3  # None: no hop mask (conventional attention)
    kernel_kind: KernelKind = KernelKind.RATIONAL_QUADRATIC
    ffn_dim: Optional[int] = None  # defaults to 4 * hidden
    share_kernels: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel_kind", KernelKind.parse(self.kernel_kind))
        if self.layers < 0 or self.heads < 1:
            raise ConfigError("layers must be >= 0 and heads >= 1")
        if self.hop_limit is not None and self.hop_limit < 1:
            raise ConfigError(f"hop limit must be >= 1, got {self.hop_limit}")

    def ffn_width(self, hidden: int) -> int:
        return self.ffn_dim or 4 * hidden


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _dense(rng, fan_in, fan_out, name, scale=1.0):
    return Parameter(rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out)), name)


def _zeros(shape, name):
    return Parameter(np.zeros(shape), name)


def init_encoder_params(emb: EmbeddingConfig, enc: EncoderConfig, rng: np.random.Generator, embed_std: float = 0.5,
                       residual_scale: float = 0.1, position_scale: float = 4.0) -> dict:
    """Initial parameters keyed by name.

    The output projections of the attention and feed-forward branches start
    ``residual_scale`` times smaller than the other dense layers, so each
    block begins close to the identity and a token's own context survives
    the first forward passes.
    """
    if emb.hidden_dim % enc.heads:
        raise ConfigError(f"hidden_dim {emb.hidden_dim} not divisible by {enc.heads} heads")
    h, f = emb.hidden_dim, emb.visual_feature_dim
    p = {}

    def add(param):
        p[param.name] = param

    add(Parameter(rng.normal(0.0, embed_std, size=(emb.text_vocab_size, h)), "emb.word"))
    add(Parameter(rng.normal(0.0, embed_std, size=(emb.max_text_positions, h)), "emb.text_pos"))
    add(Parameter(rng.normal(0.0, embed_std, size=(len(Special), h)), "emb.special"))
    add(Parameter(rng.normal(0.0, embed_std, size=(len(Modality), h)), "emb.type"))
    for kind in ("entity", "predicate"):
        add(_dense(rng, f, h, f"emb.{kind}.w"))
        add(_zeros(h, f"emb.{kind}.b"))
    add(_dense(rng, emb.position_feature_dim, h, "emb.position.w", position_scale))
    add(_zeros(h, "emb.position.b"))
    ffn = enc.ffn_width(h)
    if enc.share_kernels and enc.layers:
        add(_zeros((enc.heads, 4), "kernel"))
    for layer in range(enc.layers):
        pre = f"layer{layer}"
        for proj in ("q", "k", "v", "out"):
            add(_dense(rng, h, h, f"{pre}.attn.{proj}.w", residual_scale if proj == "out" else 1.0))
            add(_zeros(h, f"{pre}.attn.{proj}.b"))
        if not enc.share_kernels:
            add(_zeros((enc.heads, 4), f"{pre}.attn.kernel"))
        add(Parameter(np.ones(h), f"{pre}.ln1.g"))
        add(_zeros(h, f"{pre}.ln1.b"))
        add(_dense(rng, h, ffn, f"{pre}.ffn.in.w"))
        add(_zeros(ffn, f"{pre}.ffn.in.b"))
        add(_dense(rng, ffn, h, f"{pre}.ffn.out.w", residual_scale))
        add(_zeros(h, f"{pre}.ffn.out.b"))
        add(Parameter(np.ones(h), f"{pre}.ln2.g"))
        add(_zeros(h, f"{pre}.ln2.b"))
    return p


def kernel_param_name(params: dict, layer: int) -> str:
    name = f"layer{layer}.attn.kernel"
    return name if name in params else "kernel"


def mapped_kernel_params(raw) -> dict:
    """Positive kernel scalars per head from the unconstrained storage."""
    vals = np.exp(np.asarray(raw, dtype=np.float64))
    out = {"alpha_o": vals[:, 0], "l_o": vals[:, 1], "alpha_p": vals[:, 2], "l_p": vals[:, 3]}
    assert all((v > 0).all() for v in out.values()), "kernel parameters must be positive"
    return out


# ---------------------------------------------------------------------------
# batched input
# ---------------------------------------------------------------------------

PAD = -1


@dataclass
class EncoderInput:
    """Padded batch of token sequences with their graph features."""

    modality: np.ndarray  # [B, n] Modality code, PAD for padding
    vocab: np.ndarray  # [B, n]
    special: np.ndarray  # [B, n]
    text_pos: np.ndarray  # [B, n]
    features: np.ndarray  # [B, n, F]
    boxes: np.ndarray  # [B, n, 4]
    dist: np.ndarray  # [B, n, n]
    node_ids: np.ndarray = field(default=None)  # [B, n], -1 for non-visual

    @property
    def batch(self) -> int:
        return self.modality.shape[0]

    @property
    def n(self) -> int:
        return self.modality.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.modality != PAD

    @property
    def roles(self) -> np.ndarray:
        r = np.full(self.modality.shape, QueryRole.OTHER, dtype=np.int64)
        r[self.modality == Modality.ENTITY] = QueryRole.ENTITY
        r[self.modality == Modality.PREDICATE] = QueryRole.PREDICATE
        return r


def make_input(samples: Sequence[tuple], feature_dim: int) -> EncoderInput:
    """Pad ``(TokenSequence, SceneGraph, DistanceMatrix)`` triples into a batch."""
    if not samples:
        raise ValidationError("empty batch")
    b = len(samples)
    n = max(seq.n for seq, _, _ in samples)
    modality = np.full((b, n), PAD, dtype=np.int64)
    vocab = np.zeros((b, n), dtype=np.int64)
    special = np.zeros((b, n), dtype=np.int64)
    text_pos = np.zeros((b, n), dtype=np.int64)
    node_ids = np.full((b, n), -1, dtype=np.int64)
    features = np.zeros((b, n, feature_dim))
    boxes = np.zeros((b, n, 4))
    dist = np.zeros((b, n, n), dtype=np.int64)
    for bi, (seq, g, d) in enumerate(samples):
        if d.n != seq.n:
            raise ShapeError(f"distance matrix is {d.n}x{d.n} for a sequence of {seq.n}")
        big = d.unreachable
        dist[bi] = big
        dist[bi, : seq.n, : seq.n] = d.d
        text_idx = 0
        for i, tok in enumerate(seq.tokens):
            modality[bi, i] = tok.modality
            if tok.modality == Modality.TEXT:
                vocab[bi, i] = tok.vocab_id
                text_pos[bi, i] = text_idx
                text_idx += 1
            elif tok.modality == Modality.SPECIAL:
                special[bi, i] = tok.special
            else:
                node = g.entities[tok.node_id] if tok.modality == Modality.ENTITY else g.predicates[tok.node_id]
                if node.feature.shape != (feature_dim,):
                    raise ShapeError(f"feature length {node.feature.shape[0]} != configured {feature_dim}")
                features[bi, i] = node.feature
                boxes[bi, i] = node.bbox if tok.modality == Modality.ENTITY else node.union_bbox
                node_ids[bi, i] = tok.node_id
    return EncoderInput(modality, vocab, special, text_pos, features, boxes, dist, node_ids)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def embed_components(inp: EncoderInput, params: dict) -> tuple:
    """Split embeddings into (content, context).

    Content is what masking replaces: the word vector, the projected visual
    feature, or the special-token vector. Context is kept under masking:
    text position, projected box, and the modality-type vector.
    """
    mod = inp.modality
    if inp.text_pos.size and inp.text_pos.max() >= params["emb.text_pos"].shape[0]:
        raise ValidationError("text longer than the positional table")
    is_text = (mod == Modality.TEXT)[..., None].astype(np.float64)
    is_ent = (mod == Modality.ENTITY)[..., None].astype(np.float64)
    is_pred = (mod == Modality.PREDICATE)[..., None].astype(np.float64)
    is_special = (mod == Modality.SPECIAL)[..., None].astype(np.float64)
    valid = inp.valid[..., None].astype(np.float64)

    content = ops.embedding_lookup(params["emb.word"], inp.vocab) * is_text
    content = content + ops.linear(inp.features, params["emb.entity.w"], params["emb.entity.b"]) * is_ent
    content = content + ops.linear(inp.features, params["emb.predicate.w"], params["emb.predicate.b"]) * is_pred
    content = content + ops.embedding_lookup(params["emb.special"], inp.special) * is_special

    context = ops.embedding_lookup(params["emb.text_pos"], inp.text_pos) * is_text
    context = context + ops.linear(inp.boxes, params["emb.position.w"], params["emb.position.b"]) * (is_ent + is_pred)
    context = context + ops.embedding_lookup(params["emb.type"], np.where(inp.valid, mod, 0)) * valid
    return content, context


def embed_batch(inp: EncoderInput, params: dict) -> Tensor:
    content, context = embed_components(inp, params)
    return content + context


def embed_tokens(seq: TokenSequence, g: SceneGraph, cfg: EmbeddingConfig, params: dict) -> Tensor:
    """Embeddings ``[n, hidden]`` of one sequence (distances are irrelevant here)."""
    dummy = DistanceMatrix(np.ones((seq.n, seq.n), dtype=np.int64), seq.n + 1)
    inp = make_input([(seq, g, dummy)], cfg.visual_feature_dim)
    out = embed_batch(inp, params)
    return ops.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# multihop attention
# ---------------------------------------------------------------------------


def hop_mask(d, h: Optional[int]) -> np.ndarray:
    """Additive mask: 0 where ``d <= h``, ``-inf`` beyond ``h`` hops."""
    d = np.asarray(d.d if isinstance(d, DistanceMatrix) else d)
    if h is None:
        return np.zeros(d.shape)
    if h < 1:
        raise ConfigError(f"hop limit must be >= 1, got {h}")
    return np.where(d <= h, 0.0, -np.inf)


def kernel_value(d: int, role, raw, kind) -> float:
    """F(d) for a single query role; ``raw`` holds the four log-parameters."""
    kind = KernelKind.parse(kind)
    role = QueryRole(role)
    if d < 1:
        raise ValidationError("distances are >= 1 by convention")
    if kind == KernelKind.OFF:
        return 1.0
    if kind == KernelKind.LINEAR_IDENTITY:
        return float(d)
    if role == QueryRole.OTHER:
        return 1.0
    mapped = mapped_kernel_params(np.asarray(raw, dtype=np.float64).reshape(1, 4))
    suffix = "o" if role == QueryRole.ENTITY else "p"
    alpha = float(mapped[f"alpha_{suffix}"][0])
    scale = float(mapped[f"l_{suffix}"][0])
    u = (d - 1.0) ** 2
    if kind == KernelKind.RATIONAL_QUADRATIC:
        return (1.0 + u / (2.0 * alpha * scale**2)) ** (-alpha)
    return math.exp(-u / (2.0 * scale**2))


def attention_mask(inp: EncoderInput, h: Optional[int]) -> np.ndarray:
    """Hop mask plus key/query padding, shaped ``[B, 1, n, n]``."""
    mask = hop_mask(inp.dist, h)
    valid = inp.valid
    blocked = ~(valid[:, :, None] & valid[:, None, :])
    mask = np.where(blocked, -np.inf, mask)
    return mask[:, None, :, :]


def attention_block(x: Tensor, inp: EncoderInput, params: dict, cfg: EncoderConfig, layer: int, keep: Optional[list] = None) -> Tensor:
    b, n, hidden = x.shape
    nh = cfg.heads
    dk = hidden // nh
    pre = f"layer{layer}.attn"

    def split(t):
        return ops.transpose(ops.reshape(t, (b, n, nh, dk)), (0, 2, 1, 3))

    q = split(ops.linear(x, params[f"{pre}.q.w"], params[f"{pre}.q.b"]))
    k = split(ops.linear(x, params[f"{pre}.k.w"], params[f"{pre}.k.b"]))
    v = split(ops.linear(x, params[f"{pre}.v.w"], params[f"{pre}.v.b"]))
    scores = ops.matmul(q, ops.swap_last(k)) * (1.0 / math.sqrt(dk))
    attn = ops.softmax_rows(scores, attention_mask(inp, cfg.hop_limit))
    if cfg.kernel_kind != KernelKind.OFF:
        scale = ops.distance_kernel(params[kernel_param_name(params, layer)], inp.dist, inp.roles, int(cfg.kernel_kind))
        attn = ops.renormalize_rows(attn * scale)
    if keep is not None:
        keep.append(attn.data.copy())
    out = ops.matmul(attn, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, n, hidden))
    return ops.linear(out, params[f"{pre}.out.w"], params[f"{pre}.out.b"])


def multihop_attention(h_in: Tensor, d: DistanceMatrix, roles: Sequence, params: dict, cfg: EncoderConfig, layer: int = 0) -> Tensor:
    """One multihop attention sublayer on a single ``[n, hidden]`` sequence."""
    n = h_in.shape[0]
    roles = [QueryRole(r) for r in roles]
    if len(roles) != n or d.n != n:
        raise ShapeError(f"{len(roles)} roles / {d.n}x{d.n} distances for {n} tokens")
    modality = np.array(
        [Modality.ENTITY if r == QueryRole.ENTITY else Modality.PREDICATE if r == QueryRole.PREDICATE else Modality.TEXT for r in roles]
    )
    inp = EncoderInput(
        modality=modality[None, :],
        vocab=np.zeros((1, n), dtype=np.int64),
        special=np.zeros((1, n), dtype=np.int64),
        text_pos=np.zeros((1, n), dtype=np.int64),
        features=np.zeros((1, n, 1)),
        boxes=np.zeros((1, n, 4)),
        dist=np.asarray(d.d)[None],
    )
    out = attention_block(ops.reshape(h_in, (1,) + h_in.shape), inp, params, cfg, layer)
    return ops.reshape(out, h_in.shape)


def encoder_layers(x: Tensor, inp: EncoderInput, params: dict, cfg: EncoderConfig, keep: Optional[list] = None) -> Tensor:
    """Post-norm blocks: attention, residual+LN, GELU feed-forward, residual+LN."""
    for layer in range(cfg.layers):
        pre = f"layer{layer}"
        x = ops.layer_norm(x + attention_block(x, inp, params, cfg, layer, keep), params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        ff = ops.gelu(ops.linear(x, params[f"{pre}.ffn.in.w"], params[f"{pre}.ffn.in.b"]))
        ff = ops.linear(ff, params[f"{pre}.ffn.out.w"], params[f"{pre}.ffn.out.b"])
        x = ops.layer_norm(x + ff, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    return x


def encoder_forward(inp: EncoderInput, params: dict, cfg: EncoderConfig, keep: Optional[list] = None) -> Tensor:
    return encoder_layers(embed_batch(inp, params), inp, params, cfg, keep)
