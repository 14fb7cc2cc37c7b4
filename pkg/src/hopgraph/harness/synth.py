"""Synthetic scene graphs with templated captions and multiple-choice samples."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hopgraph.errors import ConfigError, ValidationError
from hopgraph.graph import EntityNode, PredicateNode, SceneGraph, union_box

ENTITY_NAMES = ("man", "woman", "boy", "girl", "dog", "horse", "bike", "ball", "table", "cup", "rope", "hat")
PREDICATE_LEMMAS = ("ride", "hold", "push", "watch", "carry", "pull", "feed", "touch")
PREDICATE_FORMS = ("riding", "holding", "pushing", "watching", "carrying", "pulling", "feeding", "touching")
FUNCTION_WORDS = ("[UNK]", "the", "is", ".", "what", "happening", "?", "he", "she", "it")

MAX_ENTITIES = 36
MAX_PREDICATES = 18


class LabelRule(str, enum.Enum):
    RANDOM = "RANDOM"
    NEIGHBOR_DETERMINED = "NEIGHBOR_DETERMINED"


def entity_name(c: int) -> str:
    return ENTITY_NAMES[c] if c < len(ENTITY_NAMES) else f"thing{c}"


def predicate_form(c: int) -> str:
    return PREDICATE_FORMS[c] if c < len(PREDICATE_FORMS) else f"verb{c}ing"


@dataclass(frozen=True)
class Vocabulary:
    words: tuple

    @classmethod
    def for_classes(cls, entity_classes: int, predicate_classes: int) -> "Vocabulary":
        words = list(FUNCTION_WORDS)
        words += [entity_name(c) for c in range(entity_classes)]
        words += [predicate_form(c) for c in range(predicate_classes)]
        return cls(tuple(words))

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list:
        index = {w: i for i, w in enumerate(self.words)}
        return [index.get(w, 0) for w in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)


@dataclass(frozen=True)
class SyntheticConfig:
    entity_class_count: int = 12
    predicate_class_count: int = 8
    entities_per_graph: tuple = (3, 8)
    predicates_per_graph: tuple = (2, 6)
    feature_dim: int = 16
    feature_variance: float = 0.1
    caption_template_set: str = "basic"
    label_rule: LabelRule = LabelRule.NEIGHBOR_DETERMINED
    samples: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label_rule", LabelRule(self.label_rule))
        object.__setattr__(self, "entities_per_graph", tuple(int(v) for v in self.entities_per_graph))
        object.__setattr__(self, "predicates_per_graph", tuple(int(v) for v in self.predicates_per_graph))
        lo_e, hi_e = self.entities_per_graph
        lo_p, hi_p = self.predicates_per_graph
        if not 2 <= lo_e <= hi_e <= MAX_ENTITIES:
            raise ConfigError(f"entities_per_graph {self.entities_per_graph} must satisfy 2 <= lo <= hi <= {MAX_ENTITIES}")
        if not 1 <= lo_p <= hi_p <= MAX_PREDICATES:
            raise ConfigError(f"predicates_per_graph {self.predicates_per_graph} must satisfy 1 <= lo <= hi <= {MAX_PREDICATES}")
        if self.entity_class_count < 2 or self.predicate_class_count < 2:
            raise ConfigError("need at least two entity and two predicate classes")
        if self.caption_template_set not in ("basic", "pronoun"):
            raise ConfigError(f"unknown caption template set {self.caption_template_set!r}")
        if self.samples < 1 or self.feature_dim < 1:
            raise ConfigError("samples and feature_dim must be positive")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary.for_classes(self.entity_class_count, self.predicate_class_count)


@dataclass(frozen=True)
class World:
    """Class-level constants shared by every graph drawn from one config."""

    entity_means: np.ndarray
    predicate_means: np.ndarray
    entity_sizes: np.ndarray  # [C, 2] typical (width, height)
    relation_table: np.ndarray  # [C, C] symmetric predicate lookup


def make_world(cfg: SyntheticConfig) -> World:
    rng = np.random.default_rng([cfg.seed, 0])
    ce, cp = cfg.entity_class_count, cfg.predicate_class_count
    table = rng.integers(cp, size=(ce, ce))
    table = np.triu(table) + np.triu(table, 1).T
    return World(
        entity_means=rng.normal(size=(ce, cfg.feature_dim)),
        predicate_means=rng.normal(size=(cp, cfg.feature_dim)),
        entity_sizes=_size_ring(ce)[rng.permutation(ce)],
        relation_table=table,
    )


def _size_ring(count: int) -> np.ndarray:
    """Typical (width, height) pairs spread evenly on a circle.

    Every class sits on the convex hull of the set, so box size alone is
    linearly separable by class.
    """
    theta = 2.0 * np.pi * np.arange(count) / count
    return np.stack([0.32 + 0.22 * np.cos(theta), 0.32 + 0.22 * np.sin(theta)], axis=1)


def predicate_rule(world: World, subject_class: int, object_class: int) -> int:
    return int(world.relation_table[subject_class, object_class])


def _box(rng, size):
    w, h = np.clip(size + rng.uniform(-0.02, 0.02, size=2), 0.05, 0.95)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return (x1, y1, x1 + w, y1 + h)


@dataclass(frozen=True)
class CorpusSample:
    graph: SceneGraph
    caption: str


def sample_graph(cfg: SyntheticConfig, world: World, rng: np.random.Generator,
                 predicates_range: Optional[tuple] = None) -> SceneGraph:
    lo_e, hi_e = cfg.entities_per_graph
    lo_p, hi_p = predicates_range or cfg.predicates_per_graph
    ne = int(rng.integers(lo_e, hi_e + 1))
    npred = int(rng.integers(lo_p, hi_p + 1))
    std = np.sqrt(cfg.feature_variance)
    classes = rng.integers(cfg.entity_class_count, size=ne)
    entities = []
    for c in classes:
        feat = world.entity_means[c] + std * rng.normal(size=cfg.feature_dim)
        entities.append(EntityNode(int(c), _box(rng, world.entity_sizes[c]), feat, entity_name(int(c))))
    predicates, triplets = [], []
    for p in range(npred):
        s, o = (int(v) for v in rng.choice(ne, size=2, replace=False))
        if cfg.label_rule == LabelRule.NEIGHBOR_DETERMINED:
            pc = predicate_rule(world, int(classes[s]), int(classes[o]))
        else:
            pc = int(rng.integers(cfg.predicate_class_count))
        feat = world.predicate_means[pc] + std * rng.normal(size=cfg.feature_dim)
        box = union_box(entities[s].bbox, entities[o].bbox)
        predicates.append(PredicateNode(pc, box, feat, PREDICATE_LEMMAS[pc] if pc < len(PREDICATE_LEMMAS) else f"verb{pc}"))
        triplets.append((s, p, o))
    return SceneGraph(entities, predicates, triplets)


_PRONOUN = {"man": "he", "boy": "he", "woman": "she", "girl": "she"}


def render_caption(g: SceneGraph, template_set: str = "basic") -> str:
    """One clause per triplet: ``the <s> is <verb-ing> the <o>`` joined by ``.``.

    The ``pronoun`` set replaces a person subject repeated from the previous
    clause by he/she.
    """
    clauses = []
    previous = None
    for s, p, o in g.triplets:
        subj = entity_name(g.entities[s].class_id)
        obj = entity_name(g.entities[o].class_id)
        verb = predicate_form(g.predicates[p].class_id)
        head = f"the {subj}"
        if template_set == "pronoun" and previous == subj and subj in _PRONOUN:
            head = _PRONOUN[subj]
        clauses.append(f"{head} is {verb} the {obj}")
        previous = subj
    return " . ".join(clauses)


def generate_corpus(cfg: SyntheticConfig, world: Optional[World] = None) -> list:
    """``cfg.samples`` graphs with captions; identical for identical configs."""
    world = world or make_world(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    out = []
    for _ in range(cfg.samples):
        g = sample_graph(cfg, world, rng)
        out.append(CorpusSample(g, render_caption(g, cfg.caption_template_set)))
    return out


# ---------------------------------------------------------------------------
# multiple choice
# ---------------------------------------------------------------------------

QUESTION = "what is happening ?"


@dataclass(frozen=True)
class ChoiceSample:
    graph: SceneGraph
    question: tuple
    candidates: tuple
    gold: int

    def __post_init__(self):
        if len(self.candidates) != 4:
            raise ValidationError(f"expected 4 candidates, got {len(self.candidates)}")
        if not 0 <= self.gold < 4:
            raise ValidationError("gold index must lie in 0..3")


def generate_choices(cfg: SyntheticConfig, count: int, world: Optional[World] = None, seed_offset: int = 0) -> list:
    """Samples whose gold answer names a predicate present in the graph.

    Distractors are predicate words absent from the graph, so graphs keep at
    most ``predicate_class_count - 3`` distinct predicate classes.
    """
    world = world or make_world(cfg)
    vocab = cfg.vocabulary
    rng = np.random.default_rng([cfg.seed, 2, seed_offset])
    q = tuple(vocab.encode(QUESTION))
    out = []
    while len(out) < count:
        g = sample_graph(cfg, world, rng, predicates_range=(1, 3))
        present = sorted({p.class_id for p in g.predicates})
        absent = [c for c in range(cfg.predicate_class_count) if c not in present]
        if len(absent) < 3:
            continue
        right = int(rng.choice(present))
        wrong = [int(c) for c in rng.choice(absent, size=3, replace=False)]
        gold = int(rng.integers(4))
        options = wrong[:gold] + [right] + wrong[gold:]
        cands = tuple(tuple(vocab.encode(predicate_form(c))) for c in options)
        out.append(ChoiceSample(g, q, cands, gold))
    return out
