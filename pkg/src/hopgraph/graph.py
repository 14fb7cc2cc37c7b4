"""Scene-graph data model, skip-edge augmentation and hop distances."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hopgraph import _kernels
from hopgraph.errors import ValidationError


class Role(str, enum.Enum):
    SUBJECT = "SUBJECT"
    OBJECT = "OBJECT"


class Modality(enum.IntEnum):
    TEXT = 0
    ENTITY = 1
    PREDICATE = 2
    SPECIAL = 3


class Special(enum.IntEnum):
    CLS = 0
    SEP = 1
    MASK = 2


def _check_box(box, what):
    box = tuple(float(v) for v in box)
    if len(box) != 4:
        raise ValidationError(f"{what}: expected 4 box coordinates, got {len(box)}")
    x1, y1, x2, y2 = box
    if not (0.0 <= x1 <= x2 <= 1.0 and 0.0 <= y1 <= y2 <= 1.0):
        raise ValidationError(f"{what}: box {box} is not a normalised (x1, y1, x2, y2)")
    return box


def box_contains(outer, inner, tol: float = 1e-12) -> bool:
    return (
        outer[0] <= inner[0] + tol
        and outer[1] <= inner[1] + tol
        and outer[2] + tol >= inner[2]
        and outer[3] + tol >= inner[3]
    )


def union_box(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


@dataclass(frozen=True)
class EntityNode:
    class_id: int
    bbox: tuple
    feature: np.ndarray
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "bbox", _check_box(self.bbox, "entity"))
        feature = np.asarray(self.feature, dtype=np.float64)
        feature.setflags(write=False)
        object.__setattr__(self, "feature", feature)


@dataclass(frozen=True)
class PredicateNode:
    class_id: int
    union_bbox: tuple
    feature: np.ndarray
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "union_bbox", _check_box(self.union_bbox, "predicate"))
        feature = np.asarray(self.feature, dtype=np.float64)
        feature.setflags(write=False)
        object.__setattr__(self, "feature", feature)


@dataclass(frozen=True)
class SceneGraph:
    """Bipartite entity/predicate graph.

    ``triplets`` are ``(subject, predicate, object)`` id triples. ``edges`` are
    ``(predicate, entity, Role)``; when omitted they are derived from the
    triplets. Extra edges beyond the triplet-induced ones are allowed (used for
    arguments that never form a full triplet).
    """

    entities: tuple
    predicates: tuple
    triplets: tuple
    edges: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        triplets = tuple((int(s), int(p), int(o)) for s, p, o in self.triplets)
        object.__setattr__(self, "triplets", triplets)
        induced = []
        for s, p, o in triplets:
            induced.append((p, s, Role.SUBJECT))
            induced.append((p, o, Role.OBJECT))
        if self.edges is None:
            edges = list(dict.fromkeys(induced))
        else:
            edges = list(dict.fromkeys((int(p), int(e), Role(r)) for p, e, r in self.edges))
            missing = set(induced) - set(edges)
            if missing:
                raise ValidationError(f"triplet edges missing from edge list: {sorted(missing)}")
        object.__setattr__(self, "edges", tuple(edges))
        self.validate()

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_predicates(self) -> int:
        return len(self.predicates)

    def validate(self, feature_dim: Optional[int] = None) -> None:
        ne, npred = self.num_entities, self.num_predicates
        for p, e, _ in self.edges:
            if not (0 <= p < npred):
                raise ValidationError(f"edge references predicate {p}, graph has {npred}")
            if not (0 <= e < ne):
                raise ValidationError(f"edge references entity {e}, graph has {ne}")
        for s, p, o in self.triplets:
            pred = self.predicates[p]
            for e in (s, o):
                if not box_contains(pred.union_bbox, self.entities[e].bbox):
                    raise ValidationError(f"predicate {p} union box does not contain entity {e}")
        if feature_dim is not None:
            for node in itertools.chain(self.entities, self.predicates):
                if node.feature.shape != (feature_dim,):
                    raise ValidationError(
                        f"feature length {node.feature.shape[0]} != configured {feature_dim}"
                    )

    def role_nodes(self, role: str) -> list:
        """Node ids playing ``role`` ('subject', 'object', 'relation') in some triplet."""
        idx = {"subject": 0, "relation": 1, "object": 2}[role]
        return sorted({t[idx] for t in self.triplets})


@dataclass(frozen=True)
class EnhancedGraph:
    base: SceneGraph
    skip_edges: tuple

    @property
    def num_nodes(self) -> int:
        return self.base.num_entities + self.base.num_predicates

    def node_index(self, modality: Modality, node_id: int) -> int:
        """Flat node index: entities first, then predicates."""
        if modality == Modality.ENTITY:
            if not 0 <= node_id < self.base.num_entities:
                raise ValidationError(f"dangling entity id {node_id}")
            return node_id
        if modality == Modality.PREDICATE:
            if not 0 <= node_id < self.base.num_predicates:
                raise ValidationError(f"dangling predicate id {node_id}")
            return self.base.num_entities + node_id
        raise ValidationError(f"{modality!r} tokens are not graph nodes")

    def adjacency_csr(self):
        ne = self.base.num_entities
        pairs = {(ne + p, e) for p, e, _ in self.base.edges}
        pairs.update(self.skip_edges)
        und = sorted(pairs | {(b, a) for a, b in pairs})
        n = self.num_nodes
        rows = np.array([a for a, _ in und], dtype=np.int64)
        cols = np.array([b for _, b in und], dtype=np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return np.cumsum(indptr), cols

    def node_distances(self) -> np.ndarray:
        """All-pairs hop counts over flat node indices; -1 if unreachable."""
        indptr, indices = self.adjacency_csr()
        return _kernels.bfs_all_pairs(indptr, indices, self.num_nodes)


def add_skip_edges(g: SceneGraph) -> EnhancedGraph:
    """Connect every pair of distinct entities."""
    skips = tuple(itertools.combinations(range(g.num_entities), 2))
    return EnhancedGraph(base=g, skip_edges=skips)


@dataclass(frozen=True)
class TokenDescriptor:
    modality: Modality
    node_id: Optional[int] = None
    vocab_id: Optional[int] = None
    special: Optional[Special] = None

    def __post_init__(self):
        m = Modality(self.modality)
        object.__setattr__(self, "modality", m)
        if m in (Modality.ENTITY, Modality.PREDICATE):
            if self.node_id is None or self.vocab_id is not None:
                raise ValidationError(f"{m.name} token needs node_id and no vocab_id")
        elif m == Modality.TEXT:
            if self.vocab_id is None or self.node_id is not None:
                raise ValidationError("TEXT token needs vocab_id and no node_id")
        elif self.node_id is not None or self.vocab_id is not None:
            raise ValidationError("SPECIAL token carries neither node_id nor vocab_id")
        if m == Modality.SPECIAL and self.special is None:
            object.__setattr__(self, "special", Special.CLS)

    @property
    def is_visual(self) -> bool:
        return self.modality in (Modality.ENTITY, Modality.PREDICATE)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def n(self) -> int:
        return len(self.tokens)

    def position_of(self, modality: Modality, node_id: int) -> int:
        for i, tok in enumerate(self.tokens):
            if tok.modality == modality and tok.node_id == node_id:
                return i
        raise ValidationError(f"no {modality.name} token for node {node_id}")


def build_sequence(g: SceneGraph, text_ids: Sequence[int] = (), *, segments: Sequence[Sequence[int]] = ()) -> TokenSequence:
    """``[CLS] text [SEP] (segment [SEP])* entities predicates``."""
    toks = [TokenDescriptor(Modality.SPECIAL, special=Special.CLS)]
    toks += [TokenDescriptor(Modality.TEXT, vocab_id=int(v)) for v in text_ids]
    toks.append(TokenDescriptor(Modality.SPECIAL, special=Special.SEP))
    for seg in segments:
        toks += [TokenDescriptor(Modality.TEXT, vocab_id=int(v)) for v in seg]
        toks.append(TokenDescriptor(Modality.SPECIAL, special=Special.SEP))
    toks += [TokenDescriptor(Modality.ENTITY, node_id=i) for i in range(g.num_entities)]
    toks += [TokenDescriptor(Modality.PREDICATE, node_id=i) for i in range(g.num_predicates)]
    return TokenSequence(tuple(toks))


@dataclass(frozen=True)
class DistanceMatrix:
    d: np.ndarray
    unreachable: int

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.int64)
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.d.shape[0]


def compute_distance_matrix(seq: TokenSequence, g: EnhancedGraph, unreachable_sentinel: Optional[int] = None) -> DistanceMatrix:
    """Token-level hop distances.

    Pairs across modalities, text/special pairs and the diagonal get 1.
    Visual pairs get the shortest-path hop count over graph and skip edges,
    or ``unreachable_sentinel`` (default ``n + 1``) when disconnected.
    """
    n = seq.n
    sentinel = n + 1 if unreachable_sentinel is None else int(unreachable_sentinel)
    visual_pos = []
    node_idx = []
    for i, tok in enumerate(seq.tokens):
        if tok.is_visual:
            visual_pos.append(i)
            node_idx.append(g.node_index(tok.modality, tok.node_id))
    d = np.ones((n, n), dtype=np.int64)
    if visual_pos:
        hops = g.node_distances()
        if hops.size and sentinel <= hops.max():
            raise ValidationError(f"sentinel {sentinel} does not exceed graph diameter {hops.max()}")
        sub = hops[np.ix_(node_idx, node_idx)]
        sub = np.where(sub < 0, sentinel, sub)
        vp = np.asarray(visual_pos)
        d[np.ix_(vp, vp)] = sub
    np.fill_diagonal(d, 1)
    return DistanceMatrix(d=d, unreachable=sentinel)


def graph_diameter_visual(g: EnhancedGraph) -> int:
    """Largest finite hop count between two graph nodes (0 for one node)."""
    hops = g.node_distances()
    if hops.size == 0:
        return 0
    return int(hops.max())


# ---------------------------------------------------------------------------
# structured-text IO (JSON documents, schema in hopgraph/schemas)
# ---------------------------------------------------------------------------

SCENE_GRAPH_SCHEMA_ID = "hopgraph.scene_graph/1"


def graph_to_dict(g: SceneGraph, caption: Optional[str] = None, explicit_edges: bool = False) -> dict:
    doc = {
        "schema": SCENE_GRAPH_SCHEMA_ID,
        "entities": [_node_dict(e, "bbox") for e in g.entities],
        "predicates": [_node_dict(p, "union_bbox") for p in g.predicates],
        "triplets": [{"s": s, "p": p, "o": o} for s, p, o in g.triplets],
    }
    if explicit_edges:
        doc["edges"] = [{"p": p, "e": e, "role": r.value} for p, e, r in g.edges]
    if caption is not None:
        doc["caption"] = caption
    return doc


def _node_dict(node, box_key):
    out = {"class": int(node.class_id)}
    if node.label is not None:
        out["label"] = node.label
    out[box_key] = [float(v) for v in getattr(node, box_key)]
    out["feature"] = [float(v) for v in node.feature]
    return out


def graph_from_dict(doc: dict) -> SceneGraph:
    from hopgraph.schemas import validate

    validate(doc, "scene_graph")
    for kind, box_key in (("entities", "bbox"), ("predicates", "union_bbox")):
        for i, node in enumerate(doc[kind]):
            if box_key not in node or "feature" not in node:
                raise ValidationError(f"{kind}[{i}] lacks {box_key} or feature; visual graphs need both")
    entities = [
        EntityNode(e["class"], tuple(e["bbox"]), np.array(e["feature"], dtype=np.float64), e.get("label"))
        for e in doc["entities"]
    ]
    predicates = [
        PredicateNode(p["class"], tuple(p["union_bbox"]), np.array(p["feature"], dtype=np.float64), p.get("label"))
        for p in doc["predicates"]
    ]
    triplets = [(t["s"], t["p"], t["o"]) for t in doc["triplets"]]
    edges = None
    if "edges" in doc:
        edges = [(x["p"], x["e"], x["role"]) for x in doc["edges"]]
    return SceneGraph(entities, predicates, triplets, edges)

