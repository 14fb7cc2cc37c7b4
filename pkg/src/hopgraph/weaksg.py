"""Pseudo scene graphs distilled from semantic-role parses of captions.

Pipeline per document: :func:`merge_coreferent`, :func:`filter_roles`,
:func:`build_pseudo_graph`. Corpus-level passes follow:
:func:`filter_abstract_verbs` then :func:`filter_frequency`.
:func:`corpus_stats` reports label counts.

A small deterministic parser, :func:`parse_templated`, stands in for a
neural role labeller on caption text produced by the synthetic templates.
Real parser output enters through the JSON document format instead.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from hopgraph.errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

SRL_SCHEMA_ID = "hopgraph.srl_document/1"
DEFAULT_ROLES = frozenset({"V", "ARG0", "ARG1", "ARG2"})

# ---------------------------------------------------------------------------
# documents
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Span:
    """Half-open token range ``[start, end)`` inside one sentence."""

    sentence: int
    start: int
    end: int

    def as_list(self) -> list:
        return [self.sentence, self.start, self.end]


@dataclass(frozen=True)
class Frame:
    verb_lemma: str
    arguments: Mapping[str, Span]  # role -> span; always holds "V"

    def roles(self) -> tuple:
        return tuple(self.arguments)


@dataclass(frozen=True)
class SrlDocument:
    doc_id: str
    sentences: tuple  # tuple of token tuples
    frames: tuple = ()
    coref_clusters: tuple = ()  # tuple of tuples of Span

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(tuple(s) for s in self.sentences))
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "coref_clusters", tuple(tuple(c) for c in self.coref_clusters))
        for f in self.frames:
            if "V" not in f.arguments:
                raise ValidationError(f"{self.doc_id}: frame {f.verb_lemma!r} has no V")
            for span in f.arguments.values():
                self._check_span(span)
        for cluster in self.coref_clusters:
            ordered = sorted(cluster)
            for span in ordered:
                self._check_span(span)
            for a, b in zip(ordered, ordered[1:]):
                if a.sentence == b.sentence and b.start < a.end:
                    raise ValidationError(f"{self.doc_id}: overlapping spans in one coreference cluster")

    def _check_span(self, span: Span) -> None:
        if not 0 <= span.sentence < len(self.sentences):
            raise ValidationError(f"{self.doc_id}: span sentence {span.sentence} out of range")
        if not 0 <= span.start < span.end <= len(self.sentences[span.sentence]):
            raise ValidationError(f"{self.doc_id}: span {span.as_list()} out of range")

    def tokens(self, span: Span) -> tuple:
        return self.sentences[span.sentence][span.start : span.end]

    def head(self, span: Span) -> str:
        """Lemma of the rightmost token, the head of these simple noun phrases."""
        return noun_lemma(self.tokens(span)[-1])


def document_to_dict(doc: SrlDocument) -> dict:
    return {
        "schema": SRL_SCHEMA_ID,
        "doc_id": doc.doc_id,
        "sentences": [list(s) for s in doc.sentences],
        "frames": [
            {"verb_lemma": f.verb_lemma, "arguments": {r: s.as_list() for r, s in f.arguments.items()}}
            for f in doc.frames
        ],
        "coref_clusters": [[s.as_list() for s in c] for c in doc.coref_clusters],
    }


def document_from_dict(raw: dict) -> SrlDocument:
    from hopgraph.schemas import validate

    validate(raw, "srl_document")
    frames = tuple(
        Frame(f["verb_lemma"], {r: Span(*s) for r, s in f["arguments"].items()}) for f in raw["frames"]
    )
    clusters = tuple(tuple(Span(*s) for s in c) for c in raw.get("coref_clusters", ()))
    return SrlDocument(raw["doc_id"], raw["sentences"], frames, clusters)


# ---------------------------------------------------------------------------
# lemmas
# ---------------------------------------------------------------------------

PRONOUNS = {"he": "male", "she": "female", "it": "thing"}
_GENDER = {
    "man": "male", "boy": "male", "father": "male",
    "woman": "female", "girl": "female", "mother": "female",
    "person": "person", "child": "person", "player": "person", "rider": "person",
}
_IRREGULAR_NOUNS = {"men": "man", "women": "woman", "children": "child", "people": "person", "mice": "mouse"}
_VERBS_WITH_E = {
    "rid": "ride", "hav": "have", "tak": "take", "mak": "make", "driv": "drive", "us": "use",
    "wav": "wave", "serv": "serve", "danc": "dance", "slid": "slide", "throw": "throw",
}


def noun_lemma(word: str) -> str:
    w = word.lower()
    if w in _IRREGULAR_NOUNS:
        return _IRREGULAR_NOUNS[w]
    if len(w) > 3 and w.endswith("ies"):
        return w[:-3] + "y"
    if len(w) > 3 and w.endswith("s") and not w.endswith("ss"):
        return w[:-1]
    return w


def verb_lemma(form: str) -> str:
    """Lemma of a present participle: ``riding -> ride``, ``sitting -> sit``."""
    w = form.lower()
    if not w.endswith("ing") or len(w) < 5:
        return w
    stem = w[:-3]
    if stem in _VERBS_WITH_E:
        return _VERBS_WITH_E[stem]
    if len(stem) >= 3 and stem[-1] == stem[-2] and stem[-1] not in "lsz":
        return stem[:-1]
    return stem


def mention_class(label: str) -> str:
    return _GENDER.get(label, "thing")


def pronoun_compatible(pronoun: str, label: str) -> bool:
    want, have = PRONOUNS[pronoun], mention_class(label)
    if want == "thing":
        return have == "thing"
    return have in (want, "person")


# ---------------------------------------------------------------------------
# templated parser
# ---------------------------------------------------------------------------

PREPOSITION_ROLES = {
    "with": "ARG2", "to": "ARG2", "for": "ARG2",
    "on": "ARGM-LOC", "in": "ARGM-LOC", "near": "ARGM-LOC", "at": "ARGM-LOC", "under": "ARGM-LOC",
}
TEMPORAL_WORDS = frozenset({"now", "today", "again", "tonight"})

_NP = r"(?:the|a|an) [a-z]+"
_SUBJ = rf"(?P<subj>{_NP}|he|she|it)"
_SENTENCE = re.compile(
    rf"^{_SUBJ} (?:is|are) (?P<verb>[a-z]+ing)"
    rf"(?: (?P<obj>{_NP}))?"
    rf"(?: (?P<prep>{'|'.join(PREPOSITION_ROLES)}) (?P<pobj>{_NP}))?"
    rf"(?: (?P<tmp>{'|'.join(sorted(TEMPORAL_WORDS))}))?$"
)


class ParseError(ValidationError):
    pass


def split_sentences(text: str) -> list:
    parts = [p.strip() for p in re.split(r"\s*\.\s*", text.strip().lower())]
    return [p for p in parts if p]


def parse_templated(text: str, doc_id: str = "doc") -> SrlDocument:
    """Frames and coreference clusters for template-conforming caption text.

    Grammar per sentence, sentences separated by ``.``::

        (the <noun> | he | she | it) is <verb>ing [the <noun>] [<prep> the <noun>] [<time word>]

    A pronoun subject corefers with the nearest earlier noun mention of
    compatible gender (he/she for people, it for things).
    """
    sentences, frames = [], []
    mentions = []  # (Span, label) of noun phrases in reading order
    clusters: dict = {}  # antecedent span -> list of pronoun spans
    orphans = []
    for si, sent in enumerate(split_sentences(text)):
        m = _SENTENCE.match(sent)
        if m is None:
            raise ParseError(f"{doc_id}: sentence {si + 1} does not follow the caption grammar: {sent!r}")
        tokens = sent.split()
        sentences.append(tuple(tokens))

        def span_of(group: str) -> Span:
            start = len(sent[: m.start(group)].split())
            return Span(si, start, start + len(m.group(group).split()))

        args = {}
        subj = span_of("subj")
        args["ARG0"] = subj
        args["V"] = span_of("verb")
        subj_text = m.group("subj")
        if subj_text in PRONOUNS:
            antecedent = next((s for s, label in reversed(mentions) if pronoun_compatible(subj_text, label)), None)
            if antecedent is None:
                orphans.append(subj)
            else:
                clusters.setdefault(antecedent, []).append(subj)
        else:
            mentions.append((subj, noun_lemma(tokens[subj.end - 1])))
        if m.group("obj"):
            obj = span_of("obj")
            args["ARG1"] = obj
            mentions.append((obj, noun_lemma(tokens[obj.end - 1])))
        if m.group("prep"):
            pobj = span_of("pobj")
            args[PREPOSITION_ROLES[m.group("prep")]] = pobj
            mentions.append((pobj, noun_lemma(tokens[pobj.end - 1])))
        if m.group("tmp"):
            args["ARGM-TMP"] = span_of("tmp")
        frames.append(Frame(verb_lemma(m.group("verb")), args))
    if not sentences:
        raise ParseError(f"{doc_id}: no sentences")
    out_clusters = [tuple([a] + pron) for a, pron in sorted(clusters.items())]
    out_clusters += [(s,) for s in orphans]
    return SrlDocument(doc_id, sentences, frames, out_clusters)


# ---------------------------------------------------------------------------
# per-document passes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterConfig:
    allowed_roles: frozenset = DEFAULT_ROLES
    min_frequency: int = 100
    verb_stoplist: frozenset = frozenset()
    top_k_verbs_reviewed: int = 20

    def __post_init__(self):
        object.__setattr__(self, "allowed_roles", frozenset(self.allowed_roles))
        object.__setattr__(self, "verb_stoplist", frozenset(v.lower() for v in self.verb_stoplist))
        if "V" not in self.allowed_roles:
            raise ConfigError("allowed_roles must contain V")
        if self.min_frequency < 1 or self.top_k_verbs_reviewed < 0:
            raise ConfigError("min_frequency must be >= 1 and top_k_verbs_reviewed >= 0")


def _is_pronoun(doc: SrlDocument, span: Span) -> bool:
    toks = doc.tokens(span)
    return len(toks) == 1 and toks[0].lower() in PRONOUNS


def merge_coreferent(doc: SrlDocument) -> SrlDocument:
    """Rewrite argument spans in each cluster to the cluster's first non-pronoun mention."""
    rewrite = {}
    for cluster in doc.coref_clusters:
        nouns = sorted(s for s in cluster if not _is_pronoun(doc, s))
        if not nouns:
            log.warning("%s: coreference cluster %s has only pronouns; left unmerged",
                        doc.doc_id, [s.as_list() for s in cluster])
            continue
        for span in cluster:
            rewrite[span] = nouns[0]
    if not rewrite:
        return doc
    frames = tuple(
        Frame(f.verb_lemma, {r: (s if r == "V" else rewrite.get(s, s)) for r, s in f.arguments.items()})
        for f in doc.frames
    )
    return replace(doc, frames=frames)


def filter_roles(doc: SrlDocument, cfg: FilterConfig = FilterConfig()) -> SrlDocument:
    frames = []
    for f in doc.frames:
        kept = {r: s for r, s in f.arguments.items() if r in cfg.allowed_roles}
        if set(kept) == {"V"}:
            continue
        frames.append(Frame(f.verb_lemma, kept))
    return replace(doc, frames=tuple(frames))


# ---------------------------------------------------------------------------
# pseudo graphs
# ---------------------------------------------------------------------------

SUBJECT, OBJECT = "SUBJECT", "OBJECT"
_EDGE_ROLE = {"ARG0": SUBJECT, "ARG1": OBJECT, "ARG2": OBJECT}


@dataclass(frozen=True)
class PseudoGraph:
    doc_id: str
    entities: tuple  # canonical noun lemmas
    predicates: tuple  # verb lemmas
    edges: tuple  # (predicate index, entity index, SUBJECT|OBJECT)
    triplets: tuple  # (subject index, predicate index, object index)

    def __post_init__(self):
        for p, e, role in self.edges:
            if not (0 <= p < len(self.predicates) and 0 <= e < len(self.entities)) or role not in (SUBJECT, OBJECT):
                raise ValidationError(f"{self.doc_id}: bad edge {(p, e, role)}")
        for s, p, o in self.triplets:
            if not (0 <= s < len(self.entities) and 0 <= p < len(self.predicates) and 0 <= o < len(self.entities)):
                raise ValidationError(f"{self.doc_id}: triplet {(s, p, o)} has a missing endpoint")
        attached = {p for p, _, _ in self.edges}
        if attached != set(range(len(self.predicates))):
            raise ValidationError(f"{self.doc_id}: every predicate needs an argument edge")

    @property
    def empty(self) -> bool:
        return not self.predicates


def build_pseudo_graph(doc: SrlDocument) -> PseudoGraph:
    """One predicate per frame, one entity per distinct canonical noun.

    ARG0 gives a SUBJECT edge, ARG1 and ARG2 give OBJECT edges, and each
    (ARG0, V, ARG1) frame yields one triplet. Entities keep first-mention order.
    """
    entities: list = []
    index: dict = {}

    def entity(label: str) -> int:
        if label not in index:
            index[label] = len(entities)
            entities.append(label)
        return index[label]

    predicates, edges, triplets = [], [], []
    for f in doc.frames:
        args = [(r, f.arguments[r]) for r in ("ARG0", "ARG1", "ARG2") if r in f.arguments]
        if not args:
            continue
        p = len(predicates)
        predicates.append(f.verb_lemma.lower())
        ids = {}
        for role, span in args:
            ids[role] = entity(doc.head(span))
            edges.append((p, ids[role], _EDGE_ROLE[role]))
        if "ARG0" in ids and "ARG1" in ids:
            triplets.append((ids["ARG0"], p, ids["ARG1"]))
    return PseudoGraph(doc.doc_id, tuple(entities), tuple(predicates), tuple(edges), tuple(triplets))


def _restrict(g: PseudoGraph, keep_entity, keep_predicate) -> PseudoGraph:
    """Subgraph on the kept labels; predicates losing every edge and orphan entities go too."""
    edges = [(p, e, r) for p, e, r in g.edges if keep_entity(g.entities[e]) and keep_predicate(g.predicates[p])]
    live_p = sorted({p for p, _, _ in edges})
    live_e = sorted({e for _, e, _ in edges})
    pmap = {old: new for new, old in enumerate(live_p)}
    emap = {old: new for new, old in enumerate(live_e)}
    return PseudoGraph(
        g.doc_id,
        tuple(g.entities[e] for e in live_e),
        tuple(g.predicates[p] for p in live_p),
        tuple((pmap[p], emap[e], r) for p, e, r in edges),
        tuple((emap[s], pmap[p], emap[o]) for s, p, o in g.triplets if s in emap and o in emap and p in pmap),
    )


def reviewed_stoplist(corpus: Sequence[PseudoGraph], cfg: FilterConfig) -> frozenset:
    """Stoplisted verbs among the ``top_k_verbs_reviewed`` most frequent lemmas.

    Ties in frequency are broken alphabetically.
    """
    counts = Counter(v for g in corpus for v in g.predicates)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: cfg.top_k_verbs_reviewed]
    return frozenset(v for v, _ in ranked) & cfg.verb_stoplist


def filter_abstract_verbs(corpus: Sequence[PseudoGraph], cfg: FilterConfig) -> list:
    stop = reviewed_stoplist(corpus, cfg)
    if not stop:
        return list(corpus)
    out = [_restrict(g, lambda _: True, lambda v: v not in stop) for g in corpus]
    return [g for g in out if not g.empty]


@dataclass(frozen=True)
class CorpusStats:
    entity_counts: Mapping[str, int]
    predicate_counts: Mapping[str, int]
    graphs: int = 0

    @property
    def distinct_entities(self) -> int:
        return len(self.entity_counts)

    @property
    def distinct_predicates(self) -> int:
        return len(self.predicate_counts)

    def to_tsv(self) -> str:
        lines = ["kind\tlabel\tcount"]
        lines.append(f"summary\tgraphs\t{self.graphs}")
        lines.append(f"summary\tentity_classes\t{self.distinct_entities}")
        lines.append(f"summary\tpredicate_classes\t{self.distinct_predicates}")
        for kind, counts in (("entity", self.entity_counts), ("predicate", self.predicate_counts)):
            for label, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
                lines.append(f"{kind}\t{label}\t{n}")
        return "\n".join(lines) + "\n"

    def class_index(self) -> tuple:
        """Alphabetical label-to-id maps for entities and predicates."""
        return ({l: i for i, l in enumerate(sorted(self.entity_counts))},
                {l: i for i, l in enumerate(sorted(self.predicate_counts))})


def corpus_stats(corpus: Iterable[PseudoGraph]) -> CorpusStats:
    """Frequencies count nodes: one per entity per graph, one per predicate node."""
    ent, pred, n = Counter(), Counter(), 0
    for g in corpus:
        n += 1
        ent.update(g.entities)
        pred.update(g.predicates)
    return CorpusStats(dict(ent), dict(pred), n)


def filter_frequency(corpus: Sequence[PseudoGraph], cfg: FilterConfig) -> tuple:
    """Drop labels seen fewer than ``min_frequency`` times, repeating until stable.

    Removing a label can orphan other nodes and push further labels under the
    threshold, so the pass iterates to a fixpoint. That makes it idempotent.
    Returns ``(filtered corpus, stats of the filtered corpus)``.
    """
    current = list(corpus)
    while True:
        stats = corpus_stats(current)
        ent_ok = {l for l, c in stats.entity_counts.items() if c >= cfg.min_frequency}
        pred_ok = {l for l, c in stats.predicate_counts.items() if c >= cfg.min_frequency}
        if len(ent_ok) == stats.distinct_entities and len(pred_ok) == stats.distinct_predicates:
            return current, stats
        current = [_restrict(g, ent_ok.__contains__, pred_ok.__contains__) for g in current]
        current = [g for g in current if not g.empty]


# ---------------------------------------------------------------------------
# end to end and files
# ---------------------------------------------------------------------------


@dataclass
class ExtractionResult:
    graphs: list
    stats: CorpusStats
    dropped: list = field(default_factory=list)  # doc ids with no surviving graph


def extract(documents: Iterable[SrlDocument], cfg: FilterConfig = FilterConfig()) -> ExtractionResult:
    """Full pipeline; output graphs are sorted by document id, so input order is irrelevant."""
    docs = sorted(documents, key=lambda d: d.doc_id)
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate document ids")
    graphs = [build_pseudo_graph(filter_roles(merge_coreferent(d), cfg)) for d in docs]
    graphs = [g for g in graphs if not g.empty]
    graphs = filter_abstract_verbs(graphs, cfg)
    graphs, stats = filter_frequency(graphs, cfg)
    survivors = {g.doc_id for g in graphs}
    return ExtractionResult(graphs, stats, [i for i in ids if i not in survivors])


def pseudo_graph_to_dict(g: PseudoGraph, stats: CorpusStats) -> dict:
    ent_ids, pred_ids = stats.class_index()
    return {
        "schema": "hopgraph.scene_graph/1",
        "entities": [{"class": ent_ids[l], "label": l} for l in g.entities],
        "predicates": [{"class": pred_ids[l], "label": l} for l in g.predicates],
        "triplets": [{"s": s, "p": p, "o": o} for s, p, o in g.triplets],
        "edges": [{"p": p, "e": e, "role": r} for p, e, r in g.edges],
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def write_outputs(result: ExtractionResult, out_dir: Path) -> list:
    """One ``<doc_id>.json`` per graph plus ``stats.tsv``; returns written paths."""
    out_dir = Path(out_dir)
    (out_dir / "graphs").mkdir(parents=True, exist_ok=True)
    written = []
    for g in result.graphs:
        path = out_dir / "graphs" / f"{g.doc_id}.json"
        path.write_text(dumps(pseudo_graph_to_dict(g, result.stats)), encoding="utf-8")
        written.append(path)
    stats_path = out_dir / "stats.tsv"
    stats_path.write_text(result.stats.to_tsv(), encoding="utf-8")
    written.append(stats_path)
    return written


def read_captions(path: Path) -> list:
    """Documents from a caption file: ``<doc_id><TAB><caption>`` per line, ``#`` comments."""
    docs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise ValidationError(f"{path}:{lineno}: expected '<doc_id>\\t<caption>'")
        doc_id, text = line.split("\t", 1)
        docs.append(parse_templated(text, doc_id.strip()))
    return docs


def read_documents(path: Path) -> list:
    """SrlDocuments from a directory of ``*.json`` files or from a caption file."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"input not found: {path}")
    if path.is_file():
        return read_captions(path)
    docs = []
    for f in sorted(path.glob("*.json")):
        try:
            raw = json.loads(f.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{f}: not valid JSON ({exc})") from None
        docs.append(document_from_dict(raw))
    return docs
