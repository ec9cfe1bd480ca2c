"""Ordered knowledge hypergraph store.

Facts are ordered n-ary tuples ``r(e_1, ..., e_k)`` where the arity ``k`` is
fixed per relation and each position carries its own meaning.  The store is
immutable once built and keeps two indexes:

* ``(relation, position, entity) -> edge ids``
* ``entity -> [(edge id, position), ...]``
"""

from __future__ import annotations

import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

from .errors import (
    ArityMismatch,
    EmptyInput,
    ParseError,
    PositionOutOfRange,
    UnknownEntity,
    UnknownRelation,
)


class Hyperedge(NamedTuple):
    relation: int
    entities: tuple[int, ...]


class Vocab:
    """Bijective name <-> dense id mapping, ids in first-appearance order."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self.ids.get(name)
        if idx is None:
            idx = len(self.names)
            self.ids[name] = idx
            self.names.append(name)
        return idx

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.ids

    def __getitem__(self, name: str) -> int:
        return self.ids[name]

    def name(self, idx: int) -> str:
        return self.names[idx]

    def copy(self) -> "Vocab":
        return Vocab(self.names)


class KnowledgeHypergraph:
    """Immutable, indexed set of ordered hyperedges.

    Parameters
    ----------
    entities, relations : Vocab
        Shared vocabularies.  Several graphs (train/valid/test) may share the
        same vocabularies.
    arities : sequence of int
        ``arities[r]`` is the fixed arity of relation ``r``.
    edges : iterable of Hyperedge
        Duplicates are collapsed; insertion order of first occurrences is kept.
    """

    def __init__(self, entities: Vocab, relations: Vocab, arities: Sequence[int],
                 edges: Iterable[Hyperedge]):
        self.entities = entities
        self.relations = relations
        self.arities = tuple(arities)
        seen = {}
        for edge in edges:
            edge = Hyperedge(int(edge[0]), tuple(int(e) for e in edge[1]))
            self._check_edge(edge)
            seen.setdefault(edge, None)
        self.edges: tuple[Hyperedge, ...] = tuple(seen)
        self.edge_set = frozenset(self.edges)

        by_slot = defaultdict(list)
        by_entity = defaultdict(list)
        by_relation = defaultdict(list)
        for eid, edge in enumerate(self.edges):
            by_relation[edge.relation].append(eid)
            for pos, ent in enumerate(edge.entities):
                by_slot[(edge.relation, pos, ent)].append(eid)
                by_entity[ent].append((eid, pos))
        self._by_slot = {k: tuple(v) for k, v in by_slot.items()}
        self._by_entity = {k: tuple(v) for k, v in by_entity.items()}
        self._by_relation = {k: tuple(v) for k, v in by_relation.items()}

    def _check_edge(self, edge: Hyperedge):
        if not 0 <= edge.relation < len(self.arities):
            raise UnknownRelation(edge.relation)
        if len(edge.entities) != self.arities[edge.relation]:
            raise ArityMismatch(
                f"relation {self.relations.name(edge.relation)!r} has arity "
                f"{self.arities[edge.relation]}, edge has {len(edge.entities)} entities")
        for ent in edge.entities:
            if not 0 <= ent < len(self.entities):
                raise UnknownEntity(ent)

    # -- sizes -----------------------------------------------------------
    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self):
        return len(self.edges)

    def __contains__(self, edge):
        return edge in self.edge_set

    def arity(self, relation: int) -> int:
        self._check_relation(relation)
        return self.arities[relation]

    def _check_relation(self, relation):
        if not 0 <= relation < len(self.arities):
            raise UnknownRelation(relation)

    # -- lookups ---------------------------------------------------------
    def edges_containing(self, entity: int) -> list[tuple[Hyperedge, int]]:
        """All ``(edge, position)`` pairs with ``edge.entities[position] == entity``."""
        if not 0 <= entity < self.num_entities:
            raise UnknownEntity(entity)
        return [(self.edges[eid], pos) for eid, pos in self._by_entity.get(entity, ())]

    def degree(self, entity: int) -> int:
        return len(self._by_entity.get(entity, ()))

    def relation_edges(self, relation: int) -> tuple[int, ...]:
        self._check_relation(relation)
        return self._by_relation.get(relation, ())

    def slot_edges(self, relation: int, position: int, entity: int) -> tuple[int, ...]:
        return self._by_slot.get((relation, position, entity), ())

    def candidate_edges(self, relation: int, bindings: Mapping[int, int]) -> tuple[int, ...]:
        """Edge ids of ``relation`` that agree with every ``position -> entity`` binding."""
        if not bindings:
            return self.relation_edges(relation)
        lists = [self.slot_edges(relation, p, e) for p, e in bindings.items()]
        lists.sort(key=len)
        best = lists[0]
        if len(lists) == 1:
            return best
        items = list(bindings.items())
        return tuple(eid for eid in best
                     if all(self.edges[eid].entities[p] == e for p, e in items))

    def match_pattern(self, relation: int, bindings: Mapping[int, int], target: int) -> set[int]:
        """Entities filling ``target`` in edges of ``relation`` that agree with ``bindings``."""
        arity = self.arity(relation)
        if not 0 <= target < arity or target in bindings:
            raise PositionOutOfRange(f"target position {target} invalid for arity {arity}")
        for pos in bindings:
            if not 0 <= pos < arity:
                raise PositionOutOfRange(f"bound position {pos} >= arity {arity}")
        return {self.edges[eid].entities[target] for eid in self.candidate_edges(relation, bindings)}

    # -- derived graphs --------------------------------------------------
    def with_edges(self, edges: Iterable[Hyperedge]) -> "KnowledgeHypergraph":
        """A graph sharing this graph's vocabularies with a different edge set."""
        return KnowledgeHypergraph(self.entities, self.relations, self.arities, edges)

    # -- text ------------------------------------------------------------
    def serialize(self) -> str:
        lines = []
        for edge in self.edges:
            names = [self.relations.name(edge.relation)]
            names += [self.entities.name(e) for e in edge.entities]
            lines.append("\t".join(names))
        return "\n".join(lines) + ("\n" if lines else "")

    def stats(self) -> str:
        hist = Counter(len(e.entities) for e in self.edges)
        rows = [("entities", self.num_entities), ("relations", self.num_relations),
                ("edges", len(self.edges))]
        rows += [(f"arity_{k}", hist[k]) for k in sorted(hist)]
        return "".join(f"{k}\t{v}\n" for k, v in rows)

    def __repr__(self):
        return (f"KnowledgeHypergraph(entities={self.num_entities}, "
                f"relations={self.num_relations}, edges={len(self.edges)})")


def _read_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 2 or any(f == "" for f in fields):
            raise ParseError("expected relation followed by entity names, tab-separated",
                             line=lineno)
        yield lineno, fields


def parse_facts(text: str, entities: Vocab | None = None, relations: Vocab | None = None,
                arities: dict[int, int] | None = None, allow_empty: bool = False
                ) -> KnowledgeHypergraph:
    """Parse a tab-separated fact listing into an indexed graph.

    Existing vocabularies may be passed to share ids across several files;
    they are extended in place with newly seen names.
    """
    entities = Vocab() if entities is None else entities
    relations = Vocab() if relations is None else relations
    arity_of = {} if arities is None else arities
    edges = []
    for lineno, fields in _read_lines(text):
        rel = relations.add(fields[0])
        k = len(fields) - 1
        if arity_of.setdefault(rel, k) != k:
            raise ArityMismatch(
                f"line {lineno}: relation {fields[0]!r} seen with arity {arity_of[rel]} and {k}")
        edges.append(Hyperedge(rel, tuple(entities.add(n) for n in fields[1:])))
    if not edges and not allow_empty:
        raise EmptyInput("no facts found")
    arity_list = [arity_of[r] for r in range(len(relations))]
    return KnowledgeHypergraph(entities, relations, arity_list, edges)


@dataclass(frozen=True)
class GraphSplits:
    """Nested train ⊆ valid ⊆ test graphs over shared vocabularies."""

    train: KnowledgeHypergraph
    valid: KnowledgeHypergraph
    test: KnowledgeHypergraph

    def __post_init__(self):
        if not (self.train.edge_set <= self.valid.edge_set <= self.test.edge_set):
            raise ValueError("splits must satisfy train ⊆ valid ⊆ test")
        if not (self.train.entities is self.valid.entities is self.test.entities):
            raise ValueError("splits must share one entity vocabulary")

    def __getitem__(self, split: str) -> KnowledgeHypergraph:
        return getattr(self, split)


def load_splits(train_text: str, valid_text: str = "", test_text: str = "") -> GraphSplits:
    """Build cumulative splits from three fact listings.

    ``valid_text``/``test_text`` hold only the *additional* facts of each level,
    as in the usual benchmark file layout.
    """
    entities, relations, arities = Vocab(), Vocab(), {}
    train = parse_facts(train_text, entities, relations, arities)
    extra_valid = parse_facts(valid_text, entities, relations, arities, allow_empty=True)
    extra_test = parse_facts(test_text, entities, relations, arities, allow_empty=True)
    arity_list = [arities[r] for r in range(len(relations))]

    def build(edges):
        return KnowledgeHypergraph(entities, relations, arity_list, edges)

    g_train = build(train.edges)
    g_valid = build(train.edges + extra_valid.edges)
    g_test = build(g_valid.edges + extra_test.edges)
    return GraphSplits(g_train, g_valid, g_test)


def split_graph(graph: KnowledgeHypergraph, seed: int, valid_frac: float = 0.1,
                test_frac: float = 0.1) -> GraphSplits:
    """Hold out random edge fractions of one graph to form nested splits."""
    order = list(range(len(graph.edges)))
    random.Random(seed).shuffle(order)
    n_test = int(round(len(order) * test_frac))
    n_valid = int(round(len(order) * valid_frac))
    test_only = set(order[:n_test])
    valid_only = set(order[n_test:n_test + n_valid])
    train_edges = [e for i, e in enumerate(graph.edges) if i not in test_only and i not in valid_only]
    valid_edges = [e for i, e in enumerate(graph.edges) if i not in test_only]
    if not train_edges:
        raise EmptyInput("split left no training edges")
    return GraphSplits(graph.with_edges(train_edges), graph.with_edges(valid_edges), graph)


def random_graph(num_entities: int, num_edges: int, arities: Sequence[int], seed: int,
                 num_relations: int | None = None) -> KnowledgeHypergraph:
    """Synthetic graph with relations of the given arities (cycled), used by tests and demos."""
    rng = random.Random(seed)
    num_relations = num_relations or len(arities)
    entities = Vocab(f"e{i}" for i in range(num_entities))
    relations = Vocab(f"r{i}" for i in range(num_relations))
    arity_list = [arities[i % len(arities)] for i in range(num_relations)]
    edges = set()
    limit = num_edges * 50
    while len(edges) < num_edges and limit:
        limit -= 1
        rel = rng.randrange(num_relations)
        edges.add(Hyperedge(rel, tuple(rng.randrange(num_entities) for _ in range(arity_list[rel]))))
    return KnowledgeHypergraph(entities, relations, arity_list, sorted(edges))
