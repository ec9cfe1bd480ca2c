"""Grounding query shapes against a hypergraph and labelling easy/hard answers.

Grounding walks a shape top-down from a chosen answer entity.  At a projection
an edge incident to the current answer is drawn; the answer's position in that
edge becomes the Target slot.  If the projection has a child, another position
of the same edge is drawn and its entity becomes the answer the child must
produce.  Intersections and unions ground every child from the same answer.
Negated branches are grounded as positive atoms from a different entity and
kept only if the oracle confirms the current answer is *not* among theirs.

Every instance uses its own ``numpy`` PCG64 stream seeded from
``(seed, split, type, attempt)``, so output is independent of run order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import SamplingExhausted, SamplingFailed
from .graph import GraphSplits, KnowledgeHypergraph
from .oracle import answers
from .query import (QUERY_TYPES, Const, Intersection, Projection, QueryInstance, Shape, Sub,
                    Target, Union, canonical_type, dump_instances, query_filename, template)

SPLITS = ("train", "valid", "test")
STANDARD_COUNTS = {"train": {"1P": 60_000, "other": 20_000},
                "valid": {"1P": 10_000, "other": 10_000},
                "test": {"1P": 10_000, "other": 10_000}}


class _Retry(Exception):
    """Local grounding dead end; the caller retries with fresh draws."""


def ground(structure: Shape, graph: KnowledgeHypergraph, rng: np.random.Generator,
           retries: int = 100, reject_duplicates: bool = True, root: int | None = None):
    """Ground ``structure`` on ``graph``; returns ``(tree, root_answer)``.

    ``root`` fixes the answer entity; otherwise one is drawn uniformly from
    entities with at least one incident edge.
    """
    candidates = [e for e in range(graph.num_entities) if graph.degree(e)] if root is None else [root]
    if not candidates:
        raise SamplingFailed("graph has no edges")
    for _ in range(max(1, retries)):
        answer = candidates[int(rng.integers(len(candidates)))]
        try:
            tree = _ground(structure, graph, rng, answer, reject_duplicates)
        except _Retry:
            continue
        return tree, answer
    raise SamplingFailed(f"could not ground {structure} within {retries} attempts")


def _ground(shape: Shape, graph, rng, answer, reject_duplicates):
    if shape.op == "P":
        if shape.negated:
            raise _Retry  # negated atoms are grounded by their intersection
        return _ground_projection(shape, graph, rng, answer, reject_duplicates)
    grounded: dict[int, object] = {}
    for i, child in enumerate(shape.children):
        if child.negated:
            if shape.op != "I":
                raise ValueError("negation is only allowed under an intersection")
            continue
        node = _ground(child, graph, rng, answer, reject_duplicates)
        if reject_duplicates and node in grounded.values():
            raise _Retry
        grounded[i] = node
    positive = list(grounded.values())
    for i, child in enumerate(shape.children):
        if child.negated:
            grounded[i] = _ground_negated(child, graph, rng, answer, positive, reject_duplicates)
    ordered = [grounded[i] for i in range(len(shape.children))]
    return Intersection(tuple(ordered)) if shape.op == "I" else Union(tuple(ordered))


def _ground_projection(shape: Shape, graph, rng, answer, reject_duplicates, negated=False):
    incident = graph.edges_containing(answer)
    if not incident:
        raise _Retry
    edge, target_pos = incident[int(rng.integers(len(incident)))]
    args: list = [Const(e) for e in edge.entities]
    args[target_pos] = Target()
    if shape.children:
        others = [p for p in range(len(edge.entities)) if p != target_pos]
        if not others:
            raise _Retry
        pos = others[int(rng.integers(len(others)))]
        child = _ground(shape.children[0], graph, rng, edge.entities[pos], reject_duplicates)
        args[pos] = Sub(child)
    return Projection(edge.relation, tuple(args), negated)


def _ground_negated(shape: Shape, graph, rng, answer, positive, reject_duplicates, tries=20):
    """A negated branch: a positive atom grounded elsewhere whose answers exclude ``answer``."""
    positive_shape = Shape("P", shape.children, False)
    pool = graph.num_entities
    for _ in range(tries):
        other = int(rng.integers(pool))
        if other == answer or not graph.degree(other):
            continue
        try:
            node = _ground_projection(positive_shape, graph, rng, other, reject_duplicates)
        except _Retry:
            continue
        if answer in answers(node, graph):
            continue
        negated = Projection(node.relation, node.args, True)
        if reject_duplicates and any(
                p.relation == negated.relation and p.args == negated.args for p in positive):
            continue
        return negated
    raise _Retry


def label(tree, small: KnowledgeHypergraph, big: KnowledgeHypergraph, qtype: str = "") -> QueryInstance:
    """Easy answers come from ``small``; hard answers are the extra ones found in ``big``."""
    easy = answers(tree, small)
    hard = answers(tree, big) - easy
    return QueryInstance(qtype or "1P", tree, easy, hard)


@dataclass
class SampleSpec:
    counts: dict = field(default_factory=dict)   # {(split, type): count}
    retries: int = 100
    seed: int = 0
    reject_duplicates: bool = True

    def __post_init__(self):
        if self.retries < 1:
            raise ValueError("retry budget must be >= 1")
        for key, n in self.counts.items():
            if n < 0:
                raise ValueError(f"negative count for {key}")

    @classmethod
    def standard(cls, seed: int, scale: float = 1.0, **kw) -> "SampleSpec":
        counts = {}
        for split in SPLITS:
            for qtype in QUERY_TYPES:
                base = STANDARD_COUNTS[split]["1P" if qtype == "1P" else "other"]
                counts[(split, qtype)] = int(round(base * scale))
        return cls(counts=counts, seed=seed, **kw)

    @classmethod
    def uniform(cls, seed: int, train: int, valid: int, test: int, types=QUERY_TYPES,
                **kw) -> "SampleSpec":
        counts = {}
        for qtype in types:
            counts[("train", canonical_type(qtype))] = train
            counts[("valid", canonical_type(qtype))] = valid
            counts[("test", canonical_type(qtype))] = test
        return cls(counts=counts, seed=seed, **kw)


def instance_rng(seed: int, split: str, qtype: str, index: int) -> np.random.Generator:
    key = [seed, SPLITS.index(split), QUERY_TYPES.index(canonical_type(qtype)), index]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def sample_split(spec: SampleSpec, splits: GraphSplits, split: str, qtype: str,
                 count: int) -> list[QueryInstance]:
    qtype = canonical_type(qtype)
    shape = template(qtype)
    graph = splits[split]
    small = {"train": None, "valid": splits.train, "test": splits.valid}[split]
    out: list[QueryInstance] = []
    budget = 100 * count
    attempt = 0
    while len(out) < count:
        if attempt >= budget:
            raise SamplingExhausted(
                f"{split}/{qtype}: {len(out)} of {count} instances after {budget} attempts")
        rng = instance_rng(spec.seed, split, qtype, attempt)
        attempt += 1
        try:
            tree, _ = ground(shape, graph, rng, spec.retries, spec.reject_duplicates)
        except SamplingFailed:
            continue
        if small is None:
            inst = QueryInstance(qtype, tree, frozenset(), answers(tree, graph))
            if not inst.hard:
                continue
        else:
            inst = label(tree, small, graph, qtype)
            if not inst.hard:
                continue
        out.append(inst)
    return out


def sample_dataset(spec: SampleSpec, splits: GraphSplits, out_dir: str | os.PathLike | None = None
                   ) -> dict:
    """Sample every requested (split, type) and optionally write the files.

    Returns ``{(split, type): [QueryInstance, ...]}`` for non-zero counts.
    """
    result = {}
    for split in SPLITS:
        for qtype in QUERY_TYPES:
            n = spec.counts.get((split, qtype), 0)
            if n > 0:
                result[(split, qtype)] = sample_split(spec, splits, split, qtype, n)
    if out_dir is not None:
        write_dataset(result, splits, out_dir)
    return result


def write_dataset(dataset: Mapping, splits: GraphSplits, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["split\ttype\tcount\tmean_easy\tmean_hard\n"]
    for (split, qtype), instances in dataset.items():
        (out / query_filename(split, qtype)).write_text(dump_instances(instances), encoding="utf-8")
        n = len(instances)
        easy = sum(len(q.easy) for q in instances) / n
        hard = sum(len(q.hard) for q in instances) / n
        rows.append(f"{split}\t{qtype}\t{n}\t{easy:.4f}\t{hard:.4f}\n")
    (out / "stats.tsv").write_text("".join(rows), encoding="utf-8")
    write_vocab(splits.test, out)


def write_vocab(graph: KnowledgeHypergraph, out_dir) -> None:
    out = Path(out_dir)
    (out / "entities.txt").write_text("".join(n + "\n" for n in graph.entities.names),
                                      encoding="utf-8")
    (out / "relations.txt").write_text(
        "".join(f"{n}\t{graph.arities[i]}\n" for i, n in enumerate(graph.relations.names)),
        encoding="utf-8")
