"""Exact bottom-up evaluation of operator trees (the symbolic oracle)."""

from __future__ import annotations

from typing import Iterable

from .graph import KnowledgeHypergraph
from .query import Const, Intersection, Projection, Sub, Target, Union


def answers(tree, graph: KnowledgeHypergraph, memo: dict | None = None) -> frozenset:
    """Answer set of ``tree`` on ``graph``.

    Negated projections are evaluated positively and subtracted inside their
    enclosing intersection.  Identical subtrees are evaluated once.
    """
    memo = {} if memo is None else memo
    return _eval(tree, graph, memo)


def _eval(node, graph, memo):
    hit = memo.get(node)
    if hit is not None:
        return hit
    if isinstance(node, Projection):
        result = _project(node, graph, memo)
    elif isinstance(node, Union):
        result = frozenset().union(*(_eval(c, graph, memo) for c in node.children))
    elif isinstance(node, Intersection):
        pos = [c for c in node.children if not (isinstance(c, Projection) and c.negated)]
        neg = [c for c in node.children if isinstance(c, Projection) and c.negated]
        sets = sorted((_eval(c, graph, memo) for c in pos), key=len)
        result = sets[0].intersection(*sets[1:]) if sets else frozenset()
        for c in neg:
            result = result - _eval(c, graph, memo)
    else:
        raise TypeError(f"not a query node: {node!r}")
    memo[node] = result
    return result


def _project(node: Projection, graph, memo) -> frozenset:
    bindings = {}
    subs = []
    target = None
    for pos, arg in enumerate(node.args):
        if isinstance(arg, Const):
            bindings[pos] = arg.entity
        elif isinstance(arg, Sub):
            subs.append((pos, _eval(arg.node, graph, memo)))
        elif isinstance(arg, Target):
            target = pos
    if any(not s for _, s in subs):
        return frozenset()
    if bindings or not subs:
        edge_ids = graph.candidate_edges(node.relation, bindings)
        out = set()
        for eid in edge_ids:
            ents = graph.edges[eid].entities
            if all(ents[p] in s for p, s in subs):
                out.add(ents[target])
        return frozenset(out)
    # No constants: drive the lookup from the smallest child answer set.
    pos0, s0 = min(subs, key=lambda ps: len(ps[1]))
    out = set()
    for ent in s0:
        for eid in graph.slot_edges(node.relation, pos0, ent):
            ents = graph.edges[eid].entities
            if all(ents[p] in s for p, s in subs):
                out.add(ents[target])
    return frozenset(out)


def answers_dnf(trees: Iterable, graph: KnowledgeHypergraph) -> frozenset:
    """Union of the answer sets of several conjunctive trees."""
    memo: dict = {}
    out: frozenset = frozenset()
    for tree in trees:
        out = out | _eval(tree, graph, memo)
    return out
