"""EFO-1 queries as operator trees, the 14 benchmark shapes, and JSON-lines I/O.

A tree is built from three node kinds.  Negation is a flag on a projection and
is only meaningful as a direct child of an intersection.  Variables are
implicit: a ``Sub`` argument stands for the existential variable carrying the
child's answers, and ``Target`` marks the slot whose filler the node returns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Union as TUnion

from .errors import ParseError, UnknownQueryType


@dataclass(frozen=True)
class Const:
    entity: int


@dataclass(frozen=True)
class Target:
    pass


@dataclass(frozen=True)
class Sub:
    node: "QueryNode"


Arg = TUnion[Const, Sub, Target]


@dataclass(frozen=True)
class Projection:
    relation: int
    args: tuple
    negated: bool = False

    @property
    def target_position(self) -> int:
        return next(i for i, a in enumerate(self.args) if isinstance(a, Target))

    @property
    def children(self) -> tuple:
        return tuple(a.node for a in self.args if isinstance(a, Sub))


@dataclass(frozen=True)
class Intersection:
    children: tuple


@dataclass(frozen=True)
class Union:
    children: tuple


QueryNode = TUnion[Projection, Intersection, Union]


# ---------------------------------------------------------------------------
# Ungrounded shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Shape:
    """Abstract tree over P / I / U.  A P with a child means the child's answer
    feeds one argument slot of the P."""

    op: str
    children: tuple = ()
    negated: bool = False

    def node_count(self) -> int:
        return 1 + sum(c.node_count() for c in self.children)

    def __str__(self):
        neg = "N·" if self.negated else ""
        if self.op == "P":
            return neg + ("P" if not self.children else f"P∘{self.children[0]}")
        return f"{neg}{self.op}({','.join(str(c) for c in self.children)})"


def _p(child=None, negated=False):
    return Shape("P", (child,) if child is not None else (), negated)


def _i(*children):
    return Shape("I", children)


def _u(*children):
    return Shape("U", children)


def _np(child=None):
    return _p(child, negated=True)


QUERY_TYPES = ("1P", "2P", "3P", "2I", "3I", "PI", "IP", "2U", "UP",
               "2IN", "3IN", "INP", "PIN", "PNI")
EPFO_TYPES = QUERY_TYPES[:9]
NEGATION_TYPES = QUERY_TYPES[9:]
OOD_HELD_OUT = ("3P", "3IN", "3I", "INP")

_TEMPLATES = {
    "1P": _p(),
    "2P": _p(_p()),
    "3P": _p(_p(_p())),
    "2I": _i(_p(), _p()),
    "3I": _i(_p(), _p(), _p()),
    "PI": _i(_p(_p()), _p()),
    "IP": _p(_i(_p(), _p())),
    "2U": _u(_p(), _p()),
    "UP": _p(_u(_p(), _p())),
    "2IN": _i(_p(), _np()),
    "3IN": _i(_p(), _p(), _np()),
    "INP": _p(_i(_p(), _np())),
    "PIN": _i(_p(_p()), _np()),
    "PNI": _i(_np(_p()), _p()),
}


def canonical_type(name: str) -> str:
    upper = name.strip().upper()
    if upper not in _TEMPLATES:
        raise UnknownQueryType(f"unknown query type {name!r}")
    return upper


def template(name: str) -> Shape:
    return _TEMPLATES[canonical_type(name)]


# ---------------------------------------------------------------------------
# Structural helpers
# ---------------------------------------------------------------------------

def node_count(tree: QueryNode) -> int:
    """Projection + Intersection + Union nodes; negation is part of its projection."""
    return 1 + sum(node_count(c) for c in tree.children)


def iter_nodes(tree: QueryNode) -> Iterator[QueryNode]:
    """Post-order traversal."""
    for child in tree.children:
        yield from iter_nodes(child)
    yield tree


def shape_of(tree: QueryNode) -> Shape:
    if isinstance(tree, Projection):
        return Shape("P", tuple(shape_of(c) for c in tree.children), tree.negated)
    op = "I" if isinstance(tree, Intersection) else "U"
    return Shape(op, tuple(shape_of(c) for c in tree.children))


def type_of(tree: QueryNode) -> str | None:
    """Name of the benchmark type whose shape matches ``tree`` (children order-insensitive)."""
    key = _shape_key(shape_of(tree))
    for name, shape in _TEMPLATES.items():
        if _shape_key(shape) == key:
            return name
    return None


def _shape_key(shape: Shape):
    kids = tuple(sorted(_shape_key(c) for c in shape.children))
    return (shape.op, shape.negated, kids)


def validate(tree, arity: Callable[[int], int] | None = None) -> list[str]:
    """Return a list of violations; an empty list means the tree is valid.

    ``arity`` optionally maps a relation id to its arity so argument counts can
    be checked.
    """
    violations: list[str] = []
    _validate(tree, arity, violations, parent=None, path="root")
    return violations


def _validate(node, arity, out, parent, path):
    if isinstance(node, Projection):
        targets = sum(isinstance(a, Target) for a in node.args)
        if targets != 1:
            out.append(f"{path}: projection has {targets} Target args (expected 1)")
        for i, a in enumerate(node.args):
            if not isinstance(a, (Const, Sub, Target)):
                out.append(f"{path}: arg {i} is not Const/Sub/Target")
        if arity is not None:
            try:
                k = arity(node.relation)
            except Exception:
                out.append(f"{path}: unknown relation {node.relation}")
            else:
                if k != len(node.args):
                    out.append(f"{path}: {len(node.args)} args for relation of arity {k}")
        if node.negated and not isinstance(parent, Intersection):
            out.append(f"{path}: negated projection outside an intersection")
        for i, a in enumerate(node.args):
            if isinstance(a, Sub):
                _validate(a.node, arity, out, node, f"{path}.arg{i}")
    elif isinstance(node, (Intersection, Union)):
        kind = "intersection" if isinstance(node, Intersection) else "union"
        if len(node.children) < 2:
            out.append(f"{path}: {kind} needs at least 2 children")
        if node.children and all(_is_negated(c) for c in node.children):
            out.append(f"{path}: unbounded complement ({kind} with only negated children)")
        for i, c in enumerate(node.children):
            _validate(c, arity, out, node, f"{path}.{kind[0]}{i}")
    else:
        out.append(f"{path}: unknown node {type(node).__name__}")


def _is_negated(node) -> bool:
    return isinstance(node, Projection) and node.negated


# ---------------------------------------------------------------------------
# Instances and JSON lines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryInstance:
    type: str
    tree: QueryNode
    easy: frozenset = field(default_factory=frozenset)
    hard: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "easy", frozenset(self.easy))
        object.__setattr__(self, "hard", frozenset(self.hard))
        if self.easy & self.hard:
            raise ValueError("easy and hard answer sets overlap")

    @property
    def answers(self) -> frozenset:
        return self.easy | self.hard


def node_to_record(node) -> dict:
    if isinstance(node, Projection):
        args = []
        for a in node.args:
            if isinstance(a, Const):
                args.append({"e": a.entity})
            elif isinstance(a, Target):
                args.append({"target": True})
            else:
                args.append({"q": node_to_record(a.node)})
        return {"op": "p", "r": node.relation, "negated": node.negated, "args": args}
    op = "i" if isinstance(node, Intersection) else "u"
    return {"op": op, "args": [node_to_record(c) for c in node.children]}


def node_from_record(rec) -> QueryNode:
    if not isinstance(rec, dict) or "op" not in rec:
        raise ValueError("node record must be an object with an 'op' key")
    op = rec["op"]
    if op == "p":
        args = []
        for a in rec["args"]:
            if "e" in a:
                args.append(Const(_as_int(a["e"])))
            elif "q" in a:
                args.append(Sub(node_from_record(a["q"])))
            elif a.get("target") is True:
                args.append(Target())
            else:
                raise ValueError(f"bad argument record {a!r}")
        return Projection(_as_int(rec["r"]), tuple(args), bool(rec.get("negated", False)))
    if op in ("i", "u"):
        kids = tuple(node_from_record(c) for c in rec["args"])
        return Intersection(kids) if op == "i" else Union(kids)
    raise ValueError(f"unknown op {op!r}")


def _as_int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected integer id, got {v!r}")
    return v


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def serialize_tree(tree: QueryNode) -> str:
    return _dumps(node_to_record(tree))


def deserialize_tree(text: str) -> QueryNode:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, position=exc.colno) from None
    try:
        return node_from_record(rec)
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed tree: {exc}") from None


def serialize(instance: QueryInstance) -> str:
    """One canonical JSON line (no trailing newline)."""
    return _dumps({
        "type": instance.type,
        "tree": node_to_record(instance.tree),
        "easy": sorted(instance.easy),
        "hard": sorted(instance.hard),
    })


def deserialize(text: str, line: int | None = None) -> QueryInstance:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=line if line is not None else exc.lineno,
                         position=exc.colno) from None
    try:
        return QueryInstance(
            type=canonical_type(rec["type"]),
            tree=node_from_record(rec["tree"]),
            easy=frozenset(_as_int(e) for e in rec.get("easy", ())),
            hard=frozenset(_as_int(e) for e in rec.get("hard", ())),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed instance: {exc}", line=line) from None


def dump_instances(instances: Iterable[QueryInstance]) -> str:
    return "".join(serialize(q) + "\n" for q in instances)


def load_instances(text: str) -> list[QueryInstance]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.strip():
            out.append(deserialize(raw, line=lineno))
    return out


def query_filename(split: str, qtype: str) -> str:
    return f"{split}_{canonical_type(qtype)}.jsonl"
