"""Closed-form hypergraph logical messages over product-form KHG embeddings.

For product-form families the message to the slot ``j`` of an atom is the
relation vector multiplied elementwise with the fold of every other slot's
(position-transformed) vector.  Candidate ``c`` scores ``<message, c>``.

Families differ only in how a vector is transformed by its slot:

========== ===================================== ==============================
family     slot transform of ``e`` at position i  message moved back to slot j
========== ===================================== ==============================
m-DistMult ``e``                                  identity
m-CP       position-specific table row            scored against table ``j``
HypE-form  ``e * p_i`` (learned position vector)  ``* p_j``
HSimplE    ``shift(e, len/alpha)`` applied i times shifted back j times
========== ===================================== ==============================

Intersections and unions combine score vectors with min / max.  Negation has
no closed form here and is rejected.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import reduce
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptySequence, NegationUnsupported, PositionClash
from .graph import KnowledgeHypergraph
from .query import Const, Intersection, Projection, Sub, Target, Union

FAMILIES = ("m-DistMult", "m-CP", "HypE-form", "HSimplE")


def shift(vec: np.ndarray, alpha: int = 2, times: int = 1) -> np.ndarray:
    """Circular shift by ``len(vec) / alpha`` positions, ``times`` times."""
    n = vec.shape[-1]
    return np.roll(vec, (n // alpha) * times, axis=-1)


def _shift_index(n: int, alpha: int, times: int) -> np.ndarray:
    return np.roll(np.arange(n), (n // alpha) * times)


def product(a, b):
    return a * b


def g_fold(vectors: Sequence, f: Callable = product):
    """Right fold ``f(v_1, f(v_2, ... f(v_{n-1}, v_n)))``."""
    if len(vectors) == 0:
        raise EmptySequence("g_fold needs at least one vector")
    return reduce(lambda acc, v: f(v, acc), reversed(vectors[:-1]), vectors[-1])


def rho(neighbors: Sequence[tuple], relation, target: int, negated: bool = False,
        family: str = "m-DistMult", alpha: int = 2, position_vectors=None) -> np.ndarray:
    """Message for the ``target`` slot from ``(vector, position)`` neighbours.

    For HSimplE each neighbour is shifted once per position index before the
    fold and the result is shifted back by the target index; HypE multiplies by
    ``position_vectors`` the same way.  m-CP vectors are expected to already be
    the position-specific rows.
    """
    if negated:
        raise NegationUnsupported("no closed-form message for negated atoms")
    positions = [p for _, p in neighbors]
    if len(set(positions)) != len(positions) or target in positions:
        raise PositionClash(f"positions {positions} clash or include target {target}")
    vecs = [_slot(np.asarray(v, dtype=float), p, family, alpha, position_vectors)
            for v, p in neighbors]
    msg = np.asarray(relation, dtype=float) * g_fold(vecs) if vecs else np.asarray(relation, float)
    return _unslot(msg, target, family, alpha, position_vectors)


def _slot(v, pos, family, alpha, pvecs):
    if family == "HSimplE":
        return shift(v, alpha, pos)
    if family == "HypE-form":
        return v * pvecs[pos]
    return v


def _unslot(v, pos, family, alpha, pvecs):
    if family == "HSimplE":
        return shift(v, alpha, -pos)
    if family == "HypE-form":
        return v * pvecs[pos]
    return v


def edge_score(relation, entities: Sequence, family: str = "m-DistMult", alpha: int = 2,
               position_vectors=None) -> float:
    """Multilinear score ``sum(r * t_1(e_1) * ... * t_k(e_k))``."""
    vecs = [_slot(np.asarray(e, float), i, family, alpha, position_vectors)
            for i, e in enumerate(entities)]
    return float(np.sum(np.asarray(relation, float) * g_fold(vecs)))


@dataclass
class BaselineConfig:
    family: str = "m-DistMult"
    d: int = 64
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-2
    seed: int = 0
    alpha: int = 2
    init_std: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        if self.alpha < 1:
            raise ConfigError("alpha must be >= 1")

    def to_dict(self):
        return asdict(self)


class KhgEmbedding:
    def __init__(self, num_entities: int, num_relations: int, max_arity: int,
                 config: BaselineConfig | None = None):
        self.config = config or BaselineConfig()
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.max_arity = max_arity
        rng = np.random.default_rng(self.config.seed)
        d, std = self.config.d, self.config.init_std
        self.params = T.ParamStore()
        if self.config.family == "m-CP":
            self.params.add("entity", 1.0 + std * rng.standard_normal((max_arity, num_entities, d)))
        else:
            self.params.add("entity", 1.0 + std * rng.standard_normal((num_entities, d)))
        self.params.add("relation", std * rng.standard_normal((num_relations, d)))
        if self.config.family == "HypE-form":
            self.params.add("position", 1.0 + std * rng.standard_normal((max_arity, d)))

    @property
    def family(self):
        return self.config.family

    # numpy views
    def entity_matrix(self, position: int = 0) -> np.ndarray:
        e = self.params["entity"].data
        return e[position] if self.family == "m-CP" else e

    def relation_vector(self, r: int) -> np.ndarray:
        return self.params["relation"].data[r]

    def position_vectors(self):
        return self.params["position"].data if self.family == "HypE-form" else None

    def slot_vector(self, vec: np.ndarray, position: int) -> np.ndarray:
        return _slot(vec, position, self.family, self.config.alpha, self.position_vectors())

    def candidates(self, position: int) -> np.ndarray:
        return self.entity_matrix(position)

    # -- tensor path used for training --------------------------------------
    def _t_slot(self, ids: np.ndarray, pos: int) -> T.Tensor:
        ent = self.params["entity"]
        if self.family == "m-CP":
            return T.take(ent, (pos, ids))
        rows = T.take(ent, ids)
        if self.family == "HSimplE":
            return T.take(rows, (slice(None), _shift_index(self.config.d, self.config.alpha, pos)))
        if self.family == "HypE-form":
            return T.mul(rows, T.take(self.params["position"], pos))
        return rows

    def _t_message(self, rel: np.ndarray, others: Sequence[tuple], target: int) -> T.Tensor:
        msg = T.take(self.params["relation"], rel)
        for ids, pos in others:
            msg = T.mul(msg, self._t_slot(ids, pos))
        if self.family == "HSimplE":
            msg = T.take(msg, (slice(None), _shift_index(self.config.d, self.config.alpha, -target)))
        elif self.family == "HypE-form":
            msg = T.mul(msg, T.take(self.params["position"], target))
        return msg

    def _t_scores(self, msg: T.Tensor, target: int) -> T.Tensor:
        ent = self.params["entity"]
        cand = T.take(ent, target) if self.family == "m-CP" else ent
        return T.matmul(msg, T.transpose(cand, (1, 0)))

    def one_hop_scores(self, relation: int, bindings: dict, target: int) -> np.ndarray:
        """Scores over all entities for ``relation`` with the given constant slots."""
        neigh = [(self.entity_matrix(p)[e], p) for p, e in sorted(bindings.items())]
        msg = rho(neigh, self.relation_vector(relation), target, False, self.family,
                  self.config.alpha, self.position_vectors())
        return self.candidates(target) @ msg


def _training_examples(graph: KnowledgeHypergraph):
    """Group (edge, target position) pairs by (arity, target)."""
    groups: dict[tuple, list] = {}
    for edge in graph.edges:
        k = len(edge.entities)
        for j in range(k):
            groups.setdefault((k, j), []).append(edge)
    return groups


def pretrain(graph: KnowledgeHypergraph, config: BaselineConfig | None = None,
             callback=None) -> KhgEmbedding:
    """Fit the embedding with the one-hop objective: every edge, every slot, CE over entities."""
    config = config or BaselineConfig()
    max_arity = max(graph.arities) if graph.arities else 2
    emb = KhgEmbedding(graph.num_entities, graph.num_relations, max_arity, config)
    rng = np.random.default_rng([config.seed, 7])
    opt = T.Adam(lr=config.lr)
    examples = []
    for (k, j), edges in sorted(_training_examples(graph).items()):
        rel = np.array([e.relation for e in edges], dtype=np.intp)
        ents = np.array([e.entities for e in edges], dtype=np.intp)
        examples.append((k, j, rel, ents))
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        batches = []
        for k, j, rel, ents in examples:
            perm = rng.permutation(len(rel))
            for s in range(0, len(perm), config.batch_size):
                batches.append((k, j, rel, ents, perm[s:s + config.batch_size]))
        for bi in rng.permutation(len(batches)):
            k, j, rel, ents, idx = batches[bi]
            others = [(ents[idx, p], p) for p in range(k) if p != j]
            emb.params.zero_grad()
            msg = emb._t_message(rel[idx], others, j)
            loss = T.cross_entropy_logits(emb._t_scores(msg, j), ents[idx, j])
            T.backward(loss)
            opt.step(emb.params)
            total += loss.item() * len(idx)
            count += len(idx)
        if callback is not None:
            callback(epoch, total / count)
    emb.params.zero_grad()
    return emb


def _softmax(s):
    z = np.exp(s - s.max())
    return z / z.sum()


def score_query(tree, emb: KhgEmbedding) -> np.ndarray:
    """Leaf-to-root closed-form scoring; returns scores over all entities."""
    kind, value, pos = _estimate(tree, emb)
    if kind == "scores":
        return value
    return emb.candidates(pos) @ value


def _estimate(node, emb: KhgEmbedding):
    """('vec', message, target) for projections, ('scores', vector, None) for I/U."""
    if isinstance(node, Projection):
        if node.negated:
            raise NegationUnsupported("closed-form scoring has no negation")
        neigh, target = [], None
        for p, arg in enumerate(node.args):
            if isinstance(arg, Const):
                neigh.append((emb.entity_matrix(p)[arg.entity], p))
            elif isinstance(arg, Target):
                target = p
            else:
                kind, value, _ = _estimate(arg.node, emb)
                if kind == "scores":
                    # soft entity estimate for a set-valued child
                    value = _softmax(value) @ emb.entity_matrix(p)
                neigh.append((value, p))
        msg = rho(neigh, emb.relation_vector(node.relation), target, False, emb.family,
                  emb.config.alpha, emb.position_vectors())
        return "vec", msg, target
    parts = [score_query(c, emb) for c in node.children]
    if isinstance(node, Intersection):
        return "scores", np.minimum.reduce(parts), None
    if isinstance(node, Union):
        return "scores", np.maximum.reduce(parts), None
    raise TypeError(f"not a query node: {node!r}")


class BaselineScorer:
    """Adapter exposing ``scores(trees, mode)`` so the evaluation harness can rank it."""

    def __init__(self, emb: KhgEmbedding):
        self.emb = emb

    def scores(self, trees, mode=None) -> np.ndarray:
        return np.stack([score_query(t, self.emb) for t in trees])


def save_embedding(emb: KhgEmbedding, path):
    T.save_checkpoint(path, emb.params.arrays(), {
        "kind": "khg-embedding", "config": emb.config.to_dict(),
        "num_entities": emb.num_entities, "num_relations": emb.num_relations,
        "max_arity": emb.max_arity})


def load_embedding(path) -> KhgEmbedding:
    arrays, meta = T.load_checkpoint(path)
    emb = KhgEmbedding(meta["num_entities"], meta["num_relations"], meta["max_arity"],
                       BaselineConfig(**meta["config"]))
    emb.params.load_arrays(arrays)
    return emb
