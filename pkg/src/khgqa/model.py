"""Two-stage transformer for operator-tree queries over knowledge hypergraphs.

A projection encoder reads one atom at a time: an optional negation token, the
relation token and one token per argument position (constant entities, child
answer embeddings, and a placeholder for the slot being predicted).  Argument
tokens receive a sinusoidal encoding of their hyperedge position.  A logical
encoder reads an intersection/union operator token followed by its children's
embeddings.  Both stacks use type-aware attention: queries, keys and values are
projected with per-token-type weights and every key is shifted by a learned
vector chosen by the (query type, key type) pair.

Trees are executed bottom-up.  Batches of trees are flattened into encoder
calls that are scheduled level by level and grouped by sequence length so one
numpy kernel serves many calls at once.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyDataset, MissingChildEmbedding, TooFewChildren
from .query import (OOD_HELD_OUT, QUERY_TYPES, Const, Intersection, Projection, QueryInstance,
                    Sub, Target, Union, canonical_type, node_count)
from .tensor import Adam, ParamStore, Tensor

TOKEN_TYPES = ("n", "r", "x", "e", "y", "p", "i", "u")
TT = {name: i for i, name in enumerate(TOKEN_TYPES)}
SPECIAL = ("n", "x", "y", "i", "u")   # learned vectors: negation, placeholders, operators
SP = {name: i for i, name in enumerate(SPECIAL)}


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.0
    logical: str = "tab"            # tab | fuzzy
    cardinality: str = "pairwise"   # pairwise | variadic
    positional: str = "sinusoidal"  # sinusoidal | none
    score: str = "cosine"           # cosine | decoder
    decoder: str = "mlp"            # mlp | tied
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    dtype: str = "float64"
    init_scale: float = 1.0
    cosine_scale: float = 1.0       # initial temperature of the cosine training head

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        choices = {"logical": ("tab", "fuzzy"), "cardinality": ("pairwise", "variadic"),
                   "positional": ("sinusoidal", "none"), "score": ("cosine", "decoder"),
                   "decoder": ("mlp", "tied"), "dtype": ("float64", "float32")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(d=400, epochs=400)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in data.items() if k in known})

    def variant(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def sinusoidal(position: int, d: int) -> np.ndarray:
    i = np.arange(d // 2 + d % 2)
    angle = position / np.power(10000.0, 2 * i / d)
    pe = np.zeros(d)
    pe[0::2] = np.sin(angle)[: len(pe[0::2])]
    pe[1::2] = np.cos(angle)[: len(pe[1::2])]
    return pe


# ---------------------------------------------------------------------------
# Encoder layer
# ---------------------------------------------------------------------------

_GATHER_LIMIT = 1 << 15   # elements of the gathered weight tensor


def typed_linear(x: Tensor, weight: Tensor, types: np.ndarray) -> Tensor:
    """Row-wise ``x[b, n] @ weight[types[b, n]]`` for ``x`` of shape (B, N, D)."""
    b, n, d = x.shape
    e = weight.shape[-1]
    if b * n * d * e <= _GATHER_LIMIT:
        w = T.take(weight, types)                                # (b, n, d, e)
        out = T.matmul(T.reshape(x, (b, n, 1, d)), w)
        return T.reshape(out, (b, n, e))
    flat = T.reshape(x, (b * n, d))
    tflat = types.reshape(-1)
    order = np.argsort(tflat, kind="stable")
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    sorted_types = tflat[order]
    present, starts = np.unique(sorted_types, return_index=True)
    bounds = list(starts[1:]) + [order.size]
    pieces = []
    for t, lo, hi in zip(present, starts, bounds):
        rows = T.take(flat, order[lo:hi])
        pieces.append(T.matmul(rows, T.take(weight, int(t))))
    out = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
    out = T.take(out, inverse)
    return T.reshape(out, (b, n, weight.shape[-1]))


def tab_attention(x: Tensor, types: np.ndarray, p: Mapping[str, Tensor], heads: int,
                  return_weights: bool = False):
    """Multi-head self-attention with per-type projections and type-pair key bias.

    ``x`` is (B, N, D) or (N, D); ``types`` matches its leading dims.  ``p`` holds
    ``wq, wk, wv`` (8, D, D), ``bias`` (8, 8, D) and ``wo`` (D, D).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
        types = np.asarray(types)[None, :]
    types = np.asarray(types, dtype=np.intp)
    b, n, d = x.shape
    if types.shape != (b, n):
        raise T.ShapeMismatch(f"types shape {types.shape} does not match tokens {(b, n)}")
    dh = d // heads
    q = typed_linear(x, p["wq"], types)
    k = typed_linear(x, p["wk"], types)
    v = typed_linear(x, p["wv"], types)
    qh = T.transpose(T.reshape(q, (b, n, heads, dh)), (0, 2, 1, 3))
    kh = T.transpose(T.reshape(k, (b, n, heads, dh)), (0, 2, 3, 1))
    vh = T.transpose(T.reshape(v, (b, n, heads, dh)), (0, 2, 1, 3))
    scores = T.matmul(qh, kh)                                   # (b, h, n, n)
    pair = T.take(p["bias"], (types[:, :, None], types[:, None, :]))   # (b, n, n, d)
    pair = T.reshape(pair, (b, n, n, heads, dh))
    scores = T.add(scores, T.einsum("bhid,bijhd->bhij", qh, pair))
    weights = T.softmax(T.mul(scores, 1.0 / math.sqrt(dh)), axis=-1)
    z = T.matmul(weights, vh)                                   # (b, h, n, dh)
    z = T.reshape(T.transpose(z, (0, 2, 1, 3)), (b, n, d))
    out = T.matmul(z, p["wo"])
    if squeeze:
        out = T.reshape(out, (n, d))
    return (out, weights) if return_weights else out


def encoder_layer(x: Tensor, types: np.ndarray, p: Mapping[str, Tensor], heads: int,
                  dropout: float = 0.0, rng=None) -> Tensor:
    """Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x))."""
    h = T.layer_norm(x, p["ln1_g"], p["ln1_b"])
    x = T.add(x, T.dropout(tab_attention(h, types, p, heads), dropout, rng))
    h = T.layer_norm(x, p["ln2_g"], p["ln2_b"])
    h = T.add(T.matmul(T.gelu(T.add(T.matmul(h, p["ff1"]), p["ff1_b"])), p["ff2"]), p["ff2_b"])
    return T.add(x, T.dropout(h, dropout, rng))


# ---------------------------------------------------------------------------
# Call planning
# ---------------------------------------------------------------------------

@dataclass
class _Call:
    kind: str                     # proj | logic | fuzzy
    sources: list                 # [(bank, index)]: bank in ent/rel/spc/ext/call
    types: list
    positions: list
    readout: int = 0
    op: str = ""
    deps: list = field(default_factory=list)
    level: int = 0


@dataclass
class ExecutionStats:
    nodes: int = 0
    projection_calls: int = 0
    logical_calls: int = 0
    fuzzy_calls: int = 0

    @property
    def invocations(self) -> int:
        """Operator nodes dispatched to an encoder (one per tree node)."""
        return self.nodes

    @property
    def encoder_passes(self) -> int:
        return self.projection_calls + self.logical_calls + self.fuzzy_calls


class _Planner:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.calls: list[_Call] = []
        self.ext: list[Tensor] = []
        self.nodes = 0

    def add(self, call: _Call) -> int:
        call.level = 1 + max((self.calls[c].level for c in call.deps), default=-1)
        self.calls.append(call)
        return len(self.calls) - 1

    def external(self, vec) -> tuple:
        self.ext.append(T.as_tensor(vec))
        return ("ext", len(self.ext) - 1)

    def tree(self, node, free: bool = True) -> int:
        self.nodes += 1
        if isinstance(node, Projection):
            deps, subs = [], {}
            for pos, arg in enumerate(node.args):
                if isinstance(arg, Sub):
                    c = self.tree(arg.node, free=False)
                    deps.append(c)
                    subs[pos] = ("call", c)
            return self.add(self.projection_call(node, subs, free, deps))
        kids = [self.tree(c, free) for c in node.children]
        op = "i" if isinstance(node, Intersection) else "u"
        return self.logical([("call", c) for c in kids], op, kids)

    def projection_call(self, atom: Projection, subs: Mapping[int, tuple], free: bool,
                        deps=()) -> _Call:
        sources, types, positions = [], [], []
        if atom.negated:
            sources.append(("spc", SP["n"]))
            types.append(TT["n"])
            positions.append(-1)
        sources.append(("rel", atom.relation))
        types.append(TT["r"])
        positions.append(-1)
        readout = None
        for pos, arg in enumerate(atom.args):
            if isinstance(arg, Const):
                sources.append(("ent", arg.entity))
                types.append(TT["e"])
            elif isinstance(arg, Sub):
                if pos not in subs:
                    raise MissingChildEmbedding(f"no embedding for argument slot {pos}")
                sources.append(subs[pos])
                types.append(TT["x"])
            else:
                readout = len(sources)
                kind = "y" if free else "x"
                sources.append(("spc", SP[kind]))
                types.append(TT[kind])
            positions.append(pos)
        return _Call("proj", sources, types, positions, readout, deps=list(deps))

    def logical(self, children: list, op: str, deps: list) -> int:
        if len(children) < 2:
            raise TooFewChildren(f"{op} needs at least two children")
        cfg = self.config
        if cfg.logical == "fuzzy":
            return self.add(_Call("fuzzy", list(children), [], [], op=op, deps=list(deps)))
        if cfg.cardinality == "variadic":
            return self.add(self._logic_call(children, op, deps))
        acc, acc_deps = children[0], [deps[0]] if deps else []
        for i, child in enumerate(children[1:], start=1):
            step_deps = acc_deps + ([deps[i]] if deps else [])
            c = self.add(self._logic_call([acc, child], op, step_deps))
            acc, acc_deps = ("call", c), [c]
        return acc[1]

    def _logic_call(self, children, op, deps) -> _Call:
        sources = [("spc", SP[op])] + list(children)
        types = [TT[op]] + [TT["p"]] * len(children)
        return _Call("logic", sources, types, [-1] * len(sources), 0, op=op, deps=list(deps))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class LkhgtModel:
    def __init__(self, num_entities: int, num_relations: int, config: ModelConfig | None = None,
                 max_arity: int = 8):
        self.config = config or ModelConfig()
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.max_arity = max_arity
        self.dtype = np.dtype(self.config.dtype)
        self.params = ParamStore()
        self.stats = ExecutionStats()
        self._init_params(np.random.default_rng(self.config.seed))
        d = self.config.d
        self._pe = np.stack([sinusoidal(p, d) for p in range(max_arity)]).astype(self.dtype)

    # -- parameters ------------------------------------------------------
    def _init_params(self, rng):
        cfg, d = self.config, self.config.d
        s = cfg.init_scale
        nt = len(TOKEN_TYPES)
        add = self.params.add

        def normal(*shape, std):
            return (rng.standard_normal(shape) * std * s).astype(self.dtype)

        add("entity", normal(self.num_entities, d, std=1.0))
        add("relation", normal(self.num_relations, d, std=1.0))
        add("special", normal(len(SPECIAL), d, std=1.0))
        add("in_proj", np.stack([np.eye(d)] * nt).astype(self.dtype) + normal(nt, d, d, std=d ** -0.5 * 0.5))
        for enc in ("proj", "logic"):
            for layer in range(cfg.layers):
                pre = f"{enc}.{layer}."
                for w in ("wq", "wk", "wv"):
                    add(pre + w, normal(nt, d, d, std=d ** -0.5))
                add(pre + "bias", np.zeros((nt, nt, d), self.dtype))
                add(pre + "wo", normal(d, d, std=d ** -0.5))
                add(pre + "ln1_g", np.ones(d, self.dtype))
                add(pre + "ln1_b", np.zeros(d, self.dtype))
                add(pre + "ln2_g", np.ones(d, self.dtype))
                add(pre + "ln2_b", np.zeros(d, self.dtype))
                add(pre + "ff1", normal(d, cfg.ffn_mult * d, std=d ** -0.5))
                add(pre + "ff1_b", np.zeros(cfg.ffn_mult * d, self.dtype))
                add(pre + "ff2", normal(cfg.ffn_mult * d, d, std=(cfg.ffn_mult * d) ** -0.5))
                add(pre + "ff2_b", np.zeros(d, self.dtype))
            add(f"{enc}.lnf_g", np.ones(d, self.dtype))
            add(f"{enc}.lnf_b", np.zeros(d, self.dtype))
        add("dec1", normal(d, d, std=d ** -0.5))
        add("dec1_b", np.zeros(d, self.dtype))
        add("dec2", normal(d, self.num_entities, std=0.01))
        add("dec2_b", np.zeros(self.num_entities, self.dtype))
        add("log_scale", np.array(math.log(cfg.cosine_scale), dtype=self.dtype))

    def layer_params(self, enc: str, layer: int) -> dict:
        pre = f"{enc}.{layer}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    # -- encoders --------------------------------------------------------
    def _stack(self, enc: str, x: Tensor, types: np.ndarray, rng=None) -> Tensor:
        cfg = self.config
        for layer in range(cfg.layers):
            x = encoder_layer(x, types, self.layer_params(enc, layer), cfg.heads, cfg.dropout, rng)
        p = self.params
        return T.layer_norm(x, p[f"{enc}.lnf_g"], p[f"{enc}.lnf_b"])

    def _run_calls(self, planner: _Planner, rng=None) -> dict[int, Tensor]:
        """Execute every planned call level by level.

        Returns ``(outputs, where)``: all call outputs stacked row-wise and the
        row of each call index.
        """
        p = self.params
        base_parts = [p["entity"], p["relation"], p["special"]] + planner.ext
        offsets = np.cumsum([0] + [t.shape[0] if t.ndim == 2 else 1 for t in base_parts])
        base_parts = [t if t.ndim == 2 else T.reshape(t, (1, -1)) for t in base_parts]
        base = T.concat(base_parts, axis=0) if len(base_parts) > 1 else base_parts[0]
        base_off = {"ent": offsets[0], "rel": offsets[1], "spc": offsets[2]}
        ext_off = offsets[3:]
        n_base = base.shape[0]

        outputs: list[Tensor] = []
        where: dict[int, int] = {}     # call -> row in concat(outputs)
        rows_so_far = 0
        by_level: dict[int, list[int]] = {}
        for i, c in enumerate(planner.calls):
            by_level.setdefault(c.level, []).append(i)

        for level in sorted(by_level):
            bank = T.concat([base] + outputs, axis=0) if outputs else base
            groups: dict[tuple, list[int]] = {}
            for i in by_level[level]:
                c = planner.calls[i]
                key = (c.kind, len(c.sources), c.op if c.kind == "fuzzy" else "")
                groups.setdefault(key, []).append(i)
            for key in sorted(groups):
                members = groups[key]

                def row(src):
                    kind, idx = src
                    if kind == "call":
                        return n_base + where[idx]
                    if kind == "ext":
                        return ext_off[idx]
                    return base_off[kind] + idx

                idx = np.array([[row(s) for s in planner.calls[i].sources] for i in members],
                               dtype=np.intp)
                if key[0] == "fuzzy":
                    out = self._fuzzy(T.take(bank, idx), key[2])
                else:
                    out = self._encode_group(key[0], members, planner, bank, idx, rng)
                outputs.append(out)
                for j, i in enumerate(members):
                    where[i] = rows_so_far + j
                rows_so_far += len(members)
        allout = T.concat(outputs, axis=0) if len(outputs) > 1 else outputs[0]
        return allout, where

    def _encode_group(self, kind, members, planner, bank, idx, rng):
        calls = [planner.calls[i] for i in members]
        types = np.array([c.types for c in calls], dtype=np.intp)
        x = typed_linear(T.take(bank, idx), self.params["in_proj"], types)
        if kind == "proj":
            self.stats.projection_calls += len(calls)
            if self.config.positional == "sinusoidal":
                pos = np.array([c.positions for c in calls])
                pe = np.where((pos >= 0)[..., None], self._pe[np.clip(pos, 0, None)], 0.0)
                x = T.add(x, pe.astype(self.dtype))
            h = self._stack("proj", x, types, rng)
            readout = np.array([c.readout for c in calls], dtype=np.intp)
        else:
            self.stats.logical_calls += len(calls)
            h = self._stack("logic", x, types, rng)
            readout = np.zeros(len(calls), dtype=np.intp)
        return T.take(h, (np.arange(len(calls)), readout))

    def _fuzzy(self, children: Tensor, op: str) -> Tensor:
        """Product t-norm / t-conorm in sigmoid space; children is (B, K, d)."""
        self.stats.fuzzy_calls += children.shape[0]
        k = children.shape[1]
        s = T.sigmoid(children)
        if op == "i":
            acc = T.take(s, (slice(None), 0))
            for j in range(1, k):
                acc = T.mul(acc, T.take(s, (slice(None), j)))
            return T.logit(acc)
        comp = T.sub(1.0, s)
        acc = T.take(comp, (slice(None), 0))
        for j in range(1, k):
            acc = T.mul(acc, T.take(comp, (slice(None), j)))
        return T.logit(T.sub(1.0, acc))

    # -- public API ------------------------------------------------------
    def execute_batch(self, trees: Sequence, rng=None) -> Tensor:
        """Root embeddings (B, d) for a batch of trees."""
        planner = _Planner(self.config)
        roots = [planner.tree(t) for t in trees]
        self.stats.nodes += planner.nodes
        allout, where = self._run_calls(planner, rng)
        return T.take(allout, np.array([where[r] for r in roots], dtype=np.intp))

    def execute(self, tree) -> Tensor:
        """Root embedding (d,) of one tree; ``self.stats`` counts encoder work."""
        self.stats = ExecutionStats()
        return T.reshape(self.execute_batch([tree]), (self.config.d,))

    def build_projection_tokens(self, atom: Projection, child_embeddings: Mapping[int, object] = None,
                                free: bool = True):
        """Token matrix (after per-type projection and positional encoding), types and positions."""
        planner = _Planner(self.config)
        subs = {pos: planner.external(v) for pos, v in (child_embeddings or {}).items()}
        call = planner.projection_call(atom, subs, free)
        planner.add(call)
        p = self.params
        base = T.concat([p["entity"], p["relation"], p["special"]]
                        + [T.reshape(v, (1, -1)) for v in planner.ext], axis=0)
        nE, nR = self.num_entities, self.num_relations
        off = {"ent": 0, "rel": nE, "spc": nE + nR, "ext": nE + nR + len(SPECIAL)}
        idx = np.array([off[k] + i for k, i in call.sources], dtype=np.intp)
        types = np.array(call.types, dtype=np.intp)
        x = typed_linear(T.reshape(T.take(base, idx), (1, len(idx), -1)), p["in_proj"], types[None])
        x = T.reshape(x, (len(idx), -1))
        if self.config.positional == "sinusoidal":
            pos = np.array(call.positions)
            pe = np.where((pos >= 0)[:, None], self._pe[np.clip(pos, 0, None)], 0.0)
            x = T.add(x, pe.astype(self.dtype))
        names = [TOKEN_TYPES[t] for t in call.types]
        positions = [None if q < 0 else q for q in call.positions]
        return x, names, positions

    def encode_projection(self, atom: Projection, child_embeddings: Mapping[int, object] = None,
                          free: bool = True) -> Tensor:
        planner = _Planner(self.config)
        subs = {pos: planner.external(v) for pos, v in (child_embeddings or {}).items()}
        root = planner.add(planner.projection_call(atom, subs, free))
        allout, where = self._run_calls(planner)
        return T.reshape(T.take(allout, where[root]), (self.config.d,))

    def encode_logical(self, op: str, children: Sequence) -> Tensor:
        if op not in ("i", "u"):
            raise ValueError("op must be 'i' or 'u'")
        planner = _Planner(self.config)
        srcs = [planner.external(v) for v in children]
        root = planner.logical(srcs, op, [])
        allout, where = self._run_calls(planner)
        return T.reshape(T.take(allout, where[root]), (self.config.d,))

    def fuzzy_logical(self, op: str, children: Sequence) -> Tensor:
        if len(children) < 2:
            raise TooFewChildren(f"{op} needs at least two children")
        stacked = T.reshape(T.concat([T.reshape(T.as_tensor(c), (1, -1)) for c in children], 0),
                            (1, len(children), -1))
        return T.reshape(self._fuzzy(stacked, op), (self.config.d,))

    def decode(self, embedding) -> Tensor:
        """Decoder logits over all entities for (d,) or (B, d) embeddings."""
        p = self.params
        h = T.as_tensor(embedding)
        squeeze = h.ndim == 1
        if squeeze:
            h = T.reshape(h, (1, -1))
        if self.config.decoder == "tied":
            out = T.matmul(h, T.transpose(p["entity"], (1, 0)))
            return T.reshape(out, (-1,)) if squeeze else out
        z = T.gelu(T.add(T.matmul(h, p["dec1"]), p["dec1_b"]))
        out = T.add(T.matmul(z, p["dec2"]), p["dec2_b"])
        return T.reshape(out, (-1,)) if squeeze else out

    def cosine_scores(self, embedding) -> Tensor:
        h = T.as_tensor(embedding)
        squeeze = h.ndim == 1
        if squeeze:
            h = T.reshape(h, (1, -1))
        cos = T.matmul(T.l2_normalize(h), T.transpose(T.l2_normalize(self.params["entity"]), (1, 0)))
        return T.reshape(cos, (-1,)) if squeeze else cos

    def logits(self, embedding) -> Tensor:
        """Training head; follows ``config.score`` so training and ranking agree."""
        if self.config.score == "decoder":
            return self.decode(embedding)
        scale = np.exp(self.params["log_scale"].data)
        scale_t = _exp(self.params["log_scale"], scale)
        return T.mul(self.cosine_scores(embedding), scale_t)

    def loss(self, trees: Sequence, answers: Sequence[int], rng=None) -> Tensor:
        emb = self.execute_batch(trees, rng)
        return T.cross_entropy_logits(self.logits(emb), np.asarray(answers, dtype=np.intp))

    def scores(self, trees: Sequence, mode: str | None = None) -> np.ndarray:
        """Numpy score matrix (B, |E|) used for ranking."""
        mode = mode or self.config.score
        emb = self.execute_batch(trees)
        if mode == "cosine":
            return self.cosine_scores(emb).data
        return self.decode(emb).data

    def rank(self, tree, exclude: Iterable[int] = (), mode: str | None = None) -> list[int]:
        return rank_scores(self.scores([tree], mode)[0], exclude)

    # -- persistence -----------------------------------------------------
    def manifest(self) -> dict:
        return {"config": self.config.to_dict(), "num_entities": self.num_entities,
                "num_relations": self.num_relations, "max_arity": self.max_arity}

    def save(self, path, extra: Mapping | None = None):
        meta = self.manifest()
        meta.update(extra or {})
        T.save_checkpoint(path, self.params.arrays(), meta)

    @classmethod
    def load(cls, path) -> "LkhgtModel":
        arrays, meta = T.load_checkpoint(path)
        model = cls(meta["num_entities"], meta["num_relations"],
                    ModelConfig.from_dict(meta["config"]), meta.get("max_arity", 8))
        model.params.load_arrays(arrays)
        return model


def _exp(x: Tensor, value) -> Tensor:
    return T._make(value, (x,), lambda g: (g * value,))


def rank_scores(scores: np.ndarray, exclude: Iterable[int] = ()) -> list[int]:
    """Entities by descending score, ties broken by ascending id, ``exclude`` removed."""
    ids = np.arange(scores.shape[0])
    order = np.lexsort((ids, -scores))
    excl = set(int(e) for e in exclude)
    return [int(e) for e in order if int(e) not in excl]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def filter_instances(instances: Sequence[QueryInstance], include=None, exclude=None):
    inc = None if include is None else {canonical_type(t) for t in include}
    exc = set() if exclude is None else {canonical_type(t) for t in exclude}
    return [q for q in instances if (inc is None or q.type in inc) and q.type not in exc]


def ood_filter(instances: Sequence[QueryInstance]):
    """Drop the held-out generalisation types (3P, 3IN, 3I, INP)."""
    return filter_instances(instances, exclude=OOD_HELD_OUT)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)    # (epoch, loss, train_mrr)

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    def to_tsv(self) -> str:
        lines = ["epoch\tloss\ttrain_mrr\n"]
        for epoch, loss, mrr in self.rows:
            mrr_s = "" if mrr is None else f"{mrr:.6f}"
            lines.append(f"{epoch}\t{loss:.6f}\t{mrr_s}\n")
        return "".join(lines)


def train(model: LkhgtModel, instances: Sequence[QueryInstance], config: ModelConfig | None = None,
          include=None, exclude=None, mrr_sample: int = 0, mrr_every: int = 1,
          callback=None) -> TrainLog:
    """Minibatch Adam on cross-entropy; one answer per instance drawn per epoch."""
    config = config or model.config
    data = filter_instances(instances, include, exclude)
    data = [q for q in data if q.answers]
    if not data:
        raise EmptyDataset("no training instances after filtering")
    rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2]) if config.dropout > 0 else None
    opt = Adam(lr=config.lr)
    answer_lists = [sorted(q.answers) for q in data]
    sample = data[:mrr_sample] if mrr_sample else []
    log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start:start + config.batch_size]
            trees = [data[i].tree for i in batch]
            ans = [answer_lists[i][int(rng.integers(len(answer_lists[i])))] for i in batch]
            model.params.zero_grad()
            loss = model.loss(trees, ans, drop_rng)
            T.backward(loss)
            opt.step(model.params)
            total += loss.item() * len(batch)
            count += len(batch)
        mrr = None
        if sample and (epoch % mrr_every == 0 or epoch == config.epochs):
            from .evaluation import mean_mrr
            mrr = mean_mrr(model, sample)
        log.rows.append((epoch, total / count, mrr))
        if callback is not None:
            callback(epoch, total / count, mrr)
    model.params.zero_grad()
    return log


def mean_loss(model: LkhgtModel, instances: Sequence[QueryInstance], seed: int = 0) -> float:
    """Average cross-entropy of ``model`` with one uniformly drawn answer per instance."""
    rng = np.random.default_rng(seed)
    trees = [q.tree for q in instances]
    ans = [sorted(q.answers)[int(rng.integers(len(q.answers)))] for q in instances]
    return model.loss(trees, ans).item()
