"""Filtered MRR, per-type reports and the ablation runner."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyHardSet
from .query import EPFO_TYPES, NEGATION_TYPES, QUERY_TYPES, QueryInstance, dump_instances


def mrr_query(ranked: Sequence[int], hard: Iterable[int]) -> float:
    """Mean of ``1/rank`` over the hard answers, ranks 1-based in ``ranked``."""
    hard = set(hard)
    if not hard:
        raise EmptyHardSet("query has no hard answers")
    pos = {e: i for i, e in enumerate(ranked, start=1)}
    missing = hard - pos.keys()
    if missing:
        raise ValueError(f"hard answers {sorted(missing)[:5]} not in the ranking")
    return sum(1.0 / pos[e] for e in hard) / len(hard)


def filtered_ranks(scores: np.ndarray, easy: Iterable[int], hard: Iterable[int],
                   filter_hard: bool = False) -> np.ndarray:
    """1-based rank of each hard answer after removing easy answers.

    Ties go to the lower entity id.  With ``filter_hard`` the *other* hard
    answers are removed as well.
    """
    hard = np.array(sorted(set(hard)), dtype=np.intp)
    ids = np.arange(scores.shape[0])
    order = np.lexsort((ids, -scores))
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[list(set(easy))] = False
    position = np.empty_like(order)
    position[order] = np.arange(order.size)
    # entities kept and placed before each position
    kept_sorted = keep[order]
    before = np.cumsum(kept_sorted) - kept_sorted
    ranks = before[position[hard]] + 1
    if filter_hard:
        hard_pos = np.sort(position[hard])
        ahead = np.searchsorted(hard_pos, position[hard])
        ranks = ranks - ahead
    return ranks


def mrr_from_scores(scores: np.ndarray, easy, hard, filter_hard: bool = False) -> float:
    ranks = filtered_ranks(scores, easy, hard, filter_hard)
    if ranks.size == 0:
        raise EmptyHardSet("query has no hard answers")
    return float(np.mean(1.0 / ranks))


@dataclass
class EvalReport:
    mrr: dict = field(default_factory=dict)      # type -> mean MRR
    counts: dict = field(default_factory=dict)   # type -> instances
    config: dict = field(default_factory=dict)

    @property
    def ap(self) -> float | None:
        vals = [self.mrr[t] for t in EPFO_TYPES if t in self.mrr]
        return float(np.mean(vals)) if vals else None

    @property
    def an(self) -> float | None:
        vals = [self.mrr[t] for t in NEGATION_TYPES if t in self.mrr]
        return float(np.mean(vals)) if vals else None

    @property
    def mean(self) -> float | None:
        vals = list(self.mrr.values())
        return float(np.mean(vals)) if vals else None

    def columns(self) -> list[str]:
        return [t for t in QUERY_TYPES if t in self.mrr]

    def to_dict(self) -> dict:
        return {"mrr": {t: self.mrr[t] for t in self.columns()},
                "counts": {t: self.counts[t] for t in self.columns()},
                "AP": self.ap, "AN": self.an, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_tsv(self, label: str = "model") -> str:
        return report_table({label: self})


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def report_table(reports: Mapping[str, EvalReport], extra: Mapping[str, Mapping] | None = None) -> str:
    """Tab-separated table with the 14 type columns followed by AP and AN."""
    extra = extra or {}
    extra_cols = sorted({k for e in extra.values() for k in e})
    header = ["model"] + list(QUERY_TYPES) + ["AP", "AN"] + extra_cols
    lines = ["\t".join(header) + "\n"]
    for label, rep in reports.items():
        row = [label] + [_fmt(rep.mrr.get(t)) for t in QUERY_TYPES] + [_fmt(rep.ap), _fmt(rep.an)]
        row += [str(extra.get(label, {}).get(k, "")) for k in extra_cols]
        lines.append("\t".join(row) + "\n")
    return "".join(lines)


def evaluate(model, instances: Sequence[QueryInstance], mode: str | None = None,
             filter_hard: bool = False, batch_size: int = 256, config: Mapping | None = None
             ) -> EvalReport:
    """Rank every instance with easy answers excluded; average MRR per type."""
    per_type: dict[str, list[float]] = {}
    usable = [q for q in instances if q.hard]
    for start in range(0, len(usable), batch_size):
        batch = usable[start:start + batch_size]
        scores = model.scores([q.tree for q in batch], mode)
        for q, s in zip(batch, scores):
            per_type.setdefault(q.type, []).append(mrr_from_scores(s, q.easy, q.hard, filter_hard))
    report = EvalReport(config=dict(config or {}))
    for t in QUERY_TYPES:
        if t in per_type:
            report.mrr[t] = float(np.mean(per_type[t]))
            report.counts[t] = len(per_type[t])
    return report


def mean_mrr(model, instances: Sequence[QueryInstance], mode: str | None = None) -> float:
    """Instance-averaged MRR (used for training-set monitoring)."""
    usable = [q for q in instances if q.hard]
    scores = model.scores([q.tree for q in usable], mode)
    return float(np.mean([mrr_from_scores(s, q.easy, q.hard) for q, s in zip(usable, scores)]))


def dataset_hash(instances: Sequence[QueryInstance]) -> str:
    return hashlib.sha256(dump_instances(instances).encode("utf-8")).hexdigest()[:16]


ABLATIONS = {
    "LKHGT": {},
    "LKHGT w/ fuzzy": {"logical": "fuzzy"},
    "LKHGT w/o abs.": {"positional": "none"},
    "LKHGT w/ var cardinality": {"cardinality": "variadic"},
}


@dataclass
class AblationResult:
    reports: dict          # (variant, seed) -> EvalReport
    data_hash: str
    seeds: tuple

    def mean_report(self, variant: str) -> EvalReport:
        reps = [self.reports[(variant, s)] for s in self.seeds]
        out = EvalReport(config=reps[0].config)
        for t in QUERY_TYPES:
            vals = [r.mrr[t] for r in reps if t in r.mrr]
            if vals:
                out.mrr[t] = float(np.mean(vals))
                out.counts[t] = reps[0].counts[t]
        return out

    def mean(self, variant: str) -> float:
        return float(np.mean([self.reports[(variant, s)].mean for s in self.seeds]))

    def spread(self, variant: str) -> float:
        return float(np.std([self.reports[(variant, s)].mean for s in self.seeds]))

    def to_tsv(self) -> str:
        variants = list(dict.fromkeys(v for v, _ in self.reports))
        means = {v: self.mean_report(v) for v in variants}
        extra = {v: {"mean": f"{self.mean(v):.6f}", "spread": f"{self.spread(v):.6f}",
                     "seeds": ",".join(map(str, self.seeds)), "data": self.data_hash}
                 for v in variants}
        return report_table(means, extra)


def ablate(base_config, num_entities: int, num_relations: int, train_set: Sequence[QueryInstance],
           eval_set: Sequence[QueryInstance], seeds: Sequence[int] = (0,), variants=None,
           exclude=None, mode: str | None = None, max_arity: int = 8) -> AblationResult:
    """Train and evaluate each variant under identical data and seeds."""
    from .model import LkhgtModel, train

    variants = variants or list(ABLATIONS)
    reports = {}
    for name in variants:
        for seed in seeds:
            cfg = base_config.variant(seed=seed, **ABLATIONS[name])
            model = LkhgtModel(num_entities, num_relations, cfg, max_arity)
            train(model, train_set, cfg, exclude=exclude)
            reports[(name, seed)] = evaluate(model, eval_set, mode,
                                             config={"variant": name, "seed": seed})
    return AblationResult(reports, dataset_hash(list(train_set) + list(eval_set)), tuple(seeds))
