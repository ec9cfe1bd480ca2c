"""Command-line entry point: ``khgqa <command> [flags]``.

Commands: sample, train, eval, oracle, baseline, ablate, stats.  Every
command requires ``--seed`` and writes a ``manifest.json`` next to its
artifacts.  Flags may also come from a ``key = value`` file passed with
``--config``; explicit flags win.  ``KHGQA_OUT`` sets the output directory
when ``--out`` is not given.

Exit status: 0 on success, 1 on configuration errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError
from .graph import GraphSplits, KnowledgeHypergraph, Vocab, load_splits, parse_facts, split_graph
from .query import (EPFO_TYPES, OOD_HELD_OUT, QUERY_TYPES, canonical_type, load_instances,
                    query_filename, serialize_tree)

DEFAULT_OUT = "runs"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such file: {path}")
    return p.read_text(encoding="utf-8")


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; optional quotes and ``[section]`` lines ignored."""
    out = {}
    for lineno, raw in enumerate(read_text(path).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.replace("-", "_")] = value
    return out


def _to_bool(value: str) -> bool:
    low = str(value).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _apply_config(parser: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help", "command"):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _to_bool(value)
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
        else:
            defaults[key] = value
        if action.required:
            action.required = False
    parser.set_defaults(**defaults)


def out_dir(args) -> Path:
    path = Path(args.out or os.environ.get("KHGQA_OUT") or DEFAULT_OUT)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, args, inputs: dict, extra: dict | None = None) -> None:
    """Config echo, input hashes and versions; deliberately no timestamps."""
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "config")}
    manifest = {"command": args.command, "seed": args.seed, "config": config,
                "inputs": {name: file_hash(p) for name, p in sorted(inputs.items())},
                "versions": {"khgqa": __version__, "numpy": np.__version__}}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")


def parse_types(text: str | None, default=QUERY_TYPES) -> tuple:
    if not text:
        return tuple(default)
    return tuple(canonical_type(t.strip()) for t in text.split(",") if t.strip())


def load_vocab(data: Path):
    entities = Vocab(l for l in read_text(data / "entities.txt").splitlines() if l)
    relations, arities = Vocab(), {}
    for line in read_text(data / "relations.txt").splitlines():
        if line:
            name, k = line.split("\t")
            arities[relations.add(name)] = int(k)
    return entities, relations, arities


def load_data_splits(data: Path) -> GraphSplits:
    """Rebuild the nested graphs of a sampled data directory with its original ids."""
    entities, relations, arities = load_vocab(data)
    parts = [parse_facts(read_text(data / f"{s}_facts.tsv"), entities, relations, arities,
                         allow_empty=True).edges for s in ("train", "valid", "test")]
    arity_list = [arities[r] for r in range(len(relations))]

    def build(edges):
        return KnowledgeHypergraph(entities, relations, arity_list, edges)

    return GraphSplits(build(parts[0]), build(parts[0] + parts[1]),
                       build(parts[0] + parts[1] + parts[2]))


def load_queries(data: Path, split: str, types=QUERY_TYPES):
    """Instances of ``split`` for the requested types plus the files read."""
    instances, files = [], {}
    for qtype in types:
        path = data / query_filename(split, qtype)
        if path.is_file():
            instances.extend(load_instances(path.read_text(encoding="utf-8")))
            files[path.name] = path
    if not instances:
        raise DataError(f"no {split} queries found in {data}")
    return instances, files


def model_config(args, **overrides):
    from .model import ModelConfig
    cfg = dict(d=args.d, layers=args.layers, heads=args.heads, epochs=args.epochs,
               batch_size=args.batch_size, lr=args.lr, dropout=args.dropout, seed=args.seed,
               logical="fuzzy" if args.fuzzy else "tab",
               positional="none" if args.no_abs_pe else "sinusoidal",
               cardinality="variadic" if args.variadic_card else "pairwise",
               score=args.score, decoder=args.decoder)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def training_exclusion(args):
    if args.ood and args.full_train:
        raise ConfigError("--ood and --full-train are mutually exclusive")
    return OOD_HELD_OUT if args.ood else None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_sample(args) -> int:
    from .sampler import SampleSpec, sample_dataset

    inputs = {"facts": args.facts}
    if args.valid_facts or args.test_facts:
        valid = read_text(args.valid_facts) if args.valid_facts else ""
        test = read_text(args.test_facts) if args.test_facts else ""
        splits = load_splits(read_text(args.facts), valid, test)
        inputs.update({k: v for k, v in (("valid_facts", args.valid_facts),
                                         ("test_facts", args.test_facts)) if v})
    else:
        splits = split_graph(parse_facts(read_text(args.facts)), args.seed,
                             args.valid_frac, args.test_frac)
    types = parse_types(args.types)
    if args.standard_counts:
        spec = SampleSpec.standard(args.seed, args.scale, retries=args.retries)
        spec.counts = {k: v for k, v in spec.counts.items() if k[1] in types}
    else:
        spec = SampleSpec.uniform(args.seed, args.train_count, args.valid_count, args.test_count,
                                  types, retries=args.retries)
    out = out_dir(args)
    sample_dataset(spec, splits, out)
    graphs = [splits.train, splits.valid, splits.test]
    for name, graph, prev in zip(("train", "valid", "test"), graphs, [None] + graphs[:2]):
        edges = graph.edges if prev is None else [e for e in graph.edges if e not in prev.edge_set]
        (out / f"{name}_facts.tsv").write_text(graph.with_edges(edges).serialize(), encoding="utf-8")
    write_manifest(out, args, inputs)
    print(f"wrote {sum(1 for n in spec.counts.values() if n)} query files to {out}")
    return 0


def cmd_train(args) -> int:
    from .model import LkhgtModel, train

    data = Path(args.data)
    entities, relations, arities = load_vocab(data)
    exclude = training_exclusion(args)
    instances, files = load_queries(data, "train", parse_types(args.types))
    cfg = model_config(args)
    model = LkhgtModel(len(entities), len(relations), cfg, max(arities.values()))
    log = train(model, instances, cfg, exclude=exclude, mrr_sample=args.mrr_sample,
                mrr_every=args.mrr_every)
    out = out_dir(args)
    model.save(out / "model.ckpt", {"seed": args.seed, "ood": bool(args.ood)})
    (out / "train_log.tsv").write_text(log.to_tsv(), encoding="utf-8")
    write_manifest(out, args, {k: str(v) for k, v in files.items()})
    print(f"final loss {log.losses[-1]:.6f}; checkpoint {out / 'model.ckpt'}")
    return 0


def _write_report(out: Path, report, label: str) -> None:
    (out / "report.tsv").write_text(report.to_tsv(label), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_tsv(label))


def cmd_eval(args) -> int:
    from .evaluation import dataset_hash, evaluate
    from .model import LkhgtModel

    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"no such checkpoint: {args.checkpoint}")
    model = LkhgtModel.load(args.checkpoint)
    instances, files = load_queries(Path(args.data), args.split, parse_types(args.types))
    report = evaluate(model, instances, args.score, args.filter_hard, config={
        "seed": args.seed, "split": args.split, "score": args.score or model.config.score,
        "filter_hard": args.filter_hard, "data": dataset_hash(instances),
        "model": model.config.to_dict()})
    out = out_dir(args)
    _write_report(out, report, "LKHGT")
    inputs = {k: str(v) for k, v in files.items()}
    inputs["checkpoint"] = args.checkpoint
    write_manifest(out, args, inputs)
    return 0


def cmd_oracle(args) -> int:
    from .oracle import answers

    if bool(args.facts) == bool(args.data):
        raise ConfigError("oracle needs exactly one of --facts or --data")
    if args.data:
        graph = load_data_splits(Path(args.data))[args.split]
        inputs = {"queries": args.queries, "facts": str(Path(args.data) / "train_facts.tsv")}
    else:
        graph = parse_facts(read_text(args.facts))
        inputs = {"queries": args.queries, "facts": args.facts}
    instances = load_instances(read_text(args.queries))
    lines = []
    for q in instances:
        ans = sorted(answers(q.tree, graph))
        names = ",".join(graph.entities.name(e) for e in ans)
        lines.append(f"{q.type}\t{serialize_tree(q.tree)}\t{names}\n")
    out = out_dir(args)
    (out / "answers.tsv").write_text("".join(lines), encoding="utf-8")
    write_manifest(out, args, inputs)
    sys.stdout.write("".join(lines))
    return 0


def cmd_baseline(args) -> int:
    from .baseline import BaselineConfig, BaselineScorer, pretrain, save_embedding
    from .evaluation import dataset_hash, evaluate

    data = Path(args.data)
    splits = load_data_splits(data)
    cfg = BaselineConfig(family=args.family, d=args.d, epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch_size, seed=args.seed, alpha=args.alpha)
    emb = pretrain(splits.train, cfg)
    types = [t for t in parse_types(args.types, EPFO_TYPES) if t in EPFO_TYPES]
    instances, files = load_queries(data, args.split, types)
    report = evaluate(BaselineScorer(emb), instances, config={
        "seed": args.seed, "split": args.split, "data": dataset_hash(instances),
        "baseline": cfg.to_dict()})
    out = out_dir(args)
    save_embedding(emb, out / "embedding.ckpt")
    _write_report(out, report, f"HLMPNN ({args.family})")
    inputs = {k: str(v) for k, v in files.items()}
    inputs["train_facts"] = str(data / "train_facts.tsv")
    write_manifest(out, args, inputs)
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import ABLATIONS, ablate

    data = Path(args.data)
    entities, relations, arities = load_vocab(data)
    types = parse_types(args.types)
    train_set, train_files = load_queries(data, "train", types)
    eval_set, eval_files = load_queries(data, args.split, types)
    exclude = set(training_exclusion(args) or ())
    exclude |= set(parse_types(args.hold_out, ())) if args.hold_out else set()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    variants = [v.strip() for v in args.variants.split(",")] if args.variants else list(ABLATIONS)
    for v in variants:
        if v not in ABLATIONS:
            raise ConfigError(f"unknown variant {v!r}; choose from {list(ABLATIONS)}")
    result = ablate(model_config(args), len(entities), len(relations), train_set, eval_set,
                    seeds, variants, exclude=sorted(exclude) or None,
                    max_arity=max(arities.values()))
    out = out_dir(args)
    table = result.to_tsv()
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    inputs = {k: str(v) for k, v in {**train_files, **eval_files}.items()}
    write_manifest(out, args, inputs, {"data_hash": result.data_hash})
    sys.stdout.write(table)
    return 0


def cmd_stats(args) -> int:
    if not args.facts and not args.data:
        raise ConfigError("stats needs --facts or --data")
    out = out_dir(args)
    inputs, chunks = {}, []
    if args.facts:
        chunks.append(parse_facts(read_text(args.facts)).stats())
        inputs["facts"] = args.facts
    if args.data:
        splits = load_data_splits(Path(args.data))
        for name in ("train", "valid", "test"):
            chunks.append("".join(f"{name}_{line}\n" for line in splits[name].stats().splitlines()))
        q = Path(args.data) / "stats.tsv"
        if q.is_file():
            chunks.append(q.read_text(encoding="utf-8"))
            inputs["queries_stats"] = str(q)
    text = "".join(chunks)
    (out / "stats.tsv").write_text(text, encoding="utf-8")
    write_manifest(out, args, inputs)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--fuzzy", action="store_true", help="fuzzy product-logic logical operators")
    p.add_argument("--no-abs-pe", action="store_true", help="drop sinusoidal position encodings")
    p.add_argument("--variadic-card", action="store_true",
                   help="one logical pass over all children instead of pairwise folding")
    p.add_argument("--score", choices=("cosine", "decoder"), default="cosine")
    p.add_argument("--decoder", choices=("mlp", "tied"), default="mlp")
    p.add_argument("--ood", action="store_true", help="exclude 3P, 3IN, 3I, INP from training")
    p.add_argument("--full-train", action="store_true", help="train on every sampled type")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="khgqa", description="Complex query answering over knowledge hypergraphs")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--config", help="key = value file; explicit flags take precedence")
        p.add_argument("--out", help="output directory (default: $KHGQA_OUT or ./runs)")
        p.set_defaults(func=func)
        return p

    p = command("sample", cmd_sample, "ground query types into train/valid/test files")
    p.add_argument("--facts", required=True, help="training facts, or the whole graph to split")
    p.add_argument("--valid-facts")
    p.add_argument("--test-facts")
    p.add_argument("--valid-frac", type=float, default=0.1)
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--types", help="comma-separated query types (default: all 14)")
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--valid-count", type=int, default=50)
    p.add_argument("--test-count", type=int, default=50)
    p.add_argument("--standard-counts", action="store_true",
                   help="60k/20k train, 10k valid and test per type, times --scale")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--retries", type=int, default=100)

    p = command("train", cmd_train, "train the transformer on a sampled data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--types")
    p.add_argument("--mrr-sample", type=int, default=0, help="training instances tracked for MRR")
    p.add_argument("--mrr-every", type=int, default=10)
    _model_flags(p)

    p = command("eval", cmd_eval, "filtered MRR report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--types")
    p.add_argument("--score", choices=("cosine", "decoder"), default=None)
    p.add_argument("--filter-hard", action="store_true",
                   help="also remove the other hard answers when ranking one")

    p = command("oracle", cmd_oracle, "exact answers of serialized queries")
    p.add_argument("--facts", help="fact file whose first-appearance ids the queries use")
    p.add_argument("--data", help="sampled data directory; answers over its --split graph")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--queries", required=True, help="query file, one instance per line")

    p = command("baseline", cmd_baseline, "pretrain embeddings and score with closed-form messages")
    p.add_argument("--data", required=True)
    p.add_argument("--family", choices=("m-DistMult", "m-CP", "HypE-form", "HSimplE"),
                   default="m-DistMult")
    p.add_argument("--alpha", type=int, default=2)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--types", help="negation-free types to evaluate (default: all nine)")

    p = command("ablate", cmd_ablate, "train and compare the four model variants")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", help="comma-separated subset of the variant names")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--types")
    p.add_argument("--hold-out", help="extra types excluded from training")
    _model_flags(p)

    p = command("stats", cmd_stats, "graph and query statistics")
    p.add_argument("--facts")
    p.add_argument("--data")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    probe = _Parser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config and argv and argv[0] in _subparsers(parser):
        _apply_config(_subparsers(parser)[argv[0]], read_config_file(known.config))
    return parser.parse_args(argv)


def _subparsers(parser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"khgqa: config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"khgqa: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
