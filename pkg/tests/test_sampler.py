from types import SimpleNamespace

import numpy as np
import pytest

from khgqa.errors import SamplingExhausted, SamplingFailed
from khgqa.graph import GraphSplits, parse_facts, random_graph, split_graph
from khgqa.oracle import answers
from khgqa.query import (QUERY_TYPES, Const, Projection, Sub, Target, iter_nodes,
                         load_instances, template)
from khgqa.sampler import (SampleSpec, ground, instance_rng, label, sample_dataset,
                           sample_split)


class TestGround:
    def test_1p_only_grounding(self):
        g = parse_facts("r\ta\tb\tc\n")
        a, b, c = (g.entities[n] for n in "abc")
        tree, root = ground(template("1P"), g, np.random.default_rng(0), root=c)
        assert root == c
        assert tree == Projection(0, (Const(a), Const(b), Target()))

    def test_2i_single_edge_fails(self):
        g = parse_facts("r\ta\tb\tc\n")
        with pytest.raises(SamplingFailed):
            ground(template("2I"), g, np.random.default_rng(0), retries=50, root=g.entities["c"])

    def test_duplicates_allowed_when_rejection_off(self):
        g = parse_facts("r\ta\tb\tc\n")
        tree, _ = ground(template("2I"), g, np.random.default_rng(0), reject_duplicates=False,
                         root=g.entities["c"])
        assert tree.children[0] == tree.children[1]

    def test_empty_graph(self):
        g = parse_facts("r\ta\tb\n").with_edges([])
        with pytest.raises(SamplingFailed):
            ground(template("1P"), g, np.random.default_rng(0))

    @pytest.mark.parametrize("qtype", QUERY_TYPES)
    def test_sound_and_faithful(self, qtype, synthetic_graph):
        g = synthetic_graph
        for i in range(100):
            tree, root = ground(template(qtype), g, instance_rng(3, "train", qtype, i))
            assert root in answers(tree, g)
            for node in iter_nodes(tree):
                if isinstance(node, Projection) and not node.negated:
                    assert _edge_witness(node, g)

    def test_intersection_branches_distinct(self, synthetic_graph):
        for i in range(100):
            tree, _ = ground(template("3I"), synthetic_graph, instance_rng(0, "train", "3I", i))
            assert len(set(tree.children)) == 3


def _edge_witness(node, g):
    """Some edge matches the constants and has a child answer in every Sub slot."""
    subs = {p: answers(a.node, g) for p, a in enumerate(node.args) if isinstance(a, Sub)}
    target = node.target_position
    for edge in g.edges:
        if edge.relation != node.relation:
            continue
        ok = all(edge.entities[p] == a.entity for p, a in enumerate(node.args)
                 if isinstance(a, Const))
        ok = ok and all(edge.entities[p] in s for p, s in subs.items())
        if ok and edge.entities[target] in answers(node, g):
            return True
    return False


class TestLabel:
    def test_easy_and_hard(self):
        s = GraphSplitsHelper.make()
        tree = Projection(0, (Const(s.x), Target()))
        inst = label(tree, s.small, s.big, "1P")
        assert inst.easy == {s.a} and inst.hard == {s.b}

    def test_no_new_answers(self):
        s = GraphSplitsHelper.make()
        tree = Projection(0, (Const(s.x), Target()))
        inst = label(tree, s.small, s.small, "1P")
        assert inst.hard == frozenset()


class GraphSplitsHelper:
    @staticmethod
    def make():
        big = parse_facts("r\tx\ta\nr\tx\tb\n")
        x, a, b = (big.entities[n] for n in "xab")
        return SimpleNamespace(small=big.with_edges(big.edges[:1]), big=big, x=x, a=a, b=b)


class TestSampleDataset:
    def _splits(self):
        g = random_graph(80, 500, [2, 3, 4], seed=1, num_relations=6)
        return split_graph(g, seed=0)

    def test_deterministic_files(self, tmp_path):
        splits = self._splits()
        spec = SampleSpec.uniform(7, 5, 3, 3, types=("1P", "2IN", "UP"))
        sample_dataset(spec, splits, tmp_path / "a")
        sample_dataset(spec, splits, tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_zero_count_emits_no_file(self, tmp_path):
        spec = SampleSpec(counts={("train", "1P"): 4, ("train", "2P"): 0}, seed=1)
        sample_dataset(spec, self._splits(), tmp_path)
        assert (tmp_path / "train_1P.jsonl").exists()
        assert not (tmp_path / "train_2P.jsonl").exists()
        stats = (tmp_path / "stats.tsv").read_text().splitlines()
        assert stats[0] == "split\ttype\tcount\tmean_easy\tmean_hard"
        assert len(stats) == 2

    def test_split_labelling(self):
        splits = self._splits()
        spec = SampleSpec(seed=2)
        train = sample_split(spec, splits, "train", "2P", 20)
        assert all(not q.easy and q.hard == answers(q.tree, splits.train) for q in train)
        test = sample_split(spec, splits, "test", "2P", 20)
        for q in test:
            assert q.easy == answers(q.tree, splits.valid)
            assert q.hard == answers(q.tree, splits.test) - q.easy
            assert q.hard

    def test_instances_independent_of_count(self):
        splits = self._splits()
        spec = SampleSpec(seed=3)
        few = sample_split(spec, splits, "train", "PI", 5)
        many = sample_split(spec, splits, "train", "PI", 12)
        assert many[:5] == few

    def test_exhausted(self):
        g = parse_facts("r\ta\tb\n")
        splits = GraphSplits(g, g, g)
        with pytest.raises(SamplingExhausted):
            sample_split(SampleSpec(seed=0, retries=2), splits, "train", "2I", 3)

    def test_standard_counts(self):
        spec = SampleSpec.standard(seed=0)
        assert spec.counts[("train", "1P")] == 60_000
        assert spec.counts[("train", "PNI")] == 20_000
        assert spec.counts[("test", "2U")] == 10_000

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SampleSpec(retries=0)
        with pytest.raises(ValueError):
            SampleSpec(counts={("train", "1P"): -1})

    def test_files_round_trip(self, tmp_path):
        splits = self._splits()
        result = sample_dataset(SampleSpec.uniform(5, 4, 2, 2, types=("3IN",)), splits, tmp_path)
        loaded = load_instances((tmp_path / "valid_3IN.jsonl").read_text())
        assert loaded == result[("valid", "3IN")]
