"""Explanatory subgraphs and their export."""
import numpy as np
import pytest

from common.errors import DataError
from common.graph import KnowledgeGraph, SubgraphExtractor, Triple
from common.models import Explanation
from common.tasks import FewShotTask
from engine.explain import (
    EMPTY_WARNING,
    explain_task,
    explanation_dot,
    export_explanation,
    extract_explanation,
    read_explanation,
)


@pytest.fixture
def setting(bundle):
    kg = bundle.test_graph
    task = bundle.split("test")[0]
    return kg, task


def edge_set(edges):
    return {tuple(e.triple) for e in edges}


class TestExtraction:
    def test_partition_of_the_subgraph(self, setting, model):
        """Kept and dropped edges split the enclosing subgraph."""
        kg, task = setting
        extractor = SubgraphExtractor(kg, model.config.hop_k)
        for query in task.queries:
            exp = extract_explanation(model, kg, task, query)
            sub = extractor(query.head, query.tail, task.relation_id)
            kept, dropped = edge_set(exp.kept), edge_set(exp.dropped)
            assert not kept & dropped
            assert kept | dropped == {kg.named(e) for e in sub.edges}
            assert all(e.p >= 0.5 for e in exp.kept)
            assert all(e.p < 0.5 for e in exp.dropped)

    def test_monotone_in_threshold(self, setting, model):
        """Raising the threshold never adds edges."""
        kg, task = setting
        query = task.queries[0]
        previous = None
        for threshold in np.linspace(0.05, 0.95, 10):
            kept = edge_set(
                extract_explanation(model, kg, task, query, threshold).kept
            )
            if previous is not None:
                assert kept <= previous
            previous = kept

    def test_top_k(self, setting, model):
        """top_k keeps the k most probable edges."""
        kg, task = setting
        query = task.queries[0]
        full = extract_explanation(model, kg, task, query)
        n_edges = len(full.kept) + len(full.dropped)
        if not n_edges:
            pytest.skip("query has no enclosing edges")
        exp = extract_explanation(model, kg, task, query, top_k=1)
        assert len(exp.kept) == 1
        best = max((*full.kept, *full.dropped), key=lambda e: e.p)
        assert exp.kept[0].p == best.p

    def test_empty_subgraph_warns(self, model):
        """A query without shared neighbourhood explains nothing."""
        kg = KnowledgeGraph.from_named([("a", "r", "b"), ("c", "r", "d")])
        task = FewShotTask(
            relation="q",
            relation_id=-1,
            support=[Triple(0, -1, 1)],
            support_negatives=[Triple(0, -1, 2)],
            queries=[Triple(0, -1, 3)],
        )
        exp = extract_explanation(model, kg, task, task.queries[0])
        assert exp.kept == [] and exp.dropped == []
        assert exp.warning == EMPTY_WARNING

    def test_bad_arguments(self, setting, model):
        """Thresholds lie in (0, 1) and top_k is positive."""
        kg, task = setting
        query = task.queries[0]
        with pytest.raises(DataError):
            extract_explanation(model, kg, task, query, threshold=1.0)
        with pytest.raises(DataError):
            extract_explanation(model, kg, task, query, top_k=0)

    def test_task_explanations_share_one_hypothesis(self, setting, model):
        """One explanation per query, identical on repeat."""
        kg, task = setting
        first = explain_task(model, kg, task)
        assert len(first) == len(task.queries)
        assert explain_task(model, kg, task) == first


class TestExport:
    def test_dot_is_well_formed(self, setting, model):
        """The graph has a header, quoted ids and one line per edge."""
        kg, task = setting
        exp = extract_explanation(model, kg, task, task.queries[0])
        text = explanation_dot(exp)
        lines = text.splitlines()
        assert lines[0] == "digraph explanation {"
        assert lines[-1] == "}"
        arrows = [line for line in lines if "->" in line]
        assert len(arrows) == len(exp.kept) + len(exp.dropped)
        assert sum("style=solid" in line for line in arrows) == len(exp.kept)
        assert text.count('"') % 2 == 0
        assert "doublecircle" in text

    def test_dot_escapes_quotes(self):
        """Quotes inside names do not end the identifier early."""
        exp = Explanation(
            query=('a"b', "r", "c"),
            kept=[],
            dropped=[],
            threshold=0.5,
            task_id=0,
            seed=0,
        )
        assert '"a\\"b"' in explanation_dot(exp)

    def test_json_round_trip(self, setting, model, tmp_path):
        """A JSON export reads back to the same explanation."""
        kg, task = setting
        exp = extract_explanation(model, kg, task, task.queries[0])
        path = export_explanation(exp, "json", tmp_path / "exp.json")
        assert read_explanation(path) == exp

    def test_exports_are_byte_stable(self, setting, model, tmp_path):
        """Recomputing and re-exporting writes identical files."""
        kg, task = setting
        for fmt in ("dot", "json"):
            paths = []
            for name in ("a", "b"):
                exp = extract_explanation(model, kg, task, task.queries[0])
                paths.append(
                    export_explanation(exp, fmt, tmp_path / f"{name}.{fmt}")
                )
            assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_export_errors(self, setting, model, tmp_path):
        """Unknown formats and unwritable paths are data errors."""
        kg, task = setting
        exp = extract_explanation(model, kg, task, task.queries[0])
        with pytest.raises(DataError):
            export_explanation(exp, "svg", tmp_path / "exp.svg")
        with pytest.raises(DataError):
            export_explanation(exp, "dot", tmp_path / "missing" / "exp.dot")
        with pytest.raises(DataError):
            read_explanation(tmp_path / "nothing.json")
