"""Explanatory subgraphs: the edges a task's hypothesis keeps for a query."""
import logging
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np

from common.errors import DataError
from common.graph import KnowledgeGraph, SubgraphExtractor, Triple
from common.models import Explanation, WeightedEdge
from common.tasks import FewShotTask

from .evaluator import task_prior
from .hypothesis import HypothesisSample
from .model import GSNPModel

logger = logging.getLogger("gsnp.explain")

ExportFormat = Literal["dot", "json"]

EMPTY_WARNING = "empty enclosing subgraph"


def task_hypothesis(
    model: GSNPModel,
    kg: KnowledgeGraph,
    task: FewShotTask,
    extractor: SubgraphExtractor,
) -> HypothesisSample:
    """The noise-free prior hypothesis of a task."""
    return model.sample(
        task_prior(model, kg, task, extractor),
        epsilon=np.zeros(model.config.d_z),
    )


def _named(kg: KnowledgeGraph, task: FewShotTask, query: Triple) -> tuple:
    head, tail = kg.entity_name(query.head), kg.entity_name(query.tail)
    return head, task.relation, tail


def extract_explanation(
    model: GSNPModel,
    kg: KnowledgeGraph,
    task: FewShotTask,
    query: Triple,
    threshold: float = 0.5,
    top_k: Optional[int] = None,
    extractor: Optional[SubgraphExtractor] = None,
    z: Optional[HypothesisSample] = None,
) -> Explanation:
    """Split a query's subgraph edges by their probability under ``z``.

    Edges at or above ``threshold`` are kept; with ``top_k`` the most
    probable ``top_k`` edges are kept instead.
    """
    if not 0 < threshold < 1:
        raise DataError(f"threshold must lie in (0, 1), got {threshold}")
    if top_k is not None and top_k < 1:
        raise DataError(f"top_k must be at least 1, got {top_k}")
    extractor = extractor or SubgraphExtractor(kg, model.config.hop_k)
    sub = extractor(query.head, query.tail, task.relation_id)
    record = {
        "query": _named(kg, task, query),
        "threshold": threshold,
        "task_id": task.task_id,
        "seed": model.config.seed,
        "top_k": top_k,
    }
    if sub.empty:
        logger.warning(f"No edges to explain for {record['query']}.")
        return Explanation(kept=[], dropped=[], warning=EMPTY_WARNING, **record)

    if z is None:
        z = task_hypothesis(model, kg, task, extractor)
    probs = model.edge_probabilities(model.encode(kg, sub), z).values
    if top_k is None:
        keep = probs >= threshold
    else:
        keep = np.zeros(len(probs), dtype=bool)
        keep[np.argsort(-probs, kind="stable")[:top_k]] = True
    kept, dropped = [], []
    for edge, p, chosen in zip(sub.edges, probs, keep):
        weighted = WeightedEdge(triple=kg.named(edge), p=float(p))
        (kept if chosen else dropped).append(weighted)
    return Explanation(kept=kept, dropped=dropped, **record)


def explain_task(
    model: GSNPModel,
    kg: KnowledgeGraph,
    task: FewShotTask,
    threshold: float = 0.5,
    top_k: Optional[int] = None,
) -> list[Explanation]:
    """Explanations for every query of a task under one hypothesis."""
    extractor = SubgraphExtractor(kg, model.config.hop_k)
    z = task_hypothesis(model, kg, task, extractor)
    return [
        extract_explanation(
            model, kg, task, query, threshold, top_k, extractor, z
        )
        for query in task.queries
    ]


def _quote(name: str) -> str:
    escaped = name.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def explanation_dot(exp: Explanation) -> str:
    """Graphviz rendering: kept edges solid, dropped edges dashed."""
    head, relation, tail = exp.query
    lines = [
        "digraph explanation {",
        f"  label={_quote(f'{head} {relation} {tail}')};",
        f"  {_quote(head)} [shape=doublecircle];",
        f"  {_quote(tail)} [shape=doublecircle];",
    ]
    for style, edges in (("solid", exp.kept), ("dashed", exp.dropped)):
        for edge in edges:
            h, r, t = edge.triple
            label = _quote(f"{r} {edge.p:.3f}")
            lines.append(
                f"  {_quote(h)} -> {_quote(t)} [label={label}, style={style}];"
            )
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_explanation(
    exp: Explanation, fmt: ExportFormat, path: Union[str, Path]
) -> Path:
    """Write an explanation as DOT or JSON."""
    if fmt == "dot":
        text = explanation_dot(exp)
    elif fmt == "json":
        text = exp.json(indent=1) + "\n"
    else:
        raise DataError(f"unknown explanation format {fmt!r}")
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise DataError(f"cannot write {path} ({e.strerror})") from None
    logger.info(f"Wrote explanation {path}.")
    return path


def read_explanation(path: Union[str, Path]) -> Explanation:
    """Parse a JSON explanation."""
    try:
        return Explanation.parse_file(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read explanation {path} ({e})") from None
