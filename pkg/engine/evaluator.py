"""Ranking evaluation: MRR and Hit@N over candidate-augmented queries."""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from common.errors import DataError
from common.graph import KnowledgeGraph, SubgraphExtractor, Triple
from common.models import MetricsReport, TaskMetrics
from common.tasks import (
    EpisodeRng,
    FewShotTask,
    attach_candidates,
    support_negatives,
)

from .hypothesis import HypothesisDistribution, HypothesisSample
from .model import GSNPModel

logger = logging.getLogger("gsnp.evaluator")

HIT_LEVELS = (1, 5, 10)


@dataclass
class RankingResult:
    """Where the true tail of a query landed among its candidates."""

    query: Triple
    rank: int
    scores: list[float]


def rank_from_scores(true_score: float, others: Sequence[float]) -> int:
    """1-based rank; ties count half, rounded down."""
    others = np.asarray(others, dtype=np.float64)
    greater = int(np.sum(others > true_score))
    ties = int(np.sum(others == true_score))
    return 1 + greater + ties // 2


def ranking_result(query: Triple, scores: Sequence[float]) -> RankingResult:
    """Rank a query from its scores, the true tail's first."""
    scores = [float(s) for s in scores]
    return RankingResult(query, rank_from_scores(scores[0], scores[1:]), scores)


def task_prior(
    model: GSNPModel,
    kg: KnowledgeGraph,
    task: FewShotTask,
    extractor: SubgraphExtractor,
) -> HypothesisDistribution:
    """Prior hypothesis of a task from its support and their negatives.

    Negatives are drawn from a stream seeded by the task id when the task
    carries none.
    """
    negatives = task.support_negatives
    if not negatives:
        rng = EpisodeRng(model.config.seed).child(task.task_id)
        negatives = support_negatives(kg, task, model.config.n, rng)
    pairs = [
        (model.encode(kg, extractor(h, t, task.relation_id)), label)
        for triples, label in ((task.support, 1), (negatives, 0))
        for h, _, t in triples
    ]
    return model.hypothesis(pairs, "prior")


def task_hypotheses(
    model: GSNPModel,
    prior: HypothesisDistribution,
    task: FewShotTask,
) -> list[HypothesisSample]:
    """The ``eval_samples`` hypothesis draws used to score a task."""
    rng = EpisodeRng(model.config.seed).child(task.task_id, 1)
    return [
        model.sample(prior, rng.stream)
        for _ in range(model.config.eval_samples)
    ]


def score_tails(
    model: GSNPModel,
    kg: KnowledgeGraph,
    task: FewShotTask,
    head: int,
    tails: Sequence[int],
    zs: Sequence[HypothesisSample],
    extractor: SubgraphExtractor,
) -> list[float]:
    """Score (head, ?, tail) for each tail, averaged over the draws of z."""
    scores = []
    for tail in tails:
        emb = model.encode(kg, extractor(head, tail, task.relation_id))
        values = [model.score_query(kg, emb, z)[0].item() for z in zs]
        scores.append(float(np.mean(values)))
    return scores


def rank_query(
    model: GSNPModel,
    kg: KnowledgeGraph,
    task: FewShotTask,
    query: Triple,
    candidates: Sequence[int],
    zs: Sequence[HypothesisSample],
    extractor: SubgraphExtractor,
) -> RankingResult:
    """Rank the true tail of a query against its candidates."""
    if query.tail in candidates:
        raise DataError(f"candidates of {query} include the true tail")
    tails = [query.tail, *candidates]
    scores = score_tails(model, kg, task, query.head, tails, zs, extractor)
    return ranking_result(query, scores)


def compute_metrics(
    results: Sequence[RankingResult],
    per_task: Optional[list[TaskMetrics]] = None,
) -> MetricsReport:
    """Mean reciprocal rank and Hit@N of a set of ranked queries."""
    if not results:
        raise DataError("no ranked queries to summarise")
    ranks = np.array([r.rank for r in results], dtype=np.float64)
    hits = {n: float(np.mean(ranks <= n)) for n in HIT_LEVELS}
    return MetricsReport(
        mrr=float(np.mean(1.0 / ranks)),
        hit1=hits[1],
        hit5=hits[5],
        hit10=hits[10],
        n_queries=len(results),
        per_task=per_task or [],
    )


def with_shots(task: FewShotTask, shots: int) -> FewShotTask:
    """Re-cut a task to ``shots`` support triples.

    Extra support comes from the front of the query list, whose candidate
    pools are dropped along with those queries.
    """
    if shots < 1:
        raise DataError(f"shot count must be at least 1, got {shots}")
    if shots <= task.K:
        return replace(
            task, support=task.support[:shots], support_negatives=[]
        )
    moved = shots - task.K
    if moved >= len(task.queries):
        raise DataError(
            f"task {task.relation!r} has too few queries for {shots} shots"
        )
    return replace(
        task,
        support=[*task.support, *task.queries[:moved]],
        support_negatives=[],
        queries=task.queries[moved:],
        candidates=None
        if task.candidates is None
        else task.candidates[moved:],
    )


def evaluate_task(
    model: GSNPModel,
    kg: KnowledgeGraph,
    task: FewShotTask,
    extractor: SubgraphExtractor,
) -> list[RankingResult]:
    """Rank every query of one task under its prior hypothesis."""
    rng = EpisodeRng(model.config.seed).child(task.task_id, 2)
    attach_candidates(kg, task, model.config.n_candidates, rng)
    zs = task_hypotheses(model, task_prior(model, kg, task, extractor), task)
    return [
        rank_query(model, kg, task, query, pool, zs, extractor)
        for query, pool in zip(task.queries, task.candidates)
    ]


def evaluate_split(
    model: GSNPModel,
    kg: KnowledgeGraph,
    tasks: Sequence[FewShotTask],
    shots: Optional[int] = None,
    extractor: Optional[SubgraphExtractor] = None,
) -> MetricsReport:
    """Evaluate every task of a split, optionally at another shot count."""
    extractor = extractor or SubgraphExtractor(kg, model.config.hop_k)
    results, per_task = [], []
    for task in tasks:
        if shots is not None:
            task = with_shots(task, shots)
        ranked = evaluate_task(model, kg, task, extractor)
        summary = compute_metrics(ranked)
        per_task.append(
            TaskMetrics(
                relation=task.relation,
                **summary.dict(include={"mrr", "hit1", "hit5", "hit10"}),
                n_queries=summary.n_queries,
            )
        )
        results.extend(ranked)
    report = compute_metrics(results, per_task)
    logger.info(
        f"Evaluated {len(tasks)} tasks, {report.n_queries} queries: "
        f"MRR {report.mrr:.4f}, Hit@1 {report.hit1:.4f}, "
        f"Hit@10 {report.hit10:.4f}."
    )
    return report


def evaluate_shots(
    model: GSNPModel,
    kg: KnowledgeGraph,
    tasks: Sequence[FewShotTask],
    shot_counts: Sequence[int],
) -> dict[int, MetricsReport]:
    """One report per shot count, sharing the subgraph cache."""
    extractor = SubgraphExtractor(kg, model.config.hop_k)
    return {
        k: evaluate_split(model, kg, tasks, k, extractor) for k in shot_counts
    }
