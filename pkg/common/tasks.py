"""Few-shot episodes: support/query splits, negatives and candidate pools."""
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, PoolExhaustedError
from .graph import KnowledgeGraph, Triple, bfs_ball
from .models import TaskRecord

logger = logging.getLogger("gsnp.tasks")

# Relations absent from the background graph get this id inside tasks.
UNSEEN_RELATION = -1

# Below this many entities the local negative pool falls back to the graph.
MIN_LOCAL_POOL = 10


class EpisodeRng:
    """A seeded random stream that can be split deterministically."""

    def __init__(self, seed: int, key: Sequence[int] = ()):
        """Derive the stream from a seed and an optional spawn key."""
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        sequence = np.random.SeedSequence(
            entropy=self.seed & (2 ** 64 - 1), spawn_key=self.key
        )
        self.stream = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *key: int) -> "EpisodeRng":
        """An independent stream for a sub-task (episode, task id, ...)."""
        return EpisodeRng(self.seed, (*self.key, *key))

    def coin(self) -> bool:
        """A fair coin flip."""
        return bool(self.stream.integers(0, 2))

    def choice(self, items: Sequence[int]) -> int:
        """One element, uniformly."""
        return items[int(self.stream.integers(0, len(items)))]


@dataclass
class FewShotTask:
    """One episode for a single relation.

    Training tasks carry one tail-corrupted triple per query in
    ``query_negatives``; evaluation tasks carry ``candidates`` instead.
    """

    relation: str
    relation_id: int
    support: list[Triple]
    support_negatives: list[Triple]
    queries: list[Triple]
    query_negatives: list[Triple] = field(default_factory=list)
    candidates: Optional[list[list[int]]] = None
    task_id: int = 0

    @property
    def K(self) -> int:  # noqa: N802
        """Shot count."""
        return len(self.support)

    @property
    def positives(self) -> set[Triple]:
        """Every true triple of the task."""
        return {*self.support, *self.queries}


def local_pool(kg: KnowledgeGraph, triples: Iterable[Triple]) -> list[int]:
    """Entities within two hops of any endpoint of the given triples."""
    pool: set[int] = set()
    for triple in triples:
        for v in (triple.head, triple.tail):
            if kg.has_entity(v):
                pool.update(bfs_ball(kg, v, 2))
    return sorted(pool)


def corrupt_triple(
    kg: KnowledgeGraph,
    triple: Triple,
    pool: Iterable[int],
    rng: EpisodeRng,
    known: frozenset = frozenset(),
    tail_only: bool = False,
) -> Triple:
    """Replace the head or the tail with a pool entity.

    The side is picked by a coin flip; when no entity is left on that side
    the other side is tried before giving up. ``tail_only`` keeps the head
    and relation, the way evaluation candidates are formed.
    """
    pool = sorted(set(pool))

    def options(replace_head: bool) -> list[int]:
        valid = []
        for e in pool:
            if replace_head:
                candidate = Triple(e, triple.relation, triple.tail)
            else:
                candidate = Triple(triple.head, triple.relation, e)
            if candidate != triple and candidate not in kg:
                if candidate not in known:
                    valid.append(e)
        return valid

    if tail_only:
        sides: tuple[bool, ...] = (False,)
    else:
        replace_head = rng.coin()
        sides = (replace_head, not replace_head)
    for side in sides:
        valid = options(side)
        if valid:
            e = rng.choice(valid)
            if side:
                return Triple(e, triple.relation, triple.tail)
            return Triple(triple.head, triple.relation, e)
    raise PoolExhaustedError(f"no entity left to corrupt {triple}")


def _negatives(
    kg: KnowledgeGraph,
    triples: Sequence[Triple],
    count: int,
    pool: list[int],
    rng: EpisodeRng,
    known: frozenset,
    tail_only: bool = False,
) -> list[Triple]:
    negatives = []
    for triple in triples:
        for _ in range(count):
            try:
                negative = corrupt_triple(
                    kg, triple, pool, rng, known, tail_only
                )
            except PoolExhaustedError:
                logger.debug(f"Local pool exhausted for {triple}, widening.")
                negative = corrupt_triple(
                    kg, triple, kg.entities, rng, known, tail_only
                )
            negatives.append(negative)
    return negatives


def query_negatives(
    kg: KnowledgeGraph,
    queries: Sequence[Triple],
    pool: list[int],
    rng: EpisodeRng,
    known: frozenset,
) -> list[Triple]:
    """One tail corruption per query, drawn from the query's own neighbourhood.

    The neighbourhood is the two-hop ball around the query's endpoints; when
    it is smaller than ``MIN_LOCAL_POOL`` the task pool is used instead.
    """
    negatives = []
    for query in queries:
        near = local_pool(kg, [query])
        if len(near) < MIN_LOCAL_POOL:
            near = pool
        negatives.extend(
            _negatives(kg, [query], 1, near, rng, known, tail_only=True)
        )
    return negatives


def sample_task(
    kg: KnowledgeGraph,
    relation_triples: Sequence[Triple],
    K: int,  # noqa: N803
    rng: EpisodeRng,
    n: int = 1,
    relation: str = "",
    max_queries: Optional[int] = None,
) -> FewShotTask:
    """Shuffle a relation's triples into a support set and a query set."""
    if K < 1:
        raise DataError(f"shot count must be at least 1, got {K}")
    if len(relation_triples) < K + 1:
        raise DataError(
            f"relation {relation!r} has {len(relation_triples)} triples, "
            f"need at least {K + 1}"
        )
    order = rng.stream.permutation(len(relation_triples))
    shuffled = [relation_triples[i] for i in order]
    support, queries = shuffled[:K], shuffled[K:]
    if max_queries is not None:
        queries = queries[:max_queries]

    known = frozenset(relation_triples)
    pool = local_pool(kg, shuffled)
    if len(pool) < MIN_LOCAL_POOL:
        pool = list(kg.entities)
    return FewShotTask(
        relation=relation,
        relation_id=support[0].relation,
        support=support,
        support_negatives=_negatives(kg, support, n, pool, rng, known),
        queries=queries,
        query_negatives=query_negatives(kg, queries, pool, rng, known),
    )


def support_negatives(
    kg: KnowledgeGraph, task: FewShotTask, n: int, rng: EpisodeRng
) -> list[Triple]:
    """Corrupt every support triple ``n`` times against the whole graph."""
    known = frozenset(task.positives)
    pool = local_pool(kg, task.support)
    if len(pool) < MIN_LOCAL_POOL:
        pool = list(kg.entities)
    return _negatives(kg, task.support, n, pool, rng, known)


def build_eval_candidates(
    query: Triple,
    pool: Iterable[int],
    n_cand: int,
    rng: EpisodeRng,
    known: Iterable[Triple] = (),
) -> list[int]:
    """Draw distinct negative tails for a query, never the true tail."""
    true_tails = {
        t.tail
        for t in known
        if t.head == query.head and t.relation == query.relation
    }
    true_tails.add(query.tail)
    valid = sorted(set(pool) - true_tails)
    if len(valid) < n_cand:
        raise PoolExhaustedError(
            f"need {n_cand} candidates for {query}, only {len(valid)} left"
        )
    picked = rng.stream.choice(len(valid), size=n_cand, replace=False)
    return [valid[i] for i in picked]


def _resolve(kg: KnowledgeGraph, record: tuple[str, str, str], r: int):
    head, _, tail = record
    return Triple(kg.entity_id(head), r, kg.entity_id(tail))


def task_from_record(
    kg: KnowledgeGraph, record: TaskRecord, task_id: int
) -> FewShotTask:
    """Resolve a task record against a graph."""
    relation_id = kg.relation_id(record.relation)
    if relation_id is None:
        relation_id = UNSEEN_RELATION
    for triple in (*record.support, *record.queries):
        if triple[1] != record.relation:
            raise DataError(
                f"task {record.relation!r} holds a triple of {triple[1]!r}"
            )
    support = [_resolve(kg, t, relation_id) for t in record.support]
    queries = [_resolve(kg, t, relation_id) for t in record.queries]
    if set(support) & set(queries):
        raise DataError(f"task {record.relation!r} reuses support as query")
    candidates = None
    if record.candidates is not None:
        candidates = [
            [kg.entity_id(name) for name in pool] for pool in record.candidates
        ]
    return FewShotTask(
        relation=record.relation,
        relation_id=relation_id,
        support=support,
        support_negatives=[],
        queries=queries,
        candidates=candidates,
        task_id=task_id,
    )


def attach_candidates(
    kg: KnowledgeGraph, task: FewShotTask, n_cand: int, rng: EpisodeRng
) -> FewShotTask:
    """Sample per-query candidates from the whole graph when none are set."""
    if task.candidates is None:
        known = task.positives
        task.candidates = [
            build_eval_candidates(q, kg.entities, n_cand, rng.child(i), known)
            for i, q in enumerate(task.queries)
        ]
    return task
