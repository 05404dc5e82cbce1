"""Dataset bundles: the on-disk layout and the inductive split builder.

A bundle directory holds::

    bg.tsv              training background graph
    ind_test.tsv        triples added to the background at test time
    tasks/train.json    training relations (support + queries form a pool)
    tasks/valid.json    validation tasks with per-query candidates
    tasks/test.json     test tasks with per-query candidates
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence, Union

from .errors import DataError, UnknownEntityError
from .graph import (
    KnowledgeGraph,
    NamedTriple,
    Triple,
    add_inverse_edges,
    bfs_ball,
    merge_graphs,
    read_records,
    write_triples,
)
from .models import SplitSpec, TaskRecord, dump_task_records, load_task_records
from .tasks import (
    EpisodeRng,
    FewShotTask,
    build_eval_candidates,
    task_from_record,
)

logger = logging.getLogger("gsnp.bundle")

SPLITS = ("train", "valid", "test")


def task_path(root: Union[str, Path], split: str) -> Path:
    """Location of a split's task file."""
    return Path(root) / "tasks" / f"{split}.json"


@dataclass
class Bundle:
    """A dataset bundle read from disk."""

    root: Path
    bg_records: list[NamedTriple]
    test_records: list[NamedTriple]
    tasks: dict[str, list[TaskRecord]] = field(default_factory=dict)

    @classmethod
    def load(cls, root: Union[str, Path]) -> "Bundle":
        """Read every file of a bundle; task files are optional."""
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"bundle directory {root} does not exist")
        bg = read_records(root / "bg.tsv")
        if not bg:
            raise DataError(f"{root / 'bg.tsv'} is empty")
        extra = root / "ind_test.tsv"
        test = read_records(extra) if extra.exists() else []
        tasks = {
            split: load_task_records(task_path(root, split))
            for split in SPLITS
            if task_path(root, split).exists()
        }
        logger.info(
            f"Loaded bundle {root}: {len(bg)} background and {len(test)} "
            f"test-time triples, tasks {sorted(tasks)}."
        )
        return cls(root, bg, test, tasks)

    def _task_entities(self, splits: Sequence[str]) -> list[str]:
        names: dict[str, None] = {}
        for split in splits:
            for record in self.tasks.get(split, []):
                for head, _, tail in (*record.support, *record.queries):
                    names.setdefault(head)
                    names.setdefault(tail)
                for pool in record.candidates or []:
                    names.update(dict.fromkeys(pool))
        return list(names)

    @cached_property
    def background(self) -> KnowledgeGraph:
        """The training graph, with inverse edges."""
        return add_inverse_edges(
            KnowledgeGraph.from_named(
                self.bg_records, self._task_entities(["train"])
            )
        )

    @cached_property
    def test_graph(self) -> KnowledgeGraph:
        """Background plus test-time triples, with inverse edges.

        Task entities without any edge are kept as isolated nodes so that
        their queries can still be resolved and ranked.
        """
        additions = KnowledgeGraph.from_named(
            self.test_records, self._task_entities(SPLITS)
        )
        return merge_graphs(self.background, additions)

    @property
    def relation_vocabulary(self) -> tuple[str, ...]:
        """Every relation an encoder may meet, inverses included."""
        return self.test_graph.relation_names

    def split(self, name: str) -> list[FewShotTask]:
        """Resolve a split's task records against the graph it runs on."""
        kg = self.background if name == "train" else self.test_graph
        return [
            task_from_record(kg, record, i)
            for i, record in enumerate(self.tasks.get(name, []))
        ]


def table_stats(
    bg: KnowledgeGraph, ind_test: KnowledgeGraph, tasks: dict[str, int]
) -> str:
    """Dataset statistics with one row per graph."""
    rows = ["graph\t#rels\t#entities\t#edges\t#tasks"]
    for name, kg, count in (
        ("Ind-BG", bg, tasks.get("train", 0)),
        ("Ind-Test", ind_test, tasks.get("valid", 0) + tasks.get("test", 0)),
    ):
        stats = kg.stats()
        rows.append(
            f"{name}\t{stats['rels']}\t{stats['entities']}\t"
            f"{stats['edges']}\t{count}"
        )
    return "\n".join(rows) + "\n"


def write_bundle(
    root: Union[str, Path],
    bg: Sequence[NamedTriple],
    ind_test: Sequence[NamedTriple],
    tasks: dict[str, list[TaskRecord]],
):
    """Write a bundle directory."""
    root = Path(root)
    (root / "tasks").mkdir(parents=True, exist_ok=True)
    write_triples(root / "bg.tsv", bg)
    write_triples(root / "ind_test.tsv", ind_test)
    for split, records in tasks.items():
        dump_task_records(task_path(root, split), records)
    logger.info(f"Wrote bundle {root}.")


def _eval_record(
    kg: KnowledgeGraph,
    relation: str,
    triples: list[NamedTriple],
    spec: SplitSpec,
    rng: EpisodeRng,
) -> TaskRecord:
    order = rng.stream.permutation(len(triples))
    shuffled = [triples[i] for i in order]
    support, queries = shuffled[: spec.shots], shuffled[spec.shots:]
    keep = max(1, math.ceil(len(queries) * spec.query_fraction))
    queries = queries[:keep]

    known = [
        Triple(kg.entity_id(h), -1, kg.entity_id(t)) for h, _, t in triples
    ]
    candidates = []
    for i, (head, _, tail) in enumerate(queries):
        query = Triple(kg.entity_id(head), -1, kg.entity_id(tail))
        pool = build_eval_candidates(
            query, kg.entities, spec.n_candidates, rng.child(i), known
        )
        candidates.append([kg.entity_name(e) for e in pool])
    return TaskRecord(
        relation=relation,
        support=support,
        queries=queries,
        candidates=candidates,
    )


def prepare_split(
    records: Sequence[NamedTriple], spec: SplitSpec
) -> tuple[list, list, dict[str, list[TaskRecord]]]:
    """Split a source graph into background, test-time triples and tasks.

    Inductively, the entities of every validation and test task and their
    one-hop neighbours leave the background; their remaining triples form
    the test-time additions. Transductively only the task relations'
    triples are withheld.
    """
    source = KnowledgeGraph.from_named(records)
    held = [*spec.valid, *spec.test]
    overlap = set(spec.valid) & set(spec.test)
    if overlap:
        raise DataError(f"relations in both valid and test: {sorted(overlap)}")
    unknown = [r for r in held if source.relation_id(r) is None]
    if unknown:
        raise UnknownEntityError(f"split names unknown relations: {unknown}")

    held_ids = {source.relation_id(r) for r in held}
    removed: set[int] = set()
    if not spec.transductive:
        for triple in source.triples:
            if triple.relation in held_ids:
                removed.update(bfs_ball(source, triple.head, 1))
                removed.update(bfs_ball(source, triple.tail, 1))

    bg, ind_test = [], []
    by_relation: dict[str, list[NamedTriple]] = {}
    for triple in source.triples:
        named = source.named(triple)
        if triple.relation in held_ids:
            by_relation.setdefault(named[1], []).append(named)
        elif removed & {triple.head, triple.tail}:
            ind_test.append(named)
        else:
            bg.append(named)

    for relation in held:
        if len(by_relation[relation]) < spec.shots + 1:
            raise DataError(
                f"relation {relation!r} has {len(by_relation[relation])} "
                f"triples, need at least {spec.shots + 1}"
            )

    bg_kg = KnowledgeGraph.from_named(bg)
    train = []
    for relation in bg_kg.relation_names:
        triples = [t for t in bg if t[1] == relation]
        if len(triples) < spec.shots + 1:
            logger.debug(f"Skipping {relation}: too few triples to train on.")
            continue
        train.append(
            TaskRecord(
                relation=relation,
                support=triples[: spec.shots],
                queries=triples[spec.shots:],
            )
        )

    task_entities = [
        name for r in held for h, _, t in by_relation[r] for name in (h, t)
    ]
    universe = merge_graphs(
        bg_kg, KnowledgeGraph.from_named(ind_test, task_entities)
    )
    rng = EpisodeRng(spec.seed)
    tasks = {"train": train}
    for offset, (split, names) in enumerate(
        (("valid", spec.valid), ("test", spec.test))
    ):
        tasks[split] = [
            _eval_record(
                universe, r, by_relation[r], spec, rng.child(offset, i)
            )
            for i, r in enumerate(names)
        ]
    return bg, ind_test, tasks


def prepare_bundle(
    sources: Sequence[Union[str, Path]],
    spec: SplitSpec,
    out: Union[str, Path],
) -> str:
    """Build and write a bundle from raw triple files; return its stats."""
    records: dict[NamedTriple, None] = {}
    for path in sources:
        records.update(dict.fromkeys(read_records(path)))
    if not records:
        raise DataError("the source triple files are empty")
    bg, ind_test, tasks = prepare_split(list(records), spec)
    write_bundle(out, bg, ind_test, tasks)
    stats = table_stats(
        KnowledgeGraph.from_named(bg),
        KnowledgeGraph.from_named(ind_test),
        {split: len(records) for split, records in tasks.items()},
    )
    logger.info(f"Prepared {out}:\n{stats}")
    return stats

