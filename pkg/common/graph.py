"""Knowledge graph storage, indexing and enclosing-subgraph extraction.

Graphs are immutable once built. Entities and relations are interned to
integer ids in first-appearance order, so a graph built twice from the same
records is identical down to its ids and edge order.
"""
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, Union

from .errors import DataError, ParseError, UnknownEntityError

logger = logging.getLogger("gsnp.graph")

# Synthetic inverse relations are named after their forward relation.
INVERSE_PREFIX = "~"


class Triple(NamedTuple):
    """A directed edge (head, relation, tail) over interned ids."""

    head: int
    relation: int
    tail: int


NamedTriple = tuple[str, str, str]


class TripleFormat(str, Enum):
    """How the fields of a triple file are separated."""

    TSV = "tsv"
    WHITESPACE = "whitespace"


class KnowledgeGraph:
    """Entity and relation vocabularies plus indexed directed triples."""

    def __init__(
        self,
        entities: Sequence[str],
        relations: Sequence[str],
        triples: Iterable[Triple],
        inverse_of: Optional[dict[int, int]] = None,
    ):
        """Intern the vocabularies and index the triples."""
        self._entities = tuple(entities)
        self._relations = tuple(relations)
        self._entity_ids = {name: i for i, name in enumerate(self._entities)}
        self._relation_ids = {
            name: i for i, name in enumerate(self._relations)
        }
        if len(self._entity_ids) != len(self._entities):
            raise DataError("entity vocabulary has duplicate names")
        if len(self._relation_ids) != len(self._relations):
            raise DataError("relation vocabulary has duplicate names")
        self._inverse_of = dict(inverse_of or {})

        ordered = []
        seen = set()
        for triple in triples:
            triple = Triple(*triple)
            if triple in seen:
                continue
            self._check(triple)
            seen.add(triple)
            ordered.append(triple)
        self._triples = tuple(ordered)
        self._positions = {triple: i for i, triple in enumerate(ordered)}

        incidence: dict[int, list[int]] = {}
        for i, (head, _, tail) in enumerate(self._triples):
            incidence.setdefault(head, []).append(i)
            # Self-loops are listed twice, once per endpoint.
            incidence.setdefault(tail, []).append(i)
        self._incidence = {v: tuple(ids) for v, ids in incidence.items()}

    def _check(self, triple: Triple):
        """Reject triples that reference ids outside the vocabularies."""
        n_ent, n_rel = len(self._entities), len(self._relations)
        if not (0 <= triple.head < n_ent and 0 <= triple.tail < n_ent):
            raise UnknownEntityError(f"triple {triple} has an unknown entity")
        if not 0 <= triple.relation < n_rel:
            raise UnknownEntityError(f"triple {triple} has an unknown relation")

    @classmethod
    def from_named(
        cls,
        records: Iterable[NamedTriple],
        isolated: Iterable[str] = (),
    ) -> "KnowledgeGraph":
        """Build a forward-only graph from (head, relation, tail) names.

        Names in ``isolated`` that no record mentions are appended to the
        entity vocabulary without edges.
        """
        entities: dict[str, int] = {}
        relations: dict[str, int] = {}
        triples = []
        for head, relation, tail in records:
            h = entities.setdefault(head, len(entities))
            r = relations.setdefault(relation, len(relations))
            t = entities.setdefault(tail, len(entities))
            triples.append(Triple(h, r, t))
        for name in isolated:
            entities.setdefault(name, len(entities))
        return cls(list(entities), list(relations), triples)

    @property
    def entities(self) -> range:
        """All entity ids."""
        return range(len(self._entities))

    @property
    def relations(self) -> range:
        """All relation ids, inverse relations included."""
        return range(len(self._relations))

    @property
    def triples(self) -> tuple[Triple, ...]:
        """Triples in insertion order."""
        return self._triples

    @property
    def has_inverse(self) -> bool:
        """Whether synthetic inverse relations have been added."""
        return bool(self._inverse_of)

    @property
    def entity_names(self) -> tuple[str, ...]:
        """Entity names indexed by id."""
        return self._entities

    @property
    def relation_names(self) -> tuple[str, ...]:
        """Relation names indexed by id."""
        return self._relations

    def __contains__(self, triple: Triple) -> bool:
        """Check whether a triple is part of the graph."""
        return triple in self._positions

    def __len__(self) -> int:
        """Count the triples."""
        return len(self._triples)

    def position(self, triple: Triple) -> int:
        """Insertion index of a triple."""
        return self._positions[triple]

    def entity_id(self, name: str) -> int:
        """Look up an entity by name."""
        try:
            return self._entity_ids[name]
        except KeyError:
            raise UnknownEntityError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> Optional[int]:
        """Look up a relation by name, None when it is not in the graph."""
        return self._relation_ids.get(name)

    def entity_name(self, entity: int) -> str:
        """Name of an entity id."""
        return self._entities[entity]

    def relation_name(self, relation: int) -> str:
        """Name of a relation id."""
        return self._relations[relation]

    def has_entity(self, entity: int) -> bool:
        """Whether the id belongs to the entity vocabulary."""
        return 0 <= entity < len(self._entities)

    def inverse(self, relation: int) -> Optional[int]:
        """The paired relation of a forward or inverse relation id."""
        return self._inverse_of.get(relation)

    def is_inverse(self, relation: int) -> bool:
        """Whether a relation id is a synthetic inverse."""
        # Inverse ids are allocated after every forward id.
        paired = self._inverse_of.get(relation)
        return paired is not None and paired < relation

    def incident(self, entity: int) -> tuple[int, ...]:
        """Positions of the triples touching an entity."""
        return self._incidence.get(entity, ())

    def named(self, triple: Triple) -> NamedTriple:
        """Render a triple with names."""
        return (
            self._entities[triple.head],
            self._relations[triple.relation],
            self._entities[triple.tail],
        )

    def forward_named(self) -> list[NamedTriple]:
        """Named triples without the synthetic inverse edges."""
        return [
            self.named(triple)
            for triple in self._triples
            if not self.is_inverse(triple.relation)
        ]

    def stats(self) -> dict[str, int]:
        """Counts in the shape of a dataset statistics table."""
        forward = [r for r in self.relations if not self.is_inverse(r)]
        edges = sum(1 for t in self._triples if not self.is_inverse(t[1]))
        return {
            "rels": len(forward),
            "entities": len(self._entities),
            "edges": edges,
        }


def _split_record(line: str, fmt: TripleFormat) -> list[str]:
    if fmt == TripleFormat.TSV:
        return line.split("\t")
    return line.split()


def read_records(
    path: Union[str, Path], fmt: TripleFormat = TripleFormat.TSV
) -> list[NamedTriple]:
    """Parse the named triples of a file, which may be empty."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"triple file {path} does not exist")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = _split_record(line, fmt)
            if len(fields) != 3 or not all(fields):
                raise ParseError(
                    str(path), number, f"expected 3 fields, got {len(fields)}"
                )
            records.append(tuple(fields))
    return records


def load_triples(
    path: Union[str, Path], fmt: TripleFormat = TripleFormat.TSV
) -> KnowledgeGraph:
    """Load a triple file into a forward-only graph."""
    records = read_records(path, fmt)
    if not records:
        raise DataError(f"triple file {path} is empty")
    kg = KnowledgeGraph.from_named(records)
    logger.info(
        f"Loaded {path}: {len(kg.entities)} entities, "
        f"{len(kg.relations)} relations, {len(kg)} triples."
    )
    return kg


def write_triples(path: Union[str, Path], records: Iterable[NamedTriple]):
    """Write named triples as a tab separated file."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for head, relation, tail in records:
            f.write(f"{head}\t{relation}\t{tail}\n")


def merge_graphs(bg: KnowledgeGraph, test: KnowledgeGraph) -> KnowledgeGraph:
    """Union two graphs by name.

    Every entity of either vocabulary survives, edges or not. Inverse edges
    are dropped before the union and rebuilt afterwards when either side
    had them, so the result is always consistent.
    """
    merged = KnowledgeGraph.from_named(
        [*bg.forward_named(), *test.forward_named()],
        [*bg.entity_names, *test.entity_names],
    )
    if bg.has_inverse or test.has_inverse:
        merged = add_inverse_edges(merged)
    return merged


def add_inverse_edges(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Pair every relation with a synthetic inverse and add reversed edges."""
    if kg.has_inverse:
        raise DataError("inverse relations are already present")
    n = len(kg.relation_names)
    relations = [
        *kg.relation_names,
        *(INVERSE_PREFIX + name for name in kg.relation_names),
    ]
    inverse_of = {}
    for r in range(n):
        inverse_of[r] = r + n
        inverse_of[r + n] = r
    triples = [
        *kg.triples,
        *(Triple(t, r + n, h) for h, r, t in kg.triples),
    ]
    return KnowledgeGraph(kg.entity_names, relations, triples, inverse_of)


def _check_entity(kg: KnowledgeGraph, entity: int):
    if not kg.has_entity(entity):
        raise UnknownEntityError(f"unknown entity id {entity}")


def _check_hops(k: int):
    if k < 1:
        raise DataError(f"hop count must be at least 1, got {k}")


def bfs_ball(kg: KnowledgeGraph, v: int, k: int) -> dict[int, int]:
    """Distances of every entity within k undirected hops of v."""
    triples = kg.triples
    distance = {v: 0}
    frontier = deque([v])
    while frontier:
        u = frontier.popleft()
        if distance[u] == k:
            continue
        for i in kg.incident(u):
            head, _, tail = triples[i]
            other = tail if head == u else head
            if other not in distance:
                distance[other] = distance[u] + 1
                frontier.append(other)
    return distance


def _k_hop_positions(kg: KnowledgeGraph, v: int, k: int) -> set[int]:
    """Positions of triples with both endpoints inside the k-hop ball."""
    ball = bfs_ball(kg, v, k)
    triples = kg.triples
    positions = set()
    for u in ball:
        for i in kg.incident(u):
            head, _, tail = triples[i]
            if head in ball and tail in ball:
                positions.add(i)
    return positions


def k_hop_neighbors(kg: KnowledgeGraph, v: int, k: int) -> set[Triple]:
    """All triples whose endpoints lie within k undirected hops of v."""
    _check_entity(kg, v)
    _check_hops(k)
    return {kg.triples[i] for i in _k_hop_positions(kg, v, k)}


@dataclass(frozen=True)
class EnclosingSubgraph:
    """The intersection of the k-hop neighborhoods of a head and a tail.

    ``nodes`` starts with the head and the tail, followed by the remaining
    endpoints in ascending id order. ``edges`` follow graph insertion order.
    """

    nodes: tuple[int, ...]
    edges: tuple[Triple, ...]
    head: int
    tail: int
    hop_k: int
    empty: bool

    @property
    def node_index(self) -> dict[int, int]:
        """Map entity ids to their row in node-level arrays."""
        return {v: i for i, v in enumerate(self.nodes)}

    def __len__(self) -> int:
        """Number of edges."""
        return len(self.edges)


def enclosing_subgraph(
    kg: KnowledgeGraph,
    h: int,
    t: int,
    k: int,
    exclude_relation: Optional[int] = None,
) -> EnclosingSubgraph:
    """Extract the enclosing subgraph of (h, t).

    Edges of ``exclude_relation`` (or its inverse) that directly link h and t
    are the target being predicted and are never part of the result.
    """
    _check_entity(kg, h)
    _check_entity(kg, t)
    _check_hops(k)
    positions = _k_hop_positions(kg, h, k) & _k_hop_positions(kg, t, k)

    excluded: set[int] = set()
    if exclude_relation is not None:
        excluded.add(exclude_relation)
        inverse = kg.inverse(exclude_relation)
        if inverse is not None:
            excluded.add(inverse)
    edges = []
    for i in sorted(positions):
        triple = kg.triples[i]
        if triple.relation in excluded and {triple.head, triple.tail} == {h, t}:
            continue
        edges.append(triple)

    nodes = [h] if h == t else [h, t]
    inner = set()
    for head, _, tail in edges:
        inner.update((head, tail))
    nodes.extend(sorted(inner - {h, t}))
    return EnclosingSubgraph(
        nodes=tuple(nodes),
        edges=tuple(edges),
        head=h,
        tail=t,
        hop_k=k,
        empty=not edges,
    )


class SubgraphExtractor:
    """Memoize enclosing subgraphs of one graph."""

    def __init__(self, kg: KnowledgeGraph, k: int):
        """Bind the extractor to a graph and a hop count."""
        self.kg = kg
        self.k = k
        self._cache: dict[tuple, EnclosingSubgraph] = {}

    def __call__(
        self, h: int, t: int, exclude_relation: Optional[int] = None
    ) -> EnclosingSubgraph:
        """Extract (or reuse) the subgraph of (h, t)."""
        key = (h, t, exclude_relation)
        sub = self._cache.get(key)
        if sub is None:
            sub = enclosing_subgraph(self.kg, h, t, self.k, exclude_relation)
            self._cache[key] = sub
        return sub

    def __len__(self) -> int:
        """Number of cached subgraphs."""
        return len(self._cache)
