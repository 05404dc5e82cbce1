"""A planted-rule dataset generator.

The target relation holds for (h, t) exactly when the two-hop chain
``(h, chain[0], m) and (m, chain[1], t)`` exists for some entity m.
Distractor edges use their own relations so they never create a chain.
Held-out target triples never share a head with the training ones.
"""
import logging
from collections import Counter
from pathlib import Path
from typing import Union

import numpy as np

from .bundle import write_bundle
from .errors import DataError
from .graph import KnowledgeGraph, NamedTriple, Triple
from .models import SynthSpec, TaskRecord
from .tasks import EpisodeRng, build_eval_candidates

logger = logging.getLogger("gsnp.synth")


def _check(spec: SynthSpec):
    if spec.n_entities < 3:
        raise DataError("a chain needs at least 3 entities")
    if spec.n_pairs < 1 or spec.n_distractors < 0:
        raise DataError("pair and distractor counts must be positive")
    if spec.n_distractors and spec.n_distractor_relations < 1:
        raise DataError("distractor edges need at least one relation")
    room = spec.n_entities * (spec.n_entities - 1)
    if spec.n_distractors > room * spec.n_distractor_relations // 2:
        raise DataError("too many distractors for the entity count")
    if not 0 < spec.held_out < 1:
        raise DataError("held_out must lie in (0, 1)")
    if spec.target in spec.chain or spec.chain[0] == spec.chain[1]:
        raise DataError("chain and target relations must be distinct")


def entity_name(i: int) -> str:
    """Zero padded entity name."""
    return f"e{i:03d}"


def chain_pairs(edges: list[NamedTriple], chain: tuple[str, str]) -> list:
    """Every (head, tail) connected by the chain, in sorted order."""
    first = [(h, t) for h, r, t in edges if r == chain[0]]
    second: dict[str, list[str]] = {}
    for h, r, t in edges:
        if r == chain[1]:
            second.setdefault(h, []).append(t)
    return sorted({(h, t) for h, m in first for t in second.get(m, [])})


def planted_graph(spec: SynthSpec) -> tuple[list[NamedTriple], list]:
    """Background edges and the target pairs they imply."""
    _check(spec)
    rng = np.random.default_rng(spec.seed)
    edges: dict[NamedTriple, None] = {}
    for _ in range(spec.n_pairs):
        h, m, t = rng.choice(spec.n_entities, size=3, replace=False)
        edges[(entity_name(h), spec.chain[0], entity_name(m))] = None
        edges[(entity_name(m), spec.chain[1], entity_name(t))] = None
    distractors = [f"rel{j}" for j in range(spec.n_distractor_relations)]
    added = 0
    while added < spec.n_distractors:
        a, b = rng.choice(spec.n_entities, size=2, replace=False)
        relation = distractors[int(rng.integers(len(distractors)))]
        edge = (entity_name(a), relation, entity_name(b))
        if edge not in edges:
            edges[edge] = None
            added += 1
    records = list(edges)
    return records, chain_pairs(records, spec.chain)


def held_out_heads(triples: list[NamedTriple], count: int) -> set[str]:
    """Heads, in order of appearance, whose triples first reach ``count``."""
    per_head = Counter(h for h, _, _ in triples)
    heads: set[str] = set()
    total = 0
    for h, _, _ in triples:
        if total >= count:
            break
        if h not in heads:
            heads.add(h)
            total += per_head[h]
    return heads


def synth_bundle(spec: SynthSpec, out: Union[str, Path]) -> dict:
    """Generate and write a planted-rule bundle; return its summary."""
    records, pairs = planted_graph(spec)
    rng = EpisodeRng(spec.seed)
    order = rng.stream.permutation(len(pairs))
    shuffled = [(h, spec.target, t) for h, t in (pairs[i] for i in order)]
    held_heads = held_out_heads(
        shuffled, int(round(len(pairs) * spec.held_out))
    )
    train = [p for p in shuffled if p[0] not in held_heads]
    held = [p for p in shuffled if p[0] in held_heads]
    if len(held) < 2 or len(train) < spec.shots + 1:
        raise DataError(
            f"{len(pairs)} target pairs cannot fill {spec.shots} shots "
            "plus held-out queries"
        )

    # Every entity appears in the vocabulary, even without edges.
    names = [entity_name(i) for i in range(spec.n_entities)]
    kg = KnowledgeGraph.from_named(records, names)
    known = [
        Triple(kg.entity_id(h), -1, kg.entity_id(t)) for h, _, t in shuffled
    ]

    def eval_record(queries: list[NamedTriple], key: int) -> TaskRecord:
        candidates = []
        for i, (h, _, t) in enumerate(queries):
            query = Triple(kg.entity_id(h), -1, kg.entity_id(t))
            pool = build_eval_candidates(
                query, kg.entities, spec.n_candidates, rng.child(key, i), known
            )
            candidates.append([kg.entity_name(e) for e in pool])
        return TaskRecord(
            relation=spec.target,
            support=train[: spec.shots],
            queries=queries,
            candidates=candidates,
        )

    half = len(held) // 2
    tasks = {
        "train": [
            TaskRecord(
                relation=spec.target,
                support=train[: spec.shots],
                queries=train[spec.shots:],
            )
        ],
        "valid": [eval_record(held[:half], 0)],
        "test": [eval_record(held[half:], 1)],
    }
    write_bundle(out, records, [], tasks)
    summary = {
        "entities": spec.n_entities,
        "edges": len(records),
        "target_pairs": len(pairs),
        "train_pairs": len(train),
        "held_out": len(held),
    }
    logger.info(f"Synthesised {out}: {summary}")
    return summary
