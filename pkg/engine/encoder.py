"""Relation message passing over enclosing subgraphs.

Edges carry the state; nodes only aggregate the edges touching them and
carry two indicator entries marking the head and the tail. Entity identity
is never read, so the encoder applies unchanged to entities unseen during
training.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from common.errors import DataError
from common.graph import EnclosingSubgraph, KnowledgeGraph

from .params import ParameterStore
from .tape import (
    Tensor,
    constant,
    op_concat,
    op_gather,
    op_linear,
    op_matmul_const,
    op_max_rows,
    op_relu,
    op_scale_rows,
)


class RelationTable:
    """Learnable initial edge features, one row per relation name.

    Rows are keyed by name so that a model trained on one graph can encode
    subgraphs of another graph sharing its relation vocabulary.
    """

    def __init__(self, names: Sequence[str], tensor: Tensor):
        """Pair relation names with the rows of a parameter."""
        if len(names) != tensor.shape[0]:
            raise DataError("relation table size does not match its names")
        self.names = tuple(names)
        self.tensor = tensor
        self._rows = {name: i for i, name in enumerate(self.names)}
        self._maps: dict[int, tuple[KnowledgeGraph, np.ndarray]] = {}

    @property
    def dim(self) -> int:
        """Width of an edge feature."""
        return self.tensor.shape[1]

    def row_map(self, kg: KnowledgeGraph) -> np.ndarray:
        """Table row of every relation id of a graph (-1 when absent)."""
        cached = self._maps.get(id(kg))
        if cached is None or cached[0] is not kg:
            rows = np.array(
                [self._rows.get(name, -1) for name in kg.relation_names],
                dtype=np.int64,
            )
            cached = self._maps[id(kg)] = (kg, rows)
        return cached[1]

    def rows(self, kg: KnowledgeGraph, relations: Sequence[int]) -> np.ndarray:
        """Table rows for relation ids of a graph."""
        row_map = self.row_map(kg)
        relations = np.asarray(relations, dtype=np.int64)
        if relations.size and (
            relations.min() < 0 or relations.max() >= len(row_map)
        ):
            raise DataError("edge relation id outside the graph vocabulary")
        rows = row_map[relations]
        if rows.size and rows.min() < 0:
            missing = {
                kg.relation_name(r) for r, row in zip(relations, rows) if row < 0
            }
            raise DataError(f"relations missing from the table: {missing}")
        return rows


@dataclass
class LayerStates:
    """Edge and node states of one message passing layer."""

    edge_states: Tensor
    node_states: Tensor
    flags: np.ndarray

    @property
    def flagged(self) -> Tensor:
        """Node states with the head and tail indicators appended."""
        return op_concat([self.node_states, constant(self.flags)], axis=1)


@dataclass
class SubgraphEmbedding:
    """The vector ``e || a_h || a_t`` of a subgraph and its final states."""

    vector: Tensor
    states: Optional[LayerStates]
    subgraph: EnclosingSubgraph

    @property
    def provenance(self) -> tuple[int, int]:
        """The (head, tail) pair the subgraph was extracted for."""
        return self.subgraph.head, self.subgraph.tail


@dataclass(frozen=True)
class _Structure:
    """Constant index arrays describing a subgraph."""

    incidence: np.ndarray
    heads: np.ndarray
    tails: np.ndarray
    flags: np.ndarray


def _structure(sub: EnclosingSubgraph) -> _Structure:
    index = sub.node_index
    heads = np.array([index[e.head] for e in sub.edges], dtype=np.int64)
    tails = np.array([index[e.tail] for e in sub.edges], dtype=np.int64)
    incidence = np.zeros((len(sub.nodes), len(sub.edges)))
    edge_ids = np.arange(len(sub.edges))
    # Both endpoints see the edge; a self-loop is seen twice.
    np.add.at(incidence, (heads, edge_ids), 1.0)
    np.add.at(incidence, (tails, edge_ids), 1.0)
    flags = np.zeros((len(sub.nodes), 2))
    flags[index[sub.head], 0] = 1.0
    flags[index[sub.tail], 1] = 1.0
    return _Structure(incidence, heads, tails, flags)


def encoder_params(
    store: ParameterStore,
    relation_names: Sequence[str],
    d_edge: int,
    layers: int,
) -> "SubgraphEncoder":
    """Register the relation table and the message passing layers."""
    table = store.uniform(
        "relations", (len(relation_names), d_edge), d_edge, "theta"
    )
    fan_in = 2 * (d_edge + 2) + d_edge
    weights = [
        store.linear(f"gnn.{layer}", fan_in, d_edge, "theta")
        for layer in range(layers)
    ]
    return SubgraphEncoder(RelationTable(relation_names, table), weights)


def init_edge_features(
    sub: EnclosingSubgraph, table: RelationTable, kg: KnowledgeGraph
) -> LayerStates:
    """Look up the first-layer edge features of a subgraph."""
    rows = table.rows(kg, [e.relation for e in sub.edges])
    edges = op_gather(table.tensor, rows)
    nodes = constant(np.zeros((len(sub.nodes), table.dim)))
    return LayerStates(edges, nodes, _structure(sub).flags)


def _masked(edges: Tensor, mask: Optional[Tensor]) -> Tensor:
    return edges if mask is None else op_scale_rows(edges, mask)


def message_passing_layer(
    sub: EnclosingSubgraph,
    states: LayerStates,
    layer_params: tuple[Tensor, Tensor],
    mask: Optional[Tensor] = None,
    structure: Optional[_Structure] = None,
) -> LayerStates:
    """Aggregate edges into nodes, then update every edge from its ends."""
    structure = structure or _structure(sub)
    weight, bias = layer_params
    edges = _masked(states.edge_states, mask)
    nodes = op_matmul_const(structure.incidence, edges)
    flagged = LayerStates(edges, nodes, structure.flags).flagged
    message = op_concat(
        [
            op_gather(flagged, structure.heads),
            op_gather(flagged, structure.tails),
            edges,
        ],
        axis=1,
    )
    updated = op_relu(op_linear(message, weight, bias))
    return LayerStates(updated, nodes, structure.flags)


def empty_embedding(sub: EnclosingSubgraph, d_edge: int) -> SubgraphEmbedding:
    """The embedding of a subgraph with no (surviving) edges."""
    return SubgraphEmbedding(constant(np.zeros(3 * d_edge)), None, sub)


def encode_subgraph(
    sub: EnclosingSubgraph,
    table: RelationTable,
    layers: Sequence[tuple[Tensor, Tensor]],
    kg: KnowledgeGraph,
    mask: Optional[Tensor] = None,
) -> SubgraphEmbedding:
    """Run every layer and pool the final edges into ``e || a_h || a_t``.

    A mask scales each edge wherever edge states are read: in the node
    aggregation, in the edge update input and in the final pooling.
    """
    if not layers:
        raise DataError("the encoder needs at least one layer")
    if sub.empty:
        return empty_embedding(sub, table.dim)
    structure = _structure(sub)
    states = init_edge_features(sub, table, kg)
    for layer_params in layers:
        states = message_passing_layer(
            sub, states, layer_params, mask, structure
        )
    final = _masked(states.edge_states, mask)
    pooled = op_max_rows(final)
    nodes = op_matmul_const(structure.incidence, final)
    index = sub.node_index
    vector = op_concat(
        [
            pooled,
            op_gather(nodes, np.int64(index[sub.head])),
            op_gather(nodes, np.int64(index[sub.tail])),
        ]
    )
    return SubgraphEmbedding(
        vector, LayerStates(states.edge_states, nodes, structure.flags), sub
    )


@dataclass
class SubgraphEncoder:
    """The relation table and layer weights, applied as one callable."""

    table: RelationTable
    layers: list[tuple[Tensor, Tensor]]

    @property
    def dim(self) -> int:
        """Width of the edge states."""
        return self.table.dim

    def __call__(
        self,
        sub: EnclosingSubgraph,
        kg: KnowledgeGraph,
        mask: Optional[Tensor] = None,
    ) -> SubgraphEmbedding:
        """Encode a subgraph of ``kg``."""
        return encode_subgraph(sub, self.table, self.layers, kg, mask)
