"""Hypothesis-grounded stochastic edge attention and query scoring."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from common.errors import ShapeError
from common.graph import EnclosingSubgraph, KnowledgeGraph

from .encoder import LayerStates, SubgraphEmbedding, SubgraphEncoder
from .hypothesis import MLP, HypothesisSample, mlp_forward
from .params import ParameterStore
from .tape import (
    Tensor,
    constant,
    gumbel_difference,
    op_add,
    op_cosine,
    op_gumbel_sigmoid,
    op_linear,
    op_logit,
    op_reshape,
    op_sigmoid,
)


@dataclass
class PredictorNets:
    """Fusion projection and edge MLP (psi) plus the prediction head (phi)."""

    project: tuple[Tensor, Tensor]
    fuse: MLP
    head: tuple[Tensor, Tensor]


@dataclass
class EdgeMask:
    """Per-edge existence probabilities and the relaxed sample drawn."""

    probs: Tensor
    soft_mask: Tensor
    temperature: float
    noise: np.ndarray

    def __len__(self) -> int:
        """Number of edges."""
        return len(self.probs)


@dataclass
class MaskedSubgraph:
    """A subgraph whose edges are scaled by a soft mask when encoded."""

    base: EnclosingSubgraph
    mask: EdgeMask


def predictor_params(
    store: ParameterStore, d_edge: int, d_z: int
) -> PredictorNets:
    """Register the fusion and scoring weights."""
    return PredictorNets(
        project=store.linear("fuse.project", d_z, d_edge, "psi"),
        fuse=[
            store.linear("fuse.0", d_edge, d_edge, "psi"),
            store.linear("fuse.1", d_edge, 1, "psi"),
        ],
        head=store.linear("head", 3 * d_edge, d_z, "phi"),
    )


def fuse_hypothesis(
    edge_states: Optional[LayerStates],
    z: HypothesisSample,
    nets: PredictorNets,
) -> Tensor:
    """Probability that each edge belongs to the hypothesis subgraph."""
    if edge_states is None:
        return constant(np.zeros(0))
    edges = edge_states.edge_states
    projected = op_linear(z.z, *nets.project)
    if projected.shape != edges.shape[1:]:
        raise ShapeError(
            f"fuse: projected hypothesis {projected.shape} does not match "
            f"edge states {edges.shape}"
        )
    logits = mlp_forward(op_add(edges, projected), nets.fuse)
    return op_sigmoid(op_reshape(logits, (len(edges),)))


def sample_mask(
    probs: Tensor,
    temperature: float,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> EdgeMask:
    """Draw a relaxed Bernoulli mask from the edge probabilities."""
    if noise is None and rng is not None:
        noise = gumbel_difference(rng, probs.shape)
    soft = op_gumbel_sigmoid(op_logit(probs), temperature, noise=noise)
    return EdgeMask(probs, soft, temperature, np.asarray(noise))


def apply_mask(sub: EnclosingSubgraph, mask: EdgeMask) -> MaskedSubgraph:
    """Attach a mask to the subgraph it was drawn for."""
    if len(mask) != len(sub):
        raise ShapeError(
            f"mask of {len(mask)} edges for a subgraph of {len(sub)}"
        )
    return MaskedSubgraph(sub, mask)


def score_embedding(
    emb: SubgraphEmbedding, z: HypothesisSample, nets: PredictorNets
) -> Tensor:
    """Cosine between the projected embedding and the hypothesis."""
    return op_cosine(op_linear(emb.vector, *nets.head), z.z)


def score(
    masked: MaskedSubgraph,
    z: HypothesisSample,
    nets: PredictorNets,
    encoder: SubgraphEncoder,
    kg: KnowledgeGraph,
) -> Tensor:
    """Re-encode the masked subgraph and score it against ``z``."""
    emb = encoder(masked.base, kg, masked.mask.soft_mask)
    return score_embedding(emb, z, nets)
