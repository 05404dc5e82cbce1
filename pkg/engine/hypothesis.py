"""Neural process extractor of the latent hypothesis behind a support set."""
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from common.errors import DataError

from .encoder import SubgraphEmbedding
from .params import ParameterStore
from .tape import (
    Tensor,
    constant,
    op_concat,
    op_gather,
    op_gaussian_reparam,
    op_linear,
    op_mean_rows,
    op_relu,
    op_scale,
    op_sigmoid,
    op_stack,
)

# Lower bound and span of the standard deviation transform.
SIGMA_FLOOR = 0.1
SIGMA_SPAN = 0.9

Source = Literal["prior", "posterior", "support-mean"]
MLP = Sequence[tuple[Tensor, Tensor]]


@dataclass
class HypothesisNets:
    """The four single-hidden-layer networks of the extractor."""

    context: MLP
    latent: MLP
    mu: MLP
    sigma: MLP


@dataclass
class ContextRepr:
    """Encoding of one labelled support or query subgraph."""

    vector: Tensor
    label: int


@dataclass
class HypothesisDistribution:
    """A diagonal Gaussian over the hypothesis."""

    mu: Tensor
    sigma: Tensor
    source: Source


@dataclass
class HypothesisSample:
    """One hypothesis ``z`` and the noise that produced it."""

    z: Tensor
    epsilon: np.ndarray


def hypothesis_params(
    store: ParameterStore, d_in: int, d_z: int
) -> HypothesisNets:
    """Register the extractor networks (hidden width ``d_z``)."""

    def mlp(name: str, fan_in: int) -> MLP:
        return [
            store.linear(f"{name}.0", fan_in, d_z, "theta"),
            store.linear(f"{name}.1", d_z, d_z, "theta"),
        ]

    return HypothesisNets(
        context=mlp("context", d_in + 1),
        latent=mlp("latent", d_z),
        mu=mlp("mu", d_z),
        sigma=mlp("sigma", d_z),
    )


def mlp_forward(x: Tensor, layers: MLP) -> Tensor:
    """Linear layers with relu between them (none after the last)."""
    for i, (weight, bias) in enumerate(layers):
        if i:
            x = op_relu(x)
        x = op_linear(x, weight, bias)
    return x


def _check_label(label: int):
    if label not in (0, 1):
        raise DataError(f"context labels are 0 or 1, got {label}")


def context_repr(
    emb: SubgraphEmbedding, label: int, nets: HypothesisNets
) -> ContextRepr:
    """Encode a subgraph embedding together with its label."""
    _check_label(label)
    x = op_concat([emb.vector, constant([float(label)])])
    return ContextRepr(mlp_forward(x, nets.context), label)


def context_reprs(
    pairs: Sequence[tuple[SubgraphEmbedding, int]], nets: HypothesisNets
) -> list[ContextRepr]:
    """Encode many labelled embeddings in one batched pass."""
    for _, label in pairs:
        _check_label(label)
    stacked = op_stack([emb.vector for emb, _ in pairs])
    labels = constant([[float(label)] for _, label in pairs])
    out = mlp_forward(op_concat([stacked, labels], axis=1), nets.context)
    return [ContextRepr(row, label) for row, (_, label) in zip(
        _rows(out), pairs
    )]


def _rows(matrix: Tensor) -> list[Tensor]:
    """Split a matrix into row tensors that stay on the tape."""
    return [op_gather(matrix, np.int64(i)) for i in range(len(matrix))]


def aggregate(cs: Sequence[ContextRepr]) -> Tensor:
    """Average the context representations."""
    if not cs:
        raise DataError("cannot aggregate an empty context")
    return op_mean_rows(op_stack([c.vector for c in cs]))


def distribution_params(
    zbar: Tensor, nets: HypothesisNets, source: Source = "prior"
) -> HypothesisDistribution:
    """Map the aggregate to the mean and bounded deviation of a Gaussian."""
    chi = op_relu(mlp_forward(zbar, nets.latent))
    mu = mlp_forward(chi, nets.mu)
    raw = op_sigmoid(mlp_forward(chi, nets.sigma))
    sigma = op_scale(raw, SIGMA_SPAN, SIGMA_FLOOR)
    return HypothesisDistribution(mu, sigma, source)


def sample_hypothesis(
    dist: HypothesisDistribution,
    rng: Optional[np.random.Generator] = None,
    epsilon: Optional[np.ndarray] = None,
) -> HypothesisSample:
    """Reparameterised draw ``z = mu + sigma * eps``."""
    if epsilon is None:
        if rng is None:
            raise DataError("sampling a hypothesis needs an rng or fixed noise")
        epsilon = rng.standard_normal(dist.mu.shape)
    z = op_gaussian_reparam(dist.mu, dist.sigma, eps=epsilon)
    return HypothesisSample(z, np.asarray(epsilon, dtype=np.float64))


def mean_hypothesis(dist: HypothesisDistribution) -> HypothesisSample:
    """The noise-free hypothesis ``z = mu``."""
    return HypothesisSample(dist.mu, np.zeros(dist.mu.shape))


def encode_hypothesis(
    pairs: Sequence[tuple[SubgraphEmbedding, int]],
    nets: HypothesisNets,
    mode: Source = "prior",
) -> HypothesisDistribution:
    """Encode labelled subgraphs into a hypothesis distribution.

    The prior sees the support set and its negatives; the posterior also
    sees the labelled queries. Which pairs are passed decides the mode.
    """
    if not pairs:
        raise DataError("cannot encode a hypothesis from no triples")
    zbar = aggregate(context_reprs(pairs, nets))
    return distribution_params(zbar, nets, mode)
