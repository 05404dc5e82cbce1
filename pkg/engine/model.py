"""The assembled model: parameters, networks and checkpoint access."""
import logging
import threading
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from common.errors import CheckpointError
from common.graph import EnclosingSubgraph, KnowledgeGraph
from common.models import TrainConfig

from .encoder import SubgraphEmbedding, encoder_params
from .hypothesis import (
    HypothesisDistribution,
    HypothesisSample,
    encode_hypothesis,
    hypothesis_params,
    mean_hypothesis,
    sample_hypothesis,
)
from .params import (
    ParameterStore,
    dump_checkpoint,
    load_into,
    read_checkpoint,
)
from .predictor import (
    EdgeMask,
    apply_mask,
    fuse_hypothesis,
    predictor_params,
    sample_mask,
    score_embedding,
)
from .tape import Tensor, constant, op_linear, op_mean_rows, op_stack

logger = logging.getLogger("gsnp.model")

LabelledEmbeddings = Sequence[tuple[SubgraphEmbedding, int]]


class GSNPModel:
    """Encoder, hypothesis extractor and predictor sharing one store."""

    def __init__(self, config: TrainConfig, relation_names: Sequence[str]):
        """Register every parameter for the given relation vocabulary."""
        self.config = config
        self.relation_names = tuple(relation_names)
        self.store = ParameterStore(config.seed)
        self.encoder = encoder_params(
            self.store, self.relation_names, config.d_edge, config.L
        )
        width = 3 * config.d_edge
        self.hypothesis_nets = hypothesis_params(self.store, width, config.d_z)
        self.predictor_nets = predictor_params(
            self.store, config.d_edge, config.d_z
        )
        self.support_head: Optional[tuple[Tensor, Tensor]] = None
        if not config.use_np_extractor:
            self.support_head = self.store.linear(
                "support_head", width, config.d_z, "theta"
            )
        self.counts: Counter = Counter()
        self._lock = threading.Lock()

    def _count(self, key: str, counts: Optional[Counter]):
        with self._lock:
            self.counts[key] += 1
        if counts is not None:
            counts[key] += 1

    def encode(
        self,
        kg: KnowledgeGraph,
        sub: EnclosingSubgraph,
        mask: Optional[Tensor] = None,
        counts: Optional[Counter] = None,
    ) -> SubgraphEmbedding:
        """Encode a subgraph, tallying plain and masked invocations."""
        self._count("encode" if mask is None else "masked", counts)
        return self.encoder(sub, kg, mask)

    def hypothesis(
        self, pairs: LabelledEmbeddings, mode: str = "prior"
    ) -> HypothesisDistribution:
        """The hypothesis distribution of labelled embeddings."""
        if self.support_head is None:
            return encode_hypothesis(pairs, self.hypothesis_nets, mode)
        # Without the extractor z is the projected mean of the positives.
        positives = [emb.vector for emb, label in pairs if label == 1]
        mu = op_linear(op_mean_rows(op_stack(positives)), *self.support_head)
        sigma = constant(np.ones(self.config.d_z))
        return HypothesisDistribution(mu, sigma, "support-mean")

    def sample(
        self,
        dist: HypothesisDistribution,
        rng: Optional[np.random.Generator] = None,
        epsilon: Optional[np.ndarray] = None,
    ) -> HypothesisSample:
        """Draw ``z``; the deterministic variant always returns its mean."""
        if dist.source == "support-mean":
            return mean_hypothesis(dist)
        return sample_hypothesis(dist, rng, epsilon)

    def edge_probabilities(
        self, emb: SubgraphEmbedding, z: HypothesisSample
    ) -> Tensor:
        """Per-edge probabilities of an encoded subgraph under ``z``."""
        return fuse_hypothesis(emb.states, z, self.predictor_nets)

    def score_query(
        self,
        kg: KnowledgeGraph,
        emb: SubgraphEmbedding,
        z: HypothesisSample,
        noise: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
        counts: Optional[Counter] = None,
    ) -> tuple[Tensor, Optional[EdgeMask]]:
        """Score a query subgraph, masking it first when attention is on.

        With neither ``noise`` nor ``rng`` the mask is drawn noise-free.
        """
        nets = self.predictor_nets
        if not self.config.use_gsat_predictor:
            return score_embedding(emb, z, nets), None
        probs = self.edge_probabilities(emb, z)
        if noise is None and rng is None:
            noise = np.zeros(probs.shape)
        mask = sample_mask(probs, self.config.temperature, rng, noise)
        masked = apply_mask(emb.subgraph, mask)
        masked_emb = self.encode(kg, masked.base, mask.soft_mask, counts)
        return score_embedding(masked_emb, z, nets), mask

    def save(self, path: Union[str, Path], **meta: object) -> bytes:
        """Write a checkpoint carrying the config and vocabulary."""
        return dump_checkpoint(
            path,
            self.store,
            {
                "config": self.config.dict(),
                "relations": list(self.relation_names),
                **meta,
            },
        )

    @classmethod
    def load(
        cls, path: Union[str, Path], **overrides: object
    ) -> "GSNPModel":
        """Rebuild a model from a checkpoint.

        Overrides only touch settings that do not change the parameter set.
        """
        data = read_checkpoint(path)
        meta = data.get("meta", {})
        if "config" not in meta or "relations" not in meta:
            raise CheckpointError(f"{path} lacks its config or vocabulary")
        config = TrainConfig.from_mapping({**meta["config"], **overrides})
        model = cls(config, meta["relations"])
        load_into(model.store, data)
        logger.info(
            f"Loaded {path}: {len(model.store)} tensors, "
            f"{model.store.size()} values, step {model.store.step}."
        )
        return model
