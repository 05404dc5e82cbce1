"""The neural process hypothesis extractor."""
import numpy as np
import pytest

from common.errors import DataError
from engine.encoder import SubgraphEmbedding
from engine.hypothesis import (
    SIGMA_FLOOR,
    aggregate,
    context_repr,
    context_reprs,
    distribution_params,
    encode_hypothesis,
    hypothesis_params,
    mean_hypothesis,
    sample_hypothesis,
)
from engine.params import ParameterStore
from engine.tape import Tape, Tensor, constant, op_mul, op_reduce_sum

D_IN = 6
D_Z = 5


@pytest.fixture
def nets():
    return hypothesis_params(ParameterStore(seed=1), D_IN, D_Z)


def embeddings(rng, count):
    return [
        SubgraphEmbedding(constant(rng.normal(size=D_IN)), None, None)
        for _ in range(count)
    ]


def labelled(rng, positives=3, negatives=3):
    embs = embeddings(rng, positives + negatives)
    return [(e, int(i < positives)) for i, e in enumerate(embs)]


class TestContext:
    def test_batched_matches_single(self, nets):
        """Encoding in one batch equals encoding one by one."""
        rng = np.random.default_rng(42)
        pairs = labelled(rng)
        batched = context_reprs(pairs, nets)
        for (emb, label), c in zip(pairs, batched):
            single = context_repr(emb, label, nets)
            np.testing.assert_allclose(
                c.vector.values, single.vector.values, atol=1e-12
            )
            assert c.label == label

    def test_label_changes_the_encoding(self, nets):
        """Positive and negative copies of a subgraph differ."""
        emb = embeddings(np.random.default_rng(42), 1)[0]
        pos = context_repr(emb, 1, nets).vector.values
        neg = context_repr(emb, 0, nets).vector.values
        assert not np.array_equal(pos, neg)

    def test_bad_label(self, nets):
        """Labels are 0 or 1."""
        emb = embeddings(np.random.default_rng(42), 1)[0]
        with pytest.raises(DataError):
            context_repr(emb, 2, nets)

    def test_empty_context(self, nets):
        """Nothing to aggregate is an error."""
        with pytest.raises(DataError):
            aggregate([])
        with pytest.raises(DataError):
            encode_hypothesis([], nets)


class TestDistribution:
    def test_sigma_range(self, nets):
        """Deviations stay in [0.1, 1.0) for any aggregate."""
        rng = np.random.default_rng(42)
        zbar = constant(rng.normal(size=(10000, D_Z)))
        sigma = distribution_params(zbar, nets).sigma.values
        assert sigma.min() >= SIGMA_FLOOR
        assert sigma.max() < 1.0

    def test_sigma_at_zero_output(self, nets):
        """A silent sigma network gives 0.1 + 0.9 * 0.5."""
        weight, bias = nets.sigma[-1]
        weight.values = np.zeros_like(weight.values)
        bias.values = np.zeros_like(bias.values)
        zbar = constant(np.random.default_rng(42).normal(size=D_Z))
        sigma = distribution_params(zbar, nets).sigma.values
        np.testing.assert_allclose(sigma, 0.55, rtol=0, atol=1e-15)

    def test_permutation_invariance(self, nets):
        """Reordering the context leaves mu and sigma unchanged."""
        rng = np.random.default_rng(42)
        pairs = labelled(rng, 4, 4)
        reference = encode_hypothesis(pairs, nets)
        for _ in range(10):
            order = rng.permutation(len(pairs))
            shuffled = encode_hypothesis([pairs[i] for i in order], nets)
            np.testing.assert_allclose(
                shuffled.mu.values, reference.mu.values, atol=1e-12
            )
            np.testing.assert_allclose(
                shuffled.sigma.values, reference.sigma.values, atol=1e-12
            )

    def test_mode_is_recorded(self, nets):
        """The source says which pairs were seen."""
        pairs = labelled(np.random.default_rng(42))
        assert encode_hypothesis(pairs, nets, "posterior").source == "posterior"


class TestSampling:
    def test_reparameterisation_identity(self, nets):
        """z is mu plus sigma times the recorded noise."""
        rng = np.random.default_rng(42)
        dist = encode_hypothesis(labelled(rng), nets)
        sample = sample_hypothesis(dist, rng)
        expected = dist.mu.values + dist.sigma.values * sample.epsilon
        assert np.array_equal(sample.z.values, expected)

    def test_zero_noise_is_the_mean(self, nets):
        """Fixed eps = 0 returns mu exactly."""
        dist = encode_hypothesis(labelled(np.random.default_rng(42)), nets)
        sample = sample_hypothesis(dist, epsilon=np.zeros(D_Z))
        assert np.array_equal(sample.z.values, dist.mu.values)
        assert mean_hypothesis(dist).z is dist.mu

    def test_needs_noise_source(self, nets):
        """Without an rng or eps there is nothing to draw from."""
        dist = encode_hypothesis(labelled(np.random.default_rng(42)), nets)
        with pytest.raises(DataError):
            sample_hypothesis(dist)


class TestHypothesisGradients:
    def test_matches_finite_differences(self, nets, finite_difference):
        """Gradients of every extractor weight through a sampled z."""
        rng = np.random.default_rng(42)
        pairs = [
            (SubgraphEmbedding(Tensor(e.vector.values, True), None, None), y)
            for e, y in labelled(rng, 2, 2)
        ]
        eps = rng.normal(size=D_Z)
        weights = constant(rng.normal(size=D_Z))

        def loss():
            z = sample_hypothesis(encode_hypothesis(pairs, nets), epsilon=eps)
            return op_reduce_sum(op_mul(z.z, weights))

        with Tape() as tape:
            grads = tape.backward(loss())
        tensors = [
            tensor
            for mlp in (nets.context, nets.latent, nets.mu, nets.sigma)
            for layer in mlp
            for tensor in layer
        ]
        tensors.append(pairs[0][0].vector)
        for tensor in tensors:
            numeric = finite_difference(lambda: loss().item(), tensor.values)
            np.testing.assert_allclose(
                grads.get(tensor, np.zeros_like(tensor.values)),
                numeric,
                rtol=1e-4,
                atol=1e-7,
            )
