"""The unified objective, its gradients and the training loop."""
import math

import numpy as np
import pytest

from common.errors import DataError, NumericError, ShapeError, UsageError
from common.models import MetricsReport
from common.tasks import EpisodeRng, sample_task
from engine.hypothesis import HypothesisDistribution
from engine.model import GSNPModel
from engine.tape import Tape, constant
from engine.trainer import (
    EpisodeNoise,
    Trainer,
    episode_loss,
    gaussian_kl,
    margin_ranking_loss,
    mask_kl,
    tau_sweep,
)


def gaussian(mu, sigma):
    return HypothesisDistribution(constant(mu), constant(sigma), "prior")


def integrated_kl(mq, sq, mp, sp):
    """KL(q || p) of 1-D Gaussians by a Riemann sum over q's support."""
    x, dx = np.linspace(mq - 12 * sq, mq + 12 * sq, 200001, retstep=True)
    log_q = -0.5 * ((x - mq) / sq) ** 2 - math.log(sq * math.sqrt(2 * math.pi))
    log_p = -0.5 * ((x - mp) / sp) ** 2 - math.log(sp * math.sqrt(2 * math.pi))
    return float(np.sum(np.exp(log_q) * (log_q - log_p)) * dx)


def training_task(bundle, seed, K=3, n=1, max_queries=None):  # noqa: N803
    pool = bundle.split("train")[0]
    triples = [*pool.support, *pool.queries]
    task = sample_task(
        bundle.background,
        triples,
        K,
        EpisodeRng(seed),
        n,
        pool.relation,
        max_queries,
    )
    task.task_id = seed
    return task


class TestGaussianKL:
    def test_reference_value(self):
        """KL(N(1, 0.5^2) || N(0, 1)) = log 2 + 1.25 / 2 - 1 / 2."""
        value = gaussian_kl(gaussian([1.0], [0.5]), gaussian([0.0], [1.0]))
        assert abs(value.item() - 0.8181) < 1e-4

    def test_identical_distributions(self):
        """A distribution is at distance zero from itself."""
        q = gaussian([0.3, -2.0], [0.55, 0.8])
        assert gaussian_kl(q, q).item() == 0.0

    def test_matches_numerical_integration(self):
        """Closed form and quadrature agree on random pairs."""
        rng = np.random.default_rng(42)
        for _ in range(100):
            mq, mp = rng.uniform(-1.0, 1.0, size=2)
            sq, sp = rng.uniform(0.3, 1.5, size=2)
            closed = gaussian_kl(gaussian([mq], [sq]), gaussian([mp], [sp]))
            assert abs(closed.item() - integrated_kl(mq, sq, mp, sp)) < 1e-4

    def test_sums_over_coordinates(self):
        """Diagonal Gaussians add their per-coordinate divergences."""
        q = gaussian([1.0, 0.0], [0.5, 1.0])
        p = gaussian([0.0, 0.0], [1.0, 1.0])
        single = gaussian_kl(gaussian([1.0], [0.5]), gaussian([0.0], [1.0]))
        assert gaussian_kl(q, p).item() == pytest.approx(single.item())

    def test_bad_inputs(self):
        """Mismatched widths and non-positive sigmas are rejected."""
        with pytest.raises(ShapeError):
            gaussian_kl(
                gaussian([0.0], [1.0]), gaussian([0.0, 0.0], [1.0, 1.0])
            )
        with pytest.raises(NumericError):
            gaussian_kl(gaussian([0.0], [0.0]), gaussian([0.0], [1.0]))


class TestMaskKL:
    def test_reference_value(self):
        """One edge at p = 0.9 against tau = 0.7."""
        assert abs(mask_kl(constant([0.9]), 0.7).item() - 0.1163) < 1e-4

    def test_matched_marginal(self):
        """Probabilities equal to tau cost nothing."""
        assert mask_kl(constant(np.full(7, 0.7)), 0.7).item() == 0.0

    def test_matches_direct_evaluation(self):
        """The summed divergence equals the Bernoulli formula."""
        rng = np.random.default_rng(42)
        for _ in range(100):
            p = rng.uniform(0.01, 0.99, size=5)
            tau = rng.uniform(0.05, 0.95)
            direct = np.sum(
                p * np.log(p / tau) + (1 - p) * np.log((1 - p) / (1 - tau))
            )
            assert abs(mask_kl(constant(p), tau).item() - direct) < 1e-6


class TestMarginRanking:
    def test_single_pair(self):
        """max(0, 1 + 0.1 - 0.8) = 0.3."""
        loss = margin_ranking_loss([constant(0.8)], [constant(0.1)], 1.0)
        assert loss.item() == pytest.approx(0.3)

    def test_satisfied_margin_is_free(self):
        """A negative far enough below costs nothing."""
        loss = margin_ranking_loss([constant(0.9)], [constant(-0.5)], 1.0)
        assert loss.item() == 0.0

    def test_bad_inputs(self):
        """Empty or unequal pair lists and non-positive margins fail."""
        with pytest.raises(DataError):
            margin_ranking_loss([], [], 1.0)
        with pytest.raises(ShapeError):
            margin_ranking_loss([constant(0.0)], [], 1.0)
        with pytest.raises(NumericError):
            margin_ranking_loss([constant(0.0)], [constant(0.0)], 0.0)


class TestEpisodeNoise:
    def test_replay(self):
        """A frozen copy hands back the same draws in order."""
        noise = EpisodeNoise(np.random.default_rng(42))
        a, b = noise.normal((3,)), noise.gumbel((2,))
        frozen = noise.frozen()
        assert np.array_equal(frozen.normal((3,)), a)
        assert np.array_equal(frozen.gumbel((2,)), b)
        with pytest.raises(NumericError):
            frozen.normal((3,))

    def test_replay_must_match(self):
        """Asking for a different draw than recorded is an error."""
        noise = EpisodeNoise(np.random.default_rng(42))
        noise.normal((3,))
        with pytest.raises(NumericError):
            noise.frozen().gumbel((3,))
        with pytest.raises(NumericError):
            EpisodeNoise().normal((1,))


class TestEpisodeLoss:
    def test_decomposition(self, bundle, model):
        """total = ranking + w_z kl_z + w_mask kl_mask, exactly."""
        config = model.config
        for seed in range(5):
            task = training_task(bundle, seed)
            noise = EpisodeNoise(np.random.default_rng(seed))
            report = episode_loss(model, bundle.background, task, noise).report
            expected = (
                report.ranking
                + config.w_z * report.kl_z
                + config.w_mask * report.kl_mask
            )
            assert report.total == expected
            assert report.kl_z >= 0 and report.kl_mask >= 0
            assert report.mask_const_args == (
                report.n_query_edges,
                config.tau,
            )

    def test_encoder_invocations(self, bundle, tiny_config):
        """Encodes (n + 1) K + m subgraphs, the m scored ones T more times."""
        rng = np.random.default_rng(42)
        for shape in range(50):
            K, n, T = (int(v) for v in rng.integers(1, 4, size=3))  # noqa: N806
            config = tiny_config.copy(update={"K": K, "n": n, "T": T})
            model = GSNPModel(config, bundle.relation_vocabulary)
            task = training_task(
                bundle, shape, K, n, max_queries=int(rng.integers(1, 4))
            )
            noise = EpisodeNoise(np.random.default_rng(shape))
            counts = episode_loss(model, bundle.background, task, noise).counts
            m_scored = len(task.queries) + len(task.query_negatives)
            assert counts["encode"] == (n + 1) * K + m_scored
            assert counts["masked"] == T * m_scored

    def test_zero_parameters(self, bundle, model):
        """Constant scores cost exactly the margin per pair."""
        for name in model.store:
            model.store[name].values = np.zeros_like(model.store[name].values)
        task = training_task(bundle, 0)
        noise = EpisodeNoise(np.random.default_rng(0))
        report = episode_loss(model, bundle.background, task, noise).report
        assert report.ranking == model.config.gamma * len(task.queries)
        assert report.kl_z == 0.0

    def test_frozen_noise_is_deterministic(self, bundle, model):
        """Replaying an episode's noise reproduces its loss."""
        task = training_task(bundle, 3)
        noise = EpisodeNoise(np.random.default_rng(3))
        first = episode_loss(model, bundle.background, task, noise)
        again = episode_loss(model, bundle.background, task, noise.frozen())
        assert first.loss.item() == again.loss.item()
        assert first.report == again.report

    def test_ablations(self, bundle, tiny_config):
        """Without the extractor kl_z vanishes; without attention no masks."""
        config = tiny_config.copy(
            update={"use_np_extractor": False, "use_gsat_predictor": False}
        )
        model = GSNPModel(config, bundle.relation_vocabulary)
        assert "support_head.W" in model.store
        task = training_task(bundle, 1)
        noise = EpisodeNoise(np.random.default_rng(1))
        result = episode_loss(model, bundle.background, task, noise)
        assert result.report.kl_z == 0.0
        assert result.report.kl_mask == 0.0
        assert result.counts["masked"] == 0
        assert math.isfinite(result.report.total)

    def test_matches_finite_differences(self, bundle, model):
        """Random parameter entries agree with central differences."""
        rng = np.random.default_rng(42)
        names = list(model.store)
        h = 1e-5
        for seed in range(20):
            task = training_task(bundle, seed, max_queries=2)
            noise = EpisodeNoise(np.random.default_rng(seed))
            with Tape() as tape:
                result = episode_loss(model, bundle.background, task, noise)
                grads = model.store.gradients(tape.backward(result.loss))

            def value():
                return episode_loss(
                    model, bundle.background, task, noise.frozen()
                ).loss.item()

            for _ in range(10):
                name = names[int(rng.integers(len(names)))]
                values = model.store[name].values
                idx = tuple(int(rng.integers(s)) for s in values.shape)
                original = values[idx]
                values[idx] = original + h
                up = value()
                values[idx] = original - h
                down = value()
                values[idx] = original
                numeric = (up - down) / (2 * h)
                assert grads[name][idx] == pytest.approx(
                    numeric, rel=1e-4, abs=1e-7
                )


class TestTrainer:
    def test_run_writes_log_and_checkpoint(self, bundle, tiny_config, tmp_path):
        """Two validation rounds, one metrics line each, one checkpoint."""
        result = Trainer(bundle, tiny_config, tmp_path / "run").run()
        assert result.episodes == 4
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == len(result.history) == 2
        assert result.checkpoint.exists()
        assert result.best_mrr is not None
        assert all(math.isfinite(r.total) for r in result.history)
        restored = GSNPModel.load(result.checkpoint)
        assert restored.store.step == 4

    def test_load_rejects_bad_overrides(self, model, tmp_path):
        """An out-of-range override on load names the offending key."""
        path = tmp_path / "model.ckpt"
        model.save(path)
        with pytest.raises(UsageError) as info:
            GSNPModel.load(path, n_candidates=0)
        assert info.value.keys == ["n_candidates"]

    def test_identical_runs(self, bundle, tiny_config, tmp_path):
        """The same seed reproduces the log and checkpoint byte for byte."""
        config = tiny_config.copy(update={"seed": 7})
        for name in ("a", "b"):
            Trainer(bundle, config, tmp_path / name).run()
        for artifact in ("metrics.jsonl", "model.ckpt"):
            a = (tmp_path / "a" / artifact).read_bytes()
            b = (tmp_path / "b" / artifact).read_bytes()
            assert a == b

    def test_threads_do_not_change_the_result(self, bundle, tiny_config):
        """Parallel episodes average to the same update."""
        config = tiny_config.copy(update={"batch_size": 2})
        serial = Trainer(bundle, config)
        parallel = Trainer(bundle, config.copy(update={"threads": 2}))
        serial.run()
        parallel.run()
        for name in serial.model.store:
            assert np.array_equal(
                serial.model.store[name].values,
                parallel.model.store[name].values,
            )

    def test_early_stopping_restores_the_best(self, bundle, tiny_config):
        """A stalled validation score stops training on the best weights."""
        config = tiny_config.copy(update={"patience": 1, "max_epochs": 10})
        scores = iter([0.5, 0.4, 0.3])
        best = {}

        def remember(record):
            if record.episode == 2:
                best.update(trainer.model.store.snapshot())

        trainer = Trainer(bundle, config, on_round=remember)
        trainer.validate = lambda: MetricsReport(
            mrr=next(scores), hit1=0, hit5=0, hit10=0, n_queries=1
        )
        result = trainer.run()
        assert result.stopped_early
        assert result.episodes == 4
        assert result.best_mrr == 0.5
        for name, values in best.items():
            assert np.array_equal(trainer.model.store[name].values, values)

    def test_stop_before_running(self, bundle, tiny_config):
        """A raised terminate flag ends the loop at once."""
        trainer = Trainer(bundle, tiny_config)
        trainer.stop()
        result = trainer.run()
        assert result.episodes == 0
        assert result.history == []

    def test_no_trainable_relation(self, bundle, tiny_config):
        """Shot counts beyond every training pool are rejected."""
        with pytest.raises(DataError):
            Trainer(bundle, tiny_config.copy(update={"K": 500}))

    def test_tau_sweep(self, bundle, tiny_config, tmp_path):
        """Every tau trains to a finite loss and reports its score."""
        taus = [0.1, 0.4, 0.7, 0.9]
        results = tau_sweep(bundle, tiny_config, taus, tmp_path)
        assert list(results) == taus
        assert all(mrr is not None and 0 < mrr <= 1 for mrr in results.values())
        for tau in taus:
            assert (tmp_path / f"tau-{tau}" / "model.ckpt").exists()
