"""The unified objective and the episodic training loop."""
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from common.bundle import Bundle
from common.errors import DataError, NumericError, ShapeError
from common.graph import KnowledgeGraph, SubgraphExtractor, Triple
from common.models import (
    LossReport,
    MetricsReport,
    TrainConfig,
    ValidationRecord,
)
from common.tasks import EpisodeRng, FewShotTask, sample_task

from .evaluator import evaluate_split
from .hypothesis import HypothesisDistribution
from .model import GSNPModel
from .params import accumulate, adam_step
from .tape import (
    Tape,
    Tensor,
    constant,
    gumbel_difference,
    op_add,
    op_bernoulli_kl,
    op_div,
    op_log,
    op_mul,
    op_reduce_sum,
    op_relu,
    op_scale,
    op_stack,
    op_sub,
    op_sum,
)

logger = logging.getLogger("gsnp.trainer")


def gaussian_kl(
    q: HypothesisDistribution, p: HypothesisDistribution
) -> Tensor:
    """KL divergence of two diagonal Gaussians, summed over coordinates."""
    if q.mu.shape != p.mu.shape or q.sigma.shape != p.sigma.shape:
        raise ShapeError(
            f"kl: shapes {q.mu.shape} and {p.mu.shape} do not match"
        )
    if np.any(q.sigma.values <= 0) or np.any(p.sigma.values <= 0):
        raise NumericError("kl needs strictly positive sigmas")
    diff = op_sub(q.mu, p.mu)
    spread = op_add(op_mul(q.sigma, q.sigma), op_mul(diff, diff))
    terms = op_add(
        op_log(op_div(p.sigma, q.sigma)),
        op_div(spread, op_scale(op_mul(p.sigma, p.sigma), 2.0)),
    )
    return op_reduce_sum(op_scale(terms, 1.0, -0.5))


def mask_kl(probs: Tensor, tau: float) -> Tensor:
    """Edge Bernoulli KL against Bernoulli(tau), minus its constant."""
    return op_bernoulli_kl(probs, tau)


def margin_ranking_loss(
    positives: Sequence[Tensor], negatives: Sequence[Tensor], gamma: float
) -> Tensor:
    """Sum over pairs of ``max(0, gamma + s(q-) - s(q))``."""
    if not positives:
        raise DataError("ranking loss needs at least one pair")
    if len(positives) != len(negatives):
        raise ShapeError(
            f"ranking: {len(positives)} positives but {len(negatives)} "
            "negatives"
        )
    if not gamma > 0:
        raise NumericError(f"margin must be > 0, got {gamma}")
    gap = op_sub(op_stack(list(negatives)), op_stack(list(positives)))
    return op_reduce_sum(op_relu(op_scale(gap, 1.0, gamma)))


class EpisodeNoise:
    """Random draws of one episode, kept so the episode can be replayed."""

    def __init__(self, rng: Optional[np.random.Generator] = None):
        """Draw fresh noise from ``rng``."""
        self.rng = rng
        self.draws: list[tuple[str, np.ndarray]] = []
        self._replay: Optional[list[tuple[str, np.ndarray]]] = None

    def frozen(self) -> "EpisodeNoise":
        """A copy that hands out the recorded draws again, in order."""
        copy = EpisodeNoise()
        copy._replay = list(self.draws)
        return copy

    def _draw(
        self, kind: str, shape: tuple[int, ...], make: Callable
    ) -> np.ndarray:
        if self._replay is not None:
            if not self._replay:
                raise NumericError("replayed episode asked for extra noise")
            recorded_kind, value = self._replay.pop(0)
            if recorded_kind != kind or value.shape != shape:
                raise NumericError("replayed noise does not match the episode")
            return value
        if self.rng is None:
            raise NumericError("episode noise needs an rng")
        value = make(shape)
        self.draws.append((kind, value))
        return value

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        """Standard normal draws."""
        return self._draw(
            "normal", shape, lambda size: self.rng.standard_normal(size)
        )

    def gumbel(self, shape: tuple[int, ...]) -> np.ndarray:
        """Differences of two standard Gumbel draws."""
        return self._draw(
            "gumbel", shape, lambda size: gumbel_difference(self.rng, size)
        )


@dataclass
class EpisodeResult:
    """The loss tensor of an episode, its report and encoder tallies."""

    loss: Tensor
    report: LossReport
    counts: Counter = field(default_factory=Counter)


def episode_loss(
    model: GSNPModel,
    kg: KnowledgeGraph,
    task: FewShotTask,
    noise: EpisodeNoise,
    extractor: Optional[SubgraphExtractor] = None,
) -> EpisodeResult:
    """Assemble the objective of one training episode.

    Every task triple's subgraph is encoded once. The prior sees the
    support and its negatives, the posterior also the labelled queries.
    Queries are masked and scored under ``T`` posterior draws.
    """
    config = model.config
    extractor = extractor or SubgraphExtractor(kg, config.hop_k)
    counts: Counter = Counter()

    def embed(triples: Sequence[Triple]) -> list:
        return [
            model.encode(
                kg, extractor(h, t, task.relation_id), counts=counts
            )
            for h, _, t in triples
        ]

    support = embed(task.support)
    support_neg = embed(task.support_negatives)
    queries = embed(task.queries)
    query_neg = embed(task.query_negatives)

    prior_pairs = [(e, 1) for e in support] + [(e, 0) for e in support_neg]
    prior = model.hypothesis(prior_pairs, "prior")
    if config.use_np_extractor:
        labelled = [(e, 1) for e in queries] + [(e, 0) for e in query_neg]
        posterior = model.hypothesis(prior_pairs + labelled, "posterior")
        kl_z = gaussian_kl(posterior, prior)
    else:
        posterior, kl_z = prior, constant(0.0)

    rankings, mask_terms = [], []
    for _ in range(config.T):
        epsilon = None
        if posterior.source != "support-mean":
            epsilon = noise.normal(posterior.mu.shape)
        z = model.sample(posterior, epsilon=epsilon)
        scores: dict[int, list[Tensor]] = {1: [], 0: []}
        kls = []
        for label, embeddings in ((1, queries), (0, query_neg)):
            for emb in embeddings:
                gumbel = None
                if config.use_gsat_predictor:
                    gumbel = noise.gumbel((len(emb.subgraph),))
                s, mask = model.score_query(
                    kg, emb, z, noise=gumbel, counts=counts
                )
                scores[label].append(s)
                if mask is not None:
                    kls.append(mask_kl(mask.probs, config.tau))
        rankings.append(margin_ranking_loss(scores[1], scores[0], config.gamma))
        mask_terms.append(op_sum(kls) if kls else constant(0.0))

    ranking = op_scale(op_sum(rankings), 1.0 / config.T)
    kl_mask = op_scale(op_sum(mask_terms), 1.0 / config.T)
    total = op_add(
        op_add(ranking, op_scale(kl_z, config.w_z)),
        op_scale(kl_mask, config.w_mask),
    )

    support_edges = sum(len(e.subgraph) for e in (*support, *support_neg))
    query_edges = sum(len(e.subgraph) for e in (*queries, *query_neg))
    if not np.isfinite(total.values).all():
        raise NumericError(
            "non-finite loss",
            {
                "relation": task.relation,
                "task_id": task.task_id,
                "ranking": ranking.item(),
                "kl_z": kl_z.item(),
                "kl_mask": kl_mask.item(),
            },
        )
    report = LossReport(
        total=total.item(),
        ranking=ranking.item(),
        kl_z=kl_z.item(),
        kl_mask=kl_mask.item(),
        relation=task.relation,
        K=task.K,
        n_support_edges=support_edges,
        n_query_edges=query_edges,
        mask_const_args=(query_edges, config.tau),
    )
    logger.debug(f"Episode loss {report}")
    return EpisodeResult(total, report, counts)


@dataclass
class TrainResult:
    """Outcome of a training run."""

    episodes: int
    best_mrr: Optional[float]
    history: list[ValidationRecord]
    stopped_early: bool
    checkpoint: Optional[Path] = None


class Trainer:
    """Episodic training with periodic validation and early stopping."""

    def __init__(
        self,
        bundle: Bundle,
        config: TrainConfig,
        out_dir: Optional[Union[str, Path]] = None,
        on_round: Optional[Callable[[ValidationRecord], None]] = None,
    ):
        """Build the model and the training pools of a bundle."""
        self.config = config
        self.kg = bundle.background
        self.test_graph = bundle.test_graph
        self.model = GSNPModel(config, bundle.relation_vocabulary)
        self.extractor = SubgraphExtractor(self.kg, config.hop_k)
        self.eval_extractor = SubgraphExtractor(self.test_graph, config.hop_k)
        self.pools = [
            (task.relation, [*task.support, *task.queries])
            for task in bundle.split("train")
            if task.K + len(task.queries) >= config.K + 1
        ]
        if not self.pools:
            raise DataError(
                f"no training relation has {config.K + 1} or more triples"
            )
        self.valid_tasks = bundle.split("valid")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.on_round = on_round
        self.rng = EpisodeRng(config.seed)
        self.terminate_flag = threading.Event()
        self.history: list[ValidationRecord] = []

    def stop(self):
        """Finish after the current batch."""
        self.terminate_flag.set()

    def build_task(self, episode: int) -> FewShotTask:
        """Sample the task of an episode from its own random stream."""
        rng = self.rng.child(episode)
        relation, triples = self.pools[
            int(rng.stream.integers(len(self.pools)))
        ]
        task = sample_task(
            self.kg, triples, self.config.K, rng, self.config.n, relation
        )
        task.task_id = episode
        return task

    def run_episode(self, episode: int) -> tuple[dict, LossReport]:
        """Forward and backward pass of one episode."""
        task = self.build_task(episode)
        noise = EpisodeNoise(self.rng.child(episode, 1).stream)
        with Tape() as tape:
            result = episode_loss(
                self.model, self.kg, task, noise, self.extractor
            )
            grads = tape.backward(result.loss)
        return self.model.store.gradients(grads), result.report

    def step(self, first: int) -> list[LossReport]:
        """Run one batch of episodes and apply the averaged gradient."""
        episodes = range(first, first + self.config.batch_size)
        if self.config.threads > 1:
            with ThreadPoolExecutor(self.config.threads) as pool:
                outputs = list(pool.map(self.run_episode, episodes))
        else:
            outputs = [self.run_episode(e) for e in episodes]
        total = None
        for grads, _ in outputs:
            total = accumulate(total, grads)
        scale = 1.0 / len(outputs)
        averaged = {name: g * scale for name, g in total.items()}
        config = self.config
        adam_step(
            self.model.store,
            averaged,
            config.lr,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )
        return [report for _, report in outputs]

    def validate(self) -> Optional[MetricsReport]:
        """Metrics on the validation tasks, when the bundle has any."""
        if not self.valid_tasks:
            return None
        return evaluate_split(
            self.model,
            self.test_graph,
            self.valid_tasks,
            extractor=self.eval_extractor,
        )

    def _log_round(self, episode: int, reports: list[LossReport]):
        mean = {
            key: float(np.mean([getattr(r, key) for r in reports]))
            for key in ("total", "ranking", "kl_z", "kl_mask")
        }
        metrics = self.validate()
        record = ValidationRecord(
            episode=episode,
            val_mrr=None if metrics is None else metrics.mrr,
            tau=self.config.tau,
            **mean,
        )
        self.history.append(record)
        if self.out_dir is not None:
            log = self.out_dir / "metrics.jsonl"
            with open(log, "a", encoding="utf-8", newline="\n") as f:
                f.write(record.json() + "\n")
        if self.on_round is not None:
            self.on_round(record)
        logger.info(
            f"Episode {episode}: loss {record.total:.4f} "
            f"(ranking {record.ranking:.4f}), validation MRR "
            f"{'n/a' if record.val_mrr is None else f'{record.val_mrr:.4f}'}."
        )
        return record

    def run(self) -> TrainResult:
        """Train until the episode budget is spent or validation stalls."""
        config = self.config
        budget = config.max_epochs * config.episodes_per_epoch
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "metrics.jsonl").write_text("", encoding="utf-8")
        best_mrr: Optional[float] = None
        best = self.model.store.snapshot()
        stale = 0
        stopped_early = False
        episode = 0
        pending: list[LossReport] = []
        while episode < budget and not self.terminate_flag.is_set():
            pending.extend(self.step(episode))
            episode += config.batch_size
            crossed = episode % config.eval_every < config.batch_size
            if not (crossed or episode >= budget):
                continue
            record = self._log_round(episode, pending)
            pending = []
            score = record.val_mrr
            if score is None or best_mrr is None or score > best_mrr:
                best_mrr = score
                best = self.model.store.snapshot()
                stale = 0
                continue
            stale += 1
            if stale >= config.patience:
                logger.warning(
                    f"Stopping early at episode {episode}: no validation "
                    f"gain in {stale} rounds."
                )
                stopped_early = True
                break
        self.model.store.restore(best)

        checkpoint = None
        if self.out_dir is not None:
            checkpoint = self.out_dir / "model.ckpt"
            self.model.save(checkpoint, episodes=episode, best_mrr=best_mrr)
        return TrainResult(
            episodes=episode,
            best_mrr=best_mrr,
            history=self.history,
            stopped_early=stopped_early,
            checkpoint=checkpoint,
        )


def tau_sweep(
    bundle: Bundle,
    config: TrainConfig,
    taus: Sequence[float],
    out_dir: Optional[Union[str, Path]] = None,
) -> dict[float, Optional[float]]:
    """Train one model per tau and report each one's best validation MRR."""
    results = {}
    for tau in taus:
        swept = TrainConfig(**{**config.dict(), "tau": tau})
        target = None if out_dir is None else Path(out_dir) / f"tau-{tau}"
        results[tau] = Trainer(bundle, swept, target).run().best_mrr
        logger.info(f"tau {tau}: best validation MRR {results[tau]}.")
    return results
