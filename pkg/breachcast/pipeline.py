"""End-to-end orchestration: encode, train, calibrate, evaluate and sweep the cluster count."""

import dataclasses
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from breachcast import detector, quantizer
from breachcast.bundle import ModelBundle, creation_time
from breachcast.config import PipelineConfig
from breachcast.detector import Thresholds
from breachcast.embedding import EmbeddingProvider, StateCache
from breachcast.errors import DataError, EmptyTrainingSetError
from breachcast.evaluation import EvalReport, aggregate, evaluate_rows, publish_report, write_trace_csv
from breachcast.manifold import EncodedTrajectory, project_batch, step_representations, train_stage1
from breachcast.markov import TransitionModel
from breachcast.monitor import RiskMonitor, context_prompts, step_prompts
from breachcast.neural import DenseNet, projection_head, proactive_head, score_network
from breachcast.proactive import train_binary_baseline, train_stage2
from breachcast.trajectory import Outcome, Trajectory, dump_trajectory

logger = logging.getLogger(__name__)

DEFAULT_SWEEP = (10, 20, 30, 40, 50, 60)


def _cache(provider: Union[EmbeddingProvider, StateCache]) -> StateCache:
    return provider if isinstance(provider, StateCache) else StateCache(provider)


def encode_corpus(trajs: Sequence[Trajectory], provider: Union[EmbeddingProvider, StateCache],
                  config: PipelineConfig = PipelineConfig(), jobs: int = 1) -> List[EncodedTrajectory]:
    """Fetch the step and context states of every trajectory."""
    cache = _cache(provider)

    def encode(traj):
        return EncodedTrajectory(trajectory=traj,
                                 step_inputs=cache.encode_many(step_prompts(traj, config.delta_source)),
                                 context_inputs=cache.encode_many(context_prompts(traj)))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(encode, trajs))


def dataset_hash(trajs: Sequence[Trajectory]) -> str:
    digest = hashlib.sha256()
    for traj in sorted(trajs, key=lambda item: item.id):
        digest.update(traj.id.encode("utf-8"))
        digest.update(dump_trajectory(traj))
    return digest.hexdigest()


def _single_precision(net: Optional[DenseNet]) -> Optional[DenseNet]:
    return net.astype(np.float32).astype(np.float64) if net is not None else None


def train(trajs: Sequence[Trajectory], provider: Union[EmbeddingProvider, StateCache],
          config: PipelineConfig = PipelineConfig(), provider_info: Optional[Dict[str, Any]] = None,
          jobs: int = 1) -> ModelBundle:
    """Train every artifact on ``trajs`` and calibrate the detector on them.

    Weights are rounded to single precision before calibration so a saved and reloaded
    bundle behaves exactly like the returned one.
    """
    config.validate()
    if not trajs:
        raise EmptyTrainingSetError("no training trajectories")
    cache = _cache(provider)
    encoded = encode_corpus(trajs, cache, config, jobs=jobs)
    dim = encoded[0].context_inputs[0].shape[-1]
    token_level = cache.provider.token_level
    logger.info("Training on %d trajectories, state dim %d, %s states", len(trajs), dim,
                "token-level" if token_level else "pre-pooled")

    score_net = projection = None
    if not config.no_triplet:
        score_net = score_network(dim, config.score_hidden, config.seed) if token_level else None
        stage1 = train_stage1(encoded, projection_head(dim, config.projection_hidden, config.causal_dim, config.seed),
                              score_net, lr=config.stage1_lr, batch_size=config.stage1_batch,
                              epochs=config.stage1_epochs, margin=config.margin,
                              random_negative_weight=config.random_negative_weight, seed=config.seed,
                              absolute_states=config.absolute_states)
        score_net = _single_precision(stage1.score_net)
        projection = _single_precision(stage1.projection)

    points = [project_batch(step_representations(item.step_states(score_net), config.absolute_states), projection)
              for item in encoded]
    codebook = quantizer.fit(np.vstack(points), config.n_clusters, seed=config.seed, batch_size=config.kmeans_batch,
                             max_iters=config.kmeans_max_iters, tol=config.kmeans_tol)
    codebook.centroids = codebook.centroids.astype(np.float32).astype(np.float64)
    sequences = [quantizer.quantize_batch(rows, codebook) for rows in points]

    transitions = TransitionModel.empty(config.n_clusters, config.epsilon, config.beta, config.fail_counts_scope)
    for item, sequence in zip(encoded, sequences):
        traj = item.trajectory
        transitions.accumulate(sequence, traj.outcome,
                               traj.annotation.breach_step if traj.annotation is not None else None)

    contexts = np.vstack([item.context_states(score_net) for item in encoded])
    stage2 = train_stage2(contexts, np.concatenate(sequences),
                          proactive_head(dim, config.n_clusters, config.head_hidden, config.seed),
                          lr=config.stage2_lr, batch_size=config.stage2_batch, epochs=config.stage2_epochs,
                          smoothing=config.label_smoothing, seed=config.seed)

    binary_head = None
    if config.binary_baseline:
        labels = np.concatenate([
            [1 if item.trajectory.is_annotated_failure and t == item.trajectory.annotation.breach_step else 0
             for t in range(len(item))] for item in encoded])
        binary_head = train_binary_baseline(contexts, labels, proactive_head(dim, 2, config.head_hidden, config.seed + 1),
                                            lr=config.stage2_lr, batch_size=config.stage2_batch,
                                            epochs=config.stage2_epochs, seed=config.seed).head

    bundle = ModelBundle(
        config=config,
        codebook=codebook,
        transitions=transitions,
        head=_single_precision(stage2.head),
        thresholds=Thresholds(tau_base=0.5, delta_jump=config.jump, tau_max=min(0.5 + config.panic_offset, 1.0)),
        projection=projection,
        score_net=score_net,
        binary_head=_single_precision(binary_head),
        provider=dict(provider_info or {}),
        provenance={
            "seed": config.seed,
            "dataset_hash": dataset_hash(trajs),
            "train_ids": sorted(traj.id for traj in trajs),
            "created": creation_time(),
            "stage2_train_accuracy": stage2.accuracy,
        },
    ).check_consistency()

    return calibrate(bundle, trajs, cache, strategy=config.calibration, p=config.percentile, jump=config.jump,
                     panic_offset=config.panic_offset, static=config.static_threshold, jobs=jobs)


def calibrate(bundle: ModelBundle, trajs: Sequence[Trajectory], provider: Union[EmbeddingProvider, StateCache],
              strategy: str = detector.PERCENTILE, p: float = 85.0, jump: float = 0.15, panic_offset: float = 0.30,
              static: bool = False, jobs: int = 1) -> ModelBundle:
    """Return ``bundle`` with thresholds fitted on the per-turn risks of ``trajs``."""
    cache = _cache(provider)

    def series(traj):
        return RiskMonitor(bundle, cache=cache).risk_series(traj)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        risks = [risk for values in pool.map(series, trajs) for risk in values]
    thresholds = detector.calibrate(risks, strategy=strategy, p=p, jump=jump, panic_offset=panic_offset,
                                    static=static)
    config = bundle.config.replace(calibration=strategy, percentile=p, jump=jump, panic_offset=panic_offset,
                                   static_threshold=static)
    return dataclasses.replace(bundle, config=config, thresholds=thresholds)


def evaluate(bundle: ModelBundle, trajs: Sequence[Trajectory], provider: Union[EmbeddingProvider, StateCache],
             jobs: int = 1, trace_dir: Optional[Union[str, Path]] = None, prefix: Optional[str] = None) -> EvalReport:
    """Evaluate ``trajs`` and publish the report to ``$BREACHCAST_REPORT_FILE`` when set."""
    rows = evaluate_rows(trajs, bundle, cache=_cache(provider), jobs=jobs)
    report = aggregate(rows, prefix=prefix)
    if trace_dir is not None:
        write_trace_csv(report.rows, trace_dir)
    publish_report(report)
    logger.info("Step accuracy %.3f, agent accuracy %.3f over %d failure(s)",
                report.step_accuracy, report.agent_accuracy, report.n)
    return report


@dataclass(frozen=True)
class SweepRow:
    k: int
    step_accuracy: float
    agent_accuracy: float
    mean_eta: float


def sweep_k(train_trajs: Sequence[Trajectory], test_trajs: Sequence[Trajectory],
            provider: Union[EmbeddingProvider, StateCache], config: PipelineConfig = PipelineConfig(),
            ks: Sequence[int] = DEFAULT_SWEEP, jobs: int = 1) -> List[SweepRow]:
    """Train and evaluate once per cluster count; the top-M is capped at K."""
    cache = _cache(provider)
    rows = []
    for k in ks:
        run_config = config.replace(n_clusters=k, top_m=min(config.top_m, k))
        try:
            bundle = train(train_trajs, cache, run_config, jobs=jobs)
        except DataError as exc:
            logger.error("K=%d cannot be trained: %s", k, exc)
            raise
        report = aggregate(evaluate_rows(test_trajs, bundle, cache=cache, jobs=jobs))
        rows.append(SweepRow(k=k, step_accuracy=report.step_accuracy, agent_accuracy=report.agent_accuracy,
                             mean_eta=report.mean_eta))
        logger.info("K=%d: step %.3f, agent %.3f, eta %.3f", k, report.step_accuracy, report.agent_accuracy,
                    report.mean_eta)
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = ["{:>4}  {:>8}  {:>8}  {:>8}".format("K", "step", "agent", "eta")]
    for row in rows:
        lines.append("{:>4}  {:>8.2f}  {:>8.2f}  {:>8.2f}".format(
            row.k, 100 * row.step_accuracy, 100 * row.agent_accuracy, 100 * row.mean_eta))
    return "\n".join(lines)
