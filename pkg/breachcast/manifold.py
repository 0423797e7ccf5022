"""Causal deltas and the contrastive training of the projection into the causal space."""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from breachcast.embedding import attention_pool_backward, attention_pool_train, pool_state
from breachcast.errors import (
    DimensionMismatchError,
    EmptyListError,
    InsufficientFailuresError,
    NoSuccessDeltasError,
    ZeroOutputError,
)
from breachcast.neural import (
    AdamState,
    DenseNet,
    adam_step,
    l2_normalize,
    l2_normalize_backward,
    triplet_loss_batch,
)
from breachcast.trajectory import Outcome, Trajectory

logger = logging.getLogger(__name__)

HARD = "hard"
RANDOM = "random"
MIN_OUTPUT_NORM = 1e-12


@dataclass
class EncodedTrajectory:
    """A trajectory with the provider outputs it needs.

    ``step_inputs[t]`` encodes turn ``t`` itself; ``context_inputs[t]`` encodes the
    dialogue before turn ``t``. Entries are token-state matrices or pooled vectors.
    """

    trajectory: Trajectory
    step_inputs: List[np.ndarray]
    context_inputs: List[np.ndarray]

    def __len__(self):
        return len(self.trajectory)

    def step_states(self, score_net: Optional[DenseNet] = None) -> np.ndarray:
        return np.stack([pool_state(state, score_net) for state in self.step_inputs])

    def context_states(self, score_net: Optional[DenseNet] = None) -> np.ndarray:
        return np.stack([pool_state(state, score_net) for state in self.context_inputs])


def causal_delta(states: Sequence[np.ndarray]) -> np.ndarray:
    """``[s0, s1 - s0, s2 - s1, ...]`` as rows of an array."""
    if len(states) == 0:
        raise EmptyListError("no states to difference")
    if len({np.shape(state) for state in states}) != 1:
        raise DimensionMismatchError("states of different dimensions")
    stacked = np.asarray(np.stack(states), dtype=np.float64)
    deltas = stacked.copy()
    deltas[1:] -= stacked[:-1]
    return deltas


def step_representations(states: np.ndarray, absolute_states: bool = False) -> np.ndarray:
    """What the projection consumes: deltas, or the raw states for the absolute-state ablation."""
    return np.array(states, dtype=np.float64) if absolute_states else causal_delta(list(states))


def project_batch(rows: np.ndarray, projection: Optional[DenseNet]) -> np.ndarray:
    """Map representations into the causal space; ``None`` keeps them raw."""
    rows = np.atleast_2d(rows)
    if projection is None:
        return rows
    if projection.input_dim != rows.shape[1]:
        raise DimensionMismatchError("projection expects {} features, got {}".format(
            projection.input_dim, rows.shape[1]))
    unit, norms = l2_normalize(projection.forward(rows))
    if np.any(norms < MIN_OUTPUT_NORM):
        raise ZeroOutputError("projection output vanished before normalization")
    return unit


def project(delta: np.ndarray, projection: DenseNet) -> np.ndarray:
    return project_batch(np.asarray(delta)[None, :], projection)[0]


# ==============================================================================================================
# triplet mining

@dataclass(frozen=True)
class StepRef:
    trajectory: int
    step: int


@dataclass
class TripletBatch:
    anchors: List[StepRef] = field(default_factory=list)
    positives: List[StepRef] = field(default_factory=list)
    negatives: List[StepRef] = field(default_factory=list)
    negative_kinds: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.anchors)

    def subset(self, indices: Sequence[int]) -> "TripletBatch":
        return TripletBatch(anchors=[self.anchors[i] for i in indices],
                            positives=[self.positives[i] for i in indices],
                            negatives=[self.negatives[i] for i in indices],
                            negative_kinds=[self.negative_kinds[i] for i in indices])


def mine_triplets(corpus: Sequence[Trajectory], seed: int = 42, random_negative_weight: float = 0.5) -> TripletBatch:
    """One triplet per annotated failure, anchored at its breach-step delta.

    :param corpus: trajectories, referenced by position in the returned batch.
    :param random_negative_weight: probability of a random negative drawn from the success deltas
        instead of the hard negative (the delta just before the breach).
    """
    failures = [i for i, traj in enumerate(corpus) if traj.is_annotated_failure]
    if len(failures) < 2:
        raise InsufficientFailuresError("triplet mining needs 2 annotated failures, got {}".format(len(failures)))
    success_refs = [StepRef(i, t) for i, traj in enumerate(corpus) if traj.outcome is Outcome.SUCCESS
                    for t in range(len(traj))]

    rng = np.random.default_rng(seed)
    batch = TripletBatch()
    for i in failures:
        breach = corpus[i].annotation.breach_step
        others = [j for j in failures if j != i]
        j = others[int(rng.integers(len(others)))]
        use_random = rng.random() < random_negative_weight or breach == 0

        if use_random:
            if not success_refs:
                raise NoSuccessDeltasError("a random negative is needed but the corpus has no success deltas")
            negative, kind = success_refs[int(rng.integers(len(success_refs)))], RANDOM
        else:
            negative, kind = StepRef(i, breach - 1), HARD

        batch.anchors.append(StepRef(i, breach))
        batch.positives.append(StepRef(j, corpus[j].annotation.breach_step))
        batch.negatives.append(negative)
        batch.negative_kinds.append(kind)

    early = sum(1 for i in failures if corpus[i].annotation.breach_step == 0)
    if early:
        logger.warning("%d failure(s) breach at turn 0 and get random negatives only", early)
    return batch


# ==============================================================================================================
# stage 1

def triplet_objective(corpus: Sequence[EncodedTrajectory], batch: TripletBatch, projection: DenseNet,
                      score_net: Optional[DenseNet] = None, margin: float = 1.0, absolute_states: bool = False):
    """Mean triplet loss of ``batch`` and its gradients, score-net parameters first."""
    refs = batch.anchors + batch.positives + batch.negatives
    needed = set()
    for ref in refs:
        needed.add((ref.trajectory, ref.step))
        if not absolute_states and ref.step > 0:
            needed.add((ref.trajectory, ref.step - 1))

    pooled: Dict[Tuple[int, int], np.ndarray] = {}
    caches = {}
    for key in sorted(needed):
        state = corpus[key[0]].step_inputs[key[1]]
        if state.ndim == 2:
            pooled[key], caches[key] = attention_pool_train(state, score_net)
        else:
            pooled[key], caches[key] = state, None

    def representation(ref):
        current = pooled[(ref.trajectory, ref.step)]
        if absolute_states or ref.step == 0:
            return current
        return current - pooled[(ref.trajectory, ref.step - 1)]

    rows = np.stack([representation(ref) for ref in refs])
    out, net_cache = projection.forward_train(rows)
    unit, norms = l2_normalize(out)
    if np.any(norms < MIN_OUTPUT_NORM):
        raise ZeroOutputError("projection output vanished before normalization")

    n = len(batch)
    loss, d_a, d_p, d_n = triplet_loss_batch(unit[:n], unit[n:2 * n], unit[2 * n:], margin)
    d_out = l2_normalize_backward(unit, norms, np.vstack([d_a, d_p, d_n]))
    projection_grads, d_rows = projection.backward(net_cache, d_out)

    score_grads = []
    if score_net is not None:
        score_grads = [np.zeros_like(p) for p in score_net.params()]
        d_pooled = defaultdict(lambda: 0.0)
        for ref, d_row in zip(refs, d_rows):
            d_pooled[(ref.trajectory, ref.step)] = d_pooled[(ref.trajectory, ref.step)] + d_row
            if not absolute_states and ref.step > 0:
                d_pooled[(ref.trajectory, ref.step - 1)] = d_pooled[(ref.trajectory, ref.step - 1)] - d_row
        for key in sorted(d_pooled):
            if caches[key] is None:
                continue
            for acc, grad in zip(score_grads, attention_pool_backward(score_net, caches[key], d_pooled[key])):
                acc += grad
    return loss, score_grads + projection_grads


@dataclass
class Stage1Result:
    projection: DenseNet
    score_net: Optional[DenseNet]
    loss_history: List[float]


def train_stage1(corpus: Sequence[EncodedTrajectory], projection: DenseNet, score_net: Optional[DenseNet] = None,
                 lr: float = 1e-4, batch_size: int = 32, epochs: int = 15, margin: float = 1.0,
                 random_negative_weight: float = 0.5, seed: int = 42,
                 absolute_states: bool = False) -> Stage1Result:
    """Jointly train the attention scorer and the projection head on mined triplets.

    Triplets are re-mined every epoch with a seed drawn from ``seed``. The networks passed
    in are left untouched; trained copies are returned.
    """
    trajectories = [item.trajectory for item in corpus]
    mine_triplets(trajectories, seed=seed, random_negative_weight=random_negative_weight)

    projection = projection.copy()
    score_net = score_net.copy() if score_net is not None else None
    params = (score_net.params() if score_net is not None else []) + projection.params()
    state = AdamState.for_params(params, learning_rate=lr)
    rng = np.random.default_rng(seed)

    history = []
    for epoch in range(epochs):
        batch = mine_triplets(trajectories, seed=int(rng.integers(1 << 31)),
                              random_negative_weight=random_negative_weight)
        order = rng.permutation(len(batch))
        total = 0.0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            loss, grads = triplet_objective(corpus, batch.subset(chunk), projection, score_net,
                                            margin=margin, absolute_states=absolute_states)
            adam_step(params, grads, state)
            total += loss * len(chunk)
        history.append(total / len(batch))
        logger.info("Stage 1 epoch %d/%d: triplet loss %.4f", epoch + 1, epochs, history[-1])

    return Stage1Result(projection=projection, score_net=score_net, loss_history=history)
