"""Next-prototype prediction and the expected transition risk built on it.

The binary breach classifier used as an ablation baseline lives here as well.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from breachcast.errors import (
    DimensionMismatchError,
    EmptyTrainingSetError,
    IndexOutOfRangeError,
    InvalidConfigError,
    SingleClassCorpusError,
)
from breachcast.markov import TransitionModel
from breachcast.neural import AdamState, DenseNet, adam_step, softmax, softmax_cross_entropy

logger = logging.getLogger(__name__)

START = None


@dataclass(frozen=True)
class PredictedDistribution:
    probs: np.ndarray
    top_m: Tuple[Tuple[int, float], ...]

    @property
    def clusters(self) -> List[int]:
        return [k for k, _ in self.top_m]


@dataclass(frozen=True)
class RiskScore:
    value: float
    components: Tuple[Tuple[int, float, float], ...]  # (cluster, renormalized prob, likelihood)


def top_m_distribution(probs: np.ndarray, m: int) -> PredictedDistribution:
    """Keep the ``m`` most probable clusters (lower index first on ties) and renormalize them."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 1 <= m <= probs.shape[0]:
        raise InvalidConfigError("top-M must lie in [1, {}], got {}".format(probs.shape[0], m))
    order = np.lexsort((np.arange(probs.shape[0]), -probs))[:m]
    selected = probs[order]
    weights = selected / selected.sum()
    return PredictedDistribution(probs=probs, top_m=tuple((int(k), float(w)) for k, w in zip(order, weights)))


def predict_distribution(context_state: np.ndarray, head: DenseNet, m: int = 5) -> PredictedDistribution:
    return top_m_distribution(softmax(head.forward(np.asarray(context_state, dtype=np.float64))), m)


def expected_risk(dist: PredictedDistribution, prev_cluster: Optional[int], model: TransitionModel) -> RiskScore:
    """Likelihood of the upcoming transition averaged over the Top-M prediction.

    :param prev_cluster: cluster of the previous turn, or :data:`START` before the first turn.
    """
    if dist.probs.shape[0] != model.n_clusters:
        raise IndexOutOfRangeError("distribution over {} clusters for a model over {}".format(
            dist.probs.shape[0], model.n_clusters))
    row = model.row(prev_cluster)
    components = tuple((k, w, float(row[k])) for k, w in dist.top_m)
    return RiskScore(value=sum(w * lam for _, w, lam in components), components=components)


# ==============================================================================================================
# training

@dataclass
class HeadTraining:
    head: DenseNet
    loss: float
    accuracy: float
    loss_history: List[float] = field(default_factory=list)


def _check_training_set(contexts: np.ndarray, targets: np.ndarray, head: DenseNet):
    if len(targets) == 0:
        raise EmptyTrainingSetError("no training pairs")
    if contexts.ndim != 2 or contexts.shape[0] != len(targets):
        raise DimensionMismatchError("{} contexts for {} targets".format(contexts.shape[0], len(targets)))
    if np.any(targets < 0) or np.any(targets >= head.output_dim):
        raise IndexOutOfRangeError("targets outside the {} head outputs".format(head.output_dim))


def _fit_head(contexts, targets, head, lr, batch_size, epochs, smoothing, seed, sample_weights, label):
    head = head.copy()
    params = head.params()
    state = AdamState.for_params(params, learning_rate=lr)
    rng = np.random.default_rng(seed)
    weights = np.ones(len(targets)) if sample_weights is None else sample_weights
    history = []

    for epoch in range(epochs):
        order = rng.permutation(len(targets))
        total = 0.0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            logits, cache = head.forward_train(contexts[chunk])
            loss, d_logits = softmax_cross_entropy(logits, targets[chunk], smoothing, weights[chunk])
            grads, _ = head.backward(cache, d_logits)
            adam_step(params, grads, state)
            total += loss * len(chunk)
        history.append(total / len(targets))
        logger.info("%s epoch %d/%d: loss %.4f", label, epoch + 1, epochs, history[-1])

    logits = head.forward(contexts)
    loss, _ = softmax_cross_entropy(logits, targets, smoothing, weights)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == targets))
    return HeadTraining(head=head, loss=loss, accuracy=accuracy, loss_history=history)


def train_stage2(contexts: np.ndarray, targets: np.ndarray, head: DenseNet, lr: float = 1e-3, batch_size: int = 32,
                 epochs: int = 15, smoothing: float = 0.1, seed: int = 42) -> HeadTraining:
    """Train the proactive head on (context state before turn t, cluster of turn t) pairs.

    Targets are the realized cluster sequence, not rollouts of the head itself.
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    _check_training_set(contexts, targets, head)
    result = _fit_head(contexts, targets, head, lr, batch_size, epochs, smoothing, seed, None, "Stage 2")
    logger.info("Proactive head: train loss %.4f, top-1 accuracy %.3f", result.loss, result.accuracy)
    return result


def train_binary_baseline(contexts: np.ndarray, labels: np.ndarray, head: DenseNet, lr: float = 1e-3,
                          batch_size: int = 32, epochs: int = 15, seed: int = 42) -> HeadTraining:
    """Two-way breach classifier with inverse class-frequency weights.

    :param labels: 1 at the breach step of a failure, 0 elsewhere.
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if head.output_dim != 2:
        raise DimensionMismatchError("the binary baseline needs 2 outputs, got {}".format(head.output_dim))
    _check_training_set(contexts, labels, head)
    frequency = np.bincount(labels, minlength=2)
    if np.any(frequency == 0):
        raise SingleClassCorpusError("all {} labels belong to one class".format(len(labels)))
    class_weights = len(labels) / (2.0 * frequency)
    result = _fit_head(contexts, labels, head, lr, batch_size, epochs, 0.0, seed, class_weights[labels], "Binary head")
    logger.info("Binary head: train loss %.4f, accuracy %.3f", result.loss, result.accuracy)
    return result


def binary_risk(context_state: np.ndarray, head: DenseNet) -> float:
    return float(softmax(head.forward(np.asarray(context_state, dtype=np.float64)))[1])
