import math

import numpy as np
import pytest

from breachcast.errors import EmptyTrainingSetError, IndexOutOfRangeError, InvalidConfigError, SingleClassCorpusError
from breachcast.markov import TransitionModel
from breachcast.neural import Dense, DenseNet, proactive_head, softmax
from breachcast.proactive import (
    START,
    PredictedDistribution,
    binary_risk,
    expected_risk,
    predict_distribution,
    top_m_distribution,
    train_binary_baseline,
    train_stage2,
)


def test_uniform_ties_prefer_low_index():
    dist = predict_distribution(np.ones(2), DenseNet([Dense(np.zeros((3, 2)), np.zeros(3))]), m=2)
    np.testing.assert_allclose(dist.probs, [1 / 3] * 3)
    assert dist.clusters == [0, 1]
    assert [w for _, w in dist.top_m] == pytest.approx([0.5, 0.5])


def test_full_set_keeps_probabilities():
    probs = np.array([0.1, 0.6, 0.3])
    dist = top_m_distribution(probs, 3)
    assert dist.clusters == [1, 2, 0]
    assert [w for _, w in dist.top_m] == pytest.approx([0.6, 0.3, 0.1])


def test_renormalized_top_two():
    dist = top_m_distribution(np.array([0.5, 0.3, 0.2]), 2)
    assert dist.clusters == [0, 1]
    assert [w for _, w in dist.top_m] == pytest.approx([0.625, 0.375])


def test_top_m_range():
    with pytest.raises(InvalidConfigError):
        top_m_distribution(np.array([0.5, 0.5]), 3)
    with pytest.raises(InvalidConfigError):
        top_m_distribution(np.array([0.5, 0.5]), 0)


def test_expected_risk_closed_form():
    dist = PredictedDistribution(probs=np.array([0.5, 0.3, 0.2]), top_m=((0, 0.625), (1, 0.375)))
    model = TransitionModel.empty(3)
    # (f + 1) / (f + s + 2): 0.1 from (0, 8), 0.8 from (7, 1)
    model.succ_counts[2, 0] = 8
    model.fail_counts[2, 1], model.succ_counts[2, 1] = 7, 1
    risk = expected_risk(dist, 2, model)
    assert risk.value == pytest.approx(0.625 * 0.1 + 0.375 * 0.8)
    assert risk.value == pytest.approx(0.3625)
    assert [c[2] for c in risk.components] == pytest.approx([0.1, 0.8])


def test_expected_risk_constant_row():
    model = TransitionModel.empty(4)
    model.fail_counts[1] = 3
    model.succ_counts[1] = 3
    for probs in ([0.7, 0.1, 0.1, 0.1], [0.25] * 4):
        assert expected_risk(top_m_distribution(np.array(probs), 3), 1, model).value == pytest.approx(0.5)


def test_expected_risk_zero_counts():
    model = TransitionModel.empty(5)
    dist = top_m_distribution(softmax(np.random.default_rng(0).standard_normal(5)), 3)
    assert expected_risk(dist, START, model).value == pytest.approx(0.5)
    assert expected_risk(dist, 4, model).value == pytest.approx(0.5)


def test_expected_risk_uses_start_counts():
    model = TransitionModel.empty(2)
    model.fail_start[1] = 5
    dist = top_m_distribution(np.array([0.0, 1.0]), 1)
    assert expected_risk(dist, START, model).value == pytest.approx(6 / 7)


def test_expected_risk_errors():
    dist = top_m_distribution(np.array([0.5, 0.5]), 1)
    with pytest.raises(IndexOutOfRangeError):
        expected_risk(dist, 0, TransitionModel.empty(3))
    with pytest.raises(IndexOutOfRangeError):
        expected_risk(dist, 2, TransitionModel.empty(2))


def test_risk_probability_invariants():
    rng = np.random.default_rng(3)
    for _ in range(10000):
        k = int(rng.integers(2, 12))
        m = int(rng.integers(1, k + 1))
        dist = top_m_distribution(rng.dirichlet(np.ones(k)), m)
        assert abs(sum(w for _, w in dist.top_m) - 1.0) <= 1e-9
        row = rng.uniform(0.01, 0.99, size=k)
        value = sum(w * row[c] for c, w in dist.top_m)
        selected = row[dist.clusters]
        assert selected.min() - 1e-12 <= value <= selected.max() + 1e-12


def test_top_one_survives_logit_scaling():
    rng = np.random.default_rng(4)
    for _ in range(100):
        logits = rng.standard_normal(8)
        assert top_m_distribution(softmax(logits), 1).clusters == top_m_distribution(softmax(3.5 * logits), 1).clusters


def separable_contexts(seed, n=600, k=4, dim=8):
    rng = np.random.default_rng(seed)
    prototypes = 3.0 * np.eye(dim)[:k]
    targets = rng.integers(0, k, size=n)
    return prototypes[targets] + 0.3 * rng.standard_normal((n, dim)), targets


def test_stage2_beats_chance():
    contexts, targets = separable_contexts(0)
    result = train_stage2(contexts, targets, proactive_head(8, 4, 32, seed=0), epochs=5)
    assert len(result.loss_history) == 5
    held_out, truth = separable_contexts(1, n=200)
    accuracy = np.mean(np.argmax(result.head.forward(held_out), axis=1) == truth)
    assert accuracy > 1 / 4
    assert result.accuracy > 1 / 4


def test_stage2_untrained_loss_near_log_k():
    rng = np.random.default_rng(0)
    contexts = rng.standard_normal((300, 64))
    targets = np.arange(300) % 30
    result = train_stage2(contexts, targets, proactive_head(64, 30, seed=42), epochs=0)
    assert result.loss == pytest.approx(math.log(30), rel=0.10)


def test_stage2_deterministic():
    contexts, targets = separable_contexts(0, n=100)
    head = proactive_head(8, 4, 16, seed=1)
    first = train_stage2(contexts, targets, head, epochs=2, seed=3)
    second = train_stage2(contexts, targets, head, epochs=2, seed=3)
    for p, q in zip(first.head.params(), second.head.params()):
        assert p.tobytes() == q.tobytes()


def test_stage2_empty():
    with pytest.raises(EmptyTrainingSetError):
        train_stage2(np.zeros((0, 8)), np.zeros(0, dtype=int), proactive_head(8, 4, 16))


# the head standardizes its input, so the classes differ in shape rather than in mean
SHIFT = np.array([3.0, -3.0, 0.0, 0.0, 0.0, 0.0])


def test_binary_baseline():
    rng = np.random.default_rng(2)
    labels = (rng.random(400) < 0.1).astype(int)
    contexts = rng.standard_normal((400, 6)) + labels[:, None] * SHIFT
    result = train_binary_baseline(contexts, labels, proactive_head(6, 2, 16, seed=0), epochs=10)
    probs = softmax(result.head.forward(contexts))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    held_labels = np.repeat([0, 1], 50)
    held = np.random.default_rng(3).standard_normal((100, 6)) + held_labels[:, None] * SHIFT
    predicted = np.array([binary_risk(c, result.head) > 0.5 for c in held])
    assert np.mean(predicted == held_labels) > 0.5


def test_binary_baseline_single_class():
    with pytest.raises(SingleClassCorpusError):
        train_binary_baseline(np.zeros((5, 3)), np.zeros(5, dtype=int), proactive_head(3, 2, 4))

