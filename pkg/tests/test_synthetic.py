import numpy as np
import pytest

from breachcast.embedding import FileProvider, TOKEN_LEVEL, prompt_key
from breachcast.errors import InvalidConfigError
from breachcast.manifold import causal_delta
from breachcast.monitor import context_prompts, step_prompts
from breachcast.synthetic import AGENT_NAMES, GeneratorConfig, generate, write_corpus
from breachcast.trajectory import Outcome, load_dataset


def pairs(sequence):
    return list(zip(sequence, sequence[1:]))


def test_failure_count():
    corpus = generate(GeneratorConfig(n_trajectories=1000, seed=42))
    failures = [traj for traj in corpus.trajectories if traj.outcome is Outcome.FAILURE]
    assert 400 <= len(failures) <= 600
    assert all(traj.is_annotated_failure for traj in failures)
    assert all(8 <= len(traj) <= 16 for traj in corpus.trajectories)


def test_breach_transition_occurs_once():
    config = GeneratorConfig(n_trajectories=200, breach_transition=(2, 5), seed=7)
    corpus = generate(config)
    for traj in corpus.trajectories:
        sequence = list(corpus.clusters[traj.id])
        hits = [t + 1 for t, pair in enumerate(pairs(sequence)) if pair == (2, 5)]
        if traj.outcome is Outcome.FAILURE:
            assert hits == [traj.annotation.breach_step]
            assert traj.annotation.breach_agent == traj.turns[traj.annotation.breach_step].agent
        else:
            assert hits == []


def test_breach_transition_is_forbidden_in_the_chain():
    corpus = generate(GeneratorConfig(n_trajectories=5, breach_transition=(3, 1)))
    assert corpus.transition_matrix[3, 1] == 0.0
    np.testing.assert_allclose(corpus.transition_matrix.sum(axis=1), 1.0)


def test_noiseless_deltas_recover_directions():
    corpus = generate(GeneratorConfig(n_trajectories=20, noise_scale=0.0))
    provider = corpus.provider()
    for traj in corpus.trajectories:
        states = [provider.encode(prompt) for prompt in step_prompts(traj)]
        expected = corpus.directions[list(corpus.clusters[traj.id])]
        np.testing.assert_allclose(causal_delta(states), expected, atol=1e-9)


def test_agent_scales_stretch_steps():
    scales = (0.25, 0.5, 2.0, 4.0)
    corpus = generate(GeneratorConfig(n_trajectories=10, noise_scale=0.0, agent_scales=scales))
    provider = corpus.provider()
    for traj in corpus.trajectories:
        states = [provider.encode(prompt) for prompt in step_prompts(traj)]
        factors = np.array([scales[t % 4] for t in range(len(traj))])[:, None]
        expected = factors * corpus.directions[list(corpus.clusters[traj.id])]
        np.testing.assert_allclose(causal_delta(states), expected, atol=1e-9)
    assert corpus.clusters == generate(GeneratorConfig(n_trajectories=10)).clusters


def test_directions_and_cues_are_orthonormal():
    corpus = generate(GeneratorConfig(n_trajectories=2))
    basis = np.vstack([corpus.directions, corpus.cues])
    np.testing.assert_allclose(basis @ basis.T, np.eye(16), atol=1e-9)


def test_every_prompt_has_a_state():
    corpus = generate(GeneratorConfig(n_trajectories=10, noise_scale=0.1))
    for traj in corpus.trajectories:
        for prompt in step_prompts(traj) + context_prompts(traj):
            assert prompt_key(prompt) in corpus.states


def test_deterministic():
    config = GeneratorConfig(n_trajectories=30, noise_scale=0.2, seed=9)
    first, second = generate(config), generate(config)
    assert first.trajectories == second.trajectories
    assert first.clusters == second.clusters
    assert sorted(first.states) == sorted(second.states)
    for key, state in first.states.items():
        assert state.tobytes() == second.states[key].tobytes()
    assert generate(GeneratorConfig(n_trajectories=30, seed=10)).clusters != first.clusters


def test_agents_rotate():
    corpus = generate(GeneratorConfig(n_trajectories=3, n_agents=3))
    traj = corpus.trajectories[0]
    assert [turn.agent for turn in traj.turns[:4]] == [AGENT_NAMES[0], AGENT_NAMES[1], AGENT_NAMES[2], AGENT_NAMES[0]]


@pytest.mark.parametrize("overrides", [
    {"n_trajectories": 0},
    {"length_range": (1, 4)},
    {"length_range": (9, 8)},
    {"n_agents": 0},
    {"n_true_clusters": 1},
    {"failure_rate": 1.0},
    {"noise_scale": -0.1},
    {"breach_transition": (2, 2)},
    {"breach_transition": (0, 8)},
    {"latent_dim": 10},
    {"agent_scales": (1.0, 2.0)},
    {"agent_scales": (1.0, 2.0, 0.0, 1.0)},
])
def test_invalid_config(overrides):
    with pytest.raises(InvalidConfigError):
        generate(GeneratorConfig(**overrides))


def test_write_corpus(tmp_path):
    corpus = generate(GeneratorConfig(n_trajectories=6, noise_scale=0.1))
    write_corpus(corpus, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded == sorted(corpus.trajectories, key=lambda traj: traj.id)

    provider = FileProvider(tmp_path / "states")
    for prompt in step_prompts(loaded[0])[:3]:
        state = corpus.states[prompt_key(prompt)]
        np.testing.assert_array_equal(provider.encode(prompt), state.astype(np.float32))


def test_text_mode():
    corpus = generate(GeneratorConfig(n_trajectories=5, text_mode=True))
    assert corpus.states == {}
    for traj in corpus.trajectories:
        for turn, cluster in zip(traj.turns, corpus.clusters[traj.id]):
            words = turn.content.split()
            assert len(words) == 6
            assert all(word.startswith("act{}_".format(cluster)) for word in words)


def test_text_mode_files_have_no_states(tmp_path):
    write_corpus(generate(GeneratorConfig(n_trajectories=2, text_mode=True)), tmp_path)
    assert not (tmp_path / "states").exists()
    with pytest.raises(InvalidConfigError):
        FileProvider(tmp_path / "states", mode=TOKEN_LEVEL)


if __name__ == "__main__":
    test_failure_count()
    test_breach_transition_occurs_once()
