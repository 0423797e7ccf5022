"""Labeled synthetic trajectories with a planted breach transition.

A ground-truth Markov chain over ``n_true_clusters`` orthonormal action directions drives
every trajectory. Success trajectories never take the breach transition ``(i -> j)``;
failures take it exactly once, at their annotated breach step. Step states are cumulative
sums of the action directions, so causal deltas recover the directions. The state before
turn ``t`` carries a cue direction identifying ``z_t`` (scaled by ``plan_signal``) plus half
the direction of ``z_{t-1}``. Optional per-agent ``agent_scales`` stretch each step by the
acting agent's factor, a verbosity nuisance that leaves the step direction intact.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from breachcast.embedding import (
    PRE_POOLED,
    TableProvider,
    prompt_key,
    render_extraction_prompt,
    render_history_prompt,
    write_token_states,
)
from breachcast.errors import InvalidConfigError
from breachcast.trajectory import Annotation, Outcome, Trajectory, Turn, dump_trajectory

logger = logging.getLogger(__name__)

AGENT_NAMES = ["Planner", "Researcher", "Coder", "Verifier", "Executor", "Critic"]
VOCABULARY_SIZE = 12
WORDS_PER_TURN = 6


@dataclass(frozen=True)
class GeneratorConfig:
    n_trajectories: int = 1000
    length_range: Tuple[int, int] = (8, 16)
    n_agents: int = 4
    latent_dim: int = 64
    n_true_clusters: int = 8
    failure_rate: float = 0.5
    breach_transition: Tuple[int, int] = (0, 1)
    noise_scale: float = 0.0
    seed: int = 42
    plan_signal: float = 1.0
    text_mode: bool = False
    agent_scales: Optional[Tuple[float, ...]] = None

    def validate(self) -> "GeneratorConfig":
        low, high = self.length_range
        i, j = self.breach_transition
        if self.n_trajectories < 1:
            raise InvalidConfigError("need at least one trajectory")
        if not 2 <= low <= high:
            raise InvalidConfigError("length range must satisfy 2 <= min <= max, got {}".format(self.length_range))
        if self.n_agents < 1:
            raise InvalidConfigError("need at least one agent")
        if self.n_true_clusters < 2:
            raise InvalidConfigError("need at least 2 true clusters")
        if not 0.0 < self.failure_rate < 1.0:
            raise InvalidConfigError("failure rate must lie strictly inside (0, 1)")
        if self.noise_scale < 0.0:
            raise InvalidConfigError("noise scale cannot be negative")
        if i == j or not (0 <= i < self.n_true_clusters and 0 <= j < self.n_true_clusters):
            raise InvalidConfigError("breach transition {} is not a pair of distinct clusters".format(
                self.breach_transition))
        if self.latent_dim < 2 * self.n_true_clusters:
            raise InvalidConfigError("latent dim {} cannot hold {} action and cue directions".format(
                self.latent_dim, 2 * self.n_true_clusters))
        if self.agent_scales is not None:
            if len(self.agent_scales) != self.n_agents:
                raise InvalidConfigError("need one scale per agent, got {} for {} agents".format(
                    len(self.agent_scales), self.n_agents))
            if min(self.agent_scales) <= 0.0:
                raise InvalidConfigError("agent scales must be positive")
        return self


@dataclass
class SyntheticCorpus:
    config: GeneratorConfig
    trajectories: List[Trajectory]
    clusters: Dict[str, Tuple[int, ...]]
    directions: np.ndarray
    cues: np.ndarray
    transition_matrix: np.ndarray
    states: Dict[str, np.ndarray] = field(default_factory=dict)

    def provider(self) -> TableProvider:
        """Pre-pooled provider serving the generated states (empty in text mode)."""
        return TableProvider(self.states, mode=PRE_POOLED)


def agent_name(k: int) -> str:
    return AGENT_NAMES[k] if k < len(AGENT_NAMES) else "Agent{}".format(k)


def _chain(rng, matrix, start, length):
    out = [start]
    while len(out) < length:
        out.append(int(rng.choice(matrix.shape[0], p=matrix[out[-1]])))
    return out


def _cluster_sequence(rng, matrix, length, failed, breach_transition):
    k = matrix.shape[0]
    if not failed:
        return _chain(rng, matrix, int(rng.integers(k)), length), None
    i, j = breach_transition
    breach = int(rng.integers(1, length))
    prefix = _chain(rng, matrix, int(rng.integers(k)), breach - 1) if breach > 1 else []
    sequence = prefix + [i] + _chain(rng, matrix, j, length - breach)
    return sequence, breach


def _content(rng, traj_id, t, cluster, text_mode):
    if text_mode:
        words = rng.integers(VOCABULARY_SIZE, size=WORDS_PER_TURN)
        return " ".join("act{}_{}".format(cluster, w) for w in words)
    return "[{}#{}] carries out the next step".format(traj_id, t)


def generate(config: GeneratorConfig = GeneratorConfig()) -> SyntheticCorpus:
    """Generate a corpus, fully determined by ``config.seed``."""
    config.validate()
    k, dim, sigma = config.n_true_clusters, config.latent_dim, config.noise_scale
    root = np.random.SeedSequence(config.seed)
    global_seq, *traj_seqs = root.spawn(config.n_trajectories + 1)
    rng = np.random.default_rng(global_seq)

    basis, _ = np.linalg.qr(rng.standard_normal((dim, 2 * k)))
    directions, cues = basis[:, :k].T.copy(), basis[:, k:].T.copy()
    matrix = rng.dirichlet(2.0 * np.ones(k), size=k)
    i, j = config.breach_transition
    matrix[i, j] = 0.0
    matrix[i] /= matrix[i].sum()

    corpus = SyntheticCorpus(config=config, trajectories=[], clusters={}, directions=directions, cues=cues,
                             transition_matrix=matrix)
    for n, seq in enumerate(traj_seqs):
        trng = np.random.default_rng(seq)
        traj_id = "syn-{:05d}".format(n)
        length = int(trng.integers(config.length_range[0], config.length_range[1] + 1))
        failed = bool(trng.random() < config.failure_rate)
        z, breach = _cluster_sequence(trng, matrix, length, failed, config.breach_transition)

        task = "Synthetic task {}: coordinate {} agents to reach the goal".format(traj_id, config.n_agents)
        turns = tuple(Turn(index=t, agent=agent_name(t % config.n_agents),
                           content=_content(trng, traj_id, t, z[t], config.text_mode))
                      for t in range(length))
        annotation = Annotation(breach_step=breach, breach_agent=turns[breach].agent) if failed else None
        traj = Trajectory(id=traj_id, task=task, turns=turns,
                          outcome=Outcome.FAILURE if failed else Outcome.SUCCESS, annotation=annotation)
        corpus.trajectories.append(traj)
        corpus.clusters[traj_id] = tuple(z)

        if config.text_mode:
            continue
        steps = directions[z]
        if config.agent_scales is not None:
            steps = steps * np.array([config.agent_scales[t % config.n_agents] for t in range(length)])[:, None]
        step_states = np.cumsum(steps, axis=0) + sigma * trng.standard_normal((length, dim))
        for t in range(length):
            previous = turns[t - 1].content if t else ""
            corpus.states[prompt_key(render_extraction_prompt(task, previous, turns[t].content))] = step_states[t]
        for t in range(length + 1):
            context = 0.5 * directions[z[t - 1]] if t else np.zeros(dim)
            if t < length:
                context = context + config.plan_signal * cues[z[t]]
            context = context + sigma * trng.standard_normal(dim)
            corpus.states[prompt_key(render_history_prompt(task, turns[:t]))] = context

    failures = sum(traj.outcome is Outcome.FAILURE for traj in corpus.trajectories)
    logger.info("Generated %d trajectories (%d failures), %d states", len(corpus.trajectories), failures,
                len(corpus.states))
    return corpus


def write_corpus(corpus: SyntheticCorpus, directory: Union[str, Path]) -> Path:
    """Write ``<id>.json`` per trajectory and ``states/<prompt key>.pmeb`` per state."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for traj in corpus.trajectories:
        (directory / (traj.id + ".json")).write_bytes(dump_trajectory(traj))
    if corpus.states:
        states_dir = directory / "states"
        states_dir.mkdir(exist_ok=True)
        for key, state in sorted(corpus.states.items()):
            write_token_states(state[None, :], states_dir / (key + ".pmeb"))
    logger.info("Wrote %d trajectories to %s", len(corpus.trajectories), directory)
    return directory
