"""Turn-by-turn risk forecasting over a frozen bundle.

A :class:`RiskMonitor` forecasts the risk of the upcoming turn from the dialogue seen so
far, then realizes the turn once it is known. It never looks at a turn before deciding on
it.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from breachcast.bundle import ModelBundle
from breachcast.detector import RiskTrace, TurnRecord, decide
from breachcast.embedding import (
    EmbeddingProvider,
    StateCache,
    pool_state,
    render_extraction_prompt,
    render_history_prompt,
)
from breachcast.errors import EmptyTaskError
from breachcast.manifold import project_batch
from breachcast.proactive import (
    START,
    PredictedDistribution,
    RiskScore,
    binary_risk,
    expected_risk,
    predict_distribution,
)
from breachcast.quantizer import quantize
from breachcast.trajectory import Trajectory, Turn

logger = logging.getLogger(__name__)


def context_prompts(traj: Trajectory) -> List[str]:
    """History prompt preceding every turn."""
    return [render_history_prompt(traj.task, traj.turns[:t]) for t in range(len(traj))]


def step_prompt(task: str, seen: List[Turn], turn: Turn, delta_source: str) -> str:
    if delta_source == "history":
        return render_history_prompt(task, list(seen) + [turn])
    previous = seen[-1].content if seen else ""
    return render_extraction_prompt(task, previous, turn.content)


def step_prompts(traj: Trajectory, delta_source: str = "extraction") -> List[str]:
    return [step_prompt(traj.task, list(traj.turns[:t]), turn, delta_source) for t, turn in enumerate(traj.turns)]


@dataclass(frozen=True)
class Forecast:
    distribution: PredictedDistribution
    risk: float
    score: Optional[RiskScore] = None


class RiskMonitor(object):
    """Streaming forecaster of one dialogue at a time.

    :param bundle: trained artifacts.
    :param provider: embedding provider matching the one used for training.
    :param cache: optional state cache shared with other monitors.
    """

    def __init__(self, bundle: ModelBundle, provider: Optional[EmbeddingProvider] = None,
                 cache: Optional[StateCache] = None):
        if cache is None:
            cache = StateCache(provider)
        self.bundle = bundle
        self.cache = cache
        self.config = bundle.config
        self.task: Optional[str] = None
        self.turns: List[Turn] = []
        self.clusters: List[int] = []
        self.previous_cluster: Optional[int] = START
        self.previous_risk: Optional[float] = None
        self.previous_state: Optional[np.ndarray] = None

    def reset(self, task: str) -> None:
        if not task:
            raise EmptyTaskError("task text is empty")
        self.task = task
        self.turns = []
        self.clusters = []
        self.previous_cluster = START
        self.previous_risk = None
        self.previous_state = None

    def _require_task(self):
        if self.task is None:
            raise EmptyTaskError("no task received yet")

    def _state(self, prompt: str) -> np.ndarray:
        return pool_state(self.cache.encode(prompt), self.bundle.score_net)

    def forecast(self) -> Forecast:
        """Risk of the upcoming turn, from the history seen so far."""
        self._require_task()
        context = self._state(render_history_prompt(self.task, self.turns))
        distribution = predict_distribution(context, self.bundle.head, self.config.top_m)
        if self.config.binary_baseline and self.bundle.binary_head is not None:
            return Forecast(distribution=distribution, risk=binary_risk(context, self.bundle.binary_head))
        score = expected_risk(distribution, self.previous_cluster, self.bundle.transitions)
        return Forecast(distribution=distribution, risk=score.value, score=score)

    def assess(self) -> TurnRecord:
        forecast = self.forecast()
        alert, rule = decide(forecast.risk, self.previous_risk, self.bundle.thresholds)
        velocity = forecast.risk - (self.previous_risk if self.previous_risk is not None else 0.0)
        self.previous_risk = forecast.risk
        return TurnRecord(t=len(self.turns), risk=forecast.risk, velocity=velocity, alert=alert, rule=rule,
                          top_clusters=tuple(forecast.distribution.clusters))

    def observe(self, agent: str, content: str) -> int:
        """Realize the current turn and return its cluster."""
        self._require_task()
        turn = Turn(index=len(self.turns), agent=agent, content=content)
        state = self._state(step_prompt(self.task, self.turns, turn, self.config.delta_source))
        if self.config.absolute_states or self.previous_state is None:
            representation = state
        else:
            representation = state - self.previous_state
        point = project_batch(representation[None, :], self.bundle.projection)[0]
        cluster = quantize(point, self.bundle.codebook)

        self.turns.append(turn)
        self.clusters.append(cluster)
        self.previous_state = state
        self.previous_cluster = cluster
        return cluster

    def run(self, traj: Trajectory, halt_on_alert: bool = True) -> RiskTrace:
        """Replay a trajectory; with ``halt_on_alert`` nothing after the first alert is read."""
        self.reset(traj.task)
        trace = RiskTrace()
        for turn in traj.turns:
            record = self.assess()
            trace.records.append(record)
            if record.alert and halt_on_alert:
                logger.debug("%s: alert at turn %d (%s rule)", traj.id, record.t, record.rule)
                break
            self.observe(turn.agent, turn.content)
        return trace

    def risk_series(self, traj: Trajectory) -> List[float]:
        return self.run(traj, halt_on_alert=False).risks
