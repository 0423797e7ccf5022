"""Breach-localization metrics.

Headline metrics are computed over annotated failures only. A missed detection counts
with information fraction 1. Success trajectories contribute the false-alarm rate.
"""

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from breachcast.bundle import ModelBundle
from breachcast.detector import TurnRecord
from breachcast.embedding import EmbeddingProvider, StateCache
from breachcast.errors import EmptyRowsError, UnannotatedTrajectoryError
from breachcast.monitor import RiskMonitor
from breachcast.trajectory import Outcome, Trajectory, normalize_agent

logger = logging.getLogger(__name__)

REPORT_ENV = "BREACHCAST_REPORT_FILE"
ETA_NOTE = "mean eta includes missed detections, counted as eta = 1.0"


@dataclass(frozen=True)
class EvalRow:
    id: str
    outcome: str
    length: int
    alert_step: Optional[int]
    breach_step: Optional[int] = None
    breach_agent: Optional[str] = None
    alert_agent: Optional[str] = None
    step_hit: bool = False
    agent_hit: bool = False
    eta: float = 1.0
    trace: Tuple[TurnRecord, ...] = field(default=(), compare=False, repr=False)

    @property
    def is_failure(self) -> bool:
        return self.outcome == Outcome.FAILURE.value

    def to_dict(self) -> Dict:
        out = asdict(self)
        del out["trace"]
        return out


def score_alert(traj: Trajectory, alert_step: Optional[int], trace: Sequence[TurnRecord] = ()) -> EvalRow:
    """Score an alert step against the trajectory annotation."""
    alert_agent = traj.turns[alert_step].agent if alert_step is not None else None
    if traj.outcome is Outcome.SUCCESS:
        return EvalRow(id=traj.id, outcome=traj.outcome.value, length=len(traj), alert_step=alert_step,
                       alert_agent=alert_agent, trace=tuple(trace))
    if traj.annotation is None:
        raise UnannotatedTrajectoryError("{} is a failure without annotation".format(traj.id))

    ann = traj.annotation
    return EvalRow(
        id=traj.id,
        outcome=traj.outcome.value,
        length=len(traj),
        alert_step=alert_step,
        breach_step=ann.breach_step,
        breach_agent=ann.breach_agent,
        alert_agent=alert_agent,
        step_hit=alert_step == ann.breach_step,
        agent_hit=alert_agent is not None and normalize_agent(alert_agent) == normalize_agent(ann.breach_agent),
        eta=(alert_step + 1) / len(traj) if alert_step is not None else 1.0,
        trace=tuple(trace),
    )


def evaluate_trajectory(traj: Trajectory, bundle: ModelBundle, provider: Optional[EmbeddingProvider] = None,
                        cache: Optional[StateCache] = None) -> EvalRow:
    """Run the proactive loop over one trajectory and score its first alert.

    Failures need a breach annotation; successes are scored for false alarms.
    """
    if traj.outcome is Outcome.FAILURE and not traj.is_annotated_failure:
        raise UnannotatedTrajectoryError("{} has no breach annotation".format(traj.id))
    trace = RiskMonitor(bundle, provider, cache).run(traj)
    return score_alert(traj, trace.alert_step, trace.records)


def evaluate_rows(trajs: Sequence[Trajectory], bundle: ModelBundle, provider: Optional[EmbeddingProvider] = None,
                  cache: Optional[StateCache] = None, jobs: int = 1) -> List[EvalRow]:
    """Evaluate trajectories concurrently; rows come back ordered by id.

    Success trajectories are replayed for false alarms, unannotated failures are skipped.
    """
    cache = cache if cache is not None else StateCache(provider)
    usable = [traj for traj in trajs if traj.outcome is Outcome.SUCCESS or traj.is_annotated_failure]
    skipped = len(trajs) - len(usable)
    if skipped:
        logger.warning("Skipping %d failure(s) without breach annotation", skipped)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        rows = list(pool.map(lambda traj: evaluate_trajectory(traj, bundle, cache=cache), usable))
    return sorted(rows, key=lambda row: row.id)


@dataclass
class EvalReport:
    n: int
    step_accuracy: float
    agent_accuracy: float
    early_rate: float
    late_rate: float
    missed_rate: float
    mean_eta: float
    n_success: int = 0
    false_alarm_rate: Optional[float] = None
    rows: List[EvalRow] = field(default_factory=list)
    note: str = ETA_NOTE

    def to_dict(self, include_rows: bool = True) -> Dict:
        out = {key: value for key, value in asdict(self).items() if key != "rows"}
        if include_rows:
            out["rows"] = [row.to_dict() for row in self.rows]
        return out

    def to_json(self, include_rows: bool = True) -> str:
        return json.dumps(self.to_dict(include_rows), indent=2, sort_keys=True)

    def to_table(self) -> str:
        cells = [
            ("trajectories", str(self.n)),
            ("step accuracy", "{:.2f}".format(100 * self.step_accuracy)),
            ("agent accuracy", "{:.2f}".format(100 * self.agent_accuracy)),
            ("early warning", "{:.2f}".format(100 * self.early_rate)),
            ("late", "{:.2f}".format(100 * self.late_rate)),
            ("missed", "{:.2f}".format(100 * self.missed_rate)),
            ("mean eta", "{:.2f}".format(100 * self.mean_eta)),
        ]
        if self.false_alarm_rate is not None:
            cells.append(("false alarms", "{:.2f} ({} successes)".format(100 * self.false_alarm_rate, self.n_success)))
        width = max(len(name) for name, _ in cells)
        lines = ["{}  {}".format(name.ljust(width), value) for name, value in cells]
        lines.append("# " + self.note)
        return "\n".join(lines)


def aggregate(rows: Sequence[EvalRow], prefix: Optional[str] = None) -> EvalReport:
    """Combine per-trajectory rows; ``prefix`` keeps only ids starting with it."""
    if prefix is not None:
        rows = [row for row in rows if row.id.startswith(prefix)]
    if not rows:
        raise EmptyRowsError("no evaluation rows" + (" with prefix " + prefix if prefix else ""))
    rows = sorted(rows, key=lambda row: row.id)
    failures = [row for row in rows if row.is_failure]
    successes = [row for row in rows if not row.is_failure]

    def rate(predicate):
        return float(np.mean([predicate(row) for row in failures])) if failures else 0.0

    return EvalReport(
        n=len(failures),
        step_accuracy=rate(lambda row: row.step_hit),
        agent_accuracy=rate(lambda row: row.agent_hit),
        early_rate=rate(lambda row: row.alert_step is not None and row.alert_step < row.breach_step),
        late_rate=rate(lambda row: row.alert_step is not None and row.alert_step > row.breach_step),
        missed_rate=rate(lambda row: row.alert_step is None),
        mean_eta=float(np.mean([row.eta for row in failures])) if failures else 0.0,
        n_success=len(successes),
        false_alarm_rate=float(np.mean([row.alert_step is not None for row in successes])) if successes else None,
        rows=list(rows),
    )


# ==============================================================================================================
# random detector

@dataclass
class BaselineReport:
    analytic: EvalReport
    monte_carlo: EvalReport
    trials: int
    step_stderr: float


def random_baseline(trajs: Sequence[Trajectory], seed: int = 42, trials: int = 1000) -> BaselineReport:
    """A detector alerting at a uniformly drawn turn: exact expectations next to a Monte-Carlo estimate."""
    failures = [traj for traj in trajs if traj.is_annotated_failure]
    if not failures:
        raise EmptyRowsError("the random baseline needs annotated failures")

    rng = np.random.default_rng(seed)
    exact = {"step": [], "agent": [], "early": [], "late": [], "eta": []}
    drawn = {"step": [], "agent": [], "early": [], "late": [], "eta": []}
    for traj in failures:
        length = len(traj)
        breach = traj.annotation.breach_step
        by_breach_agent = np.array([normalize_agent(turn.agent) == normalize_agent(traj.annotation.breach_agent)
                                    for turn in traj.turns])
        exact["step"].append(1.0 / length)
        exact["agent"].append(by_breach_agent.mean())
        exact["early"].append(breach / length)
        exact["late"].append((length - 1 - breach) / length)
        exact["eta"].append((length + 1) / (2.0 * length))

        steps = rng.integers(0, length, size=trials)
        drawn["step"].append(np.mean(steps == breach))
        drawn["agent"].append(np.mean(by_breach_agent[steps]))
        drawn["early"].append(np.mean(steps < breach))
        drawn["late"].append(np.mean(steps > breach))
        drawn["eta"].append(np.mean((steps + 1) / length))

    def report(values):
        return EvalReport(n=len(failures), step_accuracy=float(np.mean(values["step"])),
                          agent_accuracy=float(np.mean(values["agent"])), early_rate=float(np.mean(values["early"])),
                          late_rate=float(np.mean(values["late"])), missed_rate=0.0,
                          mean_eta=float(np.mean(values["eta"])))

    p = np.asarray(exact["step"])
    stderr = float(np.sqrt(np.sum(p * (1.0 - p)) / trials) / len(failures))
    return BaselineReport(analytic=report(exact), monte_carlo=report(drawn), trials=trials, step_stderr=stderr)


# ==============================================================================================================
# output

def write_trace_csv(rows: Sequence[EvalRow], directory: Union[str, Path]) -> List[Path]:
    """One ``<id>.csv`` per row with columns t, risk, velocity, alert, rule."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for row in rows:
        path = directory / (row.id + ".csv")
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", "risk", "velocity", "alert", "rule"])
            for record in row.trace:
                writer.writerow([record.t, repr(record.risk), repr(record.velocity), int(record.alert), record.rule])
        paths.append(path)
    return paths


def publish_report(report: EvalReport) -> Optional[Path]:
    """Write the report to ``$BREACHCAST_REPORT_FILE`` when the variable is set."""
    target = os.getenv(REPORT_ENV)
    if not target:
        return None
    path = Path(target)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json(), encoding="utf-8")
    logger.debug("Published evaluation report to %s", path)
    return path
