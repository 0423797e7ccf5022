"""Multi-agent reasoning trajectories and their breach annotations."""

import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from breachcast.errors import (
    AgentMismatchError,
    AnnotationOutOfRangeError,
    DatasetLoadError,
    EmptyDatasetError,
    InvalidConfigError,
    MalformedDocumentError,
    TooFewTrajectoriesError,
)

logger = logging.getLogger(__name__)


class Outcome(enum.Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"


@dataclass(frozen=True)
class Turn:
    index: int
    agent: str
    content: str


@dataclass(frozen=True)
class Annotation:
    breach_step: int
    breach_agent: str


@dataclass(frozen=True)
class Trajectory:
    id: str
    task: str
    turns: Tuple[Turn, ...]
    outcome: Outcome
    annotation: Optional[Annotation] = None

    def __len__(self):
        return len(self.turns)

    @property
    def is_annotated_failure(self) -> bool:
        return self.outcome is Outcome.FAILURE and self.annotation is not None


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[str, ...]
    test: Tuple[str, ...]
    seed: int


def normalize_agent(name: str) -> str:
    return " ".join(name.split()).casefold()


def _first_field(item: dict, names: Sequence[str], position: int):
    for name in names:
        if name in item:
            return item[name]
    raise MalformedDocumentError("history[{}] lacks any of {}".format(position, "/".join(names)))


def load_trajectory(raw_json: Union[bytes, str], traj_id: str = "", step_index_base: int = 0) -> Trajectory:
    """Parse one trajectory document.

    Unknown fields are ignored, so variants of the benchmark schema load as long as
    ``question`` and ``history`` are present.

    :param raw_json: UTF-8 encoded JSON document.
    :param traj_id: identifier of the trajectory, usually the file stem.
    :param step_index_base: base of ``mistake_step`` in the source document (0 or 1).
    """
    if step_index_base not in (0, 1):
        raise InvalidConfigError("step index base must be 0 or 1, got {}".format(step_index_base))

    try:
        doc = json.loads(raw_json)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedDocumentError("invalid JSON: {}".format(exc)) from exc

    if not isinstance(doc, dict):
        raise MalformedDocumentError("top level must be an object")
    if not isinstance(doc.get("question"), str):
        raise MalformedDocumentError("field 'question' missing or not a string")
    history = doc.get("history")
    if not isinstance(history, list):
        raise MalformedDocumentError("field 'history' missing or not an array")

    turns = []
    for position, item in enumerate(history):
        if not isinstance(item, dict):
            raise MalformedDocumentError("history[{}] is not an object".format(position))
        agent = _first_field(item, ("name", "agent"), position)
        content = _first_field(item, ("content", "text"), position)
        if not isinstance(agent, str) or not agent.strip():
            raise MalformedDocumentError("history[{}] has an empty agent".format(position))
        if not isinstance(content, str):
            raise MalformedDocumentError("history[{}] content is not a string".format(position))
        turns.append(Turn(index=position, agent=agent, content=content))

    annotation = None
    outcome = Outcome.SUCCESS
    if doc.get("mistake_step") is not None:
        raw_step = doc["mistake_step"]
        try:
            if isinstance(raw_step, bool):
                raise ValueError(raw_step)
            step = int(str(raw_step).strip()) - step_index_base
        except ValueError as exc:
            raise MalformedDocumentError("mistake_step {!r} is not an integer".format(raw_step)) from exc
        if step < 0 or step >= len(turns):
            raise AnnotationOutOfRangeError(
                "mistake_step {} outside a trajectory of {} turns".format(step, len(turns)))

        agent = doc.get("mistake_agent")
        if agent is None:
            agent = turns[step].agent
        if not isinstance(agent, str):
            raise MalformedDocumentError("mistake_agent is not a string")
        if normalize_agent(agent) != normalize_agent(turns[step].agent):
            raise AgentMismatchError("mistake_agent {!r} but turn {} is acted by {!r}".format(
                agent, step, turns[step].agent))

        annotation = Annotation(breach_step=step, breach_agent=agent)
        outcome = Outcome.FAILURE

    return Trajectory(id=traj_id, task=doc["question"], turns=tuple(turns), outcome=outcome, annotation=annotation)


def dump_trajectory(traj: Trajectory, step_index_base: int = 0) -> bytes:
    doc = {
        "question": traj.task,
        "history": [{"name": turn.agent, "content": turn.content} for turn in traj.turns],
    }
    if traj.annotation is not None:
        doc["mistake_step"] = traj.annotation.breach_step + step_index_base
        doc["mistake_agent"] = traj.annotation.breach_agent
    return json.dumps(doc, ensure_ascii=False, indent=1).encode("utf-8")


def _load_file(path: Path, step_index_base: int) -> Trajectory:
    return load_trajectory(path.read_bytes(), traj_id=path.stem, step_index_base=step_index_base)


def load_dataset(dir_path: Union[str, Path], step_index_base: int = 0, jobs: int = 1) -> List[Trajectory]:
    """Load every ``*.json`` trajectory of a directory, sorted by id.

    :param dir_path: directory holding one trajectory per file.
    :param step_index_base: forwarded to :func:`load_trajectory`.
    :param jobs: number of files parsed concurrently.
    """
    files = sorted(Path(dir_path).glob("*.json"))
    if not files:
        raise EmptyDatasetError("no *.json trajectories in {}".format(dir_path))

    def parse(path):
        try:
            return path, _load_file(path, step_index_base), None
        except (OSError, MalformedDocumentError, AnnotationOutOfRangeError, AgentMismatchError) as exc:
            return path, None, exc

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(parse, files))

    failures: Dict[str, Exception] = {}
    trajectories = []
    for path, traj, err in results:
        if err is not None:
            logger.error("Cannot load %s: %s", path.name, err)
            failures[path.name] = err
        else:
            trajectories.append(traj)
    if failures:
        raise DatasetLoadError(failures)

    trajectories.sort(key=lambda traj: traj.id)
    logger.info("Loaded %d trajectories from %s", len(trajectories), dir_path)
    return trajectories


def split_dataset(trajs: Sequence[Trajectory], train_fraction: float = 0.20, seed: int = 42) -> DatasetSplit:
    """Partition trajectories (whole files, never turns) into train and test ids."""
    if len(trajs) < 2:
        raise TooFewTrajectoriesError("need at least 2 trajectories to split, got {}".format(len(trajs)))
    if not 0.0 < train_fraction < 1.0:
        raise InvalidConfigError("train fraction must lie in (0, 1), got {}".format(train_fraction))

    ids = sorted(traj.id for traj in trajs)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = min(max(1, math.ceil(train_fraction * len(ids))), len(ids) - 1)
    return DatasetSplit(train=tuple(shuffled[:n_train]), test=tuple(shuffled[n_train:]), seed=seed)


def select(trajs: Sequence[Trajectory], ids: Sequence[str]) -> List[Trajectory]:
    wanted = set(ids)
    return [traj for traj in trajs if traj.id in wanted]
