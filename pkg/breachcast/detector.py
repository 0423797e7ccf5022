"""Threshold calibration and risk-jump detection over a risk series."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from breachcast.errors import InvalidConfigError, TooFewSamplesError

logger = logging.getLogger(__name__)

PERCENTILE = "percentile"
KMEANS2 = "kmeans2"

RULE_JUMP = "jump"
RULE_PANIC = "panic"
RULE_STATIC = "static"
RULE_NONE = "none"

MIN_CALIBRATION_SAMPLES = 10
BASE_CEILING = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class Thresholds:
    tau_base: float
    delta_jump: float = 0.15
    tau_max: Optional[float] = None
    strategy: str = PERCENTILE
    percentile: float = 85.0
    static: bool = False
    samples: int = 0

    def __post_init__(self):
        if self.tau_max is None:
            object.__setattr__(self, "tau_max", min(self.tau_base + 0.30, 1.0))
        if self.delta_jump <= 0.0:
            raise InvalidConfigError("jump threshold must be positive")
        if self.tau_max <= self.tau_base:
            raise InvalidConfigError("panic threshold {} not above base {}".format(self.tau_max, self.tau_base))
        if self.strategy not in (PERCENTILE, KMEANS2):
            raise InvalidConfigError("unknown calibration strategy " + self.strategy)


@dataclass(frozen=True)
class TurnRecord:
    t: int
    risk: float
    velocity: float
    alert: bool
    rule: str
    top_clusters: Tuple[int, ...] = ()


@dataclass
class RiskTrace:
    records: List[TurnRecord] = field(default_factory=list)

    @property
    def alert_step(self) -> Optional[int]:
        for record in self.records:
            if record.alert:
                return record.t
        return None

    @property
    def risks(self) -> List[float]:
        return [record.risk for record in self.records]


def nearest_rank(values: Sequence[float], p: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(p * len(ordered) / 100.0))
    return float(ordered[rank - 1])


def two_means(values: Sequence[float], max_iters: int = 100) -> Tuple[float, float]:
    """1-D 2-means started from the extremes; returns (low center, high center)."""
    data = np.asarray(values, dtype=np.float64)
    low, high = float(data.min()), float(data.max())
    for _ in range(max_iters):
        upper = np.abs(data - high) < np.abs(data - low)
        new_low = float(data[~upper].mean()) if np.any(~upper) else low
        new_high = float(data[upper].mean()) if np.any(upper) else high
        if new_low == low and new_high == high:
            break
        low, high = new_low, new_high
    return low, high


def calibrate(training_risks: Sequence[float], strategy: str = PERCENTILE, p: float = 85.0, jump: float = 0.15,
              panic_offset: float = 0.30, static: bool = False) -> Thresholds:
    """Derive thresholds from the per-turn risks of training trajectories.

    :param strategy: ``percentile`` (nearest-rank ``p``-th percentile) or ``kmeans2``
        (midpoint of the two 1-D cluster centers).
    :param panic_offset: distance of the panic threshold above the base, capped at 1.
    """
    if len(training_risks) < MIN_CALIBRATION_SAMPLES:
        raise TooFewSamplesError("calibration needs {} risks, got {}".format(
            MIN_CALIBRATION_SAMPLES, len(training_risks)))
    if strategy == PERCENTILE:
        tau_base = nearest_rank(training_risks, p)
    elif strategy == KMEANS2:
        low, high = two_means(training_risks)
        tau_base = (low + high) / 2.0
    else:
        raise InvalidConfigError("unknown calibration strategy " + strategy)
    # the panic threshold is capped at 1 and must stay above the base
    tau_base = min(tau_base, BASE_CEILING)

    th = Thresholds(tau_base=tau_base, delta_jump=jump, tau_max=min(tau_base + panic_offset, 1.0),
                    strategy=strategy, percentile=p, static=static, samples=len(training_risks))
    logger.info("Calibrated %s thresholds on %d risks: base %.4f, panic %.4f",
                strategy, th.samples, th.tau_base, th.tau_max)
    return th


def decide(risk: float, previous: Optional[float], th: Thresholds) -> Tuple[bool, str]:
    """Alert decision for one turn; a missing predecessor counts as risk 0."""
    velocity = risk - (previous if previous is not None else 0.0)
    if th.static:
        return (True, RULE_STATIC) if risk > th.tau_base else (False, RULE_NONE)
    if risk > th.tau_max:
        return True, RULE_PANIC
    if risk > th.tau_base and velocity > th.delta_jump:
        return True, RULE_JUMP
    return False, RULE_NONE


def locate_breach(risks: Sequence[float], th: Thresholds, previous: Optional[float] = None) -> RiskTrace:
    """Full decision trace of a risk series; its ``alert_step`` is the first alerting turn.

    :param previous: risk preceding ``risks[0]`` when continuing an earlier stream.
    """
    trace = RiskTrace()
    for t, risk in enumerate(risks):
        alert, rule = decide(risk, previous, th)
        trace.records.append(TurnRecord(t=t, risk=float(risk),
                                        velocity=float(risk - (previous if previous is not None else 0.0)),
                                        alert=alert, rule=rule))
        previous = risk
    return trace
