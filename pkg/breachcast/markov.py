"""First-order transition counts over prototype sequences and smoothed failure likelihoods."""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from breachcast.errors import IndexOutOfRangeError, InvalidConfigError
from breachcast.trajectory import Outcome

SCOPE_ALL = "all"
SCOPE_POST_BREACH = "post-breach"


@dataclass
class TransitionModel:
    """Failure/success transition and start counts.

    ``likelihood(i, j) = (fail[i, j] + epsilon) / (fail[i, j] + succ[i, j] + beta)``, so unseen
    transitions sit at ``epsilon / beta``.
    """

    fail_counts: np.ndarray
    succ_counts: np.ndarray
    fail_start: np.ndarray
    succ_start: np.ndarray
    epsilon: float = 1.0
    beta: float = 2.0
    scope: str = SCOPE_ALL

    @classmethod
    def empty(cls, n_clusters: int, epsilon: float = 1.0, beta: float = 2.0, scope: str = SCOPE_ALL):
        if n_clusters < 1:
            raise InvalidConfigError("need at least one cluster")
        if not 0.0 < epsilon < beta:
            raise InvalidConfigError("smoothing priors need 0 < epsilon < beta, got {} and {}".format(epsilon, beta))
        if scope not in (SCOPE_ALL, SCOPE_POST_BREACH):
            raise InvalidConfigError("unknown failure count scope " + scope)
        return cls(fail_counts=np.zeros((n_clusters, n_clusters), dtype=np.int64),
                   succ_counts=np.zeros((n_clusters, n_clusters), dtype=np.int64),
                   fail_start=np.zeros(n_clusters, dtype=np.int64),
                   succ_start=np.zeros(n_clusters, dtype=np.int64),
                   epsilon=epsilon, beta=beta, scope=scope)

    @property
    def n_clusters(self) -> int:
        return self.fail_counts.shape[0]

    def _check(self, *indices):
        for index in indices:
            if not 0 <= index < self.n_clusters:
                raise IndexOutOfRangeError("cluster {} outside [0, {})".format(index, self.n_clusters))

    def accumulate(self, sequence: Sequence[int], outcome: Outcome, breach_step: Optional[int] = None):
        """Count one trajectory's cluster sequence.

        With the ``post-breach`` scope a failure only counts transitions landing at or after
        ``breach_step`` as failure transitions; earlier ones, the start included, count as
        success transitions.
        """
        if len(sequence) == 0:
            raise IndexOutOfRangeError("empty cluster sequence")
        self._check(*sequence)
        failed = outcome is Outcome.FAILURE

        def as_failure(t):
            if failed and self.scope == SCOPE_POST_BREACH and breach_step is not None:
                return t >= breach_step
            return failed

        starts = self.fail_start if as_failure(0) else self.succ_start
        starts[sequence[0]] += 1
        for t in range(1, len(sequence)):
            counts = self.fail_counts if as_failure(t) else self.succ_counts
            counts[sequence[t - 1], sequence[t]] += 1
        return self

    def merge(self, other: "TransitionModel") -> "TransitionModel":
        if other.n_clusters != self.n_clusters:
            raise IndexOutOfRangeError("cannot merge models over {} and {} clusters".format(
                self.n_clusters, other.n_clusters))
        self.fail_counts += other.fail_counts
        self.succ_counts += other.succ_counts
        self.fail_start += other.fail_start
        self.succ_start += other.succ_start
        return self

    def _smooth(self, fail, succ):
        return (fail + self.epsilon) / (fail + succ + self.beta)

    def likelihood(self, i: int, j: int) -> float:
        self._check(i, j)
        return float(self._smooth(self.fail_counts[i, j], self.succ_counts[i, j]))

    def start_likelihood(self, j: int) -> float:
        self._check(j)
        return float(self._smooth(self.fail_start[j], self.succ_start[j]))

    def likelihood_matrix(self) -> np.ndarray:
        return self._smooth(self.fail_counts.astype(np.float64), self.succ_counts)

    def start_vector(self) -> np.ndarray:
        return self._smooth(self.fail_start.astype(np.float64), self.succ_start)

    def row(self, previous: Optional[int]) -> np.ndarray:
        """Likelihoods of every next cluster after ``previous``; ``None`` is the dialogue start."""
        if previous is None:
            return self.start_vector()
        self._check(previous)
        return self._smooth(self.fail_counts[previous].astype(np.float64), self.succ_counts[previous])
