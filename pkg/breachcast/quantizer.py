"""Mini-batch K-means over the causal space.

Centroids are fitted with per-centroid learning rates ``1 / count`` on random mini-batches,
then polished by full-batch Lloyd iterations. Centroids are not renormalized.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from breachcast.errors import DimensionMismatchError, TooFewPointsError

logger = logging.getLogger(__name__)

_CHUNK_ELEMENTS = 1 << 22


@dataclass
class Codebook:
    centroids: np.ndarray
    inertia_history: List[float] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ``|p - c|^2`` for every point/centroid pair, computed in chunks."""
    k, dim = centroids.shape
    step = max(1, _CHUNK_ELEMENTS // max(1, k * dim))
    out = np.empty((points.shape[0], k))
    for start in range(0, points.shape[0], step):
        diff = points[start:start + step, None, :] - centroids[None, :, :]
        out[start:start + step] = (diff * diff).sum(axis=2)
    return out


def assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid of every point (lowest index on ties) and its squared distance."""
    d2 = squared_distances(points, centroids)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def _check_points(points: np.ndarray, n_clusters: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionMismatchError("points must form a matrix, got shape {}".format(points.shape))
    if n_clusters < 1:
        raise TooFewPointsError("need at least one cluster")
    distinct = np.unique(points, axis=0).shape[0] if points.shape[0] else 0
    if distinct < n_clusters:
        raise TooFewPointsError("{} distinct points for {} clusters".format(distinct, n_clusters))
    return points


def _plus_plus(points: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(points.shape[0]))]
    d2 = squared_distances(points, points[chosen[0]][None, :])[:, 0]
    for _ in range(1, n_clusters):
        idx = int(rng.choice(points.shape[0], p=d2 / d2.sum()))
        chosen.append(idx)
        d2 = np.minimum(d2, squared_distances(points, points[idx][None, :])[:, 0])
    return points[chosen].copy()


def kmeans_pp_init(points: np.ndarray, n_clusters: int, seed: int = 42) -> np.ndarray:
    """k-means++ seeding: each next centroid is a point drawn with probability proportional to D^2."""
    points = _check_points(points, n_clusters)
    return _plus_plus(points, n_clusters, np.random.default_rng(seed))


def fill_empty_clusters(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Move empty centroids onto the farthest point, in place, until every cluster has a member.

    A re-seed can empty another cluster, so the scan repeats.
    """
    labels, d2 = assign(points, centroids)
    for _ in range(points.shape[0] * centroids.shape[0]):
        empty = np.setdiff1d(np.arange(centroids.shape[0]), labels)
        if empty.size == 0:
            return labels
        k, far = int(empty[0]), int(np.argmax(d2))
        logger.warning("Cluster %d is empty, re-seeding it at point %d", k, far)
        centroids[k] = points[far]
        labels, d2 = assign(points, centroids)
    raise TooFewPointsError("cannot give each of {} clusters a member".format(centroids.shape[0]))


def fit(points: np.ndarray, n_clusters: int, seed: int = 42, batch_size: int = 256, max_iters: int = 200,
        tol: float = 1e-4) -> Codebook:
    """Fit ``n_clusters`` centroids.

    :param points: one row per projected delta.
    :param batch_size: mini-batch size of the stochastic phase.
    :param max_iters: iteration cap of the stochastic phase and of the refinement.
    :param tol: the stochastic phase stops once no centroid moves more than this.
    """
    points = _check_points(points, n_clusters)
    n = points.shape[0]
    rng = np.random.default_rng(seed)
    centroids = _plus_plus(points, n_clusters, rng)
    counts = np.zeros(n_clusters)

    for iteration in range(max_iters):
        sample = points[rng.choice(n, size=min(batch_size, n), replace=False)]
        labels, _ = assign(sample, centroids)
        previous = centroids.copy()
        for row, label in zip(sample, labels):
            counts[label] += 1
            eta = 1.0 / counts[label]
            centroids[label] = (1.0 - eta) * centroids[label] + eta * row
        shift = float(np.sqrt(((centroids - previous) ** 2).sum(axis=1)).max())
        if shift < tol:
            logger.debug("Mini-batch phase converged after %d iteration(s)", iteration + 1)
            break

    fill_empty_clusters(points, centroids)

    history = []
    previous_labels = None
    for _ in range(max_iters):
        labels, d2 = assign(points, centroids)
        history.append(float(d2.sum()))
        if previous_labels is not None and np.array_equal(labels, previous_labels):
            break
        for k in range(n_clusters):
            members = points[labels == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
        previous_labels = labels

    logger.info("Fitted %d centroids on %d points, inertia %.4f", n_clusters, n, history[-1])
    return Codebook(centroids=centroids, inertia_history=history)


def quantize(projected: np.ndarray, codebook: Codebook) -> int:
    """Index of the nearest centroid, lowest index on ties."""
    v = np.asarray(projected, dtype=np.float64)
    if v.shape != (codebook.dim,):
        raise DimensionMismatchError("vector of shape {} for centroids of dim {}".format(v.shape, codebook.dim))
    diff = codebook.centroids - v
    return int(np.argmin((diff * diff).sum(axis=1)))


def quantize_batch(rows: np.ndarray, codebook: Codebook) -> np.ndarray:
    rows = np.atleast_2d(rows)
    if rows.shape[1] != codebook.dim:
        raise DimensionMismatchError("rows of width {} for centroids of dim {}".format(rows.shape[1], codebook.dim))
    return assign(rows, codebook.centroids)[0]
