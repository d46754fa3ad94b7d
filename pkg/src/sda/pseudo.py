"""Pseudo labels for unlabeled target features: k-means, DBSCAN, and the unified label space."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NOISE = -1


@dataclass(frozen=True)
class PseudoLabeling:
    assignment: np.ndarray  # cluster id per sample, NOISE for outliers
    num_clusters: int
    epoch: int = 0

    def __post_init__(self):
        a = self.assignment
        ids = np.unique(a[a != NOISE])
        if not np.array_equal(ids, np.arange(self.num_clusters)):
            raise ValueError("cluster ids must be contiguous from 0 and non-empty")

    @property
    def num_noise(self) -> int:
        return int((self.assignment == NOISE).sum())


@dataclass(frozen=True)
class UnifiedLabels:
    num_source: int
    num_target: int
    labels: np.ndarray  # unified label per target sample, NOISE where excluded
    excluded: int

    @property
    def num_classes(self) -> int:
        return self.num_source + self.num_target

    @property
    def degenerate(self) -> bool:
        return self.num_target == 0


def sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _relabel(assign: np.ndarray) -> tuple[np.ndarray, int]:
    """Renumber non-noise ids by first appearance."""
    out = np.full_like(assign, NOISE)
    mapping: dict[int, int] = {}
    for i, a in enumerate(assign):
        if a == NOISE:
            continue
        if a not in mapping:
            mapping[a] = len(mapping)
        out[i] = mapping[a]
    return out, len(mapping)


def kmeans_objective(x: np.ndarray, assign: np.ndarray, centroids: np.ndarray) -> float:
    return float(((x - centroids[assign]) ** 2).sum())


def kmeans(features: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
           history: list | None = None) -> PseudoLabeling:
    """k-means++ seeding followed by Lloyd iterations until the assignment stops changing.

    ``history``, if given, receives the objective after every Lloyd iteration.
    """
    x = np.asarray(features, dtype=float)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k-means needs 1 <= k <= N, got k={k}, N={n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = sq_dists(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            i = int(rng.integers(n))
        else:
            i = int(rng.choice(n, p=closest / total))
        centroids[j] = x[i]
        closest = np.minimum(closest, sq_dists(x, centroids[j:j + 1])[:, 0])

    assign = np.argmin(sq_dists(x, centroids), axis=1)
    for _ in range(max_iter):
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                # re-seed from the point farthest from its current centroid
                far = int(np.argmax(((x - centroids[assign]) ** 2).sum(1)))
                centroids[j] = x[far]
                assign[far] = j
        if history is not None:
            history.append(kmeans_objective(x, assign, centroids))
        new = np.argmin(sq_dists(x, centroids), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    out, m = _relabel(assign)
    return PseudoLabeling(out, m)


def dbscan(features: np.ndarray, eps: float, min_pts: int = 4) -> PseudoLabeling:
    """Density clustering; clusters grow in index order and border points keep their first cluster."""
    if eps <= 0 or min_pts < 1:
        raise ValueError("dbscan needs eps > 0 and min_pts >= 1")
    x = np.asarray(features, dtype=float)
    n = len(x)
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))
    neighbors = [np.flatnonzero(d[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors], dtype=bool)
    assign = np.full(n, NOISE)
    cluster = 0
    for i in range(n):
        if assign[i] != NOISE or not core[i]:
            continue
        assign[i] = cluster
        queue = [i]
        while queue:
            j = queue.pop(0)
            if not core[j]:
                continue
            for q in neighbors[j]:
                if assign[q] == NOISE:
                    assign[q] = cluster
                    queue.append(q)
        cluster += 1
    return PseudoLabeling(assign, cluster)


def estimate_eps(features: np.ndarray, quantile: float = 0.02, seed: int = 0,
                 max_points: int = 1000) -> float:
    """The ``quantile`` of pairwise distances over a seeded subsample of at most ``max_points`` rows."""
    x = np.asarray(features, dtype=float)
    if len(x) > max_points:
        x = x[np.sort(np.random.default_rng(seed).choice(len(x), max_points, replace=False))]
    if len(x) < 2:
        raise ValueError("need at least two points to estimate eps")
    iu = np.triu_indices(len(x), k=1)
    d = np.sqrt(sq_dists(x, x))[iu]
    eps = float(np.quantile(d, quantile))
    if eps <= 0:
        raise ValueError("estimated eps is 0: features are (nearly) identical")
    return eps


def build_unified_labels(num_source: int, labeling: PseudoLabeling) -> UnifiedLabels:
    """Source identity i keeps label i; target cluster j becomes num_source + j."""
    if labeling.num_clusters == 0:
        log.warning("all target samples are noise; classifier covers source identities only")
    a = labeling.assignment
    labels = np.where(a == NOISE, NOISE, a + num_source)
    return UnifiedLabels(num_source, labeling.num_clusters, labels, labeling.num_noise)
