"""
Macrostate discovery: KMeans over estimated conditional distributions,
plus the local-vs-global covariate profiles of each macrostate
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.cluster import kmeans_plusplus
from sklearn.metrics import adjusted_rand_score

from config import DEFAULT_RESTARTS, KMEANS_MAX_ITER, KMEANS_SHIFT_TOL
from data_model import Dataset
from density import CondDistMatrix
from errors import ClusteringError, SchemaError

logger = logging.getLogger(__name__)

# Relative slack when asserting the objective never increases
OBJECTIVE_SLACK = 1e-10

Features = Union[CondDistMatrix, np.ndarray]


@dataclass(frozen=True, eq=False)
class Partition:
    """Cluster label per row (0..K-1); centroids are set for KMeans partitions"""

    labels: np.ndarray
    K: int
    centroids: Optional[np.ndarray] = None
    inertia: Optional[float] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if self.K < 1:
            raise ClusteringError("a partition needs at least one cluster")
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise ClusteringError(f"labels must lie in 0..{self.K - 1}")
        sizes = np.bincount(labels, minlength=self.K)
        if (sizes == 0).any():
            raise ClusteringError(f"empty cluster(s): {np.flatnonzero(sizes == 0).tolist()}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.centroids is not None:
            centroids = np.array(self.centroids, dtype=float)
            centroids.setflags(write=False)
            object.__setattr__(self, "centroids", centroids)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"row": np.arange(self.n), "label": self.labels})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.K,
            "sizes": self.sizes().tolist(),
            "inertia": self.inertia,
            "centroids": None if self.centroids is None else self.centroids.tolist(),
        }


def _as_matrix(features: Features) -> np.ndarray:
    values = features.values if isinstance(features, CondDistMatrix) else features
    X = np.asarray(values, dtype=float)
    if X.ndim != 2:
        raise ClusteringError("cluster features must be a 2-D matrix")
    return X


def _sq_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(axis=1)[:, None] - 2.0 * X @ centroids.T + (centroids * centroids).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def _reseed_empty(X: np.ndarray, labels: np.ndarray, dist: np.ndarray, K: int) -> np.ndarray:
    """Hand each empty cluster the farthest point of a cluster that can spare one"""
    labels = labels.copy()
    point_dist = dist.copy()
    for k in range(K):
        if np.any(labels == k):
            continue
        sizes = np.bincount(labels, minlength=K)
        donors = sizes[labels] > 1
        candidates = np.where(donors, point_dist, -np.inf)
        idx = int(np.argmax(candidates))
        logger.debug("Cluster %d empty; re-seeded at row %d", k, idx)
        labels[idx] = k
        point_dist[idx] = 0.0
    return labels


def _lloyd(X: np.ndarray, K: int, seed: int, restart: int) -> Tuple[float, np.ndarray, np.ndarray, int]:
    rng = np.random.default_rng([seed, restart])
    centroids, _ = kmeans_plusplus(X, n_clusters=K, random_state=int(rng.integers(2**31 - 1)))

    previous = np.inf
    labels = np.zeros(X.shape[0], dtype=np.int64)
    iterations = 0
    for iterations in range(1, KMEANS_MAX_ITER + 1):
        dist = _sq_distances(X, centroids)
        labels = np.argmin(dist, axis=1)
        point_dist = dist[np.arange(X.shape[0]), labels]
        objective = float(point_dist.sum())
        assert objective <= previous * (1.0 + OBJECTIVE_SLACK) + OBJECTIVE_SLACK, (
            f"k-means objective increased from {previous} to {objective}"
        )
        previous = objective

        if np.bincount(labels, minlength=K).min() == 0:
            labels = _reseed_empty(X, labels, point_dist, K)

        updated = np.vstack([X[labels == k].mean(axis=0) for k in range(K)])
        shift = float(np.max(np.abs(updated - centroids)))
        centroids = updated
        if shift < KMEANS_SHIFT_TOL:
            break

    inertia = float(((X - centroids[labels]) ** 2).sum())
    return inertia, labels, centroids, iterations


def kmeans_fit(
    features: Features,
    K: int,
    seed: int,
    restarts: int = DEFAULT_RESTARTS,
    n_jobs: int = 1,
) -> Partition:
    """k-means++ seeded Lloyd iterations, best of `restarts` by within-cluster sum of squares

    Restart i draws from its own stream derived from (seed, i), so the result
    does not depend on `n_jobs`. Ties go to the lowest restart index.
    """
    X = _as_matrix(features)
    n = X.shape[0]
    if K < 1 or K > n:
        raise ClusteringError(f"K must lie in 1..{n}, got {K}")
    if restarts < 1:
        raise ClusteringError(f"restarts must be >= 1, got {restarts}")

    runs = Parallel(n_jobs=n_jobs)(delayed(_lloyd)(X, K, seed, i) for i in range(restarts))
    best = min(range(restarts), key=lambda i: (runs[i][0], i))
    inertia, labels, centroids, iterations = runs[best]
    logger.info(
        "KMeans K=%d: best of %d restart(s) is #%d, inertia %.6g after %d iteration(s)",
        K, restarts, best, inertia, iterations,
    )
    return Partition(labels, K, centroids, inertia)


def objective_table(
    features: Features,
    ks: Sequence[int],
    seed: int,
    restarts: int = DEFAULT_RESTARTS,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """Within-cluster sum of squares for each K; reported, never used to pick K"""
    rows = []
    for K in ks:
        p = kmeans_fit(features, K, seed, restarts, n_jobs)
        rows.append({"K": K, "inertia": p.inertia})
    return pd.DataFrame(rows, columns=["K", "inertia"])


def adjusted_rand_index(a: Union[Partition, np.ndarray], b: Union[Partition, np.ndarray]) -> float:
    """Label-permutation-invariant agreement between two partitions of the same rows"""
    la = a.labels if isinstance(a, Partition) else np.asarray(a)
    lb = b.labels if isinstance(b, Partition) else np.asarray(b)
    if la.shape != lb.shape:
        raise ClusteringError("partitions cover different row sets")
    return float(adjusted_rand_score(la, lb))


@dataclass(frozen=True, eq=False)
class ClusterProfile:
    local_means: pd.DataFrame
    global_means: pd.Series
    sizes: np.ndarray
    treated_fraction: Optional[np.ndarray] = None

    def deviations(self) -> pd.DataFrame:
        """Local minus global mean per cluster and covariate"""
        return self.local_means - self.global_means

    def to_frame(self) -> pd.DataFrame:
        frame = self.local_means.copy()
        frame.insert(0, "size", self.sizes)
        if self.treated_fraction is not None:
            frame["treated_fraction"] = self.treated_fraction
        frame.index.name = "cluster"
        return frame.reset_index()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "covariates": list(self.local_means.columns),
            "global_means": {c: float(v) for c, v in self.global_means.items()},
            "clusters": [
                {
                    "cluster": int(k),
                    "size": int(self.sizes[k]),
                    "local_means": {c: float(v) for c, v in self.local_means.iloc[k].items()},
                    "treated_fraction": None if self.treated_fraction is None else float(self.treated_fraction[k]),
                }
                for k in range(len(self.sizes))
            ],
        }


def _check_alignment(d: Dataset, p: Partition) -> None:
    if p.n != d.n:
        raise SchemaError(f"partition has {p.n} labels for {d.n} rows")


def cluster_profile(d: Dataset, p: Partition, covariates: Optional[Sequence[str]] = None) -> ClusterProfile:
    _check_alignment(d, p)
    columns: List[str] = list(covariates) if covariates is not None else d.feature_columns(include_treatment=True)
    frame = pd.DataFrame(d.matrix(columns), columns=columns)
    grouped = frame.groupby(p.labels, sort=True)
    local = grouped.mean().reindex(range(p.K))
    local.index.name = "cluster"

    treated = None
    if d.treatment is not None:
        t = pd.Series(d.column(d.treatment))
        treated = t.groupby(p.labels, sort=True).mean().reindex(range(p.K)).to_numpy()
    return ClusterProfile(local, frame.mean(), p.sizes(), treated)


def min_treated_fraction(d: Dataset, p: Partition) -> float:
    """Smallest share of treated rows in any cluster"""
    _check_alignment(d, p)
    treatment = d.treatment
    if treatment is None:
        raise SchemaError("min_treated_fraction needs a treatment column")
    t = d.column(treatment)
    treated = np.bincount(p.labels, weights=t, minlength=p.K)
    return float((treated / p.sizes()).min())
