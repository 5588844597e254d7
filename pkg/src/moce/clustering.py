"""K-means over sequence embeddings, plus elbow-based cluster-count choice.

One fitted cluster model drives the sequence-level routing stage: every
cluster index maps one-to-one onto an expert group. Fitting is plain
Lloyd iteration with k-means++ seeding; the objective (sum of squared
distances to the assigned centroid) is asserted non-increasing at every
step, so a regression in the update rule fails loudly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, NumericError
from .seeding import substream, substream_seed

KMEANS_MAGIC = "MOCE-KMEANS"
KMEANS_VERSION = "v1"


@dataclass
class KMeansModel:
    """Fitted centroids plus the fit metadata needed to reproduce them."""

    k: int
    dimension: int
    seed: int
    centroids: np.ndarray
    final_sse: float
    iterations: int
    sse_history: list[float] = field(default_factory=list)


@dataclass
class ClusterAssignment:
    """Cluster labels for a batch of vectors, in input order."""

    labels: np.ndarray

    def counts(self, k: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=k)


@dataclass
class ElbowReport:
    """SSE curve over k, its discrete curvature, and the selected k."""

    k_max: int
    sse_curve: list[float]                 # index i holds SSE for k = i + 1
    curvature: dict[int, float]            # defined for k in [2, k_max - 1]
    selected_k: int
    monotonic: bool
    violations: list[int] = field(default_factory=list)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "sse", "curvature"])
            for i, value in enumerate(self.sse_curve):
                k = i + 1
                curv = self.curvature.get(k)
                writer.writerow([k, f"{value:.17g}", "" if curv is None else f"{curv:.17g}"])


def sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    """Sum of squared distances from each point to its assigned centroid."""
    diffs = points - centroids[labels]
    return float(np.sum(diffs * diffs))


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimiser, which is the tie-break contract:
    # equal distances go to the lower cluster index.
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(n))]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _repair_empty(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Give each empty cluster the point currently farthest from its centroid."""
    k = centroids.shape[0]
    labels = labels.copy()
    for cluster in range(k):
        if np.any(labels == cluster):
            continue
        dist = np.sum((points - centroids[labels]) ** 2, axis=1)
        donor = int(np.argmax(dist))
        centroids[cluster] = points[donor]
        labels[donor] = cluster
    return labels


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float) -> tuple[np.ndarray, np.ndarray, list[float], int]:
    centroids = centroids.copy()
    labels = _assign(points, centroids)
    labels = _repair_empty(points, centroids, labels)
    history = [sse(points, centroids, labels)]
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        for cluster in range(centroids.shape[0]):
            members = points[labels == cluster]
            if members.shape[0]:
                centroids[cluster] = members.mean(axis=0)
        new_labels = _assign(points, centroids)
        new_labels = _repair_empty(points, centroids, new_labels)
        current = sse(points, centroids, new_labels)
        if current > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise NumericError(
                f"k-means objective increased at iteration {iterations}: "
                f"{history[-1]:.12g} -> {current:.12g}"
            )
        history.append(current)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        if tol > 0.0 and history[-2] - history[-1] <= tol:
            labels = new_labels
            break
        labels = new_labels
    return centroids, labels, history, iterations


def kmeans_fit(embeddings, k: int, seed: int, max_iters: int = 100, tol: float = 0.0,
               n_init: int = 10) -> KMeansModel:
    """Fit k centroids with k-means++ init and Lloyd iteration.

    ``embeddings`` is an (n, d) array or anything with a ``matrix()``
    method. Convergence means the assignment stopped changing (or, with
    tol > 0, the objective improvement fell to tol or below). Lloyd only
    finds local optima, so ``n_init`` seeded restarts run and the lowest
    final objective wins; every restart seed derives from ``seed``.
    """
    points = embeddings.matrix() if hasattr(embeddings, "matrix") else np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError(f"expected an (n, d) embedding matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ContractError(f"cluster count must be positive, got {k}")
    if k > n:
        raise ContractError(f"cannot fit {k} clusters to {n} points")
    if max_iters < 1 or n_init < 1:
        raise ContractError(f"max_iters and n_init must be positive, got {max_iters} and {n_init}")

    best = None
    for restart in range(n_init):
        rng = substream(seed, "kmeans-init", restart)
        centroids = _kmeanspp_init(points, k, rng)
        centroids, _, history, iterations = _lloyd(points, centroids, max_iters, tol)
        if best is None or history[-1] < best[1][-1]:
            best = (centroids, history, iterations)
    centroids, history, iterations = best
    return KMeansModel(
        k=k,
        dimension=points.shape[1],
        seed=seed,
        centroids=centroids,
        final_sse=history[-1],
        iterations=iterations,
        sse_history=history,
    )


def kmeans_predict(model: KMeansModel, vectors) -> ClusterAssignment:
    """Assign each vector to its nearest centroid, lowest index on ties."""
    points = vectors.matrix() if hasattr(vectors, "matrix") else np.asarray(vectors, dtype=np.float64)
    single = points.ndim == 1
    if single:
        points = points[None, :]
    if points.shape[1] != model.dimension:
        raise ContractError(
            f"vectors have dimension {points.shape[1]}, model expects {model.dimension}"
        )
    return ClusterAssignment(labels=_assign(points, model.centroids))


def elbow_curvature(sse_curve: list[float]) -> dict[int, float]:
    """Discrete second difference s(k) = SSE(k-1) - 2 SSE(k) + SSE(k+1)."""
    scores = {}
    for k in range(2, len(sse_curve)):
        scores[k] = sse_curve[k - 2] - 2.0 * sse_curve[k - 1] + sse_curve[k]
    return scores


def elbow_select(embeddings, k_max: int = 10, seed: int = 0) -> ElbowReport:
    """Fit k = 1..k_max and pick the sharpest bend of the SSE curve.

    Each k keeps the best of three seeded restarts so a single bad init
    cannot dent the curve. If the best-of-3 curve still is not
    non-increasing the report flags the offending k values instead of
    reordering anything.
    """
    points = embeddings.matrix() if hasattr(embeddings, "matrix") else np.asarray(embeddings, dtype=np.float64)
    if k_max < 3:
        raise ContractError(f"elbow selection needs k_max >= 3, got {k_max}")
    if points.shape[0] < k_max:
        raise ContractError(f"need at least k_max={k_max} points, got {points.shape[0]}")

    sse_curve = []
    for k in range(1, k_max + 1):
        best = np.inf
        for attempt in range(3):
            fit = kmeans_fit(points, k, seed=_elbow_seed(seed, k, attempt))
            best = min(best, fit.final_sse)
        sse_curve.append(best)

    violations = [
        k for k in range(2, k_max + 1)
        if sse_curve[k - 1] > sse_curve[k - 2] + 1e-9 * max(1.0, sse_curve[k - 2])
    ]
    scores = elbow_curvature(sse_curve)
    # max() scans ascending k, and strict comparison keeps the first
    # maximiser, so ties resolve to the smaller k.
    selected = max(scores, key=lambda k: scores[k])
    return ElbowReport(
        k_max=k_max,
        sse_curve=sse_curve,
        curvature=scores,
        selected_k=selected,
        monotonic=not violations,
        violations=violations,
    )


def _elbow_seed(seed: int, k: int, attempt: int) -> int:
    return substream_seed(seed, "elbow", k, attempt)


def save_kmeans(path: str, model: KMeansModel) -> None:
    """Write the text format: header line, then one centroid per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{KMEANS_MAGIC} {KMEANS_VERSION} {model.k} {model.dimension} {model.seed}\n")
        for row in model.centroids:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def load_kmeans(path: str) -> KMeansModel:
    """Read the format written by ``save_kmeans``."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError("k-means file is empty")
    header = lines[0].split()
    if len(header) != 5 or header[0] != KMEANS_MAGIC or header[1] != KMEANS_VERSION:
        raise FormatError(f"line 1: expected header '{KMEANS_MAGIC} {KMEANS_VERSION} <k> <dim> <seed>'")
    try:
        k, dim, seed = int(header[2]), int(header[3]), int(header[4])
    except ValueError:
        raise FormatError("line 1: k, dim and seed must be integers") from None
    if len(lines) - 1 != k:
        raise FormatError(f"header declares {k} centroids, file has {len(lines) - 1}")
    centroids = np.empty((k, dim), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != dim:
            raise FormatError(f"line {i + 2}: expected {dim} values, got {len(parts)}")
        try:
            centroids[i] = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"line {i + 2}: non-numeric value") from None
    if not np.all(np.isfinite(centroids)):
        raise NumericError("k-means file contains non-finite centroid values")
    return KMeansModel(
        k=k,
        dimension=dim,
        seed=seed,
        centroids=centroids,
        final_sse=float("nan"),
        iterations=0,
        sse_history=[],
    )
