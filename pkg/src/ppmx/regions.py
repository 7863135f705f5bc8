"""Local regions: k-means over neural codes and selection of k.

Regions are found on the validation instances only. The same machinery run
on the original (scaled) features gives the K-LIME style baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import ClusterSS, clustering_ss

__all__ = [
    "RegionModel",
    "KCandidate",
    "KSelectionTrace",
    "kmeans",
    "assign",
    "select_k",
    "baseline_regions",
    "local_accuracies",
]

MAX_ITER = 300
TOL = 1e-6


@dataclass
class RegionModel:
    space: str
    centroids: np.ndarray
    assignments: np.ndarray
    k: int
    seed: int
    restarts: int
    inertia: float
    fit_summary: ClusterSS
    inertia_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "space": self.space, "k": self.k, "seed": self.seed, "restarts": self.restarts,
            "inertia": float(self.inertia),
            "centroids": [[float(v) for v in row] for row in self.centroids],
            "assignments": [int(a) for a in self.assignments],
            "fit_summary": self.fit_summary.as_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionModel":
        return cls(d["space"], np.array(d["centroids"], dtype=float),
                   np.array(d["assignments"], dtype=int), d["k"], d["seed"], d["restarts"],
                   d["inertia"], ClusterSS(**d["fit_summary"]))


def _exact_sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = np.empty((len(X), len(C)))
    for j in range(len(C)):
        diff = X - C[j]
        d[:, j] = np.einsum("ij,ij->i", diff, diff)
    return d


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Squared distances via the expanded form; near-ties are recomputed exactly."""
    xx = np.einsum("ij,ij->i", X, X)
    cc = np.einsum("ij,ij->i", C, C)
    d = xx[:, None] - 2.0 * (X @ C.T) + cc[None, :]
    np.maximum(d, 0.0, out=d)
    # expansion error is a few ulps of |x|^2 + |c|^2; anything that close is redone
    tol = 1e-9 * (xx + cc.max())
    close = (d <= d.min(axis=1)[:, None] + tol[:, None]).sum(axis=1) > 1
    if close.any():
        d[close] = _exact_sq_dist(X[close], C)
    return d


def _nearest(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # ties resolve to the lowest id
    return np.argmin(_sq_dist(X, C), axis=1)


def _plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each new centre is the best of a few D^2-sampled candidates."""
    n = len(X)
    trials = 2 + int(np.log(k))
    centers = [X[rng.integers(n)]]
    closest = _sq_dist(X, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
            centers.append(X[idx])
            continue
        cum = np.cumsum(closest)
        picks = np.searchsorted(cum, rng.random(trials) * total, side="right")
        picks = np.minimum(picks, n - 1)
        options = np.minimum(closest[:, None], _sq_dist(X, X[picks]))
        best = int(np.argmin(options.sum(axis=0)))
        centers.append(X[picks[best]])
        closest = options[:, best]
    return np.array(centers, dtype=float)


def _repair_empty(X, C, labels):
    """Move each empty cluster's centroid to the point farthest from its own centroid."""
    k = len(C)
    for _ in range(k):
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if not len(empty):
            break
        j = empty[0]
        dist = ((X - C[labels]) ** 2).sum(1)
        # only steal from clusters that can spare a point
        dist[sizes[labels] <= 1] = -1.0
        far = int(np.argmax(dist))
        if dist[far] < 0:
            break
        C[j] = X[far]
        labels[far] = j
    return C, labels


def _hartigan(X, C, labels, history):
    """Single-point transfers after Lloyd has converged.

    A point moves when leaving its cluster saves more within-cluster SS than
    joining another costs. Every accepted move lowers the SS, and a state with
    no such move is also a fixed point of Lloyd's step.
    """
    k = len(C)
    sizes = np.bincount(labels, minlength=k).astype(float)
    rows = np.arange(len(X))
    for _ in range(MAX_ITER):
        scale = 1e-12 * max(1.0, history[-1])
        d = _sq_dist(X, C)
        n_a = sizes[labels]
        with np.errstate(divide="ignore"):
            leave = np.where(n_a > 1, n_a / np.maximum(n_a - 1, 1) * d[rows, labels], -np.inf)
        join = d * (sizes / (sizes + 1.0))[None, :]
        join[rows, labels] = np.inf
        candidates = np.flatnonzero(leave - join.min(axis=1) > scale)
        if not len(candidates):
            break
        for i in candidates:
            a = labels[i]
            if sizes[a] <= 1:
                continue
            di = ((C - X[i]) ** 2).sum(axis=1)
            cost = di * sizes / (sizes + 1.0)
            cost[a] = np.inf
            b = int(np.argmin(cost))
            if sizes[a] / (sizes[a] - 1) * di[a] - cost[b] <= scale:
                continue
            C[a] = (C[a] * sizes[a] - X[i]) / (sizes[a] - 1)
            C[b] = (C[b] * sizes[b] + X[i]) / (sizes[b] + 1)
            sizes[a] -= 1
            sizes[b] += 1
            labels[i] = b
        # recompute exactly to shed rounding from the running updates
        C = _means(X, labels, k)
        history.append(float(((X - C[labels]) ** 2).sum()))
    return C, labels


def _means(X, labels, k):
    return np.array([X[labels == j].mean(axis=0) for j in range(k)])


def _lloyd(X, k, rng):
    C = _plusplus(X, k, rng)
    history = []
    labels = _nearest(X, C)
    for _ in range(MAX_ITER):
        C, labels = _repair_empty(X, C, labels)
        history.append(float(((X - C[labels]) ** 2).sum()))
        new_C = _means(X, labels, k)
        shift = float(np.sqrt(((new_C - C) ** 2).sum(1)).max())
        C = new_C
        new_labels = _nearest(X, C)
        if shift < TOL or np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    C, labels = _repair_empty(X, C, labels)
    history.append(float(((X - C[labels]) ** 2).sum()))
    C, labels = _hartigan(X, C.copy(), labels.copy(), history)
    return C, labels, history


def kmeans(points, k: int, seed: int = 0, restarts: int = 10, space: str = "latent") -> RegionModel:
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` by within-cluster SS.

    Raises ``ValueError`` when ``k`` exceeds the number of distinct points,
    since no partition into ``k`` non-empty clusters then exists under
    nearest-centroid assignment.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(X):
        raise ValueError(f"k={k} exceeds the number of points ({len(X)})")
    if k > len(np.unique(X, axis=0)):
        raise ValueError(f"k={k} exceeds the number of distinct points")
    seeds = np.random.SeedSequence([seed, k]).spawn(max(restarts, 1))
    best = None
    for seq in seeds:
        C, labels, history = _lloyd(X, k, np.random.default_rng(seq))
        inertia = history[-1]
        if best is None or inertia < best[2]:
            best = (C, labels, inertia, history)
    C, labels, inertia, history = best
    summary = clustering_ss(X, labels)
    return RegionModel(space, C, labels, k, seed, restarts, summary.sswc, summary, history)


def assign(model: RegionModel, point) -> int | np.ndarray:
    """Nearest centroid (Euclidean); ties go to the lowest cluster id."""
    x = np.asarray(point, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.centroids.shape[1]:
        raise ValueError("point dimension does not match the centroids")
    labels = _nearest(X, model.centroids)
    return int(labels[0]) if single else labels


def local_accuracies(assignments, scores, labels, tau: float, k: int) -> np.ndarray:
    """Per-cluster accuracy of the black-box decision ``score >= tau``."""
    correct = (np.asarray(scores) >= tau).astype(int) == np.asarray(labels)
    assignments = np.asarray(assignments)
    return np.array([correct[assignments == j].mean() for j in range(k)])


@dataclass
class KCandidate:
    k: int
    mean_accuracy: float | None
    explained_variance: float | None
    chosen: bool = False
    skipped: str | None = None


@dataclass
class KSelectionTrace:
    candidates: list[KCandidate]
    weighting: str = "unweighted"

    @property
    def chosen_k(self) -> int:
        return next(c.k for c in self.candidates if c.chosen)

    def to_rows(self) -> list[dict]:
        return [{"k": c.k, "mean_accuracy": c.mean_accuracy,
                 "explained_variance": c.explained_variance, "chosen": c.chosen,
                 "skipped": c.skipped} for c in self.candidates]


def select_k(codes, scores, labels, tau: float, k_range: Sequence[int] = range(2, 41),
             seed: int = 0, restarts: int = 10, weighting: str = "unweighted",
             space: str = "latent") -> tuple[RegionModel, KSelectionTrace]:
    """Choose k maximising mean per-cluster black-box accuracy at ``tau``.

    ``weighting="unweighted"`` averages cluster accuracies equally;
    ``"instance"`` weights them by cluster size. Ties go to the smaller k.
    """
    if weighting not in ("unweighted", "instance"):
        raise ValueError(f"unknown weighting {weighting!r}")
    X = np.asarray(codes, dtype=float)
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    candidates, best = [], None
    for k in sorted(set(int(k) for k in k_range)):
        try:
            model = kmeans(X, k, seed, restarts, space)
        except ValueError as exc:
            candidates.append(KCandidate(k, None, None, skipped=str(exc)))
            continue
        acc = local_accuracies(model.assignments, scores, labels, tau, k)
        if weighting == "unweighted":
            score = float(acc.mean())
        else:
            sizes = np.bincount(model.assignments, minlength=k)
            score = float((acc * sizes).sum() / sizes.sum())
        cand = KCandidate(k, score, model.fit_summary.explained_variance)
        candidates.append(cand)
        if best is None or score > best[0].mean_accuracy + 1e-12:
            best = (cand, model)
    if best is None:
        raise ValueError("no feasible k in the candidate range")
    best[0].chosen = True
    return best[1], KSelectionTrace(candidates, weighting)


def baseline_regions(features, k: int | Sequence[int], seed: int = 0, restarts: int = 10,
                     scores=None, labels=None, tau: float | None = None):
    """Cluster the original feature space; a fixed ``k`` or a range selected like :func:`select_k`."""
    if isinstance(k, (int, np.integer)):
        return kmeans(features, int(k), seed, restarts, space="original")
    if scores is None or labels is None or tau is None:
        raise ValueError("a k range needs scores, labels and tau")
    model, _ = select_k(features, scores, labels, tau, k, seed, restarts, space="original")
    return model
