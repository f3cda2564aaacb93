"""Pseudo temporal ground truth from video features alone.

Pipeline: cosine self-similarity (diagnostic), k-means over segment
features, contiguous runs of equal cluster labels as base events, then
windows of adjacent events merged into additional proposals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Interval
from .errors import InvalidInputError
from .rng import derive_rng


@dataclass
class SimilarityMatrix:
    """Pairwise cosine similarity of segment features (symmetric, unit diagonal)."""

    values: np.ndarray

    def validate(self):
        r = self.values
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise InvalidInputError("similarity matrix must be square")
        if not np.allclose(r, r.T, atol=1e-6):
            raise InvalidInputError("similarity matrix must be symmetric")
        if not np.allclose(np.diag(r), 1.0, atol=1e-6):
            raise InvalidInputError("similarity matrix diagonal must be 1")
        if r.min() < -1 - 1e-9 or r.max() > 1 + 1e-9:
            raise InvalidInputError("similarity entries must lie in [-1, 1]")


@dataclass(frozen=True)
class TemporalProposal:
    """A candidate pseudo ground-truth interval, aligned to segment bounds."""

    first: int
    last: int
    interval: Interval
    merged_from: int = 1

    @property
    def num_segments(self) -> int:
        return self.last - self.first + 1


def make_proposal(first: int, last: int, num_segments: int, merged_from: int = 1) -> TemporalProposal:
    if not 0 <= first <= last < num_segments:
        raise InvalidInputError(f"bad segment span ({first}, {last}) for T={num_segments}")
    interval = Interval(first / num_segments, (last + 1) / num_segments)
    return TemporalProposal(first, last, interval, merged_from)


def similarity_matrix(features: np.ndarray) -> SimilarityMatrix:
    """Cosine similarity between all pairs of feature rows."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise InvalidInputError("features must be a nonempty (T, D) matrix")
    norms = np.linalg.norm(f, axis=1)
    zero = np.nonzero(norms == 0)[0]
    if zero.size:
        raise InvalidInputError(f"zero-norm feature row at index {int(zero[0])}")
    unit = f / norms[:, None]
    r = unit @ unit.T
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    matrix = SimilarityMatrix(r)
    matrix.validate()
    return matrix


@dataclass
class KMeansResult:
    labels: np.ndarray
    inertia: float
    inertia_history: list[float]


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("tkd,tkd->tk", diff, diff)


def _plus_plus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        # k <= number of distinct rows, so some point is strictly away
        probs = closest / total
        centers[j] = points[rng.choice(n, p=probs)]
        closest = np.minimum(closest, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int) -> KMeansResult:
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = _squared_distances(points, centers)
        new_labels = d2.argmin(axis=1)  # argmin ties resolve to the lowest index
        point_d2 = d2[np.arange(len(points)), new_labels]

        # revive empty clusters at the current worst-served point
        taken = set()
        for j in range(centers.shape[0]):
            if not np.any(new_labels == j):
                order = np.argsort(-point_d2, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                centers[j] = points[pick]
                new_labels[pick] = j
                point_d2[pick] = 0.0

        inertia = float(point_d2.sum())
        if history and inertia > history[-1] + 1e-9:
            raise AssertionError("k-means inertia increased between iterations")
        history.append(inertia)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for j in range(centers.shape[0]):
            centers[j] = points[labels == j].mean(axis=0)
    return KMeansResult(labels, history[-1], history)


def kmeans(features: np.ndarray, k: int, seed: int, restarts: int = 10, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` kept."""
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise InvalidInputError("features must be a nonempty (T, D) matrix")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    distinct = np.unique(points, axis=0).shape[0]
    if k > distinct:
        raise InvalidInputError(f"k={k} exceeds the {distinct} distinct feature rows")
    best = None
    for r in range(restarts):
        rng = derive_rng(seed, "kmeans", r)
        centers = _plus_plus_seed(points, k, rng)
        result = _lloyd(points, centers.copy(), max_iter)
        if best is None or result.inertia < best.inertia - 1e-12:
            best = result
    return best


def kmeans_cluster(features: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Cluster labels for each feature row (length T)."""
    return kmeans(features, k, seed).labels


def events_from_labels(labels) -> list[tuple[int, int]]:
    """Maximal contiguous runs of equal labels, in temporal order."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size < 1:
        raise InvalidInputError("labels must be a nonempty vector")
    events = []
    start = 0
    for t in range(1, labels.size):
        if labels[t] != labels[t - 1]:
            events.append((start, t - 1))
            start = t
    events.append((start, labels.size - 1))
    return events


def merge_consecutive(
    events: list[tuple[int, int]],
    max_merge: int,
    min_len: int,
    num_segments: int,
) -> list[TemporalProposal]:
    """Emit every window of 1..max_merge adjacent events as a proposal.

    Spans shorter than ``min_len`` segments are dropped, as is the
    whole-video span when any other span survives. If the filters eliminate
    everything, the union of all events is returned so the caller always
    has at least one proposal.
    """
    if not events:
        raise InvalidInputError("events must be nonempty")
    for (a, b), (c, d) in zip(events, events[1:]):
        if not (a <= b and c <= d and b < c):
            raise InvalidInputError("events must be ordered and disjoint")

    seen = set()
    candidates = []
    for m in range(1, max_merge + 1):
        for i in range(len(events) - m + 1):
            span = (events[i][0], events[i + m - 1][1])
            if span not in seen:
                seen.add(span)
                candidates.append((span, m))

    long_enough = [c for c in candidates if c[0][1] - c[0][0] + 1 >= min_len]
    full = (0, num_segments - 1)
    kept = [c for c in long_enough if c[0] != full]
    if not kept:
        kept = long_enough
    if not kept:
        kept = [((events[0][0], events[-1][1]), len(events))]
    return [make_proposal(a, b, num_segments, m) for (a, b), m in kept]


def generate_proposals(video, k: int = 5, max_merge: int = 2, min_len: int = 2, seed: int = 0):
    """Pseudo ground-truth proposals for one video's segment features."""
    features = video.segment_features
    t = features.shape[0]
    if t < k:
        raise InvalidInputError(f"video {video.id} has {t} segments, fewer than k={k}")
    labels = kmeans_cluster(features, k, seed)
    events = events_from_labels(labels)
    return merge_consecutive(events, max_merge, min_len, t)
