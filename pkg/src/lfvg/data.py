"""Dataset containers and the synthetic joint vision-language space.

The synthetic generator stands in for a pretrained image/text encoder pair:
per-event latent concepts are pushed through fixed random linear maps into a
"video" space and a "query" space whose mutual alignment is controllable.
``align_noise_sigma`` widens the gap between the image-side and text-side
maps; ``obs_noise_sigma`` adds per-feature observation noise. With both at
zero, a text query for an event is exactly the event's frame embedding.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError
from .rng import derive_rng


@dataclass(frozen=True)
class Interval:
    """A temporal interval as (start, end) fractions of the video duration."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise InvalidInputError("interval endpoints must be finite")
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise InvalidInputError(
                f"invalid interval ({self.start}, {self.end}): need 0 <= start <= end <= 1"
            )

    @property
    def length(self) -> float:
        return self.end - self.start

    def to_seconds(self, duration_s: float) -> tuple[float, float]:
        return self.start * duration_s, self.end * duration_s


@dataclass
class VideoRecord:
    """One untrimmed video as precomputed features.

    ``segment_features`` is the (T, video_dim) sequence the grounding model
    consumes; ``frame_features`` are the (M, query_dim) per-frame embeddings
    that pseudo language features are selected from. ``hidden_events`` is
    synthetic ground truth (interval, concept id); imported data may omit it.
    """

    id: str
    duration_s: float
    segment_features: np.ndarray
    frame_features: np.ndarray
    frame_times: np.ndarray
    hidden_events: list[tuple[Interval, int]] | None = None

    @property
    def num_segments(self) -> int:
        return self.segment_features.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frame_features.shape[0]

    def validate(self):
        if self.duration_s <= 0:
            raise InvalidInputError(f"video {self.id}: duration must be positive")
        for name, arr in (("segment", self.segment_features), ("frame", self.frame_features)):
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise InvalidInputError(f"video {self.id}: {name} features must be a nonempty matrix")
            if not np.isfinite(arr).all():
                raise InvalidInputError(f"video {self.id}: non-finite {name} features")
        if self.frame_times.shape != (self.num_frames,):
            raise InvalidInputError(f"video {self.id}: frame_times length != num_frames")
        if np.any(np.diff(self.frame_times) < 0):
            raise InvalidInputError(f"video {self.id}: frame_times must be nondecreasing")
        if np.any(self.frame_times < 0) or np.any(self.frame_times > self.duration_s):
            raise InvalidInputError(f"video {self.id}: frame_times outside [0, duration]")


@dataclass
class QueryRecord:
    """An evaluation query: a text-side feature plus its target interval."""

    id: str
    video_id: str
    feature: np.ndarray
    gt_interval: Interval

    def validate(self):
        if self.feature.ndim != 1 or not np.isfinite(self.feature).all():
            raise InvalidInputError(f"query {self.id}: feature must be a finite vector")


@dataclass
class Dataset:
    videos: list[VideoRecord]
    queries: list[QueryRecord] = field(default_factory=list)
    provenance: str = "synthetic"

    def validate(self):
        ids = set()
        for v in self.videos:
            if v.id in ids:
                raise InvalidInputError(f"duplicate video id {v.id}")
            ids.add(v.id)
            v.validate()
        for q in self.queries:
            q.validate()
            if q.video_id not in ids:
                raise InvalidInputError(f"query {q.id}: unknown video {q.video_id}")

    def video_by_id(self, video_id: str) -> VideoRecord:
        for v in self.videos:
            if v.id == video_id:
                return v
        raise InvalidInputError(f"no video with id {video_id}")

    def training_view(self) -> "TrainingView":
        return TrainingView(self)


class TrainingVideoView:
    """A video as exposed to language-free training: features only.

    Reads of ``hidden_events`` are counted on the parent view and return
    nothing, enforcing (and instrumenting) the zero-shot contract.
    """

    __slots__ = ("_video", "_counts")

    def __init__(self, video: VideoRecord, counts: dict):
        self._video = video
        self._counts = counts

    @property
    def id(self):
        return self._video.id

    @property
    def duration_s(self):
        return self._video.duration_s

    @property
    def segment_features(self):
        return self._video.segment_features

    @property
    def frame_features(self):
        return self._video.frame_features

    @property
    def frame_times(self):
        return self._video.frame_times

    @property
    def num_segments(self):
        return self._video.num_segments

    @property
    def num_frames(self):
        return self._video.num_frames

    @property
    def hidden_events(self):
        self._counts["hidden_events"] += 1
        return None


class TrainingView:
    """Annotation-free view of a dataset; counts any attempted access to
    queries or ground-truth events so tests can assert the count is zero."""

    def __init__(self, dataset: Dataset):
        self.access_counts = {"queries": 0, "hidden_events": 0}
        self._videos = [TrainingVideoView(v, self.access_counts) for v in dataset.videos]

    @property
    def videos(self):
        return self._videos

    @property
    def queries(self):
        self.access_counts["queries"] += 1
        return ()


@dataclass(frozen=True)
class AlignmentConfig:
    """Geometry of the synthetic joint embedding space.

    ``frame_outlier_rate`` replaces that fraction of frame features with
    random off-manifold unit vectors, modelling uninformative frames
    (clutter, motion blur) that frame selection should learn to avoid.
    Segment features and queries are never affected.
    """

    latent_dim: int = 16
    video_dim: int = 32
    query_dim: int = 32
    align_noise_sigma: float = 0.0
    obs_noise_sigma: float = 0.0
    frame_outlier_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.latent_dim, self.video_dim, self.query_dim) < 2:
            raise InvalidInputError("all dims must be >= 2")
        if self.video_dim < self.latent_dim or self.query_dim < self.latent_dim:
            raise InvalidInputError("feature dims must be >= latent_dim for orthonormal maps")
        if self.align_noise_sigma < 0 or self.obs_noise_sigma < 0:
            raise InvalidInputError("noise sigmas must be >= 0")
        if not 0.0 <= self.frame_outlier_rate <= 1.0:
            raise InvalidInputError("frame_outlier_rate must be in [0, 1]")


def _orthonormal_columns(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """A (rows, cols) matrix with orthonormal columns, canonical sign."""
    gaussian = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(gaussian)
    # fix the QR sign ambiguity so the map is a deterministic function of the draws
    return q * np.sign(np.diag(r))


def _partition_segments(num_segments: int, num_events: int, rng: np.random.Generator):
    """Split ``num_segments`` into ``num_events`` contiguous runs of >= 2."""
    spare = num_segments - 2 * num_events
    weights = rng.dirichlet(np.ones(num_events))
    raw = weights * spare
    base = np.floor(raw).astype(int)
    shortfall = spare - int(base.sum())
    if shortfall:
        # largest-remainder rounding, ties to the lowest index
        order = np.lexsort((np.arange(num_events), -(raw - base)))
        base[order[:shortfall]] += 1
    lengths = base + 2
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    return [(int(bounds[i]), int(bounds[i + 1]) - 1) for i in range(num_events)]


def generate_synthetic_dataset(
    cfg: AlignmentConfig,
    n_videos: int,
    segments_per_video: int,
    events_per_video: int,
    frames_per_segment: int = 4,
    duration_s: float = 60.0,
) -> Dataset:
    """Sample a dataset of event-structured videos with paired text queries.

    Each video partitions [0, 1] into contiguous events; every event draws a
    unit-norm latent concept that all its segments and frames share (plus
    observation noise). One query per event is emitted through the text-side
    map. Byte-identical across runs for a fixed config.
    """
    if n_videos < 1 or segments_per_video < 1 or frames_per_segment < 1:
        raise InvalidInputError("counts must be >= 1")
    if events_per_video < 1 or events_per_video > segments_per_video:
        raise InvalidInputError("need 1 <= events_per_video <= segments_per_video")
    if segments_per_video < 2 * events_per_video:
        raise InvalidInputError("need segments_per_video >= 2 * events_per_video")

    map_rng = derive_rng(cfg.seed, "maps")
    video_map = _orthonormal_columns(cfg.video_dim, cfg.latent_dim, map_rng)
    image_map = _orthonormal_columns(cfg.query_dim, cfg.latent_dim, map_rng)
    # fixed offset direction separating the text map from the image map
    text_offset = _orthonormal_columns(cfg.query_dim, cfg.latent_dim, map_rng)
    text_map = image_map + cfg.align_noise_sigma * text_offset

    num_frames = segments_per_video * frames_per_segment
    frame_times = (np.arange(num_frames) + 0.5) / num_frames * duration_s

    videos, queries = [], []
    concept = 0
    for vi in range(n_videos):
        rng = derive_rng(cfg.seed, "video", vi)
        events = _partition_segments(segments_per_video, events_per_video, rng)
        latents = rng.standard_normal((events_per_video, cfg.latent_dim))
        latents /= np.linalg.norm(latents, axis=1, keepdims=True)

        segment_event = np.empty(segments_per_video, dtype=int)
        for e, (first, last) in enumerate(events):
            segment_event[first : last + 1] = e
        frame_event = np.repeat(segment_event, frames_per_segment)

        seg_noise = rng.standard_normal((segments_per_video, cfg.video_dim))
        frm_noise = rng.standard_normal((num_frames, cfg.query_dim))
        qry_noise = rng.standard_normal((events_per_video, cfg.query_dim))
        # drawn unconditionally so the stream does not depend on the rate
        outlier_mask = rng.uniform(size=num_frames) < cfg.frame_outlier_rate
        outliers = rng.standard_normal((num_frames, cfg.query_dim))
        outliers /= np.linalg.norm(outliers, axis=1, keepdims=True)

        segment_features = latents[segment_event] @ video_map.T + cfg.obs_noise_sigma * seg_noise
        frame_features = latents[frame_event] @ image_map.T + cfg.obs_noise_sigma * frm_noise
        frame_features[outlier_mask] = outliers[outlier_mask]

        video_id = f"video{vi:05d}"
        hidden = []
        for e, (first, last) in enumerate(events):
            interval = Interval(first / segments_per_video, (last + 1) / segments_per_video)
            hidden.append((interval, concept))
            q = text_map @ latents[e] + cfg.obs_noise_sigma * qry_noise[e]
            q = q / np.linalg.norm(q)
            queries.append(QueryRecord(f"{video_id}-q{e}", video_id, q, interval))
            concept += 1

        videos.append(
            VideoRecord(
                id=video_id,
                duration_s=duration_s,
                segment_features=segment_features,
                frame_features=frame_features,
                frame_times=frame_times.copy(),
                hidden_events=hidden,
            )
        )

    dataset = Dataset(videos=videos, queries=queries, provenance="synthetic")
    dataset.validate()
    return dataset


def event_frame_indices(video: VideoRecord, interval: Interval) -> np.ndarray:
    """Indices of frames whose timestamps fall inside ``interval``."""
    fractions = video.frame_times / video.duration_s
    mask = (fractions >= interval.start) & (fractions < interval.end)
    if interval.end >= 1.0:
        mask |= fractions >= interval.start
    return np.nonzero(mask)[0]


def alignment_score(dataset: Dataset) -> float:
    """Mean cosine between each query and its event's mean frame feature.

    Diagnoses how well the text-side features land on the image-side
    manifold; 1.0 means the spaces coincide on event centroids.
    """
    if not dataset.queries:
        raise InvalidInputError("alignment_score needs a dataset with queries")
    cosines = []
    for q in dataset.queries:
        video = dataset.video_by_id(q.video_id)
        idx = event_frame_indices(video, q.gt_interval)
        if idx.size == 0:
            raise InvalidInputError(f"query {q.id}: its interval contains no frames")
        centroid = video.frame_features[idx].mean(axis=0)
        denom = np.linalg.norm(centroid) * np.linalg.norm(q.feature)
        if denom == 0:
            raise InvalidInputError(f"query {q.id}: degenerate feature norms")
        cosines.append(float(centroid @ q.feature / denom))
    return float(np.mean(cosines))


def with_align_noise(cfg: AlignmentConfig, align_noise_sigma: float) -> AlignmentConfig:
    """Same space, different text-map misalignment; videos stay identical."""
    return replace(cfg, align_noise_sigma=align_noise_sigma)


def video_fingerprint(dataset: Dataset) -> str:
    """Digest over the video payload only (ids, durations, features, times).

    Two datasets with equal fingerprints present identical training inputs
    regardless of their query splits or annotations.
    """
    digest = hashlib.sha256()
    for v in dataset.videos:
        digest.update(v.id.encode())
        digest.update(np.float64(v.duration_s).tobytes())
        digest.update(np.ascontiguousarray(v.segment_features, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(v.frame_features, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(v.frame_times, dtype=np.float64).tobytes())
    return digest.hexdigest()
