"""On-disk feature store: a manifest plus little-endian float32 blobs.

Blob layout: 16-byte header (magic ``LFVG``, u32 version, u32 rows, u32
cols, all little-endian) followed by rows*cols float32 row-major values.
The same blob format backs model checkpoints (one blob per parameter).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .data import Dataset, Interval, QueryRecord, VideoRecord
from .errors import StoreError

MAGIC = b"LFVG"
VERSION = 1
MANIFEST_NAME = "manifest.json"
_HEADER = struct.Struct("<4sIII")


def write_blob(path, array: np.ndarray) -> None:
    """Write a 2-D array as a float32 blob (vectors are stored as one row)."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise StoreError(f"blob arrays must be 1-D or 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_blob(path) -> np.ndarray:
    """Read a blob back as a float64 (rows, cols) array."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StoreError(f"cannot read blob {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise StoreError(f"blob {path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StoreError(f"blob {path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"blob {path}: unsupported version {version}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise StoreError(f"blob {path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return values.reshape(rows, cols).astype(np.float64)


def export_dataset(dataset: Dataset, out_dir) -> None:
    """Write ``dataset`` as a feature store under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"format": "lfvg-feature-store", "version": VERSION, "videos": [], "queries": []}

    for video in dataset.videos:
        seg_blob = f"{video.id}.segments.bin"
        frame_blob = f"{video.id}.frames.bin"
        write_blob(os.path.join(out_dir, seg_blob), video.segment_features)
        write_blob(os.path.join(out_dir, frame_blob), video.frame_features)
        entry = {
            "id": video.id,
            "duration_s": video.duration_s,
            "num_segments": int(video.num_segments),
            "num_frames": int(video.num_frames),
            "segment_blob": seg_blob,
            "frame_blob": frame_blob,
            "frame_times": [float(t) for t in video.frame_times],
        }
        if video.hidden_events is not None:
            entry["hidden_events"] = [
                [iv.start, iv.end, int(concept)] for iv, concept in video.hidden_events
            ]
        manifest["videos"].append(entry)

    durations = {v.id: v.duration_s for v in dataset.videos}
    if dataset.queries:
        features = np.stack([q.feature for q in dataset.queries])
        write_blob(os.path.join(out_dir, "queries.bin"), features)
        for row, q in enumerate(dataset.queries):
            start_s, end_s = q.gt_interval.to_seconds(durations[q.video_id])
            manifest["queries"].append(
                {
                    "id": q.id,
                    "video_id": q.video_id,
                    "gt_start_s": start_s,
                    "gt_end_s": end_s,
                    "feature_blob": "queries.bin",
                    "row": row,
                }
            )

    tmp = os.path.join(out_dir, MANIFEST_NAME + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, os.path.join(out_dir, MANIFEST_NAME))


def _require(entry: dict, key: str, context: str):
    if key not in entry:
        raise StoreError(f"{context}: manifest entry missing {key!r}")
    return entry[key]


def import_feature_store(path) -> Dataset:
    """Load a feature store directory, validating every record.

    Query features are unit-normalized on load so that externally extracted
    text embeddings match the norm convention of training-time features.
    """
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise StoreError(f"no {MANIFEST_NAME} under {path}")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"cannot parse {manifest_path}: {exc}") from exc

    videos = []
    for entry in manifest.get("videos", []):
        vid = _require(entry, "id", "video")
        ctx = f"video {vid}"
        duration = float(_require(entry, "duration_s", ctx))
        segments = read_blob(os.path.join(path, _require(entry, "segment_blob", ctx)))
        frames = read_blob(os.path.join(path, _require(entry, "frame_blob", ctx)))
        if segments.shape[0] != int(_require(entry, "num_segments", ctx)):
            raise StoreError(
                f"{ctx}: segment blob has {segments.shape[0]} rows, "
                f"manifest says {entry['num_segments']}"
            )
        if frames.shape[0] != int(_require(entry, "num_frames", ctx)):
            raise StoreError(
                f"{ctx}: frame blob has {frames.shape[0]} rows, "
                f"manifest says {entry['num_frames']}"
            )
        for name, arr in (("segment", segments), ("frame", frames)):
            if not np.isfinite(arr).all():
                raise StoreError(f"{ctx}: non-finite values in {name} blob")
        frame_times = np.asarray(_require(entry, "frame_times", ctx), dtype=np.float64)
        hidden = None
        if "hidden_events" in entry:
            hidden = [
                (Interval(float(s), float(e)), int(c)) for s, e, c in entry["hidden_events"]
            ]
        video = VideoRecord(
            id=vid,
            duration_s=duration,
            segment_features=segments,
            frame_features=frames,
            frame_times=frame_times,
            hidden_events=hidden,
        )
        try:
            video.validate()
        except Exception as exc:
            raise StoreError(f"{ctx}: {exc}") from exc
        videos.append(video)

    durations = {v.id: v.duration_s for v in videos}
    feature_cache: dict[str, np.ndarray] = {}
    queries = []
    for entry in manifest.get("queries", []):
        qid = _require(entry, "id", "query")
        ctx = f"query {qid}"
        video_id = _require(entry, "video_id", ctx)
        if video_id not in durations:
            raise StoreError(f"{ctx}: unknown video {video_id}")
        blob_name = _require(entry, "feature_blob", ctx)
        if blob_name not in feature_cache:
            feature_cache[blob_name] = read_blob(os.path.join(path, blob_name))
        rows = feature_cache[blob_name]
        row = int(_require(entry, "row", ctx))
        if not 0 <= row < rows.shape[0]:
            raise StoreError(f"{ctx}: row {row} out of range for {blob_name}")
        feature = rows[row]
        if not np.isfinite(feature).all():
            raise StoreError(f"{ctx}: non-finite feature values")
        norm = np.linalg.norm(feature)
        if norm == 0:
            raise StoreError(f"{ctx}: zero-norm feature")
        duration = durations[video_id]
        start = float(_require(entry, "gt_start_s", ctx)) / duration
        end = float(_require(entry, "gt_end_s", ctx)) / duration
        try:
            interval = Interval(start, end)
        except Exception as exc:
            raise StoreError(f"{ctx}: {exc}") from exc
        queries.append(QueryRecord(qid, video_id, feature / norm, interval))

    dataset = Dataset(videos=videos, queries=queries, provenance="imported")
    try:
        dataset.validate()
    except Exception as exc:
        raise StoreError(str(exc)) from exc
    return dataset
