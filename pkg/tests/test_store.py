import json
import os
import struct

import numpy as np
import pytest

from lfvg.data import AlignmentConfig, generate_synthetic_dataset
from lfvg.errors import StoreError
from lfvg.store import export_dataset, import_feature_store, read_blob, write_blob


@pytest.fixture
def dataset():
    cfg = AlignmentConfig(latent_dim=8, video_dim=16, query_dim=12,
                          align_noise_sigma=0.2, obs_noise_sigma=0.1, seed=7)
    return generate_synthetic_dataset(cfg, n_videos=3, segments_per_video=10,
                                      events_per_video=2, frames_per_segment=2,
                                      duration_s=45.0)


class TestBlob:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "a.bin"
        arr = np.random.default_rng(0).standard_normal((4, 8))
        write_blob(path, arr)
        back = read_blob(path)
        assert back.shape == (4, 8)
        assert np.allclose(back, arr, atol=1e-6)  # float32 rounding

    def test_vector_round_trip(self, tmp_path):
        path = tmp_path / "v.bin"
        write_blob(path, np.arange(5.0))
        assert read_blob(path).shape == (1, 5)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "h.bin"
        write_blob(path, np.zeros((3, 2)))
        raw = path.read_bytes()
        magic, version, rows, cols = struct.unpack_from("<4sIII", raw)
        assert magic == b"LFVG" and version == 1 and (rows, cols) == (3, 2)
        assert len(raw) == 16 + 4 * 6

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(StoreError, match="magic"):
            read_blob(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(struct.pack("<4sIII", b"LFVG", 9, 0, 0))
        with pytest.raises(StoreError, match="version"):
            read_blob(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(struct.pack("<4sIII", b"LFVG", 1, 2, 2) + b"\x00" * 4)
        with pytest.raises(StoreError, match="bytes"):
            read_blob(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(StoreError, match="cannot read"):
            read_blob(tmp_path / "nothing.bin")


class TestExportImport:
    def test_round_trip_within_float32(self, dataset, tmp_path):
        export_dataset(dataset, tmp_path)
        back = import_feature_store(tmp_path)
        assert back.provenance == "imported"
        assert len(back.videos) == len(dataset.videos)
        assert len(back.queries) == len(dataset.queries)
        for a, b in zip(dataset.videos, back.videos):
            assert a.id == b.id and a.duration_s == b.duration_s
            assert np.allclose(a.segment_features, b.segment_features, atol=1e-5)
            assert np.allclose(a.frame_features, b.frame_features, atol=1e-5)
            assert np.allclose(a.frame_times, b.frame_times)
            assert [c for _, c in a.hidden_events] == [c for _, c in b.hidden_events]
            for (ia, _), (ib, _) in zip(a.hidden_events, b.hidden_events):
                assert abs(ia.start - ib.start) < 1e-9 and abs(ia.end - ib.end) < 1e-9
        for qa, qb in zip(dataset.queries, back.queries):
            assert qa.id == qb.id and qa.video_id == qb.video_id
            assert np.allclose(qa.feature, qb.feature, atol=1e-5)
            assert abs(qa.gt_interval.start - qb.gt_interval.start) < 1e-9
            assert abs(qa.gt_interval.end - qb.gt_interval.end) < 1e-9

    def test_export_deterministic_bytes(self, dataset, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        export_dataset(dataset, a)
        export_dataset(dataset, b)
        for name in sorted(os.listdir(a)):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_minimal_manifest(self, tmp_path):
        # hand-built store with one video
        arr = np.random.default_rng(1).standard_normal((4, 8)).astype(np.float32)
        frames = np.random.default_rng(2).standard_normal((2, 8)).astype(np.float32)
        write_blob(tmp_path / "v.segments.bin", arr)
        write_blob(tmp_path / "v.frames.bin", frames)
        manifest = {
            "videos": [{
                "id": "v", "duration_s": 10.0, "num_segments": 4, "num_frames": 2,
                "segment_blob": "v.segments.bin", "frame_blob": "v.frames.bin",
                "frame_times": [2.5, 7.5],
            }],
            "queries": [],
        }
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        ds = import_feature_store(tmp_path)
        assert len(ds.videos) == 1
        assert ds.videos[0].segment_features.shape == (4, 8)
        assert ds.videos[0].hidden_events is None

    def test_row_count_mismatch_names_record(self, dataset, tmp_path):
        export_dataset(dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["videos"][1]["num_segments"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(StoreError, match=manifest["videos"][1]["id"]):
            import_feature_store(tmp_path)

    def test_non_finite_named(self, dataset, tmp_path):
        export_dataset(dataset, tmp_path)
        vid = dataset.videos[0]
        bad = vid.segment_features.copy()
        bad[2, 3] = np.inf
        write_blob(tmp_path / f"{vid.id}.segments.bin", bad)
        with pytest.raises(StoreError, match=vid.id):
            import_feature_store(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(StoreError, match="manifest"):
            import_feature_store(tmp_path)

    def test_query_row_out_of_range(self, dataset, tmp_path):
        export_dataset(dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["queries"][0]["row"] = 10**6
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(StoreError, match="row"):
            import_feature_store(tmp_path)

    def test_query_features_normalized_on_load(self, dataset, tmp_path):
        export_dataset(dataset, tmp_path)
        # denormalize the stored query features; import must renormalize
        features = np.stack([q.feature for q in dataset.queries]) * 3.7
        write_blob(tmp_path / "queries.bin", features)
        back = import_feature_store(tmp_path)
        for q in back.queries:
            assert abs(np.linalg.norm(q.feature) - 1.0) < 1e-6
