import json
from dataclasses import dataclass, replace

import numpy as np
import pytest
import torch

from lfvg.data import AlignmentConfig, Interval, generate_synthetic_dataset
from lfvg.errors import EvaluationError, InvalidInputError
from lfvg.evaluation import (
    AblationReport,
    EvalResult,
    evaluate,
    format_ablation_table,
    format_eval_table,
    mean_iou,
    random_prediction_baseline,
    recall_at,
    report_json,
    run_ablation,
    sweep_csv,
    tiou,
    train_and_evaluate,
)
from lfvg.nn import DTYPE, parameter_hash
from lfvg.training import TrainConfig, train


def oracle_tiou(a, b):
    """Inclusion-exclusion formulation, independent of the implementation."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


class TestTiou:
    def test_identical(self):
        assert tiou((0.2, 0.8), (0.2, 0.8)) == 1.0

    def test_disjoint(self):
        assert tiou((0.0, 0.2), (0.5, 0.9)) == 0.0

    def test_hand_value(self):
        assert abs(tiou((0.2, 0.6), (0.4, 0.8)) - 1 / 3) < 1e-9

    def test_degenerate_pairs(self):
        assert tiou((0.5, 0.5), (0.5, 0.5)) == 0.0  # zero-length union
        assert tiou((0.5, 0.5), (0.2, 0.8)) == 0.0  # zero-length intersection
        assert tiou((0.2, 0.2), (0.4, 0.4)) == 0.0

    def test_randomized_against_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = tuple(sorted(rng.uniform(size=2)))
            b = tuple(sorted(rng.uniform(size=2)))
            assert abs(tiou(a, b) - oracle_tiou(a, b)) < 1e-12
            assert abs(tiou(a, b) - tiou(b, a)) < 1e-15  # symmetry
            assert 0.0 <= tiou(a, b) <= 1.0

    def test_affine_rescaling_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = tuple(sorted(rng.uniform(size=2)))
            b = tuple(sorted(rng.uniform(size=2)))
            scale, shift = rng.uniform(0.2, 0.5), rng.uniform(0.0, 0.4)
            a2 = (a[0] * scale + shift, a[1] * scale + shift)
            b2 = (b[0] * scale + shift, b[1] * scale + shift)
            assert abs(tiou(a, b) - tiou(a2, b2)) < 1e-9

    def test_accepts_interval_objects(self):
        assert tiou(Interval(0.1, 0.5), Interval(0.1, 0.5)) == 1.0

    def test_invalid_rejected(self):
        with pytest.raises(InvalidInputError):
            tiou((0.8, 0.2), (0.1, 0.5))
        with pytest.raises(InvalidInputError):
            tiou((0.1, 0.5), (float("nan"), 0.5))


class TestRecall:
    def test_hand_count(self):
        assert abs(recall_at([0.8, 0.4, 0.6], 0.5) - 100 * 2 / 3) < 1e-9

    def test_all_perfect(self):
        for threshold in (0.3, 0.5, 0.7):
            assert recall_at([1.0, 1.0], threshold) == 100.0

    def test_strict_inequality_at_threshold(self):
        assert recall_at([0.5], 0.5) == 0.0
        assert recall_at([0.5 + 1e-12], 0.5) == 100.0

    def test_nonincreasing_in_threshold(self):
        rng = np.random.default_rng(2)
        values = rng.uniform(size=40).tolist()
        recalls = [recall_at(values, t) for t in (0.3, 0.5, 0.7)]
        assert recalls[0] >= recalls[1] >= recalls[2]

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            recall_at([], 0.5)

    def test_threshold_domain(self):
        with pytest.raises(InvalidInputError):
            recall_at([0.5], 0.0)
        with pytest.raises(InvalidInputError):
            recall_at([0.5], 1.0)


class TestMeanIou:
    def test_all_ones(self):
        assert mean_iou([1.0, 1.0, 1.0]) == 100.0

    def test_hand_mean(self):
        assert abs(mean_iou([0.8, 0.4, 0.6]) - 60.0) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            mean_iou([])


def small_dataset(n_videos=4, seed=0):
    cfg = AlignmentConfig(latent_dim=8, video_dim=12, query_dim=12,
                          align_noise_sigma=0.0, obs_noise_sigma=0.05, seed=seed)
    return generate_synthetic_dataset(cfg, n_videos=n_videos, segments_per_video=12,
                                      events_per_video=3, frames_per_segment=2)


@dataclass
class StubOutput:
    prediction: torch.Tensor


class OracleModel:
    """Test double that answers with the ground-truth interval."""

    def __init__(self, dataset):
        self.lookup = {
            (q.video_id, q.id): q.gt_interval for q in dataset.queries
        }
        self.by_feature = {q.feature.tobytes(): q.gt_interval for q in dataset.queries}

    def forward(self, features, query):
        gt = self.by_feature[query.detach().numpy().astype(np.float64).tobytes()]
        return StubOutput(torch.tensor([gt.start, gt.end], dtype=DTYPE))


class ConstantModel:
    def __init__(self, start, end):
        self.prediction = torch.tensor([start, end], dtype=DTYPE)

    def forward(self, features, query):
        return StubOutput(self.prediction)


class TestEvaluate:
    def test_oracle_double_scores_hundred(self):
        ds = small_dataset()
        result = evaluate(OracleModel(ds), ds)
        assert result.miou == 100.0
        assert all(v == 100.0 for v in result.recall_at.values())
        assert result.n_queries == len(ds.queries)

    def test_constant_full_interval_equals_mean_gt_length(self):
        ds = small_dataset()
        result = evaluate(ConstantModel(0.0, 1.0), ds)
        expected = 100 * np.mean([q.gt_interval.length for q in ds.queries])
        assert abs(result.miou - expected) < 1e-9

    def test_missing_video_listed(self):
        ds = small_dataset()
        ds.queries[0].video_id = "ghost"
        ds.queries[3].video_id = "phantom"
        with pytest.raises(EvaluationError, match="ghost.*phantom|phantom.*ghost"):
            evaluate(ConstantModel(0, 1), ds)

    def test_no_queries_rejected(self):
        ds = small_dataset()
        ds.queries = []
        with pytest.raises(InvalidInputError):
            evaluate(ConstantModel(0, 1), ds)

    def test_does_not_mutate_parameters(self):
        ds = small_dataset()
        result = train(ds, TrainConfig(clusters=3, batch_size=16, hidden=16,
                                       epochs=1, learning_rate=1e-3, seed=0))
        before = parameter_hash(result.grounding)
        evaluate(result.grounding, ds)
        assert parameter_hash(result.grounding) == before

    def test_recall_monotone_invariant(self):
        ds = small_dataset()
        result = evaluate(ConstantModel(0.1, 0.6), ds)
        assert result.recall_at[0.3] >= result.recall_at[0.5] >= result.recall_at[0.7]


class TestRandomBaseline:
    def test_deterministic(self):
        ds = small_dataset()
        assert random_prediction_baseline(ds, 500, seed=3) == random_prediction_baseline(ds, 500, seed=3)

    def test_plausible_range(self):
        ds = small_dataset()
        value = random_prediction_baseline(ds, 4000, seed=0)
        assert 2.0 < value < 40.0

    def test_needs_queries(self):
        ds = small_dataset()
        ds.queries = []
        with pytest.raises(InvalidInputError):
            random_prediction_baseline(ds)


def fast_cfg(**overrides):
    defaults = dict(clusters=3, batch_size=16, hidden=16, epochs=1,
                    learning_rate=1e-3, max_segments=16, seed=0)
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestAblationHarness:
    def test_losses_suite_structure_and_cache(self):
        ds = small_dataset()
        cache = {}
        report = run_ablation("losses", ds, fast_cfg(), seeds=[0, 1, 2], cache=cache)
        assert [v.name for v in report.variants] == ["both", "reg_only", "att_only"]
        assert set(report.orderings) == {"both>reg_only", "reg_only>att_only"}
        assert len(cache) == 9
        for v in report.variants:
            assert v.seeds == [0, 1, 2]
            assert len(v.results) == 3

        # the selection suite's "st" variant coincides with "both": cached
        report2 = run_ablation("selection", ds, fast_cfg(), seeds=[0, 1, 2], cache=cache)
        assert len(cache) == 12  # only the random variant trained anew
        st = report2.variant("st")
        both = report.variant("both")
        assert st.miou_mean == both.miou_mean

    def test_n_frames_sweep_values_and_csv(self):
        ds = small_dataset(n_videos=2)
        report = run_ablation("n_frames", ds, fast_cfg(), seeds=[0, 1, 2], cache={})
        assert [v.name for v in report.variants] == ["n1", "n2", "n4", "n8", "n9", "n16"]
        csv_text = sweep_csv(report)
        rows = csv_text.strip().splitlines()
        assert rows[0].startswith("n_candidates,")
        assert [int(r.split(",")[0]) for r in rows[1:]] == [1, 2, 4, 8, 9, 16]

    def test_variants_share_config_except_varied_field(self):
        ds = small_dataset(n_videos=2)
        report = run_ablation("selection", ds, fast_cfg(), seeds=[0, 1, 2], cache={})
        assert report.shared_config_hash

    def test_unknown_suite_rejected(self):
        with pytest.raises(InvalidInputError):
            run_ablation("nope", small_dataset(n_videos=2), fast_cfg(), seeds=[0, 1, 2])

    def test_requires_three_seeds(self):
        with pytest.raises(InvalidInputError):
            run_ablation("losses", small_dataset(n_videos=2), fast_cfg(), seeds=[0, 1])

    def test_report_json_and_table_render(self):
        ds = small_dataset(n_videos=2)
        report = run_ablation("selection", ds, fast_cfg(), seeds=[0, 1, 2], cache={})
        payload = json.loads(report_json(report))
        assert payload["suite"] == "selection"
        table = format_ablation_table(report)
        assert "st" in table and "random" in table

    def test_train_and_evaluate_cache_respects_video_payload(self):
        ds_a = small_dataset(seed=0)
        ds_b = small_dataset(seed=1)
        cache = {}
        train_and_evaluate(ds_a, fast_cfg(), cache)
        train_and_evaluate(ds_b, fast_cfg(), cache)
        assert len(cache) == 2  # different videos must not share a run


def test_format_eval_table():
    result = EvalResult(recall_at={0.3: 50.0, 0.5: 30.0, 0.7: 10.0}, miou=25.0, n_queries=8)
    table = format_eval_table(result)
    assert "R@0.3" in table and "mIoU" in table and "25.00" in table
