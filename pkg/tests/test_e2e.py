"""End-to-end behaviour of trained models (beyond unit contracts)."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from lfvg.data import AlignmentConfig, generate_synthetic_dataset
from lfvg.evaluation import evaluate, random_prediction_baseline
from lfvg.grounding import GroundingConfig, GroundingModel
from lfvg.nn import DTYPE, sample_gumbel
from lfvg.pseudo_query import CandidateSet, SelectionTransformer, select, select_from_logits
from lfvg.rng import derive_rng
from lfvg.training import TrainConfig, make_target_mask, total_loss, train


@pytest.fixture(scope="module")
def trained():
    """A small but competent model: 40 videos, a few hundred steps."""
    cfg = AlignmentConfig(latent_dim=16, video_dim=32, query_dim=32,
                          align_noise_sigma=0.05, obs_noise_sigma=0.05, seed=1)
    ds = generate_synthetic_dataset(cfg, n_videos=40, segments_per_video=32,
                                    events_per_video=5, frames_per_segment=4)
    tc = TrainConfig(epochs=18, batch_size=32, hidden=64, learning_rate=1e-3, seed=0)
    return ds, train(ds, tc)


class TestTrainedModel:
    def test_beats_random_baseline_clearly(self, trained):
        ds, result = trained
        baseline = random_prediction_baseline(ds, draws=5000, seed=0)
        metrics = evaluate(result.grounding, ds)
        assert metrics.miou >= 2.0 * baseline

    def test_attention_differs_between_events_of_one_video(self, trained):
        ds, result = trained
        hits = total = 0
        with torch.no_grad():
            for video in ds.videos[:10]:
                queries = [q for q in ds.queries if q.video_id == video.id]
                features = torch.from_numpy(video.segment_features)
                encoded = result.grounding.encode_video(features)
                attentions = []
                for q in queries:
                    _, attention = result.grounding.fuse(
                        encoded, torch.from_numpy(q.feature))
                    attentions.append(attention)
                for i in range(len(attentions)):
                    for j in range(i + 1, len(attentions)):
                        total += 1
                        hits += int((attentions[i] - attentions[j]).abs().sum() > 0.1)
        # queries of different events attend to different segments
        assert hits / total > 0.9

    def test_inference_localizes_training_events(self, trained):
        from lfvg.evaluation import tiou

        ds, result = trained
        scores = []
        with torch.no_grad():
            for q in ds.queries:
                video = ds.video_by_id(q.video_id)
                out = result.grounding(torch.from_numpy(video.segment_features),
                                       torch.from_numpy(q.feature))
                pred = out.prediction.numpy()
                scores.append(tiou((float(pred[0]), float(pred[1])), q.gt_interval))
        # a decent share of individual queries localize at tIoU >= 0.5
        assert np.mean([s >= 0.5 for s in scores]) > 0.3


def test_selection_learns_to_find_the_aligned_frame_among_distractors():
    """Distractor benchmark: each candidate set holds one event-aligned frame
    and eight junk vectors; after joint training the selector must pick the
    aligned frame far above the 1/9 chance level (>= 3x)."""
    dims = 24
    n_candidates = 9
    segments = 16
    rng = np.random.default_rng(0)

    space = AlignmentConfig(latent_dim=12, video_dim=dims, query_dim=dims,
                            align_noise_sigma=0.0, obs_noise_sigma=0.0, seed=2)
    ds = generate_synthetic_dataset(space, n_videos=24, segments_per_video=segments,
                                    events_per_video=4, frames_per_segment=1)

    grounding = GroundingModel(
        GroundingConfig(video_dim=dims, query_dim=dims, hidden=32,
                        fusion_heads=4, max_segments=segments), seed=0)
    selector = SelectionTransformer(dims, seed=1)
    optimizer = torch.optim.Adam(
        list(grounding.parameters()) + list(selector.parameters()), lr=2e-3)

    samples = []
    for video in ds.videos:
        frames = video.frame_features
        for interval, _ in video.hidden_events:
            t = video.num_segments
            first = round(interval.start * t)
            aligned = frames[first] / np.linalg.norm(frames[first])
            samples.append((video.segment_features, aligned, interval))

    def build_candidates(aligned, rng):
        junk = rng.standard_normal((n_candidates - 1, dims))
        junk /= np.linalg.norm(junk, axis=1, keepdims=True)
        rows = np.concatenate([aligned[None, :], junk])
        order = rng.permutation(n_candidates)
        return torch.from_numpy(rows[order]).to(DTYPE), int(np.nonzero(order == 0)[0])

    for step in range(400):
        srng = derive_rng(7, "distractor", step)
        order = srng.choice(len(samples), size=16, replace=False)
        losses = []
        for idx in order:
            video_features, aligned, interval = samples[idx]
            cands, _ = build_candidates(aligned, srng)
            noise = sample_gumbel((n_candidates,), srng)
            pseudo, _, _ = select_from_logits(cands, selector.logits(cands), 1.0,
                                              hard=True, noise=noise)
            out = grounding(torch.from_numpy(video_features), pseudo)
            target = torch.tensor([interval.start, interval.end], dtype=DTYPE)
            mask = make_target_mask(interval, segments)
            losses.append(total_loss(out.prediction, target, out.attention, mask))
        optimizer.zero_grad()
        torch.stack(losses).mean().backward()
        optimizer.step()

    hits = trials = 0
    eval_rng = np.random.default_rng(99)
    with torch.no_grad():
        for video_features, aligned, interval in samples:
            for _ in range(4):
                cands, aligned_at = build_candidates(aligned, eval_rng)
                chosen = select(CandidateSet(cands, np.arange(n_candidates)), selector,
                                hard=True, noise=torch.zeros(n_candidates, dtype=DTYPE))
                hits += int(chosen.selected_index == aligned_at)
                trials += 1
    accuracy = hits / trials
    assert accuracy >= 3.0 / n_candidates, accuracy
