"""Losses and the language-free training loop.

Training consumes only video features: proposals come from clustering,
query features from the selection transformer over sampled frames. The
grounding model and the selector are updated jointly by Adam. Runs are
bit-for-bit reproducible: every random draw comes from a stream derived
from the config seed, and parameters are updated in a fixed order.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .data import Dataset, Interval
from .errors import InvalidInputError, NumericError, TrainingDataError
from .grounding import GroundingConfig, GroundingModel
from .nn import DTYPE, smooth_l1, sample_gumbel
from .proposals import TemporalProposal, generate_proposals, merge_consecutive
from .pseudo_query import (
    SelectionTransformer,
    perturb_candidates,
    proposal_frame_indices,
    sample_candidates,
    select_from_logits,
)
from .rng import derive_rng, derive_seed


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of a training run; ``paper`` and ``desk`` presets below."""

    clusters: int = 5
    perturb_scale: float = 1e-4
    att_loss_weight: float = 1.0
    reg_loss_weight: float = 1.0
    candidates: int = 9
    max_segments: int = 128
    batch_size: int = 32
    learning_rate: float = 4e-4
    epochs: int = 10
    seed: int = 0
    gumbel_tau: float = 1.0
    max_merge: int = 2
    min_event_len: int = 2
    mode: str = "language_free"
    hidden: int = 64
    selection: str = "st"
    grad_clip: float | None = None

    def __post_init__(self):
        if min(self.clusters, self.candidates, self.batch_size, self.epochs,
               self.max_segments, self.max_merge, self.min_event_len, self.hidden) < 1:
            raise InvalidInputError("counts must be >= 1")
        if self.learning_rate <= 0 or self.gumbel_tau <= 0:
            raise InvalidInputError("learning_rate and gumbel_tau must be > 0")
        if self.perturb_scale < 0 or self.att_loss_weight < 0 or self.reg_loss_weight < 0:
            raise InvalidInputError("weights and noise scales must be >= 0")
        if self.mode not in ("language_free", "upper_bound"):
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        if self.selection not in ("st", "random"):
            raise InvalidInputError(f"unknown selection strategy {self.selection!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidInputError("grad_clip must be positive when set")


# hyperparameters at publication scale vs a desk-scale configuration that
# trains in minutes on synthetic features; the desk preset raises the
# learning rate to converge within its smaller step budget
PRESETS = {
    "paper": TrainConfig(batch_size=256, hidden=256, epochs=20),
    "desk": TrainConfig(batch_size=32, hidden=64, epochs=15, learning_rate=1e-3),
}


def config_hash(cfg: TrainConfig, exclude: tuple = ()) -> str:
    payload = {k: v for k, v in asdict(cfg).items() if k not in exclude}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def make_target_mask(interval: Interval, num_segments: int) -> torch.Tensor:
    """0/1 vector marking segments whose midpoint falls inside the interval.

    A degenerate interval that covers no midpoint is widened to the nearest
    segment so the mask always holds at least one 1.
    """
    mids = (np.arange(num_segments) + 0.5) / num_segments
    mask = (mids >= interval.start) & (mids <= interval.end)
    if not mask.any():
        center = (interval.start + interval.end) / 2.0
        mask[int(np.argmin(np.abs(mids - center)))] = True
    return torch.from_numpy(mask.astype(np.float64))


def loss_reg(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Robust regression penalty on both endpoints; shapes (..., 2) -> (...)."""
    return smooth_l1(prediction - target).sum(dim=-1)


def loss_att(attention: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-attention over the masked positions; (..., T) -> (...)."""
    log_a = torch.log(attention.clamp_min(1e-12))
    return -(mask * log_a).sum(dim=-1) / mask.sum(dim=-1)


def total_loss(prediction, target, attention, mask, att_weight: float = 1.0,
               reg_weight: float = 1.0) -> torch.Tensor:
    return reg_weight * loss_reg(prediction, target) + att_weight * loss_att(attention, mask)


@dataclass
class StepLoss:
    step: int
    epoch: int
    loss_reg: float
    loss_att: float
    total: float


@dataclass
class TrainResult:
    grounding: GroundingModel
    selector: SelectionTransformer
    loss_curve: list[StepLoss]
    view_accesses: dict
    config: TrainConfig


def write_loss_csv(path, curve: list[StepLoss]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss_reg", "loss_att", "total"])
        for row in curve:
            writer.writerow([row.step, row.epoch, row.loss_reg, row.loss_att, row.total])


def _ground_truth_proposals(video, cfg: TrainConfig) -> list[TemporalProposal]:
    """Proposal list built from annotated events instead of clustering.

    The merge policy stays identical to the language-free path, so with
    perfect clustering both modes see the same training pairs.
    """
    t = video.segment_features.shape[0]
    events = []
    for interval, _ in video.hidden_events:
        first = max(0, min(t - 1, int(round(interval.start * t))))
        last = max(first, min(t - 1, int(round(interval.end * t)) - 1))
        events.append((first, last))
    events.sort()
    return merge_consecutive(events, cfg.max_merge, cfg.min_event_len, t)


def _collect_pairs(videos, cfg: TrainConfig):
    """Flattened (video index, proposal) list; frameless proposals dropped."""
    pairs = []
    for vi, video in enumerate(videos):
        t = video.segment_features.shape[0]
        if t > cfg.max_segments:
            raise InvalidInputError(
                f"video {video.id} has {t} segments, above the configured maximum "
                f"{cfg.max_segments}; pre-pool or truncate its features"
            )
        if cfg.mode == "upper_bound":
            if video.hidden_events is None:
                raise InvalidInputError(
                    f"video {video.id} has no ground-truth events; upper-bound "
                    "training needs annotated data"
                )
            proposals = _ground_truth_proposals(video, cfg)
        else:
            proposals = generate_proposals(
                video,
                k=cfg.clusters,
                max_merge=cfg.max_merge,
                min_len=cfg.min_event_len,
                seed=derive_seed(cfg.seed, "proposals", vi),
            )
        for p in proposals:
            if proposal_frame_indices(video, p).size > 0:
                pairs.append((vi, p))
    if not pairs:
        raise TrainingDataError("no usable (video, proposal) training pairs")
    return pairs


def _batch_samples(videos, pairs, selector, cfg, epoch, indices):
    """Materialize one minibatch: sampling, perturbation and selection.

    Per-pair randomness is keyed by (seed, epoch, pair id) so it is
    independent of shuffling and batch composition. Samples are grouped by
    sequence length and each group is processed in one batched pass.
    """
    groups: dict[int, dict] = {}
    for pair_id in indices:
        vi, proposal = pairs[pair_id]
        video = videos[vi]
        rng = derive_rng(cfg.seed, "pair", epoch, int(pair_id))
        candidates = sample_candidates(video, proposal, cfg.candidates, rng)
        candidates = perturb_candidates(candidates, cfg.perturb_scale, rng)
        noise = sample_gumbel((cfg.candidates,), rng)
        random_pick = int(rng.integers(cfg.candidates))
        t = video.segment_features.shape[0]
        group = groups.setdefault(t, {"features": [], "cands": [], "noise": [],
                                      "targets": [], "masks": [], "random_pick": []})
        group["features"].append(torch.from_numpy(np.asarray(video.segment_features, dtype=np.float64)))
        group["cands"].append(candidates.features)
        group["noise"].append(noise)
        group["targets"].append(torch.tensor([proposal.interval.start, proposal.interval.end], dtype=DTYPE))
        group["masks"].append(make_target_mask(proposal.interval, t))
        group["random_pick"].append(random_pick)

    batches = []
    for t, g in groups.items():
        cands = torch.stack(g["cands"])
        if cfg.selection == "st":
            logits = selector.logits(cands)
            query, _, _ = select_from_logits(
                cands, logits, selector.tau, hard=True, noise=torch.stack(g["noise"])
            )
        else:
            picks = torch.tensor(g["random_pick"])
            query = cands[torch.arange(cands.shape[0]), picks]
        batches.append(
            {
                "features": torch.stack(g["features"]),
                "query": query,
                "targets": torch.stack(g["targets"]),
                "masks": torch.stack(g["masks"]),
            }
        )
    return batches


def train(dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Run the full training loop and return models plus the loss curve.

    In ``language_free`` mode the dataset is accessed through a
    :class:`TrainingView`, so queries and ground-truth events are invisible
    to this function; the view's access counters end up in the result.
    """
    if not dataset.videos:
        raise TrainingDataError("dataset has no videos")
    view = None
    if cfg.mode == "language_free":
        view = dataset.training_view()
        videos = view.videos
    else:
        videos = dataset.videos

    video_dim = videos[0].segment_features.shape[1]
    query_dim = videos[0].frame_features.shape[1]
    pairs = _collect_pairs(videos, cfg)

    grounding = GroundingModel(
        GroundingConfig(
            video_dim=video_dim,
            query_dim=query_dim,
            hidden=cfg.hidden,
            max_segments=cfg.max_segments,
        ),
        seed=derive_seed(cfg.seed, "init-grounding"),
    )
    selector = SelectionTransformer(
        query_dim, tau=cfg.gumbel_tau, seed=derive_seed(cfg.seed, "init-selector")
    )
    optimizer = torch.optim.Adam(
        list(grounding.parameters()) + list(selector.parameters()),
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
    )

    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_size):
            indices = order[start : start + cfg.batch_size]
            batches = _batch_samples(videos, pairs, selector, cfg, epoch, indices)
            n_samples = sum(b["features"].shape[0] for b in batches)

            reg_sum = torch.zeros((), dtype=DTYPE)
            att_sum = torch.zeros((), dtype=DTYPE)
            for b in batches:
                out = grounding(b["features"], b["query"])
                reg_sum = reg_sum + loss_reg(out.prediction, b["targets"]).sum()
                att_sum = att_sum + loss_att(out.attention, b["masks"]).sum()
            reg_mean = reg_sum / n_samples
            att_mean = att_sum / n_samples
            loss = cfg.reg_loss_weight * reg_mean + cfg.att_loss_weight * att_mean

            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}", step=step)

            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(
                    [p for grp in optimizer.param_groups for p in grp["params"]],
                    cfg.grad_clip,
                )
            optimizer.step()
            curve.append(
                StepLoss(step, epoch, reg_mean.item(), att_mean.item(), loss.item())
            )
            step += 1

    accesses = dict(view.access_counts) if view is not None else {}
    return TrainResult(grounding, selector, curve, accesses, cfg)


def train_upper_bound(dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train with annotated event intervals in place of clustered proposals."""
    return train(dataset, replace(cfg, mode="upper_bound"))
