"""Pseudo language features selected from frame embeddings.

A temporal proposal contributes N candidate frame features. Each candidate
is perturbed with scaled Gaussian noise and renormalized; a small
transformer scores the set and one row is chosen through a straight-through
gumbel-softmax, so the choice stays differentiable end to end. No
positional information is added: the selection is deliberately order-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidInputError, SkipProposal
from .nn import DTYPE, MLP, TransformerEncoderLayer, gumbel_softmax, init_parameters, sample_gumbel
from .proposals import TemporalProposal


@dataclass
class CandidateSet:
    """N candidate features (rows unit-norm once perturbed) and their frame indices."""

    features: torch.Tensor
    source_frame_indices: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class PseudoLanguageFeature:
    """The selected stand-in for a text feature, with selection diagnostics."""

    feature: torch.Tensor
    selected_index: int
    soft_weights: torch.Tensor


class SelectionTransformer(nn.Module):
    """Scores candidate frame features for selection.

    Two post-norm encoder layers with two heads contextualize the candidate
    set (no positional encoding), then a scalar head produces one logit per
    candidate. ``tau`` is the gumbel-softmax temperature used at selection.
    """

    def __init__(self, feature_dim: int, layers: int = 2, heads: int = 2, tau: float = 1.0, seed: int = 0):
        super().__init__()
        if tau <= 0:
            raise InvalidInputError("tau must be > 0")
        self.feature_dim = feature_dim
        self.tau = tau
        self.encoder = nn.ModuleList(
            TransformerEncoderLayer(feature_dim, heads) for _ in range(layers)
        )
        self.score_head = MLP([feature_dim, feature_dim, 1], activation="tanh", final_bias=False)
        self.to(DTYPE)
        init_parameters(self, seed)

    def logits(self, tokens: torch.Tensor) -> torch.Tensor:
        """Per-candidate scores; tokens (..., N, D) -> logits (..., N)."""
        if tokens.shape[-1] != self.feature_dim:
            raise InvalidInputError(
                f"candidate dim {tokens.shape[-1]} != transformer dim {self.feature_dim}"
            )
        x = tokens
        for layer in self.encoder:
            x = layer(x)
        return self.score_head(x).squeeze(-1)


def proposal_frame_indices(video, proposal: TemporalProposal) -> np.ndarray:
    """Indices of frames whose segment falls inside the proposal span."""
    t = video.segment_features.shape[0]
    fractions = np.asarray(video.frame_times, dtype=np.float64) / video.duration_s
    segment = np.minimum((fractions * t).astype(int), t - 1)
    return np.nonzero((segment >= proposal.first) & (segment <= proposal.last))[0]


def sample_candidates(video, proposal: TemporalProposal, n: int, rng: np.random.Generator) -> CandidateSet:
    """Sample N frame features from inside the proposal.

    Without replacement when the proposal holds at least N frames, with
    replacement otherwise. A frameless proposal raises SkipProposal so the
    caller can drop it.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    inside = proposal_frame_indices(video, proposal)
    if inside.size == 0:
        raise SkipProposal(
            f"video {video.id}: proposal segments [{proposal.first}, {proposal.last}] hold no frames"
        )
    chosen = rng.choice(inside, size=n, replace=inside.size < n)
    features = torch.from_numpy(np.asarray(video.frame_features[chosen], dtype=np.float64))
    return CandidateSet(features.clone(), np.asarray(chosen))


def perturb(row: torch.Tensor, scale: float, rng: np.random.Generator | None = None,
            noise: torch.Tensor | None = None) -> torch.Tensor:
    """Add direction-preserving Gaussian noise of relative magnitude ``scale``
    and renormalize to unit length.

    The pre-normalization perturbation has norm exactly scale * |row|. With
    scale = 0 this is a pure normalization. ``noise`` pins the Gaussian draw.
    """
    if scale < 0:
        raise InvalidInputError("perturbation scale must be >= 0")
    row = torch.as_tensor(row, dtype=DTYPE)
    norm = row.norm()
    if norm == 0:
        raise InvalidInputError("cannot perturb a zero-norm feature")
    if scale == 0:
        return row / norm
    if noise is None:
        if rng is None:
            raise InvalidInputError("perturb: provide rng or a pinned noise tensor")
        noise = torch.from_numpy(rng.standard_normal(row.shape[-1])).to(DTYPE)
    noise_norm = noise.norm()
    if noise_norm == 0:
        raise InvalidInputError("perturbation noise must be nonzero")
    out = row + scale * noise * (norm / noise_norm)
    return out / out.norm()


def perturb_candidates(candidates: CandidateSet, scale: float, rng: np.random.Generator) -> CandidateSet:
    rows = [perturb(candidates.features[i], scale, rng) for i in range(candidates.size)]
    return CandidateSet(torch.stack(rows), candidates.source_frame_indices)


def select_from_logits(
    candidates: torch.Tensor,
    logits: torch.Tensor,
    tau: float,
    hard: bool = True,
    rng: np.random.Generator | None = None,
    noise: torch.Tensor | None = None,
):
    """Gumbel-softmax pooling of candidate rows given precomputed logits.

    Works batched: candidates (..., N, D), logits (..., N). Returns the
    unit-norm pooled features (..., D), argmax indices and soft weights.
    """
    weights, soft = gumbel_softmax(logits, tau, hard=hard, rng=rng, noise=noise, return_soft=True)
    pooled = (weights.unsqueeze(-2) @ candidates).squeeze(-2)
    norm = pooled.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise InvalidInputError("selected feature has zero norm; candidates cancelled out")
    return pooled / norm, weights.argmax(dim=-1), soft


def select(
    candidates: CandidateSet,
    selector: SelectionTransformer,
    hard: bool = True,
    rng: np.random.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> PseudoLanguageFeature:
    """Pick one candidate as the pseudo language feature.

    Hard mode (the default) returns exactly one renormalized candidate row in
    the forward value while gradients follow the soft selection weights.
    """
    logits = selector.logits(candidates.features)
    feature, index, soft = select_from_logits(
        candidates.features, logits, selector.tau, hard=hard, rng=rng, noise=noise
    )
    return PseudoLanguageFeature(feature, int(index), soft.detach().clone())


@dataclass
class TrainingPair:
    """One training triple: video features, pseudo query, pseudo interval."""

    video_features: torch.Tensor
    query_feature: torch.Tensor
    interval: object  # Interval
    selected_index: int


def make_training_pair(
    video,
    proposal: TemporalProposal,
    selector: SelectionTransformer,
    perturb_scale: float,
    n_candidates: int,
    rng: np.random.Generator,
    hard: bool = True,
) -> TrainingPair:
    """Build a (features, pseudo query, interval) triple for one proposal."""
    candidates = sample_candidates(video, proposal, n_candidates, rng)
    candidates = perturb_candidates(candidates, perturb_scale, rng)
    noise = sample_gumbel((candidates.size,), rng)
    chosen = select(candidates, selector, hard=hard, noise=noise)
    features = torch.from_numpy(np.asarray(video.segment_features, dtype=np.float64))
    return TrainingPair(features, chosen.feature, proposal.interval, chosen.selected_index)
