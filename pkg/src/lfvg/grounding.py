"""The video grounding network.

Video segments are projected, tagged with sinusoidal positions and encoded
by a bidirectional GRU; a fusion stack of alternating cross-attention (the
single language token as key/value) and self-attention layers produces a
language-conditioned sequence. A scorer turns that sequence into a temporal
attention distribution, and an interval head regresses (start, end) from
the attention-pooled feature. Training-time pseudo features and
inference-time text features go through this exact same forward path.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidInputError, StoreError
from .nn import DTYPE, MLP, MultiHeadAttention, init_parameters, positional_encoding
from .pseudo_query import SelectionTransformer
from .store import read_blob, write_blob


@dataclass(frozen=True)
class GroundingConfig:
    video_dim: int
    query_dim: int
    hidden: int = 256
    gru_layers: int = 2
    fusion_layers: int = 3
    fusion_heads: int = 4
    max_segments: int = 128

    def __post_init__(self):
        if self.hidden % self.fusion_heads != 0:
            raise InvalidInputError("hidden size must be divisible by fusion heads")
        if min(self.video_dim, self.query_dim, self.hidden) < 2:
            raise InvalidInputError("dims must be >= 2")
        if self.hidden % 2 != 0:
            raise InvalidInputError("hidden size must be even for positional encoding")


@dataclass
class GroundingOutput:
    prediction: torch.Tensor  # (..., 2) ordered (start, end) in [0, 1]
    attention: torch.Tensor  # (..., T) on the simplex
    fused: torch.Tensor  # (..., T, hidden)


class LanguageInjection(nn.Module):
    """Cross-attention specialized to a single language key/value token.

    A softmax over one key weights it 1 at every query position, so the
    full attention mechanism degenerates to broadcasting the projected
    language value; a query/key path would carry identically-zero
    gradients. This module computes exactly what multi-head attention with
    a singleton key/value computes (verified by an equivalence test).
    """

    def __init__(self, hidden: int, query_dim: int):
        super().__init__()
        self.value_proj = nn.Linear(query_dim, hidden)
        self.out_proj = nn.Linear(hidden, hidden)
        self.to(DTYPE)

    def forward(self, sequence: torch.Tensor, language: torch.Tensor) -> torch.Tensor:
        if language.shape[-2] != 1:
            raise InvalidInputError("language injection expects a single token")
        return self.out_proj(self.value_proj(language)).expand_as(sequence)


class FusionLayer(nn.Module):
    """Language injection (singleton cross-attention), then self-attention,
    each with a residual connection and post-layer normalization."""

    def __init__(self, hidden: int, heads: int, query_dim: int):
        super().__init__()
        self.cross = LanguageInjection(hidden, query_dim)
        self.norm_cross = nn.LayerNorm(hidden)
        self.self_attn = MultiHeadAttention(hidden, heads)
        self.norm_self = nn.LayerNorm(hidden)
        self.to(DTYPE)

    def forward(self, sequence: torch.Tensor, language: torch.Tensor) -> torch.Tensor:
        sequence = self.norm_cross(sequence + self.cross(sequence, language))
        return self.norm_self(sequence + self.self_attn(sequence, sequence, sequence))


class GroundingModel(nn.Module):
    def __init__(self, cfg: GroundingConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.input_proj = MLP([cfg.video_dim, h])
        self.encoder_gru = nn.GRU(
            h, h, num_layers=cfg.gru_layers, batch_first=True, bidirectional=True
        )
        self.encoder_mlp = MLP([3 * h, h])
        self.fusion = nn.ModuleList(
            FusionLayer(h, cfg.fusion_heads, cfg.query_dim) for _ in range(cfg.fusion_layers)
        )
        self.attention_scorer = MLP([h, h, 1], activation="tanh", final_bias=False)
        self.interval_head = MLP([h, h, 2], activation="tanh", final_activation="sigmoid")
        self.to(DTYPE)
        init_parameters(self, seed)

    def encode_video(self, features: torch.Tensor) -> torch.Tensor:
        """Project, position-encode and recurrently encode segment features.

        Accepts (T, video_dim) or (B, T, video_dim); returns matching
        (..., T, hidden).
        """
        squeeze = features.dim() == 2
        if squeeze:
            features = features.unsqueeze(0)
        if features.dim() != 3:
            raise InvalidInputError("video features must be (T, D) or (B, T, D)")
        t = features.shape[-2]
        if t < 1:
            raise InvalidInputError("video must have at least one segment")
        if t > self.cfg.max_segments:
            raise InvalidInputError(
                f"sequence length {t} exceeds the maximum {self.cfg.max_segments}; "
                "pre-pool or truncate the features"
            )
        if features.shape[-1] != self.cfg.video_dim:
            raise InvalidInputError(
                f"video feature dim {features.shape[-1]} != configured {self.cfg.video_dim}"
            )
        x = self.input_proj(features) + positional_encoding(t, self.cfg.hidden)
        recurrent, _ = self.encoder_gru(x)
        encoded = self.encoder_mlp(torch.cat([recurrent, x], dim=-1))
        return encoded.squeeze(0) if squeeze else encoded

    def fuse(self, encoded: torch.Tensor, query_feature: torch.Tensor):
        """Condition the encoded sequence on one language feature.

        Returns the fused sequence and the temporal attention distribution.
        ``encoded`` is (..., T, hidden); ``query_feature`` is (..., query_dim).
        """
        if query_feature.shape[-1] != self.cfg.query_dim:
            raise InvalidInputError(
                f"query feature dim {query_feature.shape[-1]} != configured {self.cfg.query_dim}"
            )
        token = query_feature.unsqueeze(-2)
        sequence = encoded
        for layer in self.fusion:
            sequence = layer(sequence, token)
        scores = self.attention_scorer(sequence).squeeze(-1)
        attention = torch.softmax(scores, dim=-1)
        return sequence, attention

    def predict_interval(self, fused: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
        """Regress an ordered (start, end) pair from the pooled sequence."""
        pooled = (attention.unsqueeze(-2) @ fused).squeeze(-2)
        raw = self.interval_head(pooled)
        start = torch.minimum(raw[..., 0], raw[..., 1])
        end = torch.maximum(raw[..., 0], raw[..., 1])
        return torch.stack([start, end], dim=-1)

    def forward(self, features: torch.Tensor, query_feature: torch.Tensor) -> GroundingOutput:
        """Full grounding pass; identical for pseudo and real query features."""
        encoded = self.encode_video(features)
        fused, attention = self.fuse(encoded, query_feature)
        prediction = self.predict_interval(fused, attention)
        return GroundingOutput(prediction, attention, fused)


CHECKPOINT_HEADER = "checkpoint.json"


def _dump_parameters(module: nn.Module, directory: str, manifest: dict) -> None:
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        blob = name.replace(".", "_") + ".bin"
        arr = p.detach().numpy()
        write_blob(os.path.join(directory, blob), arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr)
        manifest[name] = {"blob": blob, "shape": list(arr.shape)}


def _load_parameters(module: nn.Module, directory: str, manifest: dict) -> None:
    own = dict(module.named_parameters())
    if set(own) != set(manifest):
        missing = set(own) ^ set(manifest)
        raise StoreError(f"checkpoint parameter names do not match the model: {sorted(missing)}")
    with torch.no_grad():
        for name, meta in manifest.items():
            values = read_blob(os.path.join(directory, meta["blob"]))
            target = own[name]
            values = values.reshape(meta["shape"])
            if list(target.shape) != list(values.shape):
                raise StoreError(
                    f"checkpoint parameter {name}: shape {values.shape} != model {tuple(target.shape)}"
                )
            target.copy_(torch.from_numpy(values).to(DTYPE))


def save_checkpoint(path, model: GroundingModel, selector: SelectionTransformer, extra: dict | None = None):
    """Write model and selector parameters as named blobs plus a JSON header."""
    os.makedirs(path, exist_ok=True)
    grounding_dir = os.path.join(path, "grounding")
    selector_dir = os.path.join(path, "selector")
    os.makedirs(grounding_dir, exist_ok=True)
    os.makedirs(selector_dir, exist_ok=True)
    header = {
        "format": "lfvg-checkpoint",
        "version": 1,
        "grounding_config": asdict(model.cfg),
        "selector": {
            "feature_dim": selector.feature_dim,
            "layers": len(selector.encoder),
            "heads": selector.encoder[0].attn.heads,
            "tau": selector.tau,
        },
        "grounding_params": {},
        "selector_params": {},
    }
    if extra:
        header.update(extra)
    _dump_parameters(model, grounding_dir, header["grounding_params"])
    _dump_parameters(selector, selector_dir, header["selector_params"])
    tmp = os.path.join(path, CHECKPOINT_HEADER + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(path, CHECKPOINT_HEADER))


def load_checkpoint(path):
    """Load a checkpoint directory; returns (model, selector, header)."""
    header_path = os.path.join(path, CHECKPOINT_HEADER)
    if not os.path.isfile(header_path):
        raise StoreError(f"no {CHECKPOINT_HEADER} under {path}")
    with open(header_path, encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("format") != "lfvg-checkpoint":
        raise StoreError(f"{header_path}: not a checkpoint header")
    cfg = GroundingConfig(**header["grounding_config"])
    model = GroundingModel(cfg)
    sel = header["selector"]
    selector = SelectionTransformer(
        sel["feature_dim"], layers=sel["layers"], heads=sel["heads"], tau=sel["tau"]
    )
    _load_parameters(model, os.path.join(path, "grounding"), header["grounding_params"])
    _load_parameters(selector, os.path.join(path, "selector"), header["selector_params"])
    return model, selector, header
