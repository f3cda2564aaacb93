"""Differentiable building blocks for the selection and grounding networks.

Everything runs in double precision on CPU. Blocks are ordinary torch
modules; gradients come from autograd and are verified against central
differences by :func:`check_gradients`. Randomness is never ambient: any
stochastic op takes an explicit numpy Generator or a pinned noise tensor.

Internal nonlinearities are smooth (tanh/sigmoid) so that finite-difference
gradient checks are stable; piecewise-linear activations put kinks in the
loss surface that central differences cannot cross reliably.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ContractViolationError, InvalidInputError

DTYPE = torch.float64

_ACTIVATIONS = {
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "relu": torch.relu,
    "linear": lambda x: x,
}


def smooth_l1(x):
    """Huber-style penalty: ``0.5*x**2`` for |x| < 1, ``|x| - 0.5`` beyond.

    Continuously differentiable at |x| = 1. Accepts a float or a tensor.
    """
    if isinstance(x, torch.Tensor):
        if not torch.isfinite(x).all():
            raise InvalidInputError("smooth_l1: input must be finite")
        ax = x.abs()
        return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    if not math.isfinite(x):
        raise InvalidInputError("smooth_l1: input must be finite")
    return 0.5 * x * x if abs(x) < 1.0 else abs(x) - 0.5


def softmax(v, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Temperature softmax along ``dim``; shift-invariant in the logits."""
    if temperature <= 0:
        raise InvalidInputError(f"softmax: temperature must be > 0, got {temperature}")
    v = torch.as_tensor(v, dtype=DTYPE)
    if not torch.isfinite(v).all():
        raise InvalidInputError("softmax: input must be finite")
    return torch.softmax(v / temperature, dim=dim)


def positional_encoding(length: int, dim: int) -> torch.Tensor:
    """Sinusoidal position table of shape (length, dim).

    Column 2i holds sin(pos / 10000^(2i/dim)), column 2i+1 the matching cos.
    """
    if dim % 2 != 0:
        raise InvalidInputError(f"positional_encoding: dim must be even, got {dim}")
    if length < 1 or dim < 1:
        raise InvalidInputError("positional_encoding: length and dim must be >= 1")
    pos = torch.arange(length, dtype=DTYPE).unsqueeze(1)
    freq = torch.pow(10000.0, torch.arange(0, dim, 2, dtype=DTYPE) / dim)
    table = torch.empty(length, dim, dtype=DTYPE)
    table[:, 0::2] = torch.sin(pos / freq)
    table[:, 1::2] = torch.cos(pos / freq)
    return table


def sample_gumbel(shape, rng: np.random.Generator) -> torch.Tensor:
    """Standard Gumbel noise, numerically clamped away from log(0)."""
    u = np.clip(rng.uniform(size=shape), 1e-10, 1.0 - 1e-10)
    return torch.from_numpy(-np.log(-np.log(u))).to(DTYPE)


def gumbel_softmax(
    scores: torch.Tensor,
    tau: float = 1.0,
    hard: bool = False,
    rng: np.random.Generator | None = None,
    noise: torch.Tensor | None = None,
    return_soft: bool = False,
):
    """Gumbel-softmax sample over the last dimension of ``scores``.

    Soft mode returns softmax((scores + g)/tau). Hard mode returns the
    one-hot argmax of the soft vector with a straight-through gradient, i.e.
    the forward value is exactly one-hot while the backward pass sees the
    soft vector's Jacobian.

    ``noise`` pins the Gumbel draw for tests (pass zeros to disable noise);
    otherwise it is sampled from ``rng``.
    """
    if tau <= 0:
        raise InvalidInputError(f"gumbel_softmax: tau must be > 0, got {tau}")
    if noise is None:
        if rng is None:
            raise InvalidInputError("gumbel_softmax: provide rng or a pinned noise tensor")
        noise = sample_gumbel(tuple(scores.shape), rng)
    if noise.shape != scores.shape:
        raise InvalidInputError("gumbel_softmax: noise shape must match scores")
    soft = torch.softmax((scores + noise) / tau, dim=-1)
    if hard:
        index = soft.argmax(dim=-1, keepdim=True)
        one_hot = torch.zeros_like(soft).scatter_(-1, index, 1.0)
        # (soft - soft.detach()) is exactly zero in the forward value, so the
        # output is exactly one-hot while gradients flow through soft
        out = one_hot + (soft - soft.detach())
    else:
        out = soft
    return (out, soft) if return_soft else out


class MLP(nn.Module):
    """Affine stack with an activation between layers.

    The last layer stays linear unless ``final_activation`` asks for an
    output squashing (e.g. "sigmoid" for the interval head). Score heads
    that feed a softmax should pass ``final_bias=False``: a constant added
    to every logit is invisible to softmax and would be a dead parameter.
    """

    def __init__(self, sizes, activation: str = "tanh", final_activation: str | None = None,
                 final_bias: bool = True):
        super().__init__()
        if len(sizes) < 2:
            raise InvalidInputError("MLP needs at least an input and an output size")
        if activation not in _ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {activation!r}")
        if final_activation is not None and final_activation not in _ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {final_activation!r}")
        layers = [nn.Linear(m, n) for m, n in zip(sizes[:-2], sizes[1:-1])]
        layers.append(nn.Linear(sizes[-2], sizes[-1], bias=final_bias))
        self.layers = nn.ModuleList(layers)
        self.in_dim = sizes[0]
        self.activation = activation
        self.final_activation = final_activation
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise InvalidInputError(
                f"MLP: expected input dim {self.in_dim}, got {x.shape[-1]}"
            )
        act = _ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        x = self.layers[-1](x)
        if self.final_activation is not None:
            x = _ACTIVATIONS[self.final_activation](x)
        return x


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head projections.

    Keys and values may live in a different input dimension than queries
    (``kv_dim``); all are projected to ``dim`` before attention. Accepts
    leading batch dimensions on all inputs.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if heads < 1 or dim % heads != 0:
            raise InvalidInputError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.query_proj = nn.Linear(dim, dim)
        # a key bias shifts every score of a query by the same amount, which
        # softmax ignores; keeping it would leave a zero-gradient parameter
        self.key_proj = nn.Linear(self.kv_dim, dim, bias=False)
        self.value_proj = nn.Linear(self.kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.to(DTYPE)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        *lead, t, _ = x.shape
        return x.view(*lead, t, self.heads, self.head_dim).transpose(-2, -3)

    def forward(self, query, key, value, return_weights: bool = False):
        if query.shape[-1] != self.dim:
            raise InvalidInputError(
                f"attention: query dim {query.shape[-1]} != model dim {self.dim}"
            )
        if key.shape[-1] != self.kv_dim or value.shape[-1] != self.kv_dim:
            raise InvalidInputError(
                f"attention: key/value dim must be {self.kv_dim}, "
                f"got {key.shape[-1]}/{value.shape[-1]}"
            )
        if key.shape[-2] != value.shape[-2]:
            raise InvalidInputError("attention: key and value row counts differ")
        q = self._split_heads(self.query_proj(query))
        k = self._split_heads(self.key_proj(key))
        v = self._split_heads(self.value_proj(value))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(-2, -3)
        *lead, t, _, _ = out.shape
        out = self.out_proj(out.reshape(*lead, t, self.dim))
        return (out, weights) if return_weights else out


class BiGRU(nn.Module):
    """Bidirectional GRU; returns the per-position concatenation of the
    top-layer forward and backward states (last dim = 2 * hidden)."""

    def __init__(self, input_dim: int, hidden: int, layers: int = 1):
        super().__init__()
        self.gru = nn.GRU(
            input_dim, hidden, num_layers=layers, batch_first=True, bidirectional=True
        )
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-2] < 1:
            raise InvalidInputError("BiGRU: sequence must have at least one step")
        out, _ = self.gru(x)
        return out.squeeze(0) if squeeze else out


class TransformerEncoderLayer(nn.Module):
    """Post-norm encoder layer: self-attention then a feed-forward block,
    each wrapped in a residual connection and layer normalization."""

    def __init__(self, dim: int, heads: int, ffn_dim: int | None = None):
        super().__init__()
        ffn_dim = 2 * dim if ffn_dim is None else ffn_dim
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = MLP([dim, ffn_dim, dim], activation="tanh")
        self.norm2 = nn.LayerNorm(dim)
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ffn(x))


def init_parameters(module: nn.Module, seed: int) -> None:
    """Reset all parameters of ``module`` deterministically.

    Weight matrices get uniform values in +/- sqrt(6 / (fan_in + fan_out)),
    biases zero, and normalization gains one. Draws come from a numpy
    stream in sorted parameter-name order, so the same seed reproduces the
    same weights bit-for-bit on any platform.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() >= 2:
                fan_out, fan_in = p.shape[0], int(np.prod(p.shape[1:]))
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                values = rng.uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.from_numpy(values).to(DTYPE))
            elif name.endswith("bias") or ".bias" in name:
                p.zero_()
            else:
                p.fill_(1.0)  # normalization gain


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of all parameters, in name order."""
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        digest.update(name.encode())
        digest.update(p.detach().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class GradientReport:
    """Analytic vs central-difference gradients for a set of parameters.

    Relative error is computed per parameter tensor as
    ``|a - n| / max(|a|, |n|, 1e-8)`` with Frobenius norms.
    """

    analytic: dict = field(repr=False)
    numeric: dict = field(repr=False)
    rel_error: dict
    max_rel_error: float


def check_gradients(loss_fn, params, epsilon: float = 1e-5) -> GradientReport:
    """Verify autograd gradients of ``loss_fn`` against central differences.

    ``params`` maps names to leaf tensors that ``loss_fn`` closes over. The
    loss must be deterministic (all noise pinned): it is evaluated twice up
    front and must agree exactly, otherwise the finite-difference probe
    would be meaningless.
    """
    params = dict(params)
    if not params:
        raise InvalidInputError("check_gradients: no parameters given")
    for name, p in params.items():
        if not isinstance(p, torch.Tensor) or not p.requires_grad:
            raise InvalidInputError(f"check_gradients: {name} is not a leaf tensor with grad")

    first, second = float(loss_fn().detach()), float(loss_fn().detach())
    if first != second:
        raise ContractViolationError(
            f"loss is not deterministic under pinned seeds: {first} != {second}"
        )

    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()))
    analytic = {n: g.detach().clone() for n, g in zip(params, grads)}

    numeric = {}
    with torch.no_grad():
        for name, p in params.items():
            grad = torch.zeros_like(p)
            flat, grad_flat = p.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = float(loss_fn())
                flat[i] = orig - epsilon
                down = float(loss_fn())
                flat[i] = orig
                grad_flat[i] = (up - down) / (2.0 * epsilon)
            numeric[name] = grad

    rel_error = {}
    for name in params:
        diff = (analytic[name] - numeric[name]).norm().item()
        denom = max(analytic[name].norm().item(), numeric[name].norm().item(), 1e-8)
        rel_error[name] = diff / denom
    return GradientReport(analytic, numeric, rel_error, max(rel_error.values()))
