"""Residual soft-quantization encoder.

A backbone maps the item embedding to a hidden state; each step reads token
logits off the current state, relaxes the token choice with Gumbel-Softmax,
and subtracts the expected codeword (scaled, then RMS-normalized) to form
the next state. A shared affine head over the per-step stop-features yields
the length posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import InvalidTemperature, NumericalOverflow

RMS_EPS = 1e-8
UNIFORM_CLAMP = 1e-12
INIT_STD = 0.02


@dataclass
class EncoderOutput:
    """One relaxed forward pass over a minibatch. Shapes: (B, T, ...)."""

    messages: torch.Tensor        # (B, T, V) points in the simplex
    token_logits: torch.Tensor    # (B, T, V)
    length_logits: torch.Tensor   # (B, T)
    length_posterior: torch.Tensor  # (B, T)
    alive: torch.Tensor           # (B, T)
    stop_features: torch.Tensor   # (B, T, hidden)


@dataclass(frozen=True)
class SemanticId:
    """Hard token sequence with an explicit length (no pad stored)."""

    tokens: tuple[int, ...]
    length: int

    def __post_init__(self):
        if len(self.tokens) != self.length or self.length < 1:
            raise ValueError("SemanticId must hold exactly `length` >= 1 tokens")


class EncoderParams(nn.Module):
    """Backbone + per-step codebooks, scales, token heads, and length head.

    ``vocab`` counts real symbols; ``extra_symbols`` widens the token heads
    and codebooks (used by the EOS-based REINFORCE baseline).
    """

    def __init__(self, dim, hidden, max_len, vocab, extra_symbols=0,
                 dtype=torch.float32, generator=None):
        super().__init__()
        self.dim = dim
        self.hidden = hidden
        self.max_len = max_len
        self.vocab = vocab
        self.n_symbols = vocab + extra_symbols

        def init(*shape):
            w = torch.empty(*shape, dtype=dtype)
            w.normal_(0.0, INIT_STD, generator=generator)
            return nn.Parameter(w)

        T, V, H = max_len, self.n_symbols, hidden
        self.backbone_w1 = init(H, dim)
        self.backbone_b1 = nn.Parameter(torch.zeros(H, dtype=dtype))
        self.backbone_w2 = init(H, H)
        self.backbone_b2 = nn.Parameter(torch.zeros(H, dtype=dtype))
        self.codebooks = init(max(T - 1, 1), V, H) if T > 1 else nn.Parameter(torch.zeros(0, V, H, dtype=dtype))
        self.log_scales = nn.Parameter(torch.zeros(max(T - 1, 0), dtype=dtype))
        self.token_head_w = init(T, V, H)
        self.token_head_b = nn.Parameter(torch.zeros(T, V, dtype=dtype))
        self.length_head_w = init(H)
        self.length_head_b = nn.Parameter(torch.zeros((), dtype=dtype))

    def backbone(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(x @ self.backbone_w1.T + self.backbone_b1) ** 2
        return h @ self.backbone_w2.T + self.backbone_b2


def rms_norm(v: torch.Tensor) -> torch.Tensor:
    """Parameter-free RMSNorm with epsilon inside the root."""
    ms = v.pow(2).mean(dim=-1, keepdim=True)
    return v / torch.sqrt(ms + RMS_EPS)


def sample_gumbel(shape, generator=None, dtype=torch.float32, device=None) -> torch.Tensor:
    """Standard Gumbel draws, uniforms clamped away from {0, 1} by 1e-12."""
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -torch.log(-torch.log(u))


def gumbel_softmax(logits: torch.Tensor, gumbels: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax of Gumbel-perturbed logits at temperature tau (> 0)."""
    if tau <= 0:
        raise InvalidTemperature(f"tau must be positive, got {tau}")
    return torch.softmax((logits + gumbels) / tau, dim=-1)


def residual_update(h: torch.Tensor, m: torch.Tensor, codebook: torch.Tensor,
                    log_scale: torch.Tensor) -> torch.Tensor:
    """Subtract the expected codeword scaled by exp(log_scale), then RMSNorm."""
    return rms_norm(h - torch.exp(log_scale) * (m @ codebook))


def alive_from_length(q_len: torch.Tensor) -> torch.Tensor:
    """alive[t] = P(L >= t): reverse cumulative sum of the length posterior."""
    return q_len.flip(-1).cumsum(-1).flip(-1)


def _check_finite(h: torch.Tensor, step: int) -> None:
    if not torch.isfinite(h).all():
        raise NumericalOverflow(step)


def encode_relaxed(x: torch.Tensor, params: EncoderParams, tau: float,
                   generator=None, gumbels: torch.Tensor | None = None) -> EncoderOutput:
    """Relaxed forward pass (training path).

    Gumbel noise comes from ``generator`` unless a frozen ``gumbels`` tensor
    of shape (B, T, V) is supplied (gradient checking needs a common draw).
    """
    if tau <= 0:
        raise InvalidTemperature(f"tau must be positive, got {tau}")
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    B, T, V = x.shape[0], params.max_len, params.n_symbols
    if gumbels is None:
        gumbels = sample_gumbel((B, T, V), generator=generator, dtype=x.dtype, device=x.device)

    h = params.backbone(x)
    _check_finite(h, 0)
    stop_features, logits, messages = [h], [], []
    for t in range(T):
        l_t = h @ params.token_head_w[t].T + params.token_head_b[t]
        m_t = gumbel_softmax(l_t, gumbels[:, t], tau)
        logits.append(l_t)
        messages.append(m_t)
        if t < T - 1:
            h = residual_update(h, m_t, params.codebooks[t], params.log_scales[t])
            _check_finite(h, t + 1)
            stop_features.append(h)

    stop = torch.stack(stop_features, dim=1)  # (B, T, H)
    eta = stop @ params.length_head_w + params.length_head_b  # (B, T)
    q_len = torch.softmax(eta, dim=-1)
    out = EncoderOutput(
        messages=torch.stack(messages, dim=1),
        token_logits=torch.stack(logits, dim=1),
        length_logits=eta,
        length_posterior=q_len,
        alive=alive_from_length(q_len),
        stop_features=stop,
    )
    if squeeze:
        out = EncoderOutput(*(f.squeeze(0) for f in (
            out.messages, out.token_logits, out.length_logits,
            out.length_posterior, out.alive, out.stop_features)))
    return out


def _argmax_low(t: torch.Tensor) -> torch.Tensor:
    # lowest index wins on ties
    return (t == t.max(dim=-1, keepdim=True).values).to(torch.int64).argmax(dim=-1)


@torch.no_grad()
def encode_hard_full(x: torch.Tensor, params: EncoderParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard inference over all positions: argmax tokens with hard one-hot
    residual updates, modal length. Returns (tokens (B, T), lengths (B,))."""
    B, T, V = x.shape[0], params.max_len, params.n_symbols
    h = params.backbone(x)
    _check_finite(h, 0)
    stop_features, tokens = [h], []
    for t in range(T):
        l_t = h @ params.token_head_w[t].T + params.token_head_b[t]
        idx = _argmax_low(l_t)
        tokens.append(idx)
        if t < T - 1:
            onehot = torch.zeros_like(l_t)
            onehot.scatter_(1, idx.unsqueeze(1), 1.0)
            h = residual_update(h, onehot, params.codebooks[t], params.log_scales[t])
            _check_finite(h, t + 1)
            stop_features.append(h)
    stop = torch.stack(stop_features, dim=1)
    eta = stop @ params.length_head_w + params.length_head_b
    lengths = _argmax_low(eta) + 1
    return torch.stack(tokens, dim=1), lengths


@torch.no_grad()
def encode_hard_batch(x: torch.Tensor, params: EncoderParams) -> list[SemanticId]:
    """Deterministic inference path: no Gumbel noise, ties to lower index."""
    toks, lengths = encode_hard_full(x, params)
    return [
        SemanticId(tokens=tuple(int(v) for v in toks[i, : int(lengths[i])]),
                   length=int(lengths[i]))
        for i in range(x.shape[0])
    ]


def encode_hard(x: torch.Tensor, params: EncoderParams) -> SemanticId:
    """Single-item convenience wrapper around encode_hard_batch."""
    return encode_hard_batch(x.unsqueeze(0), params)[0]
