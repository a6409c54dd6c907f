"""Causal prefix decoder.

Consumes relaxed (or hard one-hot) messages and reconstructs the item
embedding from every prefix in one pass: the input sequence is a learned
start vector followed by the embedded messages, so the output read after
message t depends on messages 1..t only.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .encoder import INIT_STD, rms_norm

NORM_EPS = 1e-12


class DecoderParams(nn.Module):
    """Single-head pre-norm causal transformer with learned absolute
    positions and a unit-normalizing output head."""

    def __init__(self, vocab, dim, model_dim=64, n_layers=2, ff_mult=4,
                 max_len=5, dtype=torch.float32, generator=None):
        super().__init__()
        self.model_dim = model_dim
        self.n_layers = n_layers
        self.max_len = max_len

        def init(*shape):
            w = torch.empty(*shape, dtype=dtype)
            w.normal_(0.0, INIT_STD, generator=generator)
            return nn.Parameter(w)

        D = model_dim
        self.input_embed = init(vocab, D)
        self.bos_vector = init(D)
        self.positions = init(max_len + 1, D)
        self.attn_qkv = nn.ParameterList([init(3 * D, D) for _ in range(n_layers)])
        self.attn_out = nn.ParameterList([init(D, D) for _ in range(n_layers)])
        self.ff_in = nn.ParameterList([init(ff_mult * D, D) for _ in range(n_layers)])
        self.ff_out = nn.ParameterList([init(D, ff_mult * D) for _ in range(n_layers)])
        self.head_w = init(dim, D)
        self.head_b = nn.Parameter(torch.zeros(dim, dtype=dtype))


def decode_prefixes(messages: torch.Tensor, params: DecoderParams) -> torch.Tensor:
    """(B, T, V) simplex points -> (B, T, dim) unit-norm reconstructions.

    Output t is causal in the messages: it sees exactly the prefix 1..t.
    """
    squeeze = messages.dim() == 2
    if squeeze:
        messages = messages.unsqueeze(0)
    B, T, _ = messages.shape
    if T > params.max_len:
        raise ValueError(f"message length {T} exceeds decoder max_len {params.max_len}")
    D = params.model_dim

    tok = messages @ params.input_embed  # (B, T, D)
    bos = params.bos_vector.expand(B, 1, D)
    h = torch.cat([bos, tok], dim=1) + params.positions[: T + 1]

    S = T + 1
    mask = torch.full((S, S), float("-inf"), dtype=h.dtype, device=h.device).triu(1)
    scale = float(D) ** -0.5
    for i in range(params.n_layers):
        u = rms_norm(h)
        qkv = u @ params.attn_qkv[i].T
        q, k, v = qkv.split(D, dim=-1)
        att = torch.softmax(q @ k.transpose(-1, -2) * scale + mask, dim=-1)
        h = h + (att @ v) @ params.attn_out[i].T
        u = rms_norm(h)
        h = h + torch.relu(u @ params.ff_in[i].T) ** 2 @ params.ff_out[i].T

    y = h[:, 1:, :] @ params.head_w.T + params.head_b  # position t+1 saw prefix 1..t
    y = y / torch.sqrt(y.pow(2).sum(dim=-1, keepdim=True) + NORM_EPS)
    return y.squeeze(0) if squeeze else y


def reconstruction_error(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Squared error summed over embedding dims; 2*(1 - cos) for unit inputs."""
    return (x - x_hat).pow(2).sum(dim=-1)
