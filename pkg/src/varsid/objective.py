"""Loss terms, priors, free bits, and the temperature/KL-weight schedules.

All functions are pure; the trainer assembles them. Loss terms reduce with
a mean over the batch dimension when given batched inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import torch

from .decoder import decode_prefixes, reconstruction_error
from .encoder import EncoderOutput, alive_from_length, residual_update
from .errors import EnumerationTooLarge, InvalidPrior

RECON_SMOOTHING = 0.9  # weight on q_L; the rest goes to the uniform prefix mix
ENUMERATION_BUDGET = 4096


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    vocab_reg: float
    length_reg: float
    total: float
    tau: float
    beta: float
    lam: float


@dataclass(frozen=True)
class PriorConfig:
    """Length prior and vocabulary settings.

    ``lam`` is the per-token length cost; it corresponds to a truncated
    geometric prior with stopping probability alpha = 1 - exp(-lam).
    """

    lam: float
    max_len: int
    vocab: int
    free_bits: float = 0.0

    @property
    def alpha(self) -> float:
        return alpha_from_lambda(self.lam)


def lambda_from_alpha(alpha: float) -> float:
    if not (0.0 < alpha < 1.0):
        raise InvalidPrior(f"alpha must lie in (0, 1), got {alpha}")
    return -math.log1p(-alpha)


def alpha_from_lambda(lam: float) -> float:
    if lam < 0:
        raise InvalidPrior(f"lambda must be nonnegative, got {lam}")
    return -math.expm1(-lam)


def geometric_prior(alpha: float, max_len: int) -> torch.Tensor:
    """Truncated geometric length prior on {1..max_len}."""
    if not (0.0 < alpha < 1.0):
        raise InvalidPrior(f"alpha must lie in (0, 1), got {alpha}")
    ls = torch.arange(1, max_len + 1, dtype=torch.float64)
    p = (1.0 - alpha) ** (ls - 1) * alpha
    return p / p.sum()


def smoothed_lengths(q_len: torch.Tensor) -> torch.Tensor:
    """0.9 * q_L + 0.1 * uniform; applied to the reconstruction term only."""
    T = q_len.shape[-1]
    return RECON_SMOOTHING * q_len + (1.0 - RECON_SMOOTHING) / T


def reconstruction_loss(x: torch.Tensor, x_hats: torch.Tensor,
                        q_len: torch.Tensor) -> torch.Tensor:
    """Prefix errors weighted by the smoothed length posterior."""
    errs = reconstruction_error(x.unsqueeze(-2), x_hats)  # (..., T)
    return (smoothed_lengths(q_len) * errs).sum(-1).mean()


def vocab_regularizer(token_logits: torch.Tensor, alive: torch.Tensor,
                      vocab: int, free_bits: float) -> torch.Tensor:
    """Alive-weighted per-step KL to the uniform symbol prior, with the
    free-bits floor applied per step before weighting."""
    logp = torch.log_softmax(token_logits, dim=-1)
    entropy = -(logp.exp() * logp).sum(-1)  # (..., T)
    kl = (math.log(vocab) - entropy).clamp_min(0.0)
    kl = (kl - free_bits).clamp_min(0.0)
    return (alive * kl).sum(-1).mean()


def length_regularizer(q_len: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * E[L] - H(q_L)."""
    T = q_len.shape[-1]
    steps = torch.arange(1, T + 1, dtype=q_len.dtype, device=q_len.device)
    expected = (q_len * steps).sum(-1)
    entropy = -(q_len * torch.log(q_len.clamp_min(1e-30))).sum(-1)
    return (lam * expected - entropy).mean()


def total_loss(x: torch.Tensor, enc: EncoderOutput, x_hats: torch.Tensor,
               cfg: PriorConfig, tau: float, beta: float) -> tuple[torch.Tensor, LossBreakdown]:
    """recon + beta * (vocab + length); returns the tensor and a breakdown."""
    recon = reconstruction_loss(x, x_hats, enc.length_posterior)
    vocab = vocab_regularizer(enc.token_logits, enc.alive, cfg.vocab, cfg.free_bits)
    length = length_regularizer(enc.length_posterior, cfg.lam)
    total = recon + beta * (vocab + length)
    return total, LossBreakdown(
        recon=float(recon.detach()), vocab_reg=float(vocab.detach()),
        length_reg=float(length.detach()), total=float(total.detach()),
        tau=tau, beta=beta, lam=cfg.lam,
    )


def tau_schedule(step: int, total_steps: int, tau_min: float) -> float:
    """Linear 1 -> tau_min over total_steps, clamped after."""
    if total_steps <= 0:
        return tau_min
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 + frac * (tau_min - 1.0)


def beta_schedule(step: int, warmup_steps: int, beta_max: float) -> float:
    """Cosine ramp 0 -> beta_max over warmup_steps, clamped after."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return beta_max
    return beta_max * 0.5 * (1.0 - math.cos(math.pi * step / warmup_steps))


@torch.no_grad()
def exact_loss_by_enumeration(x: torch.Tensor, encoder, decoder,
                              cfg: PriorConfig, beta: float) -> float:
    """Exact expected training loss at the hard limit, by enumerating every
    discrete trajectory of a tiny model.

    Token expectations are taken over softmax(token logits) along each
    trajectory, with hard one-hots driving the residual updates and the
    decoder. Used to validate the sampled estimator's mean.
    """
    T, V = encoder.max_len, encoder.n_symbols
    if V ** T > ENUMERATION_BUDGET:
        raise EnumerationTooLarge(f"V**T = {V ** T} exceeds {ENUMERATION_BUDGET}")
    x = x.reshape(1, -1)
    total = 0.0
    for z in product(range(V), repeat=T):
        weight, loss = _trajectory_weight_and_loss(x, z, encoder, decoder, cfg, beta)
        total += weight * loss
    return total


@torch.no_grad()
def hard_trajectory_loss(x: torch.Tensor, z: tuple[int, ...], encoder, decoder,
                         cfg: PriorConfig, beta: float) -> float:
    """Training loss of one fully specified hard trajectory."""
    return _trajectory_weight_and_loss(x.reshape(1, -1), z, encoder, decoder, cfg, beta)[1]


@torch.no_grad()
def trajectory_log_prob(x: torch.Tensor, z: tuple[int, ...], encoder) -> float:
    """log q(z | x) along the hard path (for sampling-based checks)."""
    x = x.reshape(1, -1)
    h = encoder.backbone(x)
    logp = 0.0
    for t, zt in enumerate(z):
        l_t = h @ encoder.token_head_w[t].T + encoder.token_head_b[t]
        logp += float(torch.log_softmax(l_t, dim=-1)[0, zt])
        if t < encoder.max_len - 1:
            onehot = torch.zeros_like(l_t)
            onehot[0, zt] = 1.0
            h = residual_update(h, onehot, encoder.codebooks[t], encoder.log_scales[t])
    return logp


def _trajectory_weight_and_loss(x, z, encoder, decoder, cfg, beta):
    T, V = encoder.max_len, encoder.n_symbols
    h = encoder.backbone(x)
    stop_features, logits, onehots = [h], [], []
    weight = 1.0
    for t in range(T):
        l_t = h @ encoder.token_head_w[t].T + encoder.token_head_b[t]
        logits.append(l_t)
        weight *= float(torch.softmax(l_t, dim=-1)[0, z[t]])
        onehot = torch.zeros_like(l_t)
        onehot[0, z[t]] = 1.0
        onehots.append(onehot)
        if t < T - 1:
            h = residual_update(h, onehot, encoder.codebooks[t], encoder.log_scales[t])
            stop_features.append(h)
    stop = torch.stack(stop_features, dim=1)
    eta = stop @ encoder.length_head_w + encoder.length_head_b
    q_len = torch.softmax(eta, dim=-1)
    messages = torch.stack(onehots, dim=1)
    x_hats = decode_prefixes(messages, decoder)
    recon = reconstruction_loss(x, x_hats, q_len)
    vocab = vocab_regularizer(torch.stack(logits, dim=1), alive_from_length(q_len),
                              cfg.vocab, cfg.free_bits)
    length = length_regularizer(q_len, cfg.lam)
    return weight, float(recon + beta * (vocab + length))
