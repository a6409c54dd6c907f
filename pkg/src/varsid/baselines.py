"""Baselines: residual KMeans codes and a policy-gradient sender/receiver.

R-KMeans fits one KMeans per level on the residuals left by earlier levels
and always emits exactly ``levels`` tokens. The policy-gradient baseline
reuses the dVAE encoder/decoder architectures but samples hard tokens,
optionally stopping at an explicit end-of-sequence symbol.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .catalog import Catalog, empirical_distributions, normalize_embeddings
from .decoder import DecoderParams, decode_prefixes, reconstruction_error
from .encoder import EncoderParams, SemanticId, residual_update
from .errors import BadMagic, NumericalOverflow, TruncatedFile, VersionMismatch
from .trainer import ADAM_BETAS, ADAM_EPS, TrainConfig, _stream_seeds, build_models

RKMEANS_MAGIC = b"VSKM"
RKMEANS_VERSION = 1


# ---------------------------------------------------------------------------
# R-KMeans


@dataclass(frozen=True)
class RKMeansModel:
    centroids: np.ndarray  # (levels, clusters, dim)

    @property
    def levels(self) -> int:
        return self.centroids.shape[0]

    @property
    def clusters(self) -> int:
        return self.centroids.shape[1]


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(1))
    return centers


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin ties break toward the lower centroid index
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return d2.argmin(1)


def lloyd(points: np.ndarray, k: int, iters: int, rng: np.random.Generator,
          objective_trace: list | None = None) -> np.ndarray:
    """Lloyd sweeps with kmeans++ seeding; empty clusters are re-seeded at
    the point farthest from its assigned centroid."""
    centers = _kmeans_pp_seed(points, k, rng)
    prev = None
    for _ in range(iters):
        labels = _assign(points, centers)
        if objective_trace is not None:
            objective_trace.append(float(((points - centers[labels]) ** 2).sum()))
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = points[mask].mean(0)
            else:
                far = ((points - centers[labels]) ** 2).sum(1).argmax()
                centers[j] = points[far]
        if prev is not None and np.array_equal(prev, labels):
            break
        prev = labels
    return centers


def rkmeans_fit(catalog: Catalog, levels: int, clusters: int, iters: int,
                seed: int) -> RKMeansModel:
    catalog = normalize_embeddings(catalog)
    points = catalog.embeddings[~catalog.cold_flags].astype(np.float64)
    if clusters > points.shape[0]:
        raise ValueError("more clusters than training items")
    rng = np.random.default_rng(seed)
    residuals = points.copy()
    all_centers = np.empty((levels, clusters, catalog.dim))
    for level in range(levels):
        centers = lloyd(residuals, clusters, iters, rng)
        all_centers[level] = centers
        residuals = residuals - centers[_assign(residuals, centers)]
    return RKMeansModel(centroids=all_centers)


def rkmeans_encode(x: np.ndarray, model: RKMeansModel) -> SemanticId:
    """Greedy nearest-centroid tokens; length is always the level count."""
    residual = np.asarray(x, dtype=np.float64).copy()
    tokens = []
    for level in range(model.levels):
        centers = model.centroids[level]
        j = int(((centers - residual) ** 2).sum(1).argmin())
        tokens.append(j)
        residual -= centers[j]
    return SemanticId(tokens=tuple(tokens), length=model.levels)


def rkmeans_encode_batch(xs: np.ndarray, model: RKMeansModel) -> list[SemanticId]:
    residuals = np.asarray(xs, dtype=np.float64).copy()
    toks = np.empty((residuals.shape[0], model.levels), dtype=np.int64)
    for level in range(model.levels):
        labels = _assign(residuals, model.centroids[level])
        toks[:, level] = labels
        residuals -= model.centroids[level][labels]
    return [SemanticId(tokens=tuple(int(t) for t in row), length=model.levels)
            for row in toks]


def rkmeans_prefix_vectors(sid: SemanticId, model: RKMeansModel) -> np.ndarray:
    """Cumulative sums of assigned centroids, one row per prefix length."""
    parts = np.stack([model.centroids[t][sid.tokens[t]] for t in range(model.levels)])
    return np.cumsum(parts, axis=0)


def save_rkmeans(model: RKMeansModel, path) -> None:
    L, V, d = model.centroids.shape
    with open(path, "wb") as f:
        f.write(RKMEANS_MAGIC)
        f.write(struct.pack("<IIII", RKMEANS_VERSION, L, V, d))
        f.write(np.ascontiguousarray(model.centroids, dtype="<f4").tobytes())


def load_rkmeans(path) -> RKMeansModel:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != RKMEANS_MAGIC:
        raise BadMagic(f"{path}: expected magic {RKMEANS_MAGIC!r}")
    if len(data) < 20:
        raise TruncatedFile(f"{path}: header truncated")
    version, L, V, d = struct.unpack_from("<IIII", data, 4)
    if version != RKMEANS_VERSION:
        raise VersionMismatch(f"{path}: version {version}")
    need = L * V * d * 4
    if len(data) - 20 < need:
        raise TruncatedFile(f"{path}: payload truncated")
    cents = np.frombuffer(data, dtype="<f4", count=L * V * d, offset=20)
    return RKMeansModel(centroids=cents.reshape(L, V, d).astype(np.float64))


# ---------------------------------------------------------------------------
# REINFORCE sender/receiver


@dataclass(frozen=True)
class ReinforceConfig:
    """Schedules follow the reference setup: entropy weight annealed from
    0.03 to 1e-3, length penalty from 0 to 0.02, over ``anneal_steps``."""

    entropy_weight_start: float = 0.03
    entropy_weight_end: float = 1e-3
    length_weight_end: float = 0.02
    anneal_steps: int | None = None  # default: half the run
    baseline_decay: float = 0.99


@dataclass
class ReinforceState:
    sender: EncoderParams
    receiver: DecoderParams
    optimizer: torch.optim.AdamW
    cfg: TrainConfig
    rcfg: ReinforceConfig
    varlen: bool
    baselines: dict[str, float] = field(default_factory=lambda: {
        "recon": 0.0, "entropy": 0.0, "length": 0.0})
    step: int = 0
    total_steps: int = 0
    sample_gen: torch.Generator = field(default_factory=torch.Generator)
    data_rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @property
    def eos(self) -> int | None:
        return self.cfg.vocab if self.varlen else None


def _anneal(step: int, total: int, start: float, end: float) -> float:
    frac = min(step / max(total, 1), 1.0)
    return start + frac * (end - start)


def reinforce_sample(sender: EncoderParams, x: torch.Tensor, generator,
                     eos: int | None):
    """Sample one hard message per item.

    Returns (onehots (B,T,S), lengths (B,), log_probs (B,), step_entropies
    (B,T), step_mask (B,T)). With an EOS symbol, the realized length is the
    first EOS position + 1 (EOS counts toward length); steps after EOS are
    masked out.
    """
    B, T, S = x.shape[0], sender.max_len, sender.n_symbols
    h = sender.backbone(x)
    if not torch.isfinite(h).all():
        raise NumericalOverflow(0, where="sender")
    onehots, logps, ents, picks = [], [], [], []
    for t in range(T):
        l_t = h @ sender.token_head_w[t].T + sender.token_head_b[t]
        logp = torch.log_softmax(l_t, dim=-1)
        u = torch.rand(logp.shape, generator=generator, dtype=logp.dtype)
        g = -torch.log(-torch.log(u.clamp(1e-12, 1 - 1e-12)))
        idx = (logp + g).argmax(dim=-1)  # Gumbel-max categorical sample
        onehot = torch.zeros_like(l_t)
        onehot.scatter_(1, idx.unsqueeze(1), 1.0)
        onehots.append(onehot)
        picks.append(idx)
        logps.append(logp.gather(1, idx.unsqueeze(1)).squeeze(1))
        ents.append(-(logp.exp() * logp).sum(-1))
        if t < T - 1:
            h = residual_update(h, onehot.detach(), sender.codebooks[t], sender.log_scales[t])
            if not torch.isfinite(h).all():
                raise NumericalOverflow(t + 1, where="sender")
    picks = torch.stack(picks, dim=1)  # (B, T)
    if eos is None:
        lengths = torch.full((B,), T, dtype=torch.int64)
    else:
        is_eos = picks == eos
        has = is_eos.any(dim=1)
        first = is_eos.to(torch.int8).argmax(dim=1)
        lengths = torch.where(has, first + 1, torch.full_like(first, T))
    steps = torch.arange(1, T + 1).unsqueeze(0)
    mask = (steps <= lengths.unsqueeze(1)).to(x.dtype)  # (B, T)
    return (torch.stack(onehots, dim=1), lengths,
            (torch.stack(logps, dim=1) * mask).sum(-1),
            torch.stack(ents, dim=1), mask)


def reinforce_init(catalog: Catalog, cfg: TrainConfig, varlen: bool,
                   rcfg: ReinforceConfig = ReinforceConfig()) -> ReinforceState:
    extra = 1 if varlen else 0
    enc, dec = build_models(cfg, catalog.dim, extra_symbols=extra)
    opt = torch.optim.AdamW(list(enc.parameters()) + list(dec.parameters()),
                            lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                            betas=ADAM_BETAS, eps=ADAM_EPS)
    seeds = _stream_seeds(cfg.seed)
    from .trainer import planned_steps

    total = planned_steps(catalog, cfg)
    return ReinforceState(
        sender=enc, receiver=dec, optimizer=opt, cfg=cfg, rcfg=rcfg,
        varlen=varlen, total_steps=total,
        sample_gen=torch.Generator().manual_seed(seeds["gumbel"]),
        data_rng=np.random.default_rng(seeds["data"]),
    )


def reinforce_run_steps(state: ReinforceState, catalog: Catalog, n_steps: int,
                        log=None) -> ReinforceState:
    catalog = normalize_embeddings(catalog)
    uniform, unigram = empirical_distributions(catalog)
    weights = unigram.weights if state.cfg.sampling == "data-unigram" else uniform.weights
    emb = torch.from_numpy(catalog.embeddings).to(torch.float32)
    anneal = state.rcfg.anneal_steps or max(1, state.total_steps // 2)
    decay = state.rcfg.baseline_decay

    for _ in range(n_steps):
        idx = state.data_rng.choice(catalog.n_items, size=state.cfg.batch_size, p=weights)
        x = emb[torch.from_numpy(idx)]
        onehots, lengths, logp, ents, mask = reinforce_sample(
            state.sender, x, state.sample_gen, state.eos)

        # receiver: backprop reconstruction of the realized prefix
        x_hats = decode_prefixes(onehots.detach() * mask.unsqueeze(-1), state.receiver)
        per_prefix = reconstruction_error(x.unsqueeze(1), x_hats)  # (B, T)
        recon = per_prefix.gather(1, (lengths - 1).unsqueeze(1)).squeeze(1)
        receiver_loss = recon.mean()

        # sender: score-function gradient with per-component baselines
        w_ent = _anneal(state.step, anneal, state.rcfg.entropy_weight_start,
                        state.rcfg.entropy_weight_end)
        w_len = _anneal(state.step, anneal, 0.0, state.rcfg.length_weight_end) \
            if state.varlen else 0.0
        signals = {
            "recon": recon.detach(),
            "entropy": -(ents.detach() * mask).sum(-1),
            "length": lengths.to(x.dtype),
        }
        comp_weights = {"recon": 1.0, "entropy": w_ent, "length": w_len}
        advantage = torch.zeros_like(recon)
        for name, sig in signals.items():
            advantage = advantage + comp_weights[name] * (sig - state.baselines[name])
        sender_loss = (advantage.detach() * logp).mean()

        if not (math.isfinite(float(receiver_loss.detach()))
                and math.isfinite(float(sender_loss.detach()))):
            raise NumericalOverflow(state.step, where="reinforce loss")

        state.optimizer.zero_grad(set_to_none=True)
        (receiver_loss + sender_loss).backward()
        state.optimizer.step()

        for name, sig in signals.items():
            state.baselines[name] = (decay * state.baselines[name]
                                     + (1 - decay) * float(sig.mean()))
        state.step += 1
        if log is not None:
            log.write(f"{state.step}\t{float(recon.detach().mean()):.6f}\t"
                      f"{float(lengths.to(torch.float64).mean()):.4f}\t"
                      f"{w_ent:.5f}\t{w_len:.5f}\n")
    return state


def reinforce_train(catalog: Catalog, cfg: TrainConfig, varlen: bool,
                    rcfg: ReinforceConfig = ReinforceConfig(), log=None) -> ReinforceState:
    state = reinforce_init(catalog, cfg, varlen, rcfg)
    return reinforce_run_steps(state, catalog, state.total_steps, log=log)


def save_reinforce(state: ReinforceState, path) -> None:
    from dataclasses import asdict

    from .trainer import write_container

    write_container(path, {
        "kind": "reinforce",
        "cfg": asdict(state.cfg),
        "rcfg": asdict(state.rcfg),
        "varlen": state.varlen,
        "dim": state.sender.dim,
        "step": state.step,
        "total_steps": state.total_steps,
        "baselines": dict(state.baselines),
        "sender": state.sender.state_dict(),
        "receiver": state.receiver.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "sample_state": state.sample_gen.get_state(),
        "data_rng_state": state.data_rng.bit_generator.state,
    })


def load_reinforce(path) -> ReinforceState:
    from .errors import CorruptCheckpoint
    from .trainer import read_container

    payload = read_container(path)
    if payload.get("kind") != "reinforce":
        raise CorruptCheckpoint(f"{path}: not a reinforce checkpoint")
    cfg = TrainConfig(**payload["cfg"])
    rcfg = ReinforceConfig(**payload["rcfg"])
    extra = 1 if payload["varlen"] else 0
    enc, dec = build_models(cfg, payload["dim"], extra_symbols=extra)
    enc.load_state_dict(payload["sender"])
    dec.load_state_dict(payload["receiver"])
    opt = torch.optim.AdamW(list(enc.parameters()) + list(dec.parameters()),
                            lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                            betas=ADAM_BETAS, eps=ADAM_EPS)
    opt.load_state_dict(payload["optimizer"])
    gen = torch.Generator()
    gen.set_state(payload["sample_state"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["data_rng_state"]
    return ReinforceState(sender=enc, receiver=dec, optimizer=opt, cfg=cfg,
                          rcfg=rcfg, varlen=payload["varlen"],
                          baselines=payload["baselines"], step=payload["step"],
                          total_steps=payload["total_steps"],
                          sample_gen=gen, data_rng=rng)


@torch.no_grad()
def reinforce_encode_batch(x: torch.Tensor, state: ReinforceState) -> list[SemanticId]:
    """Greedy deterministic messages from the sender (argmax tokens, stop
    at the first EOS in varlen mode)."""
    out = []
    T = state.cfg.max_len
    for i in range(x.shape[0]):
        toks = _greedy_tokens(x[i], state.sender)
        if state.varlen and state.eos in toks:
            L = toks.index(state.eos) + 1
        else:
            L = T
        out.append(SemanticId(tokens=tuple(toks[:L]), length=L))
    return out


@torch.no_grad()
def _greedy_tokens(x: torch.Tensor, sender: EncoderParams) -> list[int]:
    h = sender.backbone(x.unsqueeze(0))
    toks = []
    for t in range(sender.max_len):
        l_t = h @ sender.token_head_w[t].T + sender.token_head_b[t]
        j = int(l_t.argmax())
        toks.append(j)
        if t < sender.max_len - 1:
            onehot = torch.zeros_like(l_t)
            onehot[0, j] = 1.0
            h = residual_update(h, onehot, sender.codebooks[t], sender.log_scales[t])
    return toks
