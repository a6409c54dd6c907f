"""Training loop, optimizer plumbing, checkpoints, and gradient checking.

A single seed fans out into named RNG streams (init, gumbel, data) so that
data order, parameter init, and relaxation noise can be varied
independently. Determinism contract: same seed + same torch thread count
gives bitwise-identical checkpoints.
"""

from __future__ import annotations

import io
import math
import struct
import sys
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .catalog import Catalog, empirical_distributions, normalize_embeddings
from .decoder import DecoderParams, decode_prefixes
from .encoder import EncoderParams, encode_relaxed, sample_gumbel
from .errors import BadMagic, CorruptCheckpoint, NumericalOverflow, VersionMismatch
from .objective import PriorConfig, beta_schedule, tau_schedule, total_loss

CHECKPOINT_MAGIC = b"VSCK"
CHECKPOINT_VERSION = 1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Defaults follow the reference training setup; desk-scale runs
    override them (e.g. batch 256, vocab 64)."""

    batch_size: int = 8192
    epochs: int = 1
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    max_len: int = 5
    vocab: int = 4096
    hidden: int = 64
    model_dim: int = 64
    n_layers: int = 2
    ff_mult: int = 4
    tau_min: float = 0.5
    beta_max: float = 0.002
    warmup_frac: float = 0.2
    lam: float = 2.0
    free_bits: float = 0.0
    seed: int = 0
    sampling: str = "data-unigram"  # or "catalog-uniform"
    max_steps: int | None = None

    def prior(self) -> PriorConfig:
        return PriorConfig(lam=self.lam, max_len=self.max_len, vocab=self.vocab,
                           free_bits=self.free_bits)


@dataclass
class ModelState:
    """Everything needed to continue training bitwise."""

    encoder: EncoderParams
    decoder: DecoderParams
    optimizer: torch.optim.AdamW
    cfg: TrainConfig
    dim: int
    step: int = 0
    total_steps: int = 0
    warmup_steps: int = 0
    gumbel_gen: torch.Generator = field(default_factory=torch.Generator)
    data_rng: np.random.Generator = field(default_factory=np.random.default_rng)


def _stream_seeds(seed: int) -> dict[str, int]:
    ss = np.random.SeedSequence(seed)
    init_s, gumbel_s, data_s = ss.spawn(3)
    return {
        "init": int(init_s.generate_state(1)[0]),
        "gumbel": int(gumbel_s.generate_state(1)[0]),
        "data": int(data_s.generate_state(1)[0]),
    }


def build_models(cfg: TrainConfig, dim: int, dtype=torch.float32,
                 extra_symbols: int = 0) -> tuple[EncoderParams, DecoderParams]:
    seeds = _stream_seeds(cfg.seed)
    gen = torch.Generator().manual_seed(seeds["init"])
    enc = EncoderParams(dim=dim, hidden=cfg.hidden, max_len=cfg.max_len,
                        vocab=cfg.vocab, extra_symbols=extra_symbols,
                        dtype=dtype, generator=gen)
    dec = DecoderParams(vocab=cfg.vocab + extra_symbols, dim=dim,
                        model_dim=cfg.model_dim, n_layers=cfg.n_layers,
                        ff_mult=cfg.ff_mult, max_len=cfg.max_len,
                        dtype=dtype, generator=gen)
    return enc, dec


def planned_steps(catalog: Catalog, cfg: TrainConfig) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    events = int(catalog.popularity[~catalog.cold_flags].sum())
    return cfg.epochs * max(1, math.ceil(events / cfg.batch_size))


def init_state(catalog: Catalog, cfg: TrainConfig, dtype=torch.float32) -> ModelState:
    enc, dec = build_models(cfg, catalog.dim, dtype=dtype)
    opt = torch.optim.AdamW(list(enc.parameters()) + list(dec.parameters()),
                            lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                            betas=ADAM_BETAS, eps=ADAM_EPS)
    seeds = _stream_seeds(cfg.seed)
    total = planned_steps(catalog, cfg)
    return ModelState(
        encoder=enc, decoder=dec, optimizer=opt, cfg=cfg, dim=catalog.dim,
        total_steps=total, warmup_steps=max(1, int(cfg.warmup_frac * total)),
        gumbel_gen=torch.Generator().manual_seed(seeds["gumbel"]),
        data_rng=np.random.default_rng(seeds["data"]),
    )


def run_steps(state: ModelState, catalog: Catalog, n_steps: int, log=None) -> ModelState:
    """Advance training by n_steps minibatches, mutating state in place.

    Emits one tab-separated metrics line per step to ``log`` when given:
    step recon vocab length total tau beta E[L].
    """
    catalog = normalize_embeddings(catalog)
    uniform, unigram = empirical_distributions(catalog)
    weights = unigram.weights if state.cfg.sampling == "data-unigram" else uniform.weights
    dtype = next(state.encoder.parameters()).dtype
    emb = torch.from_numpy(catalog.embeddings).to(dtype)
    prior = state.cfg.prior()

    for _ in range(n_steps):
        idx = state.data_rng.choice(catalog.n_items, size=state.cfg.batch_size, p=weights)
        x = emb[torch.from_numpy(idx)]
        tau = tau_schedule(state.step, state.total_steps, state.cfg.tau_min)
        beta = beta_schedule(state.step, state.warmup_steps, state.cfg.beta_max)

        enc_out = encode_relaxed(x, state.encoder, tau, generator=state.gumbel_gen)
        x_hats = decode_prefixes(enc_out.messages, state.decoder)
        loss, parts = total_loss(x, enc_out, x_hats, prior, tau, beta)
        if not math.isfinite(parts.total):
            raise NumericalOverflow(state.step, where="training loss")

        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        state.step += 1

        if log is not None:
            steps = torch.arange(1, state.cfg.max_len + 1, dtype=dtype)
            q_len = enc_out.length_posterior.detach()
            e_len = float((q_len * steps).sum(-1).mean())
            log.write(f"{state.step}\t{parts.recon:.6f}\t{parts.vocab_reg:.6f}\t"
                      f"{parts.length_reg:.6f}\t{parts.total:.6f}\t"
                      f"{tau:.6f}\t{beta:.6f}\t{e_len:.4f}\n")
    return state


def train(catalog: Catalog, cfg: TrainConfig, log=None) -> ModelState:
    """Full run: init, then epochs * ceil(events / batch) steps (or
    cfg.max_steps when set)."""
    state = init_state(catalog, cfg)
    return run_steps(state, catalog, state.total_steps, log=log)


def _to_plain(obj):
    """Replace tensors with tagged numpy copies before serialization.

    torch.save output depends on storage sharing between tensors in the
    payload (live state dicts alias optimizer params; loaded ones do not),
    so serializing raw tensors is not byte-reproducible across save calls.
    Fresh numpy copies pickle canonically.
    """
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": str(obj.dtype).removeprefix("torch."),
                "data": obj.detach().cpu().numpy().copy()}
    if isinstance(obj, str):
        # pickle memoizes repeated string *objects*; intern so that equal
        # strings share identity regardless of how the payload was built
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_to_plain(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return tuple(_to_plain(v) for v in obj)
    if isinstance(obj, list):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(obj):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            arr = obj["data"]
            return torch.from_numpy(arr.copy()).to(getattr(torch, obj["__tensor__"]))
        return {k: _from_plain(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return tuple(_from_plain(v) for v in obj)
    if isinstance(obj, list):
        return [_from_plain(v) for v in obj]
    return obj


def write_container(path, payload: dict) -> None:
    """Versioned VSCK container holding an arbitrary torch-serialized dict."""
    buf = io.BytesIO()
    torch.save(_to_plain(payload), buf)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(buf.getvalue())


def read_container(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8 or head[:4] != CHECKPOINT_MAGIC:
            raise BadMagic(f"{path}: expected magic {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", head[4:])
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"{path}: checkpoint version {version}")
        blob = f.read()
    try:
        return _from_plain(torch.load(io.BytesIO(blob), weights_only=False))
    except Exception as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc


def save_checkpoint(state: ModelState, path) -> None:
    payload = {
        "kind": "dvae",
        "cfg": asdict(state.cfg),
        "dim": state.dim,
        "step": state.step,
        "total_steps": state.total_steps,
        "warmup_steps": state.warmup_steps,
        "dtype": str(next(state.encoder.parameters()).dtype),
        "encoder": state.encoder.state_dict(),
        "decoder": state.decoder.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "gumbel_state": state.gumbel_gen.get_state(),
        "data_rng_state": state.data_rng.bit_generator.state,
    }
    write_container(path, payload)


def load_checkpoint(path) -> ModelState:
    payload = read_container(path)
    if payload.get("kind", "dvae") != "dvae":
        raise CorruptCheckpoint(f"{path}: not a dVAE checkpoint ({payload.get('kind')})")
    cfg = TrainConfig(**payload["cfg"])
    dtype = {"torch.float32": torch.float32, "torch.float64": torch.float64}[payload["dtype"]]
    enc, dec = build_models(cfg, payload["dim"], dtype=dtype)
    enc.load_state_dict(payload["encoder"])
    dec.load_state_dict(payload["decoder"])
    opt = torch.optim.AdamW(list(enc.parameters()) + list(dec.parameters()),
                            lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                            betas=ADAM_BETAS, eps=ADAM_EPS)
    opt.load_state_dict(payload["optimizer"])
    gen = torch.Generator()
    gen.set_state(payload["gumbel_state"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["data_rng_state"]
    return ModelState(encoder=enc, decoder=dec, optimizer=opt, cfg=cfg,
                      dim=payload["dim"], step=payload["step"],
                      total_steps=payload["total_steps"],
                      warmup_steps=payload["warmup_steps"],
                      gumbel_gen=gen, data_rng=rng)


def grad_check(state: ModelState, x: torch.Tensor, eps: float = 1e-5,
               tau: float = 0.8, beta: float = 1.0) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every parameter, with a common frozen Gumbel draw.

    The model should be in float64 for meaningful tolerances.
    """
    enc, dec, cfg = state.encoder, state.decoder, state.cfg
    if x.dim() == 1:
        x = x.unsqueeze(0)
    gumbels = sample_gumbel((x.shape[0], cfg.max_len, enc.n_symbols),
                            generator=state.gumbel_gen, dtype=x.dtype)
    prior = cfg.prior()
    params = [p for p in list(enc.parameters()) + list(dec.parameters()) if p.numel()]

    def forward() -> torch.Tensor:
        out = encode_relaxed(x, enc, tau, gumbels=gumbels)
        x_hats = decode_prefixes(out.messages, dec)
        loss, _ = total_loss(x, out, x_hats, prior, tau, beta)
        return loss

    loss = forward()
    grads = torch.autograd.grad(loss, params)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                f_plus = float(forward())
                flat[j] = orig - eps
                f_minus = float(forward())
                flat[j] = orig
                num = (f_plus - f_minus) / (2.0 * eps)
                ana = float(gflat[j])
                # denominator floored at the central-difference noise scale
                # (~ulp(loss)/eps) so roundoff on near-zero gradients does
                # not register as a relative error
                err = abs(num - ana) / max(abs(num), abs(ana), 1e-5)
                worst = max(worst, err)
    return worst
