"""Metric suite: reconstruction (warm/cold), token perplexities,
popularity-by-length buckets, average lengths, rank correlation between
popularity and code length, prefix reconstruction, and token-budget
statistics for history packing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .baselines import RKMeansModel, rkmeans_encode_batch, rkmeans_prefix_vectors
from .catalog import Catalog, ItemDistribution, normalize_embeddings
from .decoder import decode_prefixes
from .encoder import SemanticId, encode_hard_full
from .errors import DegenerateRanks, EmptySlice


@dataclass(frozen=True)
class LengthBucket:
    length: int
    mean_popularity: float  # nan when the bucket is empty
    max_popularity: int
    item_count: int


@dataclass(frozen=True)
class BudgetStats:
    avg_tokens: float
    avg_events: float
    candidate_length: float  # 1 + mean code length (unique-id token included)


@dataclass(frozen=True)
class EvalReport:
    recon: float
    recon_cold: float | None
    e_len_catalog: float
    e_len_data: float
    e_len_catalog_cold: float | None
    e_len_data_cold: float | None
    micro_ppl: float
    positional_ppl: tuple[float, ...]
    length_buckets: tuple[LengthBucket, ...]
    zla_spearman: float | None  # None when lengths are degenerate
    prefix_recon: tuple[float, ...]
    budget: BudgetStats


# ---------------------------------------------------------------------------
# encoding + reconstruction


def encode_catalog(state, catalog: Catalog) -> list[SemanticId]:
    """Hard semantic IDs for every catalog item (dVAE or R-KMeans model)."""
    catalog = normalize_embeddings(catalog)
    if isinstance(state, RKMeansModel):
        return rkmeans_encode_batch(catalog.embeddings.astype(np.float64), state)
    dtype = next(state.encoder.parameters()).dtype
    x = torch.from_numpy(catalog.embeddings).to(dtype)
    from .encoder import encode_hard_batch

    return encode_hard_batch(x, state.encoder)


def prefix_error_matrix(state, catalog: Catalog) -> np.ndarray:
    """(n_items, T) squared reconstruction error of every hard prefix."""
    catalog = normalize_embeddings(catalog)
    xs = catalog.embeddings.astype(np.float64)
    if isinstance(state, RKMeansModel):
        ids = rkmeans_encode_batch(xs, state)
        errs = np.empty((catalog.n_items, state.levels))
        for i, sid in enumerate(ids):
            prefixes = rkmeans_prefix_vectors(sid, state)
            errs[i] = ((xs[i][None, :] - prefixes) ** 2).sum(1)
        return errs
    dtype = next(state.encoder.parameters()).dtype
    x = torch.from_numpy(catalog.embeddings).to(dtype)
    toks, _ = encode_hard_full(x, state.encoder)
    onehots = torch.zeros(x.shape[0], state.cfg.max_len, state.encoder.n_symbols, dtype=dtype)
    onehots.scatter_(2, toks.unsqueeze(-1), 1.0)
    with torch.no_grad():
        x_hats = decode_prefixes(onehots, state.decoder)
        errs = ((x.unsqueeze(1) - x_hats) ** 2).sum(-1)
    return errs.double().numpy()


def id_lengths(ids: list[SemanticId]) -> np.ndarray:
    return np.array([s.length for s in ids], dtype=np.int64)


def eval_reconstruction(state, catalog: Catalog, dist: ItemDistribution,
                        cold: bool = False) -> float:
    """Dist-weighted error of each item's own-length hard reconstruction.

    ``cold`` selects which slice the distribution must be supported on.
    """
    w = dist.weights
    slice_mask = catalog.cold_flags if cold else ~catalog.cold_flags
    if not slice_mask.any():
        raise EmptySlice("requested slice contains no items")
    if w[~slice_mask].sum() > 1e-12:
        raise ValueError("distribution assigns weight outside the requested slice")
    errs = prefix_error_matrix(state, catalog)
    ids = encode_catalog(state, catalog)
    own = errs[np.arange(catalog.n_items), id_lengths(ids) - 1]
    return float((w * own).sum() / w.sum())


def prefix_recon_table(state, catalog: Catalog, dist: ItemDistribution) -> np.ndarray:
    """Dist-weighted error for every forced prefix length 1..T."""
    errs = prefix_error_matrix(state, catalog)
    w = dist.weights
    return (w[:, None] * errs).sum(0) / w.sum()


# ---------------------------------------------------------------------------
# token statistics


def micro_ppl(ids: list[SemanticId], vocab: int) -> float:
    """Exponentiated entropy of the pooled empirical token distribution."""
    tokens = np.concatenate([np.asarray(s.tokens) for s in ids])
    if tokens.size == 0:
        raise ValueError("no tokens")
    counts = np.bincount(tokens, minlength=vocab).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def positional_ppl(ids: list[SemanticId], vocab: int, max_len: int) -> np.ndarray:
    """Per-position perplexity over items whose length reaches the position;
    nan marks positions with no participants."""
    out = np.full(max_len, np.nan)
    for t in range(max_len):
        tokens = np.array([s.tokens[t] for s in ids if s.length > t])
        if tokens.size:
            counts = np.bincount(tokens, minlength=vocab).astype(np.float64)
            p = counts / counts.sum()
            nz = p[p > 0]
            out[t] = np.exp(-(nz * np.log(nz)).sum())
    return out


def length_popularity_table(ids: list[SemanticId], catalog: Catalog,
                            max_len: int) -> list[LengthBucket]:
    lengths = id_lengths(ids)
    pop = catalog.popularity.astype(np.float64)
    buckets = []
    for l in range(1, max_len + 1):
        mask = lengths == l
        if mask.any():
            buckets.append(LengthBucket(
                length=l, mean_popularity=float(pop[mask].mean()),
                max_popularity=int(pop[mask].max()), item_count=int(mask.sum())))
        else:
            buckets.append(LengthBucket(length=l, mean_popularity=float("nan"),
                                        max_popularity=0, item_count=0))
    return buckets


def avg_length(ids: list[SemanticId], dist: ItemDistribution) -> float:
    return float((dist.weights * id_lengths(ids)).sum() / dist.weights.sum())


def zla_spearman(ids: list[SemanticId], catalog: Catalog) -> float:
    """Spearman correlation between training popularity and code length
    over non-cold items (average ranks on ties)."""
    warm = ~catalog.cold_flags
    lengths = id_lengths(ids)[warm]
    pop = catalog.popularity[warm].astype(np.float64)
    if np.unique(pop).size < 3:
        raise ValueError("need at least 3 distinct popularity values")
    if np.unique(lengths).size < 2:
        raise DegenerateRanks("all code lengths equal")
    rho, _ = stats.spearmanr(pop, lengths)
    return float(rho)


# ---------------------------------------------------------------------------
# token budget


def budget_stats(ids: list[SemanticId], histories: list[list[int]],
                 budget: int) -> BudgetStats:
    """Pack each history's longest affordable suffix under the token budget.

    Per-event cost is the item's code length plus one collision-resolving
    unique-identifier token; events are never split across the boundary.
    """
    costs = id_lengths(ids) + 1
    if budget < costs.max():
        raise ValueError("budget smaller than the largest per-item cost")
    tok_totals, evt_totals = [], []
    for hist in histories:
        used = 0
        events = 0
        for item in reversed(hist):
            c = int(costs[item])
            if used + c > budget:
                break
            used += c
            events += 1
        tok_totals.append(used)
        evt_totals.append(events)
    cand = 1.0 + float(id_lengths(ids).mean())
    if not histories:
        return BudgetStats(0.0, 0.0, cand)
    return BudgetStats(avg_tokens=float(np.mean(tok_totals)),
                       avg_events=float(np.mean(evt_totals)),
                       candidate_length=cand)


def synth_histories(catalog: Catalog, dist: ItemDistribution, n_users: int,
                    events_per_user: int, seed: int) -> list[list[int]]:
    """I.i.d. draws from the interaction distribution stand in for real
    user sessions at desk scale."""
    rng = np.random.default_rng(seed)
    return [list(rng.choice(catalog.n_items, size=events_per_user, p=dist.weights))
            for _ in range(n_users)]


# ---------------------------------------------------------------------------
# report assembly + serialization


def evaluate(state, catalog: Catalog, budget: int = 512, n_users: int = 200,
             events_per_user: int = 400, seed: int = 0) -> EvalReport:
    from .catalog import cold_distributions, empirical_distributions

    catalog = normalize_embeddings(catalog)
    uniform, unigram = empirical_distributions(catalog)
    ids = encode_catalog(state, catalog)
    max_len = (state.levels if isinstance(state, RKMeansModel) else state.cfg.max_len)
    vocab = (state.clusters if isinstance(state, RKMeansModel) else state.cfg.vocab)

    recon = eval_reconstruction(state, catalog, unigram, cold=False)
    has_cold = bool(catalog.cold_flags.any())
    if has_cold:
        cold_uniform, cold_unigram = cold_distributions(catalog)
        recon_cold = eval_reconstruction(state, catalog, cold_unigram, cold=True)
        e_cat_cold = avg_length(ids, cold_uniform)
        e_dat_cold = avg_length(ids, cold_unigram)
    else:
        recon_cold = e_cat_cold = e_dat_cold = None

    try:
        rho = zla_spearman(ids, catalog)
    except DegenerateRanks:
        rho = None

    histories = synth_histories(catalog, unigram, n_users, events_per_user, seed)
    return EvalReport(
        recon=recon,
        recon_cold=recon_cold,
        e_len_catalog=avg_length(ids, uniform),
        e_len_data=avg_length(ids, unigram),
        e_len_catalog_cold=e_cat_cold,
        e_len_data_cold=e_dat_cold,
        micro_ppl=micro_ppl(ids, vocab),
        positional_ppl=tuple(positional_ppl(ids, vocab, max_len)),
        length_buckets=tuple(length_popularity_table(ids, catalog, max_len)),
        zla_spearman=rho,
        prefix_recon=tuple(prefix_recon_table(state, catalog, unigram)),
        budget=budget_stats(ids, histories, budget),
    )


REPORT_HEADER = "varsid-eval-report\tv1"
BUCKETS_HEADER = "varsid-length-buckets\tv1"


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_report(report: EvalReport, path) -> None:
    lines = [REPORT_HEADER]
    lines.append(f"recon\t{_fmt(report.recon)}")
    lines.append(f"recon_cold\t{_fmt(report.recon_cold)}")
    lines.append(f"e_len_catalog\t{_fmt(report.e_len_catalog)}")
    lines.append(f"e_len_data\t{_fmt(report.e_len_data)}")
    lines.append(f"e_len_catalog_cold\t{_fmt(report.e_len_catalog_cold)}")
    lines.append(f"e_len_data_cold\t{_fmt(report.e_len_data_cold)}")
    lines.append(f"micro_ppl\t{_fmt(report.micro_ppl)}")
    lines.append(f"zla_spearman\t{_fmt(report.zla_spearman)}")
    for t, v in enumerate(report.positional_ppl, start=1):
        lines.append(f"positional_ppl@{t}\t{_fmt(float(v))}")
    for k, v in enumerate(report.prefix_recon, start=1):
        lines.append(f"prefix_recon@{k}\t{_fmt(float(v))}")
    lines.append(f"budget_avg_tokens\t{_fmt(report.budget.avg_tokens)}")
    lines.append(f"budget_avg_events\t{_fmt(report.budget.avg_events)}")
    lines.append(f"candidate_length\t{_fmt(report.budget.candidate_length)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def write_buckets(buckets, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(BUCKETS_HEADER + "\n")
        f.write("length\tmean_popularity\tmax_popularity\titem_count\n")
        for b in buckets:
            f.write(f"{b.length}\t{b.mean_popularity:.4f}\t{b.max_popularity}\t{b.item_count}\n")
