"""Item catalogs: embeddings, popularity counts, cold splits, and the
binary on-disk format.

The synthetic generator produces cluster-structured embeddings with a
Zipfian popularity profile so that variable-length coding has structure to
exploit at desk scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import BadMagic, NoInteractions, TruncatedFile, VersionMismatch, ZeroEmbedding

MAGIC = b"VSID"
VERSION = 1

# Synthetic catalogs draw this many interaction events per item on average.
EVENTS_PER_ITEM = 128


@dataclass(frozen=True)
class Catalog:
    """Immutable item universe: embeddings + popularity + cold split.

    Cold items keep their popularity counts (the held-out ledger) but are
    excluded from the training unigram distribution.
    """

    embeddings: np.ndarray  # (n_items, dim) float32
    popularity: np.ndarray  # (n_items,) uint64
    cold_flags: np.ndarray  # (n_items,) bool

    def __post_init__(self):
        if self.n_items < 1 or self.dim < 1:
            raise ValueError("catalog needs n_items >= 1 and dim >= 1")
        if len(self.popularity) != self.n_items or len(self.cold_flags) != self.n_items:
            raise ValueError("popularity/cold_flags length mismatch")

    @property
    def n_items(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class ItemDistribution:
    """Probability weights over items; cold items always carry weight 0."""

    weights: np.ndarray
    kind: str  # "catalog-uniform" | "data-unigram"

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ValueError("negative weight")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")


def save_catalog(catalog: Catalog, path) -> None:
    """Write the little-endian binary format (magic VSID, version 1)."""
    n, d = catalog.n_items, catalog.dim
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, n, d))
        f.write(np.ascontiguousarray(catalog.embeddings, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(catalog.popularity, dtype="<u8").tobytes())
        f.write((catalog.cold_flags.astype(np.uint8) & 1).tobytes())


def load_catalog(path) -> Catalog:
    """Read a catalog exactly as stored (no normalization applied here)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}")
    if len(data) < 16:
        raise TruncatedFile(f"{path}: header truncated")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    off = 16
    need = n * d * 4 + n * 8 + n
    if len(data) - off < need:
        raise TruncatedFile(f"{path}: payload truncated ({len(data) - off} < {need})")
    emb = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d).copy()
    off += n * d * 4
    pop = np.frombuffer(data, dtype="<u8", count=n, offset=off).copy()
    off += n * 8
    cold = (np.frombuffer(data, dtype=np.uint8, count=n, offset=off) & 1).astype(bool)
    return Catalog(embeddings=emb, popularity=pop, cold_flags=cold)


def normalize_embeddings(catalog: Catalog) -> Catalog:
    """Return a copy with every embedding row scaled to unit Euclidean norm."""
    norms = np.linalg.norm(catalog.embeddings.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroEmbedding(int(zero[0]))
    emb = (catalog.embeddings.astype(np.float64) / norms[:, None]).astype(np.float32)
    return replace(catalog, embeddings=emb)


def zipf_weights(n_items: int, zipf_exponent: float) -> np.ndarray:
    """Expected popularity share of rank r: proportional to r**(-exponent)."""
    ranks = np.arange(1, n_items + 1, dtype=np.float64)
    w = ranks ** (-float(zipf_exponent))
    return w / w.sum()


def synth_zipf_catalog(
    n_items: int,
    dim: int,
    zipf_exponent: float,
    n_clusters: int,
    cold_fraction: float,
    seed: int,
) -> Catalog:
    """Deterministic synthetic catalog.

    Embeddings are cluster centers plus isotropic noise (then unit
    normalized); popularity counts are a multinomial draw whose expected
    shares follow a Zipf profile assigned by a random item permutation;
    a ``cold_fraction`` of items is flagged cold.
    """
    if n_clusters > n_items:
        raise ValueError("n_clusters must not exceed n_items")
    if not (0.0 <= cold_fraction < 1.0):
        raise ValueError("cold_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)

    centers = rng.standard_normal((n_clusters, dim))
    assign = rng.integers(0, n_clusters, size=n_items)
    emb = centers[assign] + 0.25 * rng.standard_normal((n_items, dim))
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)

    ranked = rng.permutation(n_items)  # ranked[r] = item holding popularity rank r
    weights = np.empty(n_items)
    weights[ranked] = zipf_weights(n_items, zipf_exponent)
    total_events = EVENTS_PER_ITEM * n_items
    pop = rng.multinomial(total_events, weights).astype(np.uint64)

    n_cold = int(cold_fraction * n_items)
    cold = np.zeros(n_items, dtype=bool)
    if n_cold:
        cold[rng.choice(n_items, size=n_cold, replace=False)] = True

    return Catalog(embeddings=emb.astype(np.float32), popularity=pop, cold_flags=cold)


def empirical_distributions(catalog: Catalog) -> tuple[ItemDistribution, ItemDistribution]:
    """(catalog-uniform over non-cold items, data-unigram over non-cold popularity)."""
    warm = ~catalog.cold_flags
    pop = catalog.popularity.astype(np.float64) * warm
    if pop.sum() == 0:
        raise NoInteractions("no non-cold item has positive popularity")
    uniform = warm.astype(np.float64)
    uniform /= uniform.sum()
    unigram = pop / pop.sum()
    return (
        ItemDistribution(weights=uniform, kind="catalog-uniform"),
        ItemDistribution(weights=unigram, kind="data-unigram"),
    )


def cold_distributions(catalog: Catalog) -> tuple[ItemDistribution, ItemDistribution]:
    """Same pair restricted to the cold slice, using the held-out ledger."""
    cold = catalog.cold_flags
    if not cold.any():
        raise NoInteractions("catalog has no cold items")
    uniform = cold.astype(np.float64)
    uniform /= uniform.sum()
    pop = catalog.popularity.astype(np.float64) * cold
    if pop.sum() == 0:
        # ledger empty: fall back to uniform weighting of the cold slice
        unigram = uniform.copy()
    else:
        unigram = pop / pop.sum()
    return (
        ItemDistribution(weights=uniform, kind="catalog-uniform"),
        ItemDistribution(weights=unigram, kind="data-unigram"),
    )
