"""Precomputed intermediate vectors for matrix-free scoring.

For every unordered field pair the side with the larger embedding dimension
(ties: the lower field index) gets its transformed vectors precomputed once
per feature. Because <v M, u> = <u M^T, v>, both directions give the same
score, so caching the larger side always stores vectors of the smaller
dimension min(D_k, D_l): the scoring path then consists purely of dot
products, one per pair, plus the linear terms.

Cached tables default to float32 (an inference artifact); a float64 build
reproduces source-model scores to full precision.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ingest import EncodedInstance
from .model import (
    FmModel,
    LinearMode,
    ModelError,
    model_digest,
    sigmoid,
    transform,
)
from .schema import FieldSchema, schema_digest

CACHE_MAGIC = "fmfm-cache v1"


@dataclass
class CachedModel:
    """FFM-shaped scorer derived from a frozen unified-kind model."""

    schema: FieldSchema
    dims: np.ndarray
    cached_side: np.ndarray  # (n_pairs,) field index whose features are cached
    tables: list[np.ndarray]  # per pair: (feature_count(side), min(D_k, D_l))
    embeddings: list[np.ndarray]
    linear_mode: LinearMode
    linear_w: np.ndarray | list[np.ndarray]
    bias: np.ndarray
    pairs: list[tuple[int, int]]
    source_hash: str

    @property
    def n(self) -> int:
        return self.schema.n

    def table_entries(self) -> int:
        """Total cached numbers: sum over pairs of count(side) * min dim."""
        return int(sum(t.size for t in self.tables))


def choose_cached_side(k: int, l: int, dk: int, dl: int) -> int:
    """The side to precompute: larger dimension wins, ties go to the lower
    field index, so the stored/dot dimension is always min(dk, dl)."""
    if dk == dl:
        return k
    return k if dk > dl else l


def build_cache(model: FmModel, dtype=np.float32, threads: int = 1) -> CachedModel:
    """Precompute every pair's intermediate vectors from a frozen model."""
    if model.variant in ("lr", "ffm") or model.pair_matrices is None:
        raise ModelError("only identity/scalar/diagonal/full pair-matrix models can be cached")

    sides = np.empty(len(model.pair_matrices), dtype=np.int64)

    def _table(p_pm):
        p, pm = p_pm
        side = choose_cached_side(pm.k, pm.l, pm.dim_k, pm.dim_l)
        sides[p] = side
        return np.ascontiguousarray(
            transform(model.embeddings[side], pm, source=side), dtype=dtype
        )

    jobs = list(enumerate(model.pair_matrices))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tables = list(pool.map(_table, jobs))
    else:
        tables = [_table(j) for j in jobs]

    return CachedModel(
        schema=model.schema,
        dims=model.dims.copy(),
        cached_side=sides,
        tables=tables,
        embeddings=model.embeddings,
        linear_mode=model.linear_mode,
        linear_w=model.linear_w,
        bias=model.bias.copy(),
        pairs=model.pairs,
        source_hash=model_digest(model),
    )


def cached_score_batch(cm: CachedModel, indices: np.ndarray) -> np.ndarray:
    """Logits via cached vectors only: no matrix products on this path."""
    indices = np.atleast_2d(np.asarray(indices))
    if indices.shape[1] != cm.n:
        raise ModelError(
            f"instance has {indices.shape[1]} active features, schema has {cm.n} fields"
        )
    counts = np.asarray(cm.schema.feature_counts, dtype=np.int64)
    if (indices >= counts[None, :]).any():
        raise ModelError("feature index out of range for schema (schema mismatch?)")

    B = indices.shape[0]
    phi = np.full(B, cm.bias[0])
    if cm.linear_mode is LinearMode.PER_FEATURE:
        gid = cm.schema.offsets[None, :] + indices.astype(np.int64)
        phi += cm.linear_w[gid].sum(axis=1)
    else:
        for f in range(cm.n):
            phi += cm.embeddings[f][indices[:, f]] @ cm.linear_w[f]

    for p, (k, l) in enumerate(cm.pairs):
        side = int(cm.cached_side[p])
        other = l if side == k else k
        a = cm.tables[p][indices[:, side]]
        b = cm.embeddings[other][indices[:, other]]
        phi += np.einsum("bd,bd->b", a.astype(np.float64, copy=False), b)
    return phi


def cached_score(cm: CachedModel, inst: EncodedInstance) -> float:
    return float(cached_score_batch(cm, inst.active[None, :])[0])


def cached_predict_proba_batch(cm: CachedModel, indices: np.ndarray) -> np.ndarray:
    return sigmoid(np.clip(cached_score_batch(cm, indices), -35.0, 35.0))


# ---------------------------------------------------------------------------
# serialization: index block + dense payloads; embeddings/linear terms are
# reattached from the source model at load time, verified by its hash.
# ---------------------------------------------------------------------------


def save_cache(cm: CachedModel, path) -> None:
    if cm.tables:
        dtype_tag = {np.dtype("<f4"): "f4", np.dtype("<f8"): "f8"}[np.dtype(cm.tables[0].dtype)]
    else:
        dtype_tag = "f4"
    with open(path, "wb") as fh:
        fh.write(f"{CACHE_MAGIC}\n".encode("ascii"))
        fh.write(f"{cm.source_hash}\n".encode("ascii"))
        fh.write(f"{schema_digest(cm.schema)}\n".encode("ascii"))
        fh.write(f"{len(cm.pairs)} {dtype_tag}\n".encode("ascii"))
        for p, (k, l) in enumerate(cm.pairs):
            rows, dim = cm.tables[p].shape
            fh.write(f"{k} {l} {int(cm.cached_side[p])} {dim} {rows}\n".encode("ascii"))
        for t in cm.tables:
            fh.write(np.ascontiguousarray(t, dtype=f"<{dtype_tag}").tobytes())


def load_cache(path, model: FmModel) -> CachedModel:
    """Load cached tables and bind them to their source model."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != CACHE_MAGIC:
            raise ModelError(f"not a cache file (bad magic header {magic!r})")
        source_hash = fh.readline().decode("ascii").rstrip("\n")
        if source_hash != model_digest(model):
            raise ModelError("cache was built from a different model (hash mismatch)")
        stored_schema = fh.readline().decode("ascii").rstrip("\n")
        if stored_schema != schema_digest(model.schema):
            raise ModelError("schema hash mismatch in cache file")
        n_pairs_tag, dtype_tag = fh.readline().decode("ascii").split()
        n_pairs = int(n_pairs_tag)
        index = []
        for _ in range(n_pairs):
            k, l, side, dim, rows = (int(x) for x in fh.readline().decode("ascii").split())
            index.append((k, l, side, dim, rows))
        itemsize = 4 if dtype_tag == "f4" else 8
        tables = []
        for k, l, side, dim, rows in index:
            buf = fh.read(rows * dim * itemsize)
            if len(buf) != rows * dim * itemsize:
                raise ModelError("cache file truncated")
            tables.append(np.frombuffer(buf, dtype=f"<{dtype_tag}").reshape(rows, dim).copy())

    pairs = [(k, l) for k, l, *_ in index]
    if pairs != model.pairs:
        raise ModelError("cache pair index does not match the model")
    return CachedModel(
        schema=model.schema,
        dims=model.dims.copy(),
        cached_side=np.array([side for _, _, side, _, _ in index], dtype=np.int64),
        tables=tables,
        embeddings=model.embeddings,
        linear_mode=model.linear_mode,
        linear_w=model.linear_w,
        bias=model.bias.copy(),
        pairs=model.pairs,
        source_hash=source_hash,
    )
