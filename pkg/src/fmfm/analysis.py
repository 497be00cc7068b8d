"""Metrics, parameter counting, FLOPs estimation, and field-pair diagnostics.

FLOPs convention
----------------
Reported inference costs follow one fixed counting rule so that numbers are
comparable across variants:

    dot product, dim d        2d + 1   (d multiplies, d-1 adds, +1 running
                                        accumulate, +1 bookkeeping)
    vector x matrix (a, b)    2ab
    scalar rescale, dim d     applied as part of the pair cost (+1)
    linear terms              2 per field (per-feature weights), or
                              2*D_f + 1 per field (field-shared vectors)

Headline estimates charge the linear part at the per-feature rate for every
variant. Pair costs per unordered field pair (k, l):

    lr            no pairs
    fm            evaluated through the factored sum-of-squares identity,
                  3 ops per (field, dimension): 3nK total, not per-pair
    fwfm          2K + 2          (dot + one scalar rescale)
    fvfm          3K + 1          (elementwise rescale + dot)
    ffm           2K + 1          (dot of two field-specific embeddings)
    fmfm          2*D_k*D_l + 2*min(D_k,D_l) + 1   (transform toward the
                  smaller side, then dot)
    any cached    2*min(D_k,D_l) + 1   (dot against the precomputed vector)

Parameter counts ignore the bias term.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .ingest import Dataset
from .model import LinearMode, field_pairs

PROB_CLAMP = 1e-7


def auc(scores, labels) -> float:
    """Exact ROC AUC by sort-and-rank; tied scores count half.

    Equals the probability that a uniformly random positive instance
    outranks a uniformly random negative one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative label")
    # average ranks (1-based) with ties sharing their midpoint rank
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    pos_rank_sum = float(ranks[pos].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(probs, labels) -> float:
    """Mean negative log likelihood; probabilities clamped at 1e-7."""
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    labels = np.asarray(labels)
    y = (labels > 0).astype(np.float64)
    return float(-(y * np.log(probs) + (1.0 - y) * np.log(1.0 - probs)).mean())


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


def _resolve_counts(m, n: int):
    """m may be a total (int) or per-field feature counts."""
    if isinstance(m, (int, np.integer)):
        return int(m), None
    counts = [int(c) for c in m]
    if len(counts) != n:
        raise ValueError(f"expected {n} per-field feature counts, got {len(counts)}")
    return sum(counts), counts


def count_params(
    variant: str,
    m,
    n: int,
    K: int | None = None,
    dims: Sequence[int] | None = None,
    linear_mode: LinearMode | str = LinearMode.PER_FEATURE,
    hash_space: int | None = None,
) -> int:
    """Number of trainable parameters, ignoring the bias.

    `m` is the total feature count or a per-field count sequence (required
    for variable dimensions). Uniform-dimension models pass K; a
    variable-dimension fmfm passes `dims` instead.
    """
    mode = LinearMode(linear_mode)
    total_m, per_field = _resolve_counts(m, n)
    n_pairs = n * (n - 1) // 2

    if dims is not None:
        dims = np.asarray(list(dims), dtype=np.int64)
        if dims.shape != (n,):
            raise ValueError(f"dims must hold {n} entries")

    if mode is LinearMode.PER_FEATURE:
        linear = total_m
    else:
        if variant in ("lr", "poly2"):
            raise ValueError(f"{variant} has no embeddings for field-shared linear terms")
        linear = int(dims.sum()) if dims is not None else n * K

    if variant == "lr":
        return linear
    if variant == "poly2":
        if hash_space is None:
            raise ValueError("poly2 requires hash_space")
        return linear + hash_space
    if variant == "ffm":
        if K is None:
            raise ValueError("ffm requires uniform K")
        return linear + total_m * (n - 1) * K

    if dims is not None:
        if variant != "fmfm":
            raise ValueError("only fmfm supports variable per-field dimensions")
        if per_field is None:
            raise ValueError("variable dimensions require per-field feature counts")
        emb = int(sum(c * int(d) for c, d in zip(per_field, dims)))
        mats = int(sum(int(dims[k]) * int(dims[l]) for k, l in field_pairs(n)))
        return linear + emb + mats

    if K is None:
        raise ValueError(f"{variant} requires K (or dims for fmfm)")
    emb = total_m * K
    if variant == "fm":
        return linear + emb
    if variant == "fwfm":
        return linear + emb + n_pairs
    if variant == "fvfm":
        return linear + emb + n_pairs * K
    if variant == "fmfm":
        return linear + emb + n_pairs * K * K
    raise ValueError(f"unknown variant {variant!r}")


def count_params_of(model) -> int:
    """Exhaustively walk a constructed model's arrays (bias excluded)."""
    return sum(p.size for name, p in model.parameters() if name != "bias")


# ---------------------------------------------------------------------------
# FLOPs estimation
# ---------------------------------------------------------------------------


def flops_dot(d: int) -> int:
    return 2 * d + 1


def flops_matvec(a: int, b: int) -> int:
    return 2 * a * b


def _linear_flops(n: int, dims: np.ndarray | None, linear_mode: LinearMode) -> int:
    if linear_mode is LinearMode.PER_FEATURE:
        return 2 * n
    return int(sum(2 * int(d) + 1 for d in dims))


def estimate_flops(
    variant: str,
    n: int,
    K: int | None = None,
    dims: Sequence[int] | None = None,
    cached: bool = False,
    linear_mode: LinearMode | str = LinearMode.PER_FEATURE,
) -> int:
    """Floating point operations for one scored instance under the module
    convention (see module docstring)."""
    mode = LinearMode(linear_mode)
    if dims is not None:
        dims = np.asarray(list(dims), dtype=np.int64)
        if dims.shape != (n,):
            raise ValueError(f"dims must hold {n} entries")
    elif K is not None:
        dims = np.full(n, int(K), dtype=np.int64)
    elif variant != "lr":
        raise ValueError(f"{variant} requires K or dims")

    linear = _linear_flops(n, dims, mode) if variant != "lr" else 2 * n
    if variant == "lr":
        return linear

    pairs = field_pairs(n)
    if cached:
        pair_cost = sum(flops_dot(int(min(dims[k], dims[l]))) for k, l in pairs)
        return pair_cost + linear

    if variant == "fm":
        K = int(dims[0])
        return 3 * n * K + linear
    if variant == "ffm":
        K = int(dims[0])
        return len(pairs) * flops_dot(K) + linear
    if variant == "fwfm":
        K = int(dims[0])
        return len(pairs) * (flops_dot(K) + 1) + linear
    if variant == "fvfm":
        K = int(dims[0])
        return len(pairs) * (flops_dot(K) + K) + linear
    if variant == "fmfm":
        cost = 0
        for k, l in pairs:
            dk, dl = int(dims[k]), int(dims[l])
            cost += flops_matvec(dk, dl) + flops_dot(min(dk, dl))
        return cost + linear
    raise ValueError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# field-pair diagnostics
# ---------------------------------------------------------------------------


def field_pair_mi(dataset: Dataset, k: int, l: int) -> float:
    """Empirical mutual information I((X_k, X_l); Y) in bits.

    Plug-in estimate from the joint contingency of the two fields' active
    features and the binary label; no bias correction.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    zk = dataset.indices[:, k].astype(np.int64)
    zl = dataset.indices[:, l].astype(np.int64)
    code = zk * (int(zl.max()) + 1) + zl
    _, inverse = np.unique(code, return_inverse=True)
    y01 = (dataset.labels > 0).astype(np.int64)
    joint = np.zeros((inverse.max() + 1, 2))
    np.add.at(joint, (inverse, y01), 1.0)
    pxy = joint / len(dataset)
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    mask = pxy > 0
    mi = float((pxy[mask] * np.log2(pxy[mask] / (px @ py)[mask])).sum())
    return max(mi, 0.0)


def mi_matrix(dataset: Dataset) -> np.ndarray:
    """Symmetric n x n matrix of field_pair_mi values; diagonal left at 0."""
    n = dataset.n
    out = np.zeros((n, n))
    for k, l in field_pairs(n):
        out[k, l] = out[l, k] = field_pair_mi(dataset, k, l)
    return out


def cross_dim_map(plan_or_dims) -> np.ndarray:
    """n x n matrix of min(D_k, D_l): the per-pair cached dimension."""
    dims = getattr(plan_or_dims, "per_field_dim", plan_or_dims)
    dims = np.asarray(dims, dtype=np.int64)
    return np.minimum.outer(dims, dims)
