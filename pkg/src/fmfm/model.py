"""Model parameters and scoring for the factorization-machine family.

All variants except FFM share one three-step scorer: look up one embedding
per active feature, transform it through the field-pair matrix, and take a
dot product with the other side's embedding. The variants differ only in
the constraint class of the per-pair matrix:

    variant   pair matrix          free parameters per pair
    fm        identity             0
    fwfm      r * I (scalar)       1
    fvfm      diag(d)              D
    fmfm      full D_k x D_l       D_k * D_l

FFM keeps n-1 independent embeddings per feature and cannot be folded into
this scheme, so it gets its own scoring path. LR has no embeddings at all.

For a pair matrix M of shape (D_k, D_l), the two transform directions are
equivalent: <v M, u> = <u M^T, v>, which is what lets the cache module pick
the cheaper side. Only full matrices may be rectangular; scalar and diagonal
constraints require both fields to share one dimension.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .ingest import EncodedInstance
from .schema import FieldSchema, schema_digest

MODEL_MAGIC = "fmfm-model v1"

LOGIT_CLAMP = 35.0  # beyond this, float64 sigmoid saturates anyway


class ModelError(ValueError):
    """Raised for invalid model construction, dimension mismatches, or files."""


class MatrixKind(str, enum.Enum):
    IDENTITY = "identity"
    SCALAR = "scalar"
    DIAGONAL = "diagonal"
    FULL = "full"


DEGREES_OF_FREEDOM = {
    MatrixKind.IDENTITY: 0,
    MatrixKind.SCALAR: 1,
    MatrixKind.DIAGONAL: 2,
    MatrixKind.FULL: 3,
}


class LinearMode(str, enum.Enum):
    PER_FEATURE = "per-feature"
    FIELD_SHARED = "field-shared"


VARIANTS = ("lr", "fm", "fwfm", "fvfm", "fmfm", "ffm")

# Default constraint class per variant; fmfm accepts an override so the
# collapse relationships (identity -> fm, scalar -> fwfm, ...) stay testable
# end to end.
VARIANT_KIND = {
    "fm": MatrixKind.IDENTITY,
    "fwfm": MatrixKind.SCALAR,
    "fvfm": MatrixKind.DIAGONAL,
    "fmfm": MatrixKind.FULL,
}

DEFAULT_LINEAR_MODE = {
    "lr": LinearMode.PER_FEATURE,
    "fm": LinearMode.PER_FEATURE,
    "ffm": LinearMode.PER_FEATURE,
    "fwfm": LinearMode.FIELD_SHARED,
    "fvfm": LinearMode.FIELD_SHARED,
    "fmfm": LinearMode.FIELD_SHARED,
}


def field_pairs(n: int) -> list[tuple[int, int]]:
    """All unordered field pairs (k, l) with k < l, ascending."""
    return [(k, l) for k in range(n) for l in range(k + 1, n)]


@dataclass
class FieldPairMatrix:
    """Interaction matrix between fields k < l under a constraint kind.

    payload is None for identity, a 0-d array for scalar, a (D,) array for
    diagonal, and a (dim_k, dim_l) array for full.
    """

    k: int
    l: int
    kind: MatrixKind
    dim_k: int
    dim_l: int
    payload: np.ndarray | None

    def __post_init__(self):
        if self.kind is not MatrixKind.FULL and self.dim_k != self.dim_l:
            raise ModelError(
                f"{self.kind.value} pair ({self.k},{self.l}) requires equal dims, "
                f"got {self.dim_k} and {self.dim_l}"
            )
        shapes = {
            MatrixKind.IDENTITY: None,
            MatrixKind.SCALAR: (),
            MatrixKind.DIAGONAL: (self.dim_k,),
            MatrixKind.FULL: (self.dim_k, self.dim_l),
        }
        expect = shapes[self.kind]
        if expect is None:
            if self.payload is not None:
                raise ModelError("identity pair matrices carry no payload")
        else:
            if self.payload is None or self.payload.shape != expect:
                raise ModelError(
                    f"pair ({self.k},{self.l}) kind {self.kind.value}: "
                    f"payload shape {None if self.payload is None else self.payload.shape}, "
                    f"expected {expect}"
                )


def transform(v: np.ndarray, pm: FieldPairMatrix, source: int) -> np.ndarray:
    """Apply the pair matrix to vectors from `source` (one of pm.k, pm.l).

    Accepts a single vector (D,) or a batch (..., D); the result lives in
    the opposite field's dimension. Going k->l multiplies by the stored
    matrix; l->k multiplies by its transpose.
    """
    if source not in (pm.k, pm.l):
        raise ModelError(f"source field {source} is not part of pair ({pm.k},{pm.l})")
    v = np.asarray(v)
    src_dim = pm.dim_k if source == pm.k else pm.dim_l
    if v.shape[-1] != src_dim:
        raise ModelError(
            f"vector dim {v.shape[-1]} does not match field {source} dim {src_dim}"
        )
    if pm.kind is MatrixKind.IDENTITY:
        return v
    if pm.kind is MatrixKind.SCALAR:
        return v * pm.payload
    if pm.kind is MatrixKind.DIAGONAL:
        return v * pm.payload
    return v @ (pm.payload if source == pm.k else pm.payload.T)


def pair_score(vi: np.ndarray, vj: np.ndarray, pm: FieldPairMatrix) -> float | np.ndarray:
    """Interaction score <transform(vi, k->l), vj> for vi in field k, vj in l.

    Batched inputs (B, D_k) and (B, D_l) return (B,) scores.
    """
    vi = np.asarray(vi)
    vj = np.asarray(vj)
    if vj.shape[-1] != pm.dim_l:
        raise ModelError(f"vector dim {vj.shape[-1]} does not match field {pm.l} dim {pm.dim_l}")
    t = transform(vi, pm, source=pm.k)
    out = np.einsum("...d,...d->...", t, vj)
    return float(out) if out.ndim == 0 else out


@dataclass
class FmModel:
    """Parameters for one factorization-machine variant bound to a schema.

    embeddings[f] has shape (feature_count(f), dims[f]) for the unified
    variants, (feature_count(f), n-1, K) for ffm, and is None for lr.
    linear_w is a single (m,) array in per-feature mode or a per-field list
    of (dims[f],) arrays in field-shared mode. bias is a (1,) array.
    """

    schema: FieldSchema
    variant: str
    kind: MatrixKind | None
    dims: np.ndarray
    embeddings: list[np.ndarray] | None
    pair_matrices: list[FieldPairMatrix] | None
    linear_mode: LinearMode
    linear_w: np.ndarray | list[np.ndarray]
    bias: np.ndarray

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}")
        self.dims = np.asarray(self.dims, dtype=np.int64)
        if self.dims.shape != (self.schema.n,):
            raise ModelError("dims must hold one dimension per field")
        if self.variant == "lr" and self.linear_mode is not LinearMode.PER_FEATURE:
            raise ModelError("lr supports per-feature linear terms only")

    @property
    def n(self) -> int:
        return self.schema.n

    @property
    def m(self) -> int:
        return self.schema.total_features

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return field_pairs(self.n)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in a fixed, deterministic order."""
        out: list[tuple[str, np.ndarray]] = [("bias", self.bias)]
        if self.linear_mode is LinearMode.PER_FEATURE:
            out.append(("linear", self.linear_w))
        else:
            out.extend((f"linear.f{f}", w) for f, w in enumerate(self.linear_w))
        if self.embeddings is not None:
            out.extend((f"emb.f{f}", e) for f, e in enumerate(self.embeddings))
        if self.pair_matrices is not None:
            out.extend(
                (f"pair.{pm.k}.{pm.l}", pm.payload)
                for pm in self.pair_matrices
                if pm.payload is not None
            )
        return out

    def copy(self) -> "FmModel":
        emb = None if self.embeddings is None else [e.copy() for e in self.embeddings]
        pms = None
        if self.pair_matrices is not None:
            pms = [
                replace(pm, payload=None if pm.payload is None else pm.payload.copy())
                for pm in self.pair_matrices
            ]
        lw = (
            self.linear_w.copy()
            if isinstance(self.linear_w, np.ndarray)
            else [w.copy() for w in self.linear_w]
        )
        return replace(self, embeddings=emb, pair_matrices=pms, linear_w=lw, bias=self.bias.copy())


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _ffm_slot(f: int, other: int) -> int:
    # index of field `other` among the n-1 per-target tables of field f
    return other if other < f else other - 1


def _lookup(model: FmModel, indices: np.ndarray) -> list[np.ndarray]:
    return [model.embeddings[f][indices[:, f]] for f in range(model.n)]


def _linear_part(model: FmModel, indices: np.ndarray, emb: list[np.ndarray] | None) -> np.ndarray:
    if model.linear_mode is LinearMode.PER_FEATURE:
        gid = model.schema.offsets[None, :] + indices.astype(np.int64)
        return model.linear_w[gid].sum(axis=1)
    phi = np.zeros(indices.shape[0])
    for f in range(model.n):
        phi += emb[f] @ model.linear_w[f]
    return phi


def _check_indices(model: FmModel, indices: np.ndarray) -> np.ndarray:
    indices = np.atleast_2d(np.asarray(indices))
    if indices.shape[1] != model.n:
        raise ModelError(
            f"instance has {indices.shape[1]} active features, schema has {model.n} fields"
        )
    counts = np.asarray(model.schema.feature_counts, dtype=np.int64)
    if (indices >= counts[None, :]).any():
        raise ModelError("feature index out of range for schema (schema mismatch?)")
    return indices


def score_batch(model: FmModel, indices: np.ndarray) -> np.ndarray:
    """Logits for a (B, n) matrix of active local indices."""
    indices = _check_indices(model, indices)
    B = indices.shape[0]

    if model.variant == "lr":
        return np.full(B, model.bias[0]) + _linear_part(model, indices, None)

    if model.variant == "ffm":
        emb = model.embeddings
        phi = np.full(B, model.bias[0]) + _linear_part(model, indices, None)
        for k, l in model.pairs:
            a = emb[k][indices[:, k], _ffm_slot(k, l)]
            b = emb[l][indices[:, l], _ffm_slot(l, k)]
            phi += np.einsum("bd,bd->b", a, b)
        return phi

    emb = _lookup(model, indices)
    phi = np.full(B, model.bias[0]) + _linear_part(model, indices, emb)
    for p, pm in enumerate(model.pair_matrices):
        vk, vl = emb[pm.k], emb[pm.l]
        if pm.kind is MatrixKind.IDENTITY:
            phi += np.einsum("bd,bd->b", vk, vl)
        elif pm.kind is MatrixKind.SCALAR:
            phi += pm.payload * np.einsum("bd,bd->b", vk, vl)
        elif pm.kind is MatrixKind.DIAGONAL:
            phi += np.einsum("bd,d,bd->b", vk, pm.payload, vl)
        else:
            phi += np.einsum("bd,bd->b", vk @ pm.payload, vl)
    return phi


def score(model: FmModel, inst: EncodedInstance) -> float:
    """Logit of a single encoded instance."""
    return float(score_batch(model, inst.active[None, :])[0])


def predict_proba_batch(model: FmModel, indices: np.ndarray) -> np.ndarray:
    z = np.clip(score_batch(model, indices), -LOGIT_CLAMP, LOGIT_CLAMP)
    return sigmoid(z)


def predict_proba(model: FmModel, inst: EncodedInstance) -> float:
    return float(predict_proba_batch(model, inst.active[None, :])[0])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _write_f8(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f8(fh, shape) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(count * 8)
    if len(buf) != count * 8:
        raise ModelError("model file truncated")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def save_model(model: FmModel, path_or_fh) -> None:
    """Write the versioned binary model file.

    Layout: magic line, schema hash line, `<variant> <kind> <linear_mode>`
    line, dims line, then little-endian float64 payload in the order
    embeddings (per field, row-major), pair matrices ((k,l) ascending),
    linear terms, bias.
    """
    own = not hasattr(path_or_fh, "write")
    fh = open(path_or_fh, "wb") if own else path_or_fh
    try:
        kind = model.kind.value if model.kind is not None else "-"
        fh.write(f"{MODEL_MAGIC}\n".encode("ascii"))
        fh.write(f"{schema_digest(model.schema)}\n".encode("ascii"))
        fh.write(f"{model.variant} {kind} {model.linear_mode.value}\n".encode("ascii"))
        fh.write((" ".join(str(int(d)) for d in model.dims) + "\n").encode("ascii"))
        if model.embeddings is not None:
            for e in model.embeddings:
                _write_f8(fh, e)
        if model.pair_matrices is not None:
            for pm in model.pair_matrices:
                if pm.payload is not None:
                    _write_f8(fh, pm.payload)
        if model.linear_mode is LinearMode.PER_FEATURE:
            _write_f8(fh, model.linear_w)
        else:
            for w in model.linear_w:
                _write_f8(fh, w)
        _write_f8(fh, model.bias)
    finally:
        if own:
            fh.close()


def model_digest(model: FmModel) -> str:
    """Content hash of the serialized model; binds caches to their source."""
    buf = io.BytesIO()
    save_model(model, buf)
    return hashlib.sha256(buf.getvalue()).hexdigest()


def _embedding_shapes(variant: str, counts: Sequence[int], dims: np.ndarray):
    n = len(counts)
    if variant == "lr":
        return None
    if variant == "ffm":
        return [(counts[f], n - 1, int(dims[f])) for f in range(n)]
    return [(counts[f], int(dims[f])) for f in range(n)]


def read_model_from(fh, schema: FieldSchema) -> FmModel:
    """Read a model from an open binary stream, leaving it positioned just
    past the model payload (checkpoints append optimizer state there)."""
    magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
    if magic != MODEL_MAGIC:
        raise ModelError(f"not a model file (bad magic header {magic!r})")
    stored_hash = fh.readline().decode("ascii").rstrip("\n")
    if stored_hash != schema_digest(schema):
        raise ModelError("schema hash mismatch: model was built on a different schema")
    variant, kind_tag, linear_tag = fh.readline().decode("ascii").rstrip("\n").split(" ")
    dims = np.array([int(t) for t in fh.readline().decode("ascii").split()], dtype=np.int64)
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r} in model file")
    kind = None if kind_tag == "-" else MatrixKind(kind_tag)
    linear_mode = LinearMode(linear_tag)
    counts = schema.feature_counts

    embeddings = None
    shapes = _embedding_shapes(variant, counts, dims)
    if shapes is not None:
        embeddings = [_read_f8(fh, s) for s in shapes]

    pair_matrices = None
    if kind is not None:
        pair_matrices = []
        for k, l in field_pairs(schema.n):
            dk, dl = int(dims[k]), int(dims[l])
            if kind is MatrixKind.IDENTITY:
                payload = None
            elif kind is MatrixKind.SCALAR:
                payload = _read_f8(fh, ())
            elif kind is MatrixKind.DIAGONAL:
                payload = _read_f8(fh, (dk,))
            else:
                payload = _read_f8(fh, (dk, dl))
            pair_matrices.append(FieldPairMatrix(k, l, kind, dk, dl, payload))

    if linear_mode is LinearMode.PER_FEATURE:
        linear_w = _read_f8(fh, (schema.total_features,))
    else:
        linear_w = [_read_f8(fh, (int(dims[f]),)) for f in range(schema.n)]
    bias = _read_f8(fh, (1,))

    return FmModel(
        schema=schema,
        variant=variant,
        kind=kind,
        dims=dims,
        embeddings=embeddings,
        pair_matrices=pair_matrices,
        linear_mode=linear_mode,
        linear_w=linear_w,
        bias=bias,
    )


def load_model(path, schema: FieldSchema) -> FmModel:
    """Read a model file; the schema must hash-match the one it was built on."""
    with open(path, "rb") as fh:
        model = read_model_from(fh, schema)
        if fh.read(1):
            raise ModelError("model file has trailing bytes")
    return model
