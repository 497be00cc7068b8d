"""Synthetic multi-field categorical data with planted interaction structure.

Feature values per field follow a Zipf law (long-tailed, like real traffic).
Labels are drawn from sigmoid(logit) where the logit comes from a planted
model with pair matrices of a chosen constraint kind, so the ground-truth
capacity class is known by construction: a full-kind truth rewards full
matrices, an identity-kind truth leaves nothing beyond plain dot products
to exploit. Raw logits are standardized to a configurable scale/offset
before sampling, which fixes the label base rate without changing the
(rank-based) learnability of the signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ingest import Dataset, DatasetSplit, split_dataset
from .model import (
    FieldPairMatrix,
    FmModel,
    LinearMode,
    MatrixKind,
    field_pairs,
    score_batch,
    sigmoid,
)
from .schema import FieldSchema

KIND_VARIANT = {
    MatrixKind.IDENTITY: "fm",
    MatrixKind.SCALAR: "fwfm",
    MatrixKind.DIAGONAL: "fvfm",
    MatrixKind.FULL: "fmfm",
}


@dataclass
class SynthSpec:
    n_fields: int
    vocab_sizes: int | Sequence[int]
    samples: int
    matrix_kind: MatrixKind | str = MatrixKind.FULL
    embed_dim: int = 6
    zipf_exponent: float = 1.1
    label_noise: float = 0.0
    logit_scale: float = 2.0
    base_logit: float = -1.0
    strength_range: tuple[float, float] = (0.2, 2.0)
    linear_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.matrix_kind = MatrixKind(self.matrix_kind)
        if self.n_fields < 2:
            raise ValueError("need at least 2 fields")
        if self.samples < 1:
            raise ValueError("samples must be positive")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be in [0, 1]")

    @property
    def sizes(self) -> list[int]:
        if isinstance(self.vocab_sizes, int):
            return [self.vocab_sizes] * self.n_fields
        sizes = list(self.vocab_sizes)
        if len(sizes) != self.n_fields:
            raise ValueError("vocab_sizes must be an int or one size per field")
        return sizes


@dataclass
class SynthData:
    schema: FieldSchema
    split: DatasetSplit
    truth: FmModel
    unseen_validation_pairs: int


def zipf_probs(size: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, size + 1, dtype=np.float64)
    p = ranks ** (-exponent)
    return p / p.sum()


def _planted_model(spec: SynthSpec, schema: FieldSchema, rng: np.random.Generator) -> FmModel:
    n, K = spec.n_fields, spec.embed_dim
    counts = schema.feature_counts
    embeddings = [rng.normal(0.0, 1.0, size=(counts[f], K)) for f in range(n)]
    lo, hi = spec.strength_range
    pair_matrices = []
    for k, l in field_pairs(n):
        strength = rng.uniform(lo, hi)
        kind = spec.matrix_kind
        if kind is MatrixKind.IDENTITY:
            payload = None
        elif kind is MatrixKind.SCALAR:
            payload = np.array(strength)
        elif kind is MatrixKind.DIAGONAL:
            payload = strength * rng.normal(0.0, 1.0, size=K)
        else:
            # orthonormal mixing: generically strong off-diagonal mass
            q, _ = np.linalg.qr(rng.normal(0.0, 1.0, size=(K, K)))
            payload = strength * q
        pair_matrices.append(FieldPairMatrix(k, l, kind, K, K, payload))
    linear_w = [rng.normal(0.0, spec.linear_scale, size=K) for _ in range(n)]
    return FmModel(
        schema=schema,
        variant=KIND_VARIANT[spec.matrix_kind],
        kind=spec.matrix_kind,
        dims=np.full(n, K, dtype=np.int64),
        embeddings=embeddings,
        pair_matrices=pair_matrices,
        linear_mode=LinearMode.FIELD_SHARED,
        linear_w=linear_w,
        bias=np.zeros(1),
    )


def count_unseen_pairs(train: Dataset, other: Dataset) -> int:
    """Distinct (field pair, feature pair) combos in `other` absent from train."""
    n = train.n
    unseen = 0
    for k, l in field_pairs(n):
        width = int(
            max(train.indices[:, l].max(initial=0), other.indices[:, l].max(initial=0))
        ) + 1
        seen = np.unique(train.indices[:, k].astype(np.int64) * width + train.indices[:, l])
        held = np.unique(other.indices[:, k].astype(np.int64) * width + other.indices[:, l])
        unseen += int(np.setdiff1d(held, seen, assume_unique=True).size)
    return unseen


def generate(spec: SynthSpec) -> SynthData:
    """Sample a full dataset and split it 80/10/10; reproducible from the seed."""
    sizes = spec.sizes
    if any(v < 1 for v in sizes):
        raise ValueError("vocab sizes must be >= 1")
    rng = np.random.default_rng(spec.seed)

    field_names = [f"field_{f}" for f in range(spec.n_fields)]
    indices = np.empty((spec.samples, spec.n_fields), dtype=np.uint32)
    for f, size in enumerate(sizes):
        draws = rng.choice(size, size=spec.samples, p=zipf_probs(size, spec.zipf_exponent))
        indices[:, f] = draws + 1  # local 0 stays reserved for unknown

    vocabs = []
    counts = []
    for f, size in enumerate(sizes):
        freq = np.bincount(indices[:, f], minlength=size + 1)
        vocabs.append({f"v{i}": i + 1 for i in range(size)})
        counts.append({f"v{i}": int(freq[i + 1]) for i in range(size)})
    schema = FieldSchema(field_names, vocabs, counts)

    truth = _planted_model(spec, schema, rng)
    raw = score_batch(truth, indices)
    std = raw.std()
    if std > 0:
        z = (raw - raw.mean()) / std * spec.logit_scale + spec.base_logit
    else:
        z = np.full(spec.samples, spec.base_logit)
    y = np.where(rng.random(spec.samples) < sigmoid(z), 1, -1).astype(np.int8)
    if spec.label_noise > 0:
        flip = rng.random(spec.samples) < spec.label_noise
        y[flip] = -y[flip]

    split = split_dataset(Dataset(y, indices), seed=spec.seed)
    unseen = count_unseen_pairs(split.train, split.validation)
    return SynthData(schema=schema, split=split, truth=truth, unseen_validation_pairs=unseen)
