"""Field/feature vocabulary construction, encoding, and persistence.

A schema maps every raw token to a (field, local index) pair. Local index 0
of every field is reserved for the "unknown" feature: tokens that fall below
the frequency threshold, or that were never seen when the schema was built,
all encode to it. Local indices are dense (0..feature_count-1) and assigned
in lexicographic token order, which makes schema construction deterministic
and shard-mergeable.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

SCHEMA_MAGIC = "fmfm-schema v1"

UNKNOWN_INDEX = 0


class SchemaError(ValueError):
    """Raised for malformed schema inputs or files."""


class GlobalFeatureId(NamedTuple):
    field: int
    local: int


@dataclass
class FieldSchema:
    """Immutable vocabulary for n disjoint categorical fields.

    vocabs[f] maps token -> local index (>= 1); index 0 is the implicit
    unknown slot. token_counts[f] keeps the observed frequency of every
    retained token so the serialized schema is reviewable.
    """

    field_names: list[str]
    vocabs: list[dict[str, int]]
    token_counts: list[dict[str, int]]

    def __post_init__(self):
        if len(self.field_names) != len(set(self.field_names)):
            raise SchemaError("duplicate field names")
        if not (len(self.field_names) == len(self.vocabs) == len(self.token_counts)):
            raise SchemaError("field_names, vocabs and token_counts must align")
        self._offsets = np.concatenate([[0], np.cumsum(self.feature_counts)[:-1]]).astype(np.int64)
        self._reverse = [
            {idx: tok for tok, idx in vocab.items()} for vocab in self.vocabs
        ]

    @property
    def n(self) -> int:
        return len(self.field_names)

    @property
    def feature_counts(self) -> list[int]:
        # +1 for the unknown slot of each field
        return [len(v) + 1 for v in self.vocabs]

    @property
    def total_features(self) -> int:
        return sum(self.feature_counts)

    @property
    def offsets(self) -> np.ndarray:
        """Per-field offset of local index 0 in the flattened feature space."""
        return self._offsets

    def global_index(self, field: int, local: int) -> int:
        return int(self._offsets[field]) + local

    def decode_token(self, field: int, local: int) -> str | None:
        """Inverse of encoding for retained tokens; None for the unknown slot."""
        if local == UNKNOWN_INDEX:
            return None
        return self._reverse[field][local]


def count_field_tokens(rows: Iterable[Sequence[str]], n: int) -> list[Counter]:
    """One frequency pass over token rows; shardable, merged with `+`.

    Empty tokens are reserved for missing values and are never counted.
    """
    counters = [Counter() for _ in range(n)]
    for row in rows:
        if len(row) != n:
            raise SchemaError(f"row has {len(row)} tokens, expected {n}")
        for f, tok in enumerate(row):
            if tok:
                counters[f][tok] += 1
    return counters


def build_schema(
    rows: Iterable[Sequence[str]],
    field_names: Sequence[str],
    min_frequency: int | Sequence[int] = 1,
) -> FieldSchema:
    """Build a FieldSchema from a stream of token rows.

    Tokens occurring fewer than min_frequency times are dropped from the
    vocabulary and will encode to the unknown slot. min_frequency may be a
    single integer or one threshold per field.
    """
    names = list(field_names)
    n = len(names)
    if n == 0:
        raise SchemaError("field_names is empty")
    if len(set(names)) != n:
        raise SchemaError("duplicate field names")
    if isinstance(min_frequency, int):
        thresholds = [min_frequency] * n
    else:
        thresholds = list(min_frequency)
        if len(thresholds) != n:
            raise SchemaError("min_frequency must be one integer or one per field")
    if any(t < 1 for t in thresholds):
        raise SchemaError("min_frequency must be >= 1")

    counters = count_field_tokens(rows, n)
    if all(sum(c.values()) == 0 for c in counters):
        raise SchemaError("empty input stream")

    vocabs: list[dict[str, int]] = []
    counts: list[dict[str, int]] = []
    for f in range(n):
        kept = sorted(t for t, c in counters[f].items() if c >= thresholds[f])
        vocabs.append({tok: i + 1 for i, tok in enumerate(kept)})
        counts.append({tok: counters[f][tok] for tok in kept})
    return FieldSchema(names, vocabs, counts)


def encode_token(schema: FieldSchema, field: int, token: str) -> GlobalFeatureId:
    """Map a raw token to its (field, local index); unknown tokens go to 0."""
    if not 0 <= field < schema.n:
        raise SchemaError(f"field {field} out of range (n={schema.n})")
    return GlobalFeatureId(field, schema.vocabs[field].get(token, UNKNOWN_INDEX))


def encode_row(schema: FieldSchema, tokens: Sequence[str]) -> np.ndarray:
    """Encode one token row into n local indices (uint32), one per field."""
    if len(tokens) != schema.n:
        raise SchemaError(f"row has {len(tokens)} tokens, expected {schema.n}")
    out = np.empty(schema.n, dtype=np.uint32)
    for f, tok in enumerate(tokens):
        out[f] = schema.vocabs[f].get(tok, UNKNOWN_INDEX)
    return out


def serialize_schema(schema: FieldSchema) -> str:
    lines = [f"{SCHEMA_MAGIC} {schema.n} {schema.total_features}"]
    lines.append("\t".join(schema.field_names))
    for f in range(schema.n):
        vocab = schema.vocabs[f]
        for tok in sorted(vocab, key=vocab.get):
            lines.append(f"{f}\t{tok}\t{vocab[tok]}\t{schema.token_counts[f][tok]}")
    return "\n".join(lines) + "\n"


def schema_digest(schema: FieldSchema) -> str:
    """Stable content hash used to bind models and caches to a schema."""
    return hashlib.sha256(serialize_schema(schema).encode()).hexdigest()


def save_schema(schema: FieldSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_schema(schema))


def _parse(fh: TextIO) -> FieldSchema:
    header = fh.readline().rstrip("\n").split(" ")
    if header[: len(SCHEMA_MAGIC.split())] != SCHEMA_MAGIC.split():
        raise SchemaError("not a schema file (bad magic header)")
    n, m = int(header[2]), int(header[3])
    names = fh.readline().rstrip("\n").split("\t")
    if len(names) != n:
        raise SchemaError("field name line does not match declared field count")
    vocabs: list[dict[str, int]] = [{} for _ in range(n)]
    counts: list[dict[str, int]] = [{} for _ in range(n)]
    for line in fh:
        f, tok, local, cnt = line.rstrip("\n").split("\t")
        vocabs[int(f)][tok] = int(local)
        counts[int(f)][tok] = int(cnt)
    schema = FieldSchema(names, vocabs, counts)
    if schema.total_features != m:
        raise SchemaError(f"schema file declares {m} features, found {schema.total_features}")
    return schema


def load_schema(path) -> FieldSchema:
    with open(path, "r", encoding="utf-8") as fh:
        return _parse(fh)
