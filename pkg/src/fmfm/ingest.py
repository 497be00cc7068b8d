"""Raw file parsing, numeric/date transforms, encoding, and dataset splitting.

Supported raw layouts:
  * criteo: headerless TSV, column 0 label (0/1), columns 1-13 integer
    features, columns 14-39 categorical tokens; empty string means missing.
  * avazu: CSV with header, `click` column as label, `hour` (YYMMDDHH)
    expanded into day-of-week and hour-of-day fields, `id` dropped.
  * tsv: generic header TSV whose first column is the label (0/1 or +-1)
    and remaining columns are pre-tokenized categorical fields.

Encoded datasets are stored as a binary record stream, little-endian:
an ASCII header line ``fmfm-data v1 <n>`` followed by records of one
int8 label and n uint32 local indices in schema field order.
"""

from __future__ import annotations

import csv
import datetime
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .schema import FieldSchema, SchemaError, encode_row

DATA_MAGIC = "fmfm-data v1"

CRITEO_NUMERIC = 13
CRITEO_CATEGORICAL = 26
CRITEO_FIELDS = [f"I{i}" for i in range(1, CRITEO_NUMERIC + 1)] + [
    f"C{i}" for i in range(1, CRITEO_CATEGORICAL + 1)
]

MISSING_TOKEN = "missing"


class IngestError(ValueError):
    """Raised for malformed raw input files."""


class EncodedInstance(NamedTuple):
    label: int
    active: np.ndarray  # (n,) uint32 local indices, one per field


@dataclass
class Dataset:
    """Encoded instances: labels in {+1,-1} and one active feature per field."""

    labels: np.ndarray  # (B,) int8
    indices: np.ndarray  # (B, n) uint32

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.indices = np.atleast_2d(np.asarray(self.indices, dtype=np.uint32))
        if self.labels.shape[0] != self.indices.shape[0]:
            raise IngestError("labels and indices length mismatch")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n(self) -> int:
        return self.indices.shape[1]

    def instance(self, i: int) -> EncodedInstance:
        return EncodedInstance(int(self.labels[i]), self.indices[i])

    def subset(self, mask_or_idx) -> "Dataset":
        return Dataset(self.labels[mask_or_idx].copy(), self.indices[mask_or_idx].copy())


@dataclass
class DatasetSplit:
    train: Dataset
    validation: Dataset
    test: Dataset
    seed: int


def transform_numeric(value) -> str:
    """Normalize an integer feature to a categorical token.

    Missing (None or empty string) becomes "missing"; values <= 2 pass
    through literally (this covers negatives and zero); values > 2 become
    floor(ln(x)^2) as a decimal token.
    """
    if value is None or value == "":
        return MISSING_TOKEN
    x = int(value)
    if x <= 2:
        return str(x)
    return str(math.floor(math.log(x) ** 2))


def expand_avazu_hour(raw: str) -> tuple[str, str]:
    """Expand a YYMMDDHH timestamp into (day-of-week, hour-of-day) tokens.

    Day of week is 0-6 with Monday = 0; hour is "0".."23".
    Raises IngestError on anything that does not parse as a timestamp.
    """
    if len(raw) != 8 or not raw.isdigit():
        raise IngestError(f"malformed timestamp {raw!r}")
    yy, mm, dd, hh = int(raw[0:2]), int(raw[2:4]), int(raw[4:6]), int(raw[6:8])
    if hh > 23:
        raise IngestError(f"malformed timestamp {raw!r}")
    try:
        day = datetime.date(2000 + yy, mm, dd)
    except ValueError as exc:
        raise IngestError(f"malformed timestamp {raw!r}") from exc
    return str(day.weekday()), str(hh)


def _label_from(token: str) -> int:
    if token in ("1", "+1"):
        return 1
    if token in ("0", "-1"):
        return -1
    raise IngestError(f"unrecognized label {token!r}")


class CriteoReader:
    """Iterates (label, tokens) over a Criteo-format TSV file.

    Numeric columns are normalized with transform_numeric; rows whose
    numeric cells fail to parse are dropped and counted in `rejected`.
    """

    field_names = CRITEO_FIELDS

    def __init__(self, path):
        self.path = path
        self.rejected = 0

    def __iter__(self) -> Iterator[tuple[int, list[str]]]:
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                cols = line.rstrip("\n").split("\t")
                if len(cols) != 1 + CRITEO_NUMERIC + CRITEO_CATEGORICAL:
                    self.rejected += 1
                    continue
                try:
                    label = _label_from(cols[0])
                    tokens = [transform_numeric(c) for c in cols[1 : 1 + CRITEO_NUMERIC]]
                except (IngestError, ValueError):
                    self.rejected += 1
                    continue
                tokens += cols[1 + CRITEO_NUMERIC :]
                yield label, tokens


class AvazuReader:
    """Iterates (label, tokens) over an Avazu-format CSV file.

    The `hour` column is replaced by two fields (day_of_week, hour) at the
    front of the row; `id` and `click` are not feature fields. Rows with a
    malformed timestamp are dropped and counted in `rejected`.
    """

    def __init__(self, path):
        self.path = path
        self.rejected = 0
        with open(path, "r", encoding="utf-8", newline="") as fh:
            header = next(csv.reader(fh))
        for required in ("click", "hour"):
            if required not in header:
                raise IngestError(f"avazu header missing {required!r} column")
        self._header = header
        self._label_col = header.index("click")
        self._hour_col = header.index("hour")
        self._feature_cols = [
            i for i, name in enumerate(header) if name not in ("id", "click", "hour")
        ]
        self.field_names = ["day_of_week", "hour"] + [header[i] for i in self._feature_cols]

    def __iter__(self) -> Iterator[tuple[int, list[str]]]:
        with open(self.path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)  # header
            for cols in reader:
                if len(cols) != len(self._header):
                    self.rejected += 1
                    continue
                try:
                    label = _label_from(cols[self._label_col])
                    dow, hour = expand_avazu_hour(cols[self._hour_col])
                except IngestError:
                    self.rejected += 1
                    continue
                yield label, [dow, hour] + [cols[i] for i in self._feature_cols]


class TsvReader:
    """Generic header TSV: first column is the label, the rest are tokens."""

    def __init__(self, path):
        self.path = path
        self.rejected = 0
        with open(path, "r", encoding="utf-8") as fh:
            self.field_names = fh.readline().rstrip("\n").split("\t")[1:]
        if not self.field_names:
            raise IngestError("tsv header declares no feature columns")

    def __iter__(self) -> Iterator[tuple[int, list[str]]]:
        with open(self.path, "r", encoding="utf-8") as fh:
            fh.readline()
            for line in fh:
                cols = line.rstrip("\n").split("\t")
                if len(cols) != 1 + len(self.field_names):
                    self.rejected += 1
                    continue
                try:
                    label = _label_from(cols[0])
                except IngestError:
                    self.rejected += 1
                    continue
                yield label, cols[1:]


READERS = {"criteo": CriteoReader, "avazu": AvazuReader, "tsv": TsvReader}


def open_reader(fmt: str, path):
    try:
        return READERS[fmt](path)
    except KeyError:
        raise IngestError(f"unknown input format {fmt!r}") from None


def token_rows(reader) -> Iterator[list[str]]:
    """Strip labels off a reader's stream (for schema building)."""
    for _, tokens in reader:
        yield tokens


def encode_stream(schema: FieldSchema, labeled_rows: Iterable[tuple[int, Sequence[str]]]) -> Dataset:
    labels: list[int] = []
    rows: list[np.ndarray] = []
    for label, tokens in labeled_rows:
        labels.append(label)
        rows.append(encode_row(schema, tokens))
    if not rows:
        raise IngestError("no instances to encode")
    return Dataset(np.array(labels, dtype=np.int8), np.stack(rows))


def split_dataset(dataset: Dataset, seed: int) -> DatasetSplit:
    """Randomly split into train/validation/test with probabilities .8/.1/.1.

    Each instance is assigned by an independent uniform draw, so the split
    is streamable and deterministic for a given seed; proportions are
    statistical, not exact.
    """
    if len(dataset) == 0:
        raise IngestError("cannot split an empty dataset")
    u = np.random.default_rng(seed).random(len(dataset))
    return DatasetSplit(
        train=dataset.subset(u < 0.8),
        validation=dataset.subset((u >= 0.8) & (u < 0.9)),
        test=dataset.subset(u >= 0.9),
        seed=seed,
    )


def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("label", "<i1"), ("idx", "<u4", (n,))])


def write_dataset(path, dataset: Dataset) -> None:
    records = np.empty(len(dataset), dtype=_record_dtype(dataset.n))
    records["label"] = dataset.labels
    records["idx"] = dataset.indices
    with open(path, "wb") as fh:
        fh.write(f"{DATA_MAGIC} {dataset.n}\n".encode("ascii"))
        fh.write(records.tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        parts = header.split(" ")
        if len(parts) != 3 or " ".join(parts[:2]) != DATA_MAGIC or not parts[2].isdigit():
            raise IngestError(f"not a dataset file (bad magic header {header!r})")
        n = int(parts[2])
        payload = fh.read()
    records = np.frombuffer(payload, dtype=_record_dtype(n))
    return Dataset(records["label"].copy(), records["idx"].copy())
