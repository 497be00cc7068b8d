"""Two-pass variable-dimension selection via per-field PCA.

Pass one trains a full model at one uniform embedding dimension K. Each
field's embedding table is then centered and eigendecomposed, and the field
keeps the smallest number of leading components whose eigenvalues cover the
requested variance fraction. Pass two trains a fresh model from scratch at
those per-field dimensions (the PCA projections themselves are discarded;
rectangular pair matrices absorb the dimension differences).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import DatasetSplit
from .model import FmModel, MatrixKind, ModelError, model_digest
from .schema import FieldSchema

DIMS_MAGIC = "fmfm-dims v1"


@dataclass
class DimsPlan:
    per_field_dim: np.ndarray  # (n,) int64, each in 1..K
    variance_fraction: float
    source_model_hash: str = ""

    def __post_init__(self):
        self.per_field_dim = np.asarray(self.per_field_dim, dtype=np.int64)
        if (self.per_field_dim < 1).any():
            raise ValueError("per-field dimensions must be >= 1")
        if not 0.0 < self.variance_fraction <= 1.0:
            raise ValueError("variance_fraction must be in (0, 1]")

    @property
    def mean_dim(self) -> float:
        return float(self.per_field_dim.mean())


def field_eigenvalues(rows: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Descending eigenvalues of the (optionally weighted) covariance of
    embedding rows. A single row has zero covariance."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] < 2:
        return np.zeros(rows.shape[1])
    if weights is None:
        centered = rows - rows.mean(axis=0)
        cov = centered.T @ centered / (rows.shape[0] - 1)
    else:
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            return np.zeros(rows.shape[1])
        mean = (w[:, None] * rows).sum(axis=0) / total
        centered = rows - mean
        cov = (w[:, None] * centered).T @ centered / total
    eig = np.linalg.eigvalsh(cov)  # deterministic symmetric solver, ascending
    return np.clip(eig[::-1], 0.0, None)


def _select_dim(eigenvalues: np.ndarray, fraction: float, cap: int) -> int:
    total = eigenvalues.sum()
    if total <= 0.0:
        return 1
    ratios = np.cumsum(eigenvalues) / total
    # 1e-12 slack so fraction=1.0 is reached despite rounding in the tail
    d = int(np.searchsorted(ratios, fraction - 1e-12) + 1)
    return max(1, min(d, cap))


def pca_field_dims(
    model: FmModel,
    fraction: float,
    frequency_weighted: bool = False,
) -> DimsPlan:
    """Select per-field dimensions retaining `fraction` of each field's
    embedding variance.

    The model must have one shared embedding table per field at a uniform
    dimension (the full first-pass model). With frequency_weighted=True,
    rows are weighted by their token counts from the schema (the unknown
    slot gets weight zero).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if model.embeddings is None or model.variant == "ffm":
        raise ModelError("dimension selection needs a model with shared per-field embeddings")
    if not (model.dims == model.dims[0]).all():
        raise ModelError("dimension selection expects a uniform first-pass model")

    dims = np.empty(model.n, dtype=np.int64)
    for f in range(model.n):
        rows = model.embeddings[f]
        weights = None
        if frequency_weighted:
            weights = np.zeros(rows.shape[0])
            for tok, local in model.schema.vocabs[f].items():
                weights[local] = model.schema.token_counts[f][tok]
        eig = field_eigenvalues(rows, weights)
        dims[f] = _select_dim(eig, fraction, cap=rows.shape[1])
    return DimsPlan(dims, fraction, model_digest(model))


def second_pass(
    schema: FieldSchema,
    plan: DimsPlan,
    split: DatasetSplit,
    config,
    variant: str = "fmfm",
    linear_mode=None,
):
    """Train a fresh variable-dimension model from scratch at the plan's
    per-field dims. Returns (best_model, report) like train.fit."""
    from .train import fit, init_model

    model = init_model(schema, variant, plan.per_field_dim, config, linear_mode=linear_mode)
    return fit(model, split, config)


def save_dims(plan: DimsPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{DIMS_MAGIC} {plan.variance_fraction}\n")
        for f, d in enumerate(plan.per_field_dim):
            fh.write(f"{f}\t{int(d)}\n")


def load_dims(path) -> DimsPlan:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(" ")
        if " ".join(header[:2]) != DIMS_MAGIC or len(header) != 3:
            raise ValueError(f"not a dims file (bad magic header)")
        fraction = float(header[2])
        entries = {}
        for line in fh:
            f, d = line.split("\t")
            entries[int(f)] = int(d)
    dims = np.array([entries[f] for f in sorted(entries)], dtype=np.int64)
    if sorted(entries) != list(range(len(entries))):
        raise ValueError("dims file must cover fields 0..n-1 exactly once")
    return DimsPlan(dims, fraction)
