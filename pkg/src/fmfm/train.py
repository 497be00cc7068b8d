"""Minibatch training of all model variants with hand-derived gradients.

The objective is the mean logistic loss over a batch,

    mean_s log(1 + exp(-y_s * phi(x_s)))  +  l2 * sum(p^2 for p != bias)

minimized by SGD, Adam, or Adagrad. Gradients flow through the chain factor
d/dphi = -y * sigmoid(-y * phi) / B into each parameter class:

    full matrix M_kl      outer(v_k, v_j) summed over the batch
    diagonal d_kl         v_k (*) v_l
    scalar r_kl           <v_k, v_l>
    embedding v_i         sum over partners of the correctly-oriented
                          transform of the partner embedding (+ the
                          field-shared linear vector when that mode is on)
    linear / bias         1 per active feature / per instance

The l2 term contributes 2 * l2 * p to every parameter except the bias.
Training runs single-threaded and is bitwise deterministic for a fixed
config and seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields as dataclass_fields
from typing import Sequence

import numpy as np

from . import analysis
from .ingest import Dataset, DatasetSplit
from .model import (
    DEFAULT_LINEAR_MODE,
    VARIANT_KIND,
    VARIANTS,
    FieldPairMatrix,
    FmModel,
    LinearMode,
    MatrixKind,
    ModelError,
    _check_indices,
    _ffm_slot,
    field_pairs,
    read_model_from,
    save_model,
    score_batch,
    sigmoid,
)
from .schema import FieldSchema

OPTIMIZERS = ("sgd", "adam", "adagrad")

CHECKPOINT_STATE_MAGIC = "fmfm-optstate v1"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; usually the learning rate is too high."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    l2_lambda: float = 0.0
    epochs: int = 10
    batch_size: int = 1024
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")


def parse_config_file(path) -> TrainConfig:
    """Read a flat key=value file into a TrainConfig."""
    types = {f.name: f.type for f in dataclass_fields(TrainConfig)}
    kwargs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            caster = {"float": float, "int": int, "str": str}[types[key]]
            kwargs[key] = caster(value.strip())
    return TrainConfig(**kwargs)


@dataclass
class TrainReport:
    train_logloss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    val_logloss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_model(
    schema: FieldSchema,
    variant: str,
    dims: int | Sequence[int],
    config: TrainConfig,
    matrix_kind: MatrixKind | str | None = None,
    linear_mode: LinearMode | str | None = None,
) -> FmModel:
    """Build a freshly initialized model.

    Embeddings are N(0, init_scale^2); pair matrices start at their neutral
    element (identity-padded rectangles for full matrices, r=1, d=1), so an
    fmfm model scores exactly like an fm model with the same embeddings at
    step 0. Linear terms and bias start at zero. Only the embedding draw
    consumes randomness, so models of different variants built from the same
    seed share their embedding tables.
    """
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}")
    n = schema.n
    counts = schema.feature_counts

    if isinstance(dims, (int, np.integer)):
        dims_arr = np.full(n, int(dims), dtype=np.int64)
    else:
        dims_arr = np.asarray(list(dims), dtype=np.int64)
        if dims_arr.shape != (n,):
            raise ModelError(f"dims must be an int or {n} per-field values")
    if variant == "lr":
        dims_arr = np.zeros(n, dtype=np.int64)
    elif (dims_arr < 1).any():
        raise ModelError("embedding dimensions must be positive")

    kind = None
    if variant in VARIANT_KIND:
        kind = MatrixKind(matrix_kind) if matrix_kind is not None else VARIANT_KIND[variant]
    elif matrix_kind is not None:
        raise ModelError(f"variant {variant!r} does not take a matrix kind")

    uniform = bool((dims_arr == dims_arr[0]).all()) if n > 0 else True
    if not uniform and (variant in ("fm", "fwfm", "fvfm", "ffm") or kind in (
        MatrixKind.IDENTITY,
        MatrixKind.SCALAR,
        MatrixKind.DIAGONAL,
    )):
        raise ModelError("variable per-field dimensions require full pair matrices")

    mode = LinearMode(linear_mode) if linear_mode is not None else DEFAULT_LINEAR_MODE[variant]
    if variant == "lr":
        mode = LinearMode.PER_FEATURE

    rng = np.random.default_rng(config.seed)
    embeddings = None
    if variant == "ffm":
        K = int(dims_arr[0])
        embeddings = [
            rng.normal(0.0, config.init_scale, size=(counts[f], n - 1, K)) for f in range(n)
        ]
    elif variant != "lr":
        embeddings = [
            rng.normal(0.0, config.init_scale, size=(counts[f], int(dims_arr[f])))
            for f in range(n)
        ]

    pair_matrices = None
    if kind is not None:
        pair_matrices = []
        for k, l in field_pairs(n):
            dk, dl = int(dims_arr[k]), int(dims_arr[l])
            if kind is MatrixKind.IDENTITY:
                payload = None
            elif kind is MatrixKind.SCALAR:
                payload = np.array(1.0)
            elif kind is MatrixKind.DIAGONAL:
                payload = np.ones(dk)
            else:
                payload = np.eye(dk, dl)
            pair_matrices.append(FieldPairMatrix(k, l, kind, dk, dl, payload))

    if mode is LinearMode.PER_FEATURE:
        linear_w = np.zeros(schema.total_features)
    else:
        linear_w = [np.zeros(int(dims_arr[f])) for f in range(n)]

    return FmModel(
        schema=schema,
        variant=variant,
        kind=kind,
        dims=dims_arr,
        embeddings=embeddings,
        pair_matrices=pair_matrices,
        linear_mode=mode,
        linear_w=linear_w,
        bias=np.zeros(1),
    )


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------


def _squared_norm(model: FmModel) -> float:
    total = 0.0
    for name, p in model.parameters():
        if name != "bias":
            total += float(np.sum(p * p))
    return total


def loss(model: FmModel, batch: Dataset, l2: float = 0.0) -> float:
    """Mean logistic loss over the batch plus the l2 penalty (bias excluded)."""
    if len(batch) == 0:
        raise ValueError("batch is empty")
    phi = score_batch(model, batch.indices)
    y = batch.labels.astype(np.float64)
    value = float(np.logaddexp(0.0, -y * phi).mean())
    if l2 > 0.0:
        value += l2 * _squared_norm(model)
    return value


def _forward_backward(model: FmModel, labels: np.ndarray, indices: np.ndarray, l2: float):
    """One fused pass; returns (gradient dict keyed like parameters(), mean logloss)."""
    indices = _check_indices(model, indices)
    B = indices.shape[0]
    y = labels.astype(np.float64)
    n = model.n
    grads: dict[str, np.ndarray] = {}

    per_feature = model.linear_mode is LinearMode.PER_FEATURE
    gid = None
    if per_feature:
        gid = model.schema.offsets[None, :] + indices.astype(np.int64)

    if model.variant == "lr":
        phi = np.full(B, model.bias[0]) + model.linear_w[gid].sum(axis=1)
        g = -y * sigmoid(-y * phi) / B
        grads["bias"] = np.array([g.sum()])
        gl = np.zeros_like(model.linear_w)
        np.add.at(gl, gid.ravel(), np.repeat(g, n))
        grads["linear"] = gl

    elif model.variant == "ffm":
        emb = model.embeddings
        pairs = model.pairs
        a_vecs = []
        phi = np.full(B, model.bias[0]) + model.linear_w[gid].sum(axis=1)
        for k, l in pairs:
            a = emb[k][indices[:, k], _ffm_slot(k, l)]
            b = emb[l][indices[:, l], _ffm_slot(l, k)]
            phi += np.einsum("bd,bd->b", a, b)
            a_vecs.append((a, b))
        g = -y * sigmoid(-y * phi) / B
        grads["bias"] = np.array([g.sum()])
        gl = np.zeros_like(model.linear_w)
        np.add.at(gl, gid.ravel(), np.repeat(g, n))
        grads["linear"] = gl
        gemb = [np.zeros_like(e) for e in emb]
        for (k, l), (a, b) in zip(pairs, a_vecs):
            np.add.at(gemb[k], (indices[:, k], _ffm_slot(k, l)), g[:, None] * b)
            np.add.at(gemb[l], (indices[:, l], _ffm_slot(l, k)), g[:, None] * a)
        for f in range(n):
            grads[f"emb.f{f}"] = gemb[f]

    else:
        emb = [model.embeddings[f][indices[:, f]] for f in range(n)]
        phi = np.full(B, model.bias[0])
        if per_feature:
            phi += model.linear_w[gid].sum(axis=1)
        else:
            for f in range(n):
                phi += emb[f] @ model.linear_w[f]

        transformed = []
        for pm in model.pair_matrices:
            vk, vl = emb[pm.k], emb[pm.l]
            if pm.kind is MatrixKind.IDENTITY:
                t = vk
            elif pm.kind is MatrixKind.FULL:
                t = vk @ pm.payload
            else:
                t = vk * pm.payload
            transformed.append(t)
            phi += np.einsum("bd,bd->b", t, vl)

        g = -y * sigmoid(-y * phi) / B
        grads["bias"] = np.array([g.sum()])
        d_emb = [np.zeros_like(e) for e in emb]

        if per_feature:
            gl = np.zeros_like(model.linear_w)
            np.add.at(gl, gid.ravel(), np.repeat(g, n))
            grads["linear"] = gl
        else:
            for f in range(n):
                grads[f"linear.f{f}"] = emb[f].T @ g
                d_emb[f] += g[:, None] * model.linear_w[f]

        for pm, t in zip(model.pair_matrices, transformed):
            vk, vl = emb[pm.k], emb[pm.l]
            gvl = g[:, None] * vl
            if pm.kind is MatrixKind.IDENTITY:
                d_emb[pm.k] += gvl
                d_emb[pm.l] += g[:, None] * vk
            elif pm.kind is MatrixKind.SCALAR:
                grads[f"pair.{pm.k}.{pm.l}"] = np.array(
                    np.dot(g, np.einsum("bd,bd->b", vk, vl))
                )
                d_emb[pm.k] += pm.payload * gvl
                d_emb[pm.l] += pm.payload * (g[:, None] * vk)
            elif pm.kind is MatrixKind.DIAGONAL:
                grads[f"pair.{pm.k}.{pm.l}"] = np.einsum("b,bd,bd->d", g, vk, vl)
                d_emb[pm.k] += pm.payload * gvl
                d_emb[pm.l] += pm.payload * (g[:, None] * vk)
            else:
                grads[f"pair.{pm.k}.{pm.l}"] = vk.T @ gvl
                d_emb[pm.k] += gvl @ pm.payload.T
                d_emb[pm.l] += g[:, None] * t

        for f in range(n):
            ge = np.zeros_like(model.embeddings[f])
            np.add.at(ge, indices[:, f], d_emb[f])
            grads[f"emb.f{f}"] = ge

    if l2 > 0.0:
        for name, p in model.parameters():
            if name == "bias":
                continue
            if name in grads:
                grads[name] = grads[name] + 2.0 * l2 * p
            else:
                grads[name] = 2.0 * l2 * p

    mean_ll = float(np.logaddexp(0.0, -y * phi).mean())
    return grads, mean_ll


def gradients(model: FmModel, batch: Dataset, l2: float = 0.0) -> dict[str, np.ndarray]:
    """Analytic gradients of loss() w.r.t. every trainable array, keyed like
    model.parameters(). Parameters a batch never touches still receive their
    regularization gradient 2*l2*p."""
    grads, _ = _forward_backward(model, batch.labels, batch.indices, l2)
    for name, p in model.parameters():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    return grads


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SgdOptimizer:
    kind = "sgd"

    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate

    def step(self, params, grads):
        for name, p in params:
            if name in grads:
                p -= self.lr * grads[name]

    def state_dict(self):
        return {"scalars": {}, "arrays": {}}

    def load_state_dict(self, state):
        pass


class AdamOptimizer:
    kind = "adam"

    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in params:
            if name not in grads:
                continue
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self):
        arrays = {f"m.{k}": v for k, v in self.m.items()}
        arrays.update({f"v.{k}": v for k, v in self.v.items()})
        return {"scalars": {"t": self.t}, "arrays": arrays}

    def load_state_dict(self, state):
        self.t = int(state["scalars"]["t"])
        self.m = {k[2:]: v for k, v in state["arrays"].items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in state["arrays"].items() if k.startswith("v.")}


class AdagradOptimizer:
    kind = "adagrad"

    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate
        self.eps = config.eps
        self.acc: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        for name, p in params:
            if name not in grads:
                continue
            g = grads[name]
            if name not in self.acc:
                self.acc[name] = np.zeros_like(p)
            a = self.acc[name]
            a += g * g
            p -= self.lr * g / (np.sqrt(a) + self.eps)

    def state_dict(self):
        return {"scalars": {}, "arrays": {f"a.{k}": v for k, v in self.acc.items()}}

    def load_state_dict(self, state):
        self.acc = {k[2:]: v for k, v in state["arrays"].items() if k.startswith("a.")}


def make_optimizer(config: TrainConfig):
    return {"sgd": SgdOptimizer, "adam": AdamOptimizer, "adagrad": AdagradOptimizer}[
        config.optimizer
    ](config)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def fit(
    model: FmModel,
    split: DatasetSplit,
    config: TrainConfig,
    optimizer=None,
    log=None,
):
    """Train `model` in place and return (best_model, report).

    Each epoch shuffles the training set with the config seed, applies
    minibatch updates, then scores the validation set. The returned model is
    a copy holding the parameters of the epoch with the best validation AUC;
    the model passed in is left at the final epoch so callers can checkpoint
    and resume. `log`, if given, is called with one line per epoch.
    """
    if len(split.train) == 0:
        raise ValueError("training split is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = optimizer if optimizer is not None else make_optimizer(config)
    report = TrainReport()
    best_auc = -np.inf
    best_state: dict[str, np.ndarray] | None = None

    val = split.validation
    val_usable = len(val) > 0 and len(np.unique(val.labels)) == 2

    for epoch in range(config.epochs):
        perm = rng.permutation(len(split.train))
        ll_sum, seen = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            sel = perm[start : start + config.batch_size]
            grads, mean_ll = _forward_backward(
                model, split.train.labels[sel], split.train.indices[sel], config.l2_lambda
            )
            if not np.isfinite(mean_ll):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, instance {start}: "
                    "reduce the learning rate"
                )
            opt.step(params, grads)
            ll_sum += mean_ll * len(sel)
            seen += len(sel)
        report.train_logloss.append(ll_sum / seen)

        if val_usable:
            val_phi = score_batch(model, val.indices)
            epoch_auc = analysis.auc(val_phi, val.labels)
            epoch_ll = analysis.logloss(
                sigmoid(np.clip(val_phi, -35.0, 35.0)), val.labels
            )
        else:
            # no usable validation set: fall back to training loss
            epoch_auc, epoch_ll = float("nan"), float("nan")
        report.val_auc.append(epoch_auc)
        report.val_logloss.append(epoch_ll)

        selector = epoch_auc if val_usable else -report.train_logloss[-1]
        if selector > best_auc:
            best_auc = selector
            report.best_epoch = epoch
            best_state = {name: p.copy() for name, p in params}

        if log is not None:
            log(
                f"epoch {epoch} train_logloss={report.train_logloss[-1]:.6f} "
                f"val_auc={epoch_auc:.6f} val_logloss={epoch_ll:.6f}"
            )

    best_model = model.copy()
    if best_state is not None:
        for name, p in best_model.parameters():
            p[...] = best_state[name]
    report.wall_time = time.perf_counter() - t0
    return best_model, report


# ---------------------------------------------------------------------------
# checkpoints: model file + optimizer state appendix
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: FmModel, optimizer) -> None:
    state = optimizer.state_dict()
    with open(path, "wb") as fh:
        save_model(model, fh)
        fh.write(f"{CHECKPOINT_STATE_MAGIC} {optimizer.kind}\n".encode("ascii"))
        scalars = " ".join(f"{k}={v}" for k, v in sorted(state["scalars"].items()))
        fh.write(f"{scalars}\n".encode("ascii"))
        for name in sorted(state["arrays"]):
            arr = state["arrays"][name]
            shape = " ".join(str(s) for s in arr.shape)
            fh.write(f"{name} {shape}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, schema: FieldSchema, config: TrainConfig):
    """Restore (model, optimizer) from a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        model = read_model_from(fh, schema)
        header = fh.readline().decode("ascii").rstrip("\n")
        magic, _, opt_kind = header.rpartition(" ")
        if magic != CHECKPOINT_STATE_MAGIC:
            raise ModelError(f"checkpoint missing optimizer state (got {header!r})")
        scalars = {}
        scalar_line = fh.readline().decode("ascii").strip()
        if scalar_line:
            for item in scalar_line.split(" "):
                k, _, v = item.partition("=")
                scalars[k] = v
        arrays = {}
        while True:
            line = fh.readline()
            if not line:
                break
            parts = line.decode("ascii").split()
            name, shape = parts[0], tuple(int(s) for s in parts[1:])
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
    if opt_kind != config.optimizer:
        raise ModelError(
            f"checkpoint optimizer {opt_kind!r} does not match config {config.optimizer!r}"
        )
    opt = make_optimizer(config)
    opt.load_state_dict({"scalars": scalars, "arrays": arrays})
    return model, opt
