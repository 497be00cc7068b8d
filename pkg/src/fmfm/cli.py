"""Command-line surface for the end-to-end workflows.

The commands compose into the two-pass + cache pipeline:

    fmfm schema-build -> encode -> split -> train --variant fmfm --dim 16
         -> reduce --variance 0.95 -> train --dims dims.txt -> cache -> evaluate

Every artifact starts with a versioned magic header and every consumer
rejects files it does not recognize. Errors exit nonzero with a single
`error: ...` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, cache as cache_mod, ingest, reduce as reduce_mod, synth, train as train_mod
from .model import (
    VARIANTS,
    LinearMode,
    MatrixKind,
    load_model,
    predict_proba_batch,
    save_model,
    score_batch,
)
from .schema import build_schema, load_schema, save_schema


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require_inputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")


def _read_split_sections(args, schema):
    train_ds = ingest.read_dataset(args.train)
    if args.val:
        val_ds = ingest.read_dataset(args.val)
    else:
        val_ds = ingest.Dataset(
            np.empty(0, dtype=np.int8), np.empty((0, schema.n), dtype=np.uint32)
        )
    empty = ingest.Dataset(np.empty(0, dtype=np.int8), np.empty((0, schema.n), dtype=np.uint32))
    return ingest.DatasetSplit(train_ds, val_ds, empty, seed=args.seed or 0)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_schema_build(args) -> int:
    _require_inputs(args.input)
    reader = ingest.open_reader(args.format, args.input)
    rows = ingest.token_rows(reader)
    if args.count_scope == "train":
        rng = np.random.default_rng(args.seed)
        rows = (tokens for tokens in rows if rng.random() < 0.8)
    schema = build_schema(rows, reader.field_names, args.min_frequency)
    save_schema(schema, args.output)
    print(
        f"schema: fields={schema.n} features={schema.total_features} "
        f"rejected_rows={reader.rejected}"
    )
    return 0


def cmd_encode(args) -> int:
    _require_inputs(args.input, args.schema)
    schema = load_schema(args.schema)
    reader = ingest.open_reader(args.format, args.input)
    if reader.field_names != schema.field_names:
        raise ingest.IngestError("input columns do not match the schema's fields")
    dataset = ingest.encode_stream(schema, iter(reader))
    ingest.write_dataset(args.output, dataset)
    print(f"encoded: instances={len(dataset)} rejected_rows={reader.rejected}")
    return 0


def cmd_split(args) -> int:
    _require_inputs(args.input)
    dataset = ingest.read_dataset(args.input)
    split = ingest.split_dataset(dataset, args.seed)
    for part, name in ((split.train, "train"), (split.validation, "valid"), (split.test, "test")):
        ingest.write_dataset(f"{args.output_prefix}.{name}.bin", part)
    print(
        f"split: train={len(split.train)} valid={len(split.validation)} "
        f"test={len(split.test)} seed={args.seed}"
    )
    return 0


def _build_train_config(args) -> train_mod.TrainConfig:
    if args.config:
        _require_inputs(args.config)
        config = train_mod.parse_config_file(args.config)
    else:
        config = train_mod.TrainConfig()
    overrides = {
        "learning_rate": args.lr,
        "l2_lambda": args.l2,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "optimizer": args.optimizer,
        "init_scale": args.init_scale,
        "seed": args.seed,
    }
    fields = {k: v for k, v in overrides.items() if v is not None}
    if fields:
        from dataclasses import replace

        config = replace(config, **fields)
    return config


def cmd_train(args) -> int:
    _require_inputs(args.schema, args.train, args.val, args.resume)
    if args.dim is None and args.dims is None and args.variant != "lr" and args.resume is None:
        raise UsageError("train requires --dim K or --dims FILE (except --variant lr)")
    schema = load_schema(args.schema)
    config = _build_train_config(args)
    split = _read_split_sections(args, schema)

    optimizer = None
    if args.resume:
        model, optimizer = train_mod.load_checkpoint(args.resume, schema, config)
    else:
        dims = args.dim if args.dims is None else reduce_mod.load_dims(args.dims).per_field_dim
        if args.variant == "lr":
            dims = 0
        model = train_mod.init_model(
            schema,
            args.variant,
            dims,
            config,
            matrix_kind=args.matrix_kind,
            linear_mode=args.linear,
        )
        optimizer = train_mod.make_optimizer(config)

    log = None if args.quiet else print
    best, report = train_mod.fit(model, split, config, optimizer=optimizer, log=log)
    save_model(best, args.output)
    if args.checkpoint:
        train_mod.save_checkpoint(args.checkpoint, model, optimizer)
    print(
        f"trained: variant={args.variant} best_epoch={report.best_epoch} "
        f"val_auc={report.val_auc[report.best_epoch]:.6f} wall_time={report.wall_time:.1f}s"
    )
    return 0


def _scores_for(args, schema, model, indices) -> np.ndarray:
    if args.cache:
        cm = cache_mod.load_cache(args.cache, model)
        return cache_mod.cached_score_batch(cm, indices)
    return score_batch(model, indices)


def cmd_evaluate(args) -> int:
    _require_inputs(args.schema, args.model, args.data, args.cache)
    schema = load_schema(args.schema)
    model = load_model(args.model, schema)
    dataset = ingest.read_dataset(args.data)
    phi = _scores_for(args, schema, model, dataset.indices)
    probs = 1.0 / (1.0 + np.exp(-np.clip(phi, -35.0, 35.0)))
    result = {
        "auc": analysis.auc(phi, dataset.labels),
        "logloss": analysis.logloss(probs, dataset.labels),
        "instances": len(dataset),
    }
    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        print(f"auc={result['auc']:.6f} logloss={result['logloss']:.6f}")
    return 0


def cmd_predict(args) -> int:
    _require_inputs(args.schema, args.model, args.data, args.cache)
    schema = load_schema(args.schema)
    model = load_model(args.model, schema)
    dataset = ingest.read_dataset(args.data)
    if args.cache:
        cm = cache_mod.load_cache(args.cache, model)
        probs = cache_mod.cached_predict_proba_batch(cm, dataset.indices)
    else:
        probs = predict_proba_batch(model, dataset.indices)
    with open(args.output, "w", encoding="utf-8") as fh:
        for p in probs:
            fh.write(f"{p:.9f}\n")
    print(f"predicted: instances={len(dataset)} output={args.output}")
    return 0


def cmd_reduce(args) -> int:
    _require_inputs(args.schema, args.model)
    schema = load_schema(args.schema)
    model = load_model(args.model, schema)
    plan = reduce_mod.pca_field_dims(model, args.variance, frequency_weighted=args.frequency_weighted)
    reduce_mod.save_dims(plan, args.output)
    print(
        f"dims: mean={plan.mean_dim:.2f} min={int(plan.per_field_dim.min())} "
        f"max={int(plan.per_field_dim.max())} fraction={args.variance}"
    )
    return 0


def cmd_cache(args) -> int:
    _require_inputs(args.schema, args.model)
    schema = load_schema(args.schema)
    model = load_model(args.model, schema)
    dtype = np.float64 if args.float64 else np.float32
    cm = cache_mod.build_cache(model, dtype=dtype, threads=args.threads)
    cache_mod.save_cache(cm, args.output)
    print(f"cache: pairs={len(cm.pairs)} entries={cm.table_entries()} dtype={'f8' if args.float64 else 'f4'}")
    return 0


def _dims_or_k(args):
    if args.dims:
        _require_inputs(args.dims)
        return None, reduce_mod.load_dims(args.dims).per_field_dim
    return args.k, None


def cmd_flops(args) -> int:
    k, dims = _dims_or_k(args)
    if dims is None and args.n is None:
        raise UsageError("flops requires --n (or --dims FILE)")
    n = args.n if dims is None else len(dims)
    value = analysis.estimate_flops(
        args.variant, n, K=k, dims=dims, cached=args.cached, linear_mode=args.linear
    )
    if args.json:
        print(json.dumps({"variant": args.variant, "n": n, "cached": args.cached, "flops": value}))
    else:
        print(value)
    return 0


def cmd_params(args) -> int:
    k, dims = _dims_or_k(args)
    if args.schema:
        _require_inputs(args.schema)
        schema = load_schema(args.schema)
        m = schema.feature_counts
        n = schema.n
    else:
        if args.m is None:
            raise UsageError("params requires --m or --schema")
        m, n = args.m, args.n
    if n is None:
        raise UsageError("params requires --n with --m")
    value = analysis.count_params(
        args.variant, m, n, K=k, dims=dims, linear_mode=args.linear, hash_space=args.hash_space
    )
    if args.json:
        print(json.dumps({"variant": args.variant, "n": n, "params": value}))
    else:
        print(value)
    return 0


def cmd_mi(args) -> int:
    _require_inputs(args.schema, args.data)
    schema = load_schema(args.schema)
    dataset = ingest.read_dataset(args.data)
    if dataset.n != schema.n:
        raise ingest.IngestError("dataset field count does not match schema")
    matrix = analysis.mi_matrix(dataset)
    if args.output:
        np.savetxt(args.output, matrix, delimiter=",", fmt="%.8f")
    if args.json:
        print(json.dumps({"n": schema.n, "mi": matrix.tolist()}))
    elif args.output:
        print(f"mi: fields={schema.n} output={args.output}")
    else:
        np.savetxt(sys.stdout, matrix, delimiter=",", fmt="%.8f")
    return 0


def cmd_synth(args) -> int:
    sizes = [int(v) for v in args.vocab.split(",")]
    spec = synth.SynthSpec(
        n_fields=args.fields,
        vocab_sizes=sizes[0] if len(sizes) == 1 else sizes,
        samples=args.samples,
        matrix_kind=args.kind,
        embed_dim=args.dim,
        zipf_exponent=args.zipf,
        label_noise=args.noise,
        logit_scale=args.logit_scale,
        seed=args.seed,
    )
    data = synth.generate(spec)
    save_schema(data.schema, f"{args.output_prefix}.schema.txt")
    for part, name in (
        (data.split.train, "train"),
        (data.split.validation, "valid"),
        (data.split.test, "test"),
    ):
        ingest.write_dataset(f"{args.output_prefix}.{name}.bin", part)
    print(
        f"synth: train={len(data.split.train)} valid={len(data.split.validation)} "
        f"test={len(data.split.test)} unseen_val_pairs={data.unseen_validation_pairs}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="fmfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schema-build", help="build a vocabulary from raw data")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=sorted(ingest.READERS))
    p.add_argument("--min-frequency", type=int, default=1)
    p.add_argument("--output", required=True)
    p.add_argument("--count-scope", choices=("all", "train"), default="all",
                   help="count token frequencies over all rows or only rows the "
                        "seeded split would place in train")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_schema_build)

    p = sub.add_parser("encode", help="encode raw rows against a schema")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=sorted(ingest.READERS))
    p.add_argument("--schema", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("split", help="random 80/10/10 split of an encoded dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-prefix", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fit a model variant")
    p.add_argument("--schema", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--matrix-kind", choices=[k.value for k in MatrixKind], default=None)
    p.add_argument("--linear", choices=[m.value for m in LinearMode], default=None)
    p.add_argument("--dim", type=int)
    p.add_argument("--dims", help="per-field dims file from `fmfm reduce`")
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--optimizer", choices=train_mod.OPTIMIZERS)
    p.add_argument("--init-scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="also write model + optimizer state here")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--deterministic", action="store_true", default=True,
                   help="single-threaded updates (always on; flag kept for pipelines)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="AUC / LogLoss of a model on a dataset")
    p.add_argument("--schema", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cache", help="score through a cache file instead of the model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write per-instance probabilities")
    p.add_argument("--schema", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cache")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("reduce", help="PCA per-field dimension selection")
    p.add_argument("--schema", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--variance", type=float, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--frequency-weighted", action="store_true")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("cache", help="precompute intermediate vectors")
    p.add_argument("--schema", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--float64", action="store_true", help="store cached vectors as f8")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("flops", help="estimate per-instance inference FLOPs")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--dims")
    p.add_argument("--cached", action="store_true")
    p.add_argument("--linear", choices=[m.value for m in LinearMode],
                   default=LinearMode.PER_FEATURE.value)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("params", help="count trainable parameters")
    p.add_argument("--variant", required=True, choices=VARIANTS + ("poly2",))
    p.add_argument("--m", type=int, help="total feature count")
    p.add_argument("--schema", help="take per-field feature counts from a schema file")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--dims")
    p.add_argument("--linear", choices=[m.value for m in LinearMode],
                   default=LinearMode.PER_FEATURE.value)
    p.add_argument("--hash-space", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("mi", help="field-pair mutual information matrix")
    p.add_argument("--schema", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--output")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_mi)

    p = sub.add_parser("synth", help="generate a planted-truth synthetic dataset")
    p.add_argument("--fields", type=int, required=True)
    p.add_argument("--vocab", required=True, help="vocab size, or comma list per field")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--kind", choices=[k.value for k in MatrixKind], default="full")
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--zipf", type=float, default=1.1)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--logit-scale", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-prefix", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line machine-parseable failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
