"""Command-line entry point wiring data generation, index building,
training, evaluation, baselines, sweeps, benchmarks, and inspection.

Every command writes its resolved flag values next to its outputs and puts
the same key=value lines as comment headers in each table it emits, so any
run can be reproduced from its artifacts alone. Exit codes: 0 success, 2
usage or validation error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataspace as ds
from . import fusion as fu
from .ann import KeyStore, HnswParams, bench_index, build_exact, build_hnsw, load_index, save_index
from .autodiff import load_checkpoint, save_checkpoint
from .errors import FormatError, ValidationError
from .losses import REWEIGHT_SCHEMES, balanced_error, make_loss_spec, per_class_accuracy
from .retrieval import (
    FrozenEncoder,
    RetrievalBranch,
    RetrievalConfig,
    TextStore,
    inspect_retrievals,
    knn_classify,
)

LOSSES = ("ce", "balce", "lace", "ldam")
SUMMARY_HEADER = ["branch", "top1", "top5", "be", "many", "med", "few", "all"]


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _out_dir(args) -> str:
    out = args.out if args.out is not None else os.environ.get("RAC_OUT_DIR", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _resolved_config(args) -> list[str]:
    """Flat key=value lines of every resolved flag, deterministic order.

    The output directory is where the config itself lands, not an input to
    the computation, so it is left out: runs that differ only in --out emit
    byte-identical artifacts.
    """
    skip = {"func", "command", "out"}
    lines = []
    for key in sorted(vars(args)):
        if key in skip:
            continue
        value = getattr(args, key)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key.replace('_', '-')}={value}")
    return lines


def _write_config(args, out: str) -> list[str]:
    lines = _resolved_config(args)
    with open(os.path.join(out, f"{args.command}.config"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return lines


def _load_dataset(path: str, split: str) -> ds.Dataset:
    return ds.ingest_dataset(path, split=split)


def _names_for(path: str, num_classes: int) -> list[str]:
    """Class names from the dataset's companion file, or generated
    single-token identifiers when no companion exists."""
    companion = ds.names_path_for(path)
    if companion is not None:
        return ds.read_names(companion, num_classes)
    return ds.class_names(num_classes, vocab_mode="single_token")


def _stats_for(train_set: ds.Dataset) -> ds.ClassStats:
    counts = np.bincount(train_set.labels, minlength=train_set.num_classes)
    few_below, med_at_most = ds.default_thresholds(int(counts.max()))
    return ds.ClassStats(counts, int(counts.sum()), few_below, med_at_most)


def _index_source(args) -> fu.IndexSource:
    """Merge --data and every --add into one index source with file tags."""
    parts = []
    for path in [args.data, *args.add]:
        tag = os.path.splitext(os.path.basename(path))[0]
        dataset = _load_dataset(path, split="train")
        names = _names_for(path, dataset.num_classes)
        parts.append(fu.index_source_from(dataset, names, tag=tag))
    return fu.merge_sources(*parts)


def _train_config(args, use_base: bool, use_retrieval: bool) -> fu.TrainConfig:
    return fu.TrainConfig(
        loss=args.loss,
        reweight=args.reweight,
        tau=args.tau,
        epsilon=args.epsilon,
        optimizer=args.optimizer,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        k=args.k,
        drop_first=args.drop_first,
        encoder_kind=args.encoder,
        key_dim=args.key_dim,
        text_variant=args.text_variant,
        embed_dim=args.embed_dim,
        embeddings_path=args.embeddings,
        use_base=use_base,
        use_retrieval=use_retrieval,
        cache_retrieval=not args.no_cache,
        eval_every=args.eval_every,
        fusion_scale=args.fusion_scale,
        metric=args.metric,
        index_type=getattr(args, "index_type", "exact"),
    )


def _load_branch_artifacts(args):
    if args.index is None or args.texts is None:
        raise ValidationError("retrieval needs --index and --texts (or pass --no-retrieval)")
    return load_index(args.index), TextStore.load(args.texts)


def _write_summary(path: str, report: fu.EvalReport, comments: list[str]):
    nan = float("nan")
    rows = []
    for name, branch in (("base", report.base), ("ret", report.ret), ("fused", report.fused)):
        if branch is None:
            continue
        rows.append([
            name, branch.top1, branch.top5, branch.balanced_error,
            branch.buckets.get("many", nan), branch.buckets.get("med", nan),
            branch.buckets.get("few", nan), branch.buckets.get("all", nan),
        ])
    fu.write_table(path, SUMMARY_HEADER, rows, comments)


def _emit_eval(out: str, report: fu.EvalReport, comments: list[str], plot: bool):
    fu.write_per_class(os.path.join(out, "per_class.csv"), report, comments)
    _write_summary(os.path.join(out, "summary.csv"), report, comments)
    if plot:
        from . import plots

        plots.plot_per_class(report, os.path.join(out, "per_class.png"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    out = _out_dir(args)
    _write_config(args, out)
    spread = (args.spread_lo, args.spread_hi)
    gen = ds.GenConfig(
        num_classes=args.classes, dim=args.dim, n_max=args.n_max,
        imbalance=args.imbalance, profile=args.profile, seed=args.seed,
        cluster_sep=args.cluster_sep, spread_range=spread, name_seed=args.name_seed,
    )
    gen.validate()
    train_set = ds.generate_longtail(gen)
    test_set = ds.make_balanced_testset(gen, args.test_per_class)
    names = ds.class_names(args.classes, vocab_mode=args.vocab_mode, name_seed=args.name_seed)
    ds.write_ltds(train_set, os.path.join(out, "train.ltds"), names)
    ds.write_ltds(test_set, os.path.join(out, "test.ltds"), names)
    stats = _stats_for(train_set)
    buckets = ds.bucketize(stats)
    tally = {b: buckets.count(b) for b in ("many", "med", "few")}
    print(f"classes={args.classes} train={train_set.n} test={test_set.n}")
    print(f"counts: max={int(stats.counts.max())} min={int(stats.counts.min())} "
          f"many={tally['many']} med={tally['med']} few={tally['few']}")


def cmd_build_index(args):
    out = _out_dir(args)
    _write_config(args, out)
    source = _index_source(args)
    encoder = FrozenEncoder(args.encoder, source.features.shape[1],
                            key_dim=args.key_dim, seed=args.seed)
    store = KeyStore(encoder.encode(source.features))
    if args.index_type == "hnsw":
        params = HnswParams(M=args.M, ef_construction=args.ef_construction,
                            ef_search=args.ef_search, seed=args.seed)
        index = build_hnsw(store, metric=args.metric, params=params)
    else:
        index = build_exact(store, metric=args.metric)
    save_index(index, os.path.join(out, "index.racidx"))
    TextStore(np.arange(source.n, dtype=np.int64), source.texts,
              source.sources).save(os.path.join(out, "texts.tsv"))
    print(f"J={index.n} build_seconds_per_key={index.build_seconds / index.n:.6f}")


def cmd_train(args):
    out = _out_dir(args)
    comments = _write_config(args, out)
    train_set = _load_dataset(args.data, split="train")
    stats = _stats_for(train_set)
    use_retrieval = not args.no_retrieval
    use_base = not args.no_base
    index = text_store = None
    if use_retrieval:
        index, text_store = _load_branch_artifacts(args)
    cfg = _train_config(args, use_base, use_retrieval)
    model = fu.build_model(train_set, cfg, index=index, text_store=text_store)
    eval_set = _load_dataset(args.test, split="test") if args.test else None
    result = fu.train(model, train_set, stats, cfg, eval_set=eval_set)
    save_checkpoint(os.path.join(out, "model.rac"), model.parameters(), result.optim)
    fu.write_history(os.path.join(out, "history.txt"), result.history)
    if eval_set is not None:
        spec = make_loss_spec(cfg.loss, stats, tau=cfg.tau, epsilon=cfg.epsilon,
                              reweight_scheme=cfg.reweight)
        report = fu.evaluate(model, eval_set, stats, loss_spec=spec)
        _emit_eval(out, report, comments, plot=not args.no_plot)
    if not args.no_plot:
        from . import plots

        plots.plot_history(result.history, os.path.join(out, "history.png"))
    last = result.history[-1]
    print(f"final: split={last.split} loss={last.loss:.6f} top1={last.top1:.4f} "
          f"be={last.be:.4f}")


def cmd_eval(args):
    out = _out_dir(args)
    comments = _write_config(args, out)
    train_set = _load_dataset(args.train_data, split="train")
    stats = _stats_for(train_set)
    eval_set = _load_dataset(args.data, split="test")
    params, _ = load_checkpoint(args.checkpoint)
    use_retrieval = any(p.name.startswith("text.") for p in params)
    use_base = any(p.name.startswith("base.") for p in params)
    index = text_store = None
    if use_retrieval:
        index, text_store = _load_branch_artifacts(args)
    cfg = _train_config(args, use_base, use_retrieval)
    model = fu.build_model(train_set, cfg, index=index, text_store=text_store)
    fu.load_model_params(model, params)
    spec = make_loss_spec(cfg.loss, stats, tau=cfg.tau, epsilon=cfg.epsilon,
                          reweight_scheme=cfg.reweight)
    report = fu.evaluate(model, eval_set, stats, loss_spec=spec)
    _emit_eval(out, report, comments, plot=not args.no_plot)
    fr = report.fused
    print(f"top1={fr.top1:.4f} top5={fr.top5:.4f} be={fr.balanced_error:.4f}")


def cmd_knn_baseline(args):
    out = _out_dir(args)
    comments = _write_config(args, out)
    index = load_index(args.index)
    data = _load_dataset(args.data, split="train")
    query_set = _load_dataset(args.query, split="test")
    if data.n != index.n:
        raise ValidationError(
            f"--data has {data.n} rows but the index holds {index.n}; "
            "pass the dataset the index was built over"
        )
    encoder = FrozenEncoder(args.encoder, query_set.dim, key_dim=args.key_dim,
                            seed=args.seed)
    preds = knn_classify(index, data.labels, encoder.encode(query_set.features), k=args.k)
    top1 = float((preds == query_set.labels).mean())
    be = balanced_error(preds, query_set.labels, query_set.num_classes)
    fu.write_table(os.path.join(out, "knn.csv"), ["k", "top1", "be"],
                   [[args.k, top1, be]], comments)
    print(f"k={args.k} top1={top1:.4f} be={be:.4f}")


def cmd_sweep(args):
    out = _out_dir(args)
    comments = _write_config(args, out)
    train_set = _load_dataset(args.data, split="train")
    test_set = _load_dataset(args.test, split="test")
    stats = _stats_for(train_set)
    index, text_store = _load_branch_artifacts(args)
    if args.axis == "k":
        values = [int(v) for v in args.values.split(",")]
        cfg = _train_config(args, use_base=False, use_retrieval=True)
        result = fu.sweep_k(train_set, test_set, stats, index, text_store, cfg, values)
        name = "sweep_k"
    else:
        values = [float(v) for v in args.values.split(",")]
        cfg = _train_config(args, not args.no_base, not args.no_retrieval)
        result = fu.sweep_tau(train_set, test_set, stats, index, text_store, cfg, values)
        name = "sweep_tau"
    path = os.path.join(out, f"{name}.csv")
    fu.write_table(path, result.header, result.rows, comments)
    if not args.no_plot:
        from . import plots

        plots.plot_table(result.header, result.rows, os.path.join(out, f"{name}.png"))
    for row in result.rows:
        print(" ".join(f"{h}={v}" for h, v in zip(result.header, row)))


_ABLATION_CLI_MODES = {
    "fraction": "subsample_fraction",
    "per-class": "per_class_cap",
    "classes": "class_count",
}


def cmd_ablate_index(args):
    out = _out_dir(args)
    comments = _write_config(args, out)
    train_set = _load_dataset(args.data, split="train")
    test_set = _load_dataset(args.test, split="test")
    stats = _stats_for(train_set)
    source = _index_source(args)
    mode = _ABLATION_CLI_MODES[args.mode]
    if mode == "subsample_fraction":
        values = [float(v) for v in args.values.split(",")]
    else:
        values = [int(v) for v in args.values.split(",")]
    cfg = _train_config(args, use_base=False, use_retrieval=True)
    result = fu.ablate_index_content(train_set, test_set, stats, source, cfg, mode, values)
    fu.write_table(os.path.join(out, "ablation.csv"), result.header, result.rows, comments)
    if not args.no_plot:
        from . import plots

        plots.plot_table(result.header, result.rows,
                         os.path.join(out, "ablation.png"), x_column="value")
    for row in result.rows:
        print(" ".join(f"{h}={v}" for h, v in zip(result.header, row)))


def cmd_bench_index(args):
    out = _out_dir(args)
    comments = _write_config(args, out)
    rows = []
    dicts = []
    for path in args.index:
        index = load_index(path)
        if args.queries_from is not None:
            queries_set = _load_dataset(args.queries_from, split="test")
            encoder = FrozenEncoder(args.encoder, queries_set.dim,
                                    key_dim=args.key_dim, seed=args.seed)
            queries = encoder.encode(queries_set.features)[: args.num_queries]
        else:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(args.seed)))
            queries = rng.normal(size=(args.num_queries, index.dim))
            queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        stats = bench_index(index, queries, k=args.k, repeats=args.repeats)
        label = os.path.splitext(os.path.basename(path))[0]
        timing = stats["query_time_per_sample"]
        rows.append([label, stats["kind"], stats["n_keys"], args.k,
                     timing["mean"], timing["p50"], timing["p95"]])
        dicts.append({"label": label, "mean_query_seconds": timing["mean"]})
        print(f"{label}: kind={stats['kind']} J={stats['n_keys']} "
              f"mean={timing['mean'] * 1e3:.3f}ms p95={timing['p95'] * 1e3:.3f}ms")
    header = ["index", "kind", "n_keys", "k", "mean_s", "p50_s", "p95_s"]
    fu.write_table(os.path.join(out, "bench.csv"), header, rows, comments)
    if not args.no_plot:
        from . import plots

        plots.plot_bench(dicts, os.path.join(out, "bench.png"))


def cmd_inspect(args):
    out = _out_dir(args)
    _write_config(args, out)
    index = load_index(args.index)
    text_store = TextStore.load(args.texts)
    data = _load_dataset(args.data, split="test")
    names = _names_for(args.data, data.num_classes)
    encoder = FrozenEncoder(args.encoder, data.dim, key_dim=args.key_dim, seed=args.seed)
    # inspection only needs lookups and stored texts, not the trainable head
    branch = RetrievalBranch(
        frozen_encoder=encoder, index=index, text_store=text_store,
        tokenizer=None, text_encoder=None,
        config=RetrievalConfig(k=args.k, metric=index.metric),
    )
    records = inspect_retrievals(branch, data.features, data.labels, names,
                                 n=args.n, hist_bins=args.hist_bins)
    with open(os.path.join(out, "inspect.json"), "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")
    if not args.no_plot:
        from . import plots

        plots.plot_inspection(records, os.path.join(out, "inspect.png"))
    for rec in records:
        matches = sum(1 for r in rec["retrieved"] if r["exact_match"])
        print(f"query {rec['query_id']}: true={rec['true_text']!r} "
              f"matches {matches}/{len(rec['retrieved'])}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--out", default=None,
                        help="output directory (default: $RAC_OUT_DIR or .)")
    parser.add_argument("--seed", type=int, default=0, help="seed for every stream")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; execution is sequential, so every "
                             "value behaves like the deterministic --threads 1")
    parser.add_argument("--no-plot", action="store_true",
                        help="skip figure rendering, write only delimited outputs")


def _add_encoder_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--encoder", choices=("identity", "random_projection"),
                        default="identity", help="frozen feature-to-key encoder")
    parser.add_argument("--key-dim", type=int, default=None,
                        help="key dimension for random_projection")


def _add_train_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--loss", choices=LOSSES, default="lace")
    parser.add_argument("--reweight", choices=REWEIGHT_SCHEMES, default="none")
    parser.add_argument("--tau", type=float, default=1.0)
    parser.add_argument("--epsilon", type=float, default=0.1,
                        help="label smoothing mass")
    parser.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--weight-decay", type=float, default=0.02)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--k", type=int, default=30, help="retrieved neighbors per query")
    parser.add_argument("--drop-first", action="store_true",
                        help="fetch k+1 and drop the nearest neighbor during training")
    parser.add_argument("--no-base", action="store_true", help="retrieval-only model")
    parser.add_argument("--no-retrieval", action="store_true", help="base-only model")
    parser.add_argument("--text-variant", choices=("learned_pool", "fixed_bow", "random_bow"),
                        default="learned_pool")
    parser.add_argument("--embed-dim", type=int, default=None,
                        help="override the text embedding width")
    parser.add_argument("--embeddings", default=None,
                        help="fixed embedding file for --text-variant fixed_bow")
    parser.add_argument("--no-cache", action="store_true",
                        help="recompute retrieval lookups every batch")
    parser.add_argument("--eval-every", type=int, default=1)
    parser.add_argument("--fusion-scale", type=float, default=None,
                        help="override the default L/2 fusion scale")
    parser.add_argument("--metric", choices=("l2", "cosine"), default="cosine")
    _add_encoder_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rac",
        description="Long-tail classification with a retrieval branch over "
                    "an approximate nearest-neighbor index.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tail dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--n-max", type=int, default=1000,
                   help="samples in the largest class")
    p.add_argument("--imbalance", type=float, default=100.0,
                   help="largest/smallest class count ratio")
    p.add_argument("--profile", choices=ds.PROFILES, default="exponential")
    p.add_argument("--cluster-sep", type=float, default=6.0)
    p.add_argument("--spread-lo", type=float, default=0.5)
    p.add_argument("--spread-hi", type=float, default=1.5)
    p.add_argument("--vocab-mode", choices=("single_token", "multi_token"),
                   default="multi_token")
    p.add_argument("--name-seed", type=int, default=0)
    p.add_argument("--test-per-class", type=int, default=30)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-index", help="encode datasets and build the k-NN index")
    _add_common(p)
    p.add_argument("--data", required=True, help="primary dataset (LTDS)")
    p.add_argument("--add", action="append", default=[],
                   help="additional dataset merged into the index (repeatable)")
    p.add_argument("--index-type", choices=("exact", "hnsw"), default="hnsw")
    p.add_argument("--metric", choices=("l2", "cosine"), default="cosine")
    p.add_argument("--M", type=int, default=32, help="HNSW links per node")
    p.add_argument("--ef-construction", type=int, default=200)
    p.add_argument("--ef-search", type=int, default=None)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("train", help="train the two-branch model")
    _add_common(p)
    p.add_argument("--data", required=True, help="training dataset (LTDS)")
    p.add_argument("--test", default=None, help="balanced test dataset (LTDS)")
    p.add_argument("--index", default=None, help="index file from build-index")
    p.add_argument("--texts", default=None, help="text store from build-index")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset to evaluate (LTDS)")
    p.add_argument("--train-data", required=True,
                   help="training dataset the model was fit on (for counts)")
    p.add_argument("--index", default=None)
    p.add_argument("--texts", default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("knn-baseline", help="majority-vote k-NN over the index")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--data", required=True,
                   help="dataset the index was built over (supplies labels)")
    p.add_argument("--query", required=True, help="dataset to classify")
    p.add_argument("--k", type=int, default=1)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_knn_baseline)

    p = sub.add_parser("sweep", help="retrain across a grid of k or tau")
    _add_common(p)
    p.add_argument("--axis", choices=("k", "tau"), required=True)
    p.add_argument("--values", required=True, help="comma-separated grid")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--texts", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate-index", help="retrain while varying index content")
    _add_common(p)
    p.add_argument("--mode", choices=tuple(_ABLATION_CLI_MODES), required=True)
    p.add_argument("--values", required=True, help="comma-separated grid")
    p.add_argument("--data", required=True)
    p.add_argument("--add", action="append", default=[],
                   help="auxiliary dataset included in the index source")
    p.add_argument("--test", required=True)
    p.add_argument("--index-type", choices=("exact", "hnsw"), default="exact",
                   help="index type rebuilt at every grid point")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate_index)

    p = sub.add_parser("bench-index", help="time index queries")
    _add_common(p)
    p.add_argument("--index", action="append", required=True,
                   help="index file to benchmark (repeatable)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--num-queries", type=int, default=200)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--queries-from", default=None,
                   help="dataset supplying query features (default: random unit vectors)")
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_bench_index)

    p = sub.add_parser("inspect", help="show example retrievals and distances")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--data", required=True, help="queries with true labels (LTDS)")
    p.add_argument("--n", type=int, default=5, help="queries to inspect")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--hist-bins", type=int, default=16)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
