"""Command-line entry point: ``subic <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
Every successful run writes ``<out>.manifest.json`` next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from subic import __version__
from subic.baselines import (
    CODEBOOK_MAGIC,
    PQCodebooks,
    adc_scores,
    load_codebooks,
    pq_encode_many,
    pq_train,
    save_codebooks,
)
from subic.codes import BlockShape
from subic.data import gen_synthetic, load_dataset, load_features, load_labels, save_features, save_labels, split
from subic.diagnostics import complexity_report, structure_report
from subic.errors import DivergenceError, FormatError, ShapeError
from subic.network import (
    MODEL_MAGIC,
    Hyperparams,
    binarize,
    classify_codes,
    embed,
    load_model,
    save_model,
    train,
    write_log,
)
from subic.search import (
    CodeIndex,
    QueryEmbedding,
    average_precision,
    encode_database,
    load_index,
    rank,
    read_results,
    save_index,
    score_codes,
    write_results,
)

log = logging.getLogger("subic")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out, args, inputs, result=None):
    manifest = {
        "command": args.command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": getattr(args, "seed", None),
        "versions": {"subic": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": {str(p): _digest(p) for p in inputs if p is not None},
    }
    if result is not None:
        manifest["result"] = result
    path = Path(str(out) + ".manifest.json") if not Path(out).is_dir() else Path(out) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _shape(args) -> BlockShape:
    try:
        return BlockShape(args.m, args.k)
    except ShapeError as e:
        raise UsageError(str(e)) from None


def _load_encoder(path):
    """A trained SuBiC model or PQ codebooks, told apart by file magic."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == CODEBOOK_MAGIC:
        return load_codebooks(path)
    if magic == MODEL_MAGIC:
        return load_model(path)
    raise FormatError(f"{path}: neither a model ({MODEL_MAGIC!r}) nor codebooks ({CODEBOOK_MAGIC!r})")


def _write_matrix_csv(path, prefix, rows, ids=None):
    rows = np.asarray(rows)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id"] + [f"{prefix}{j}" for j in range(rows.shape[1])])
        for i, r in enumerate(rows):
            vals = [repr(float(v)) for v in r] if rows.dtype.kind == "f" else [int(v) for v in r]
            w.writerow([i if ids is None else int(ids[i])] + vals)


def cmd_gen_data(args):
    ds = gen_synthetic(args.n, args.d, args.classes, args.spread, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_features(out / "all.subf", ds.features)
    save_labels(out / "all.subl", ds.labels, ds.C)
    sizes = {"all": ds.n}
    if args.split:
        parts = split(ds, args.split, args.seed)
        for name, part in zip(("train", "db", "query"), parts):
            save_features(out / f"{name}.subf", part.features)
            save_labels(out / f"{name}.subl", part.labels, ds.C)
            sizes[name] = part.n
    _write_manifest(out, args, [], {"sizes": sizes})
    print(json.dumps(sizes))


def cmd_train(args):
    _require(args.inp, args.labels)
    shape = _shape(args)
    try:
        hyper = Hyperparams(
            gamma=args.gamma,
            mu=args.mu,
            learning_rate=args.lr,
            momentum=args.momentum,
            batch_size=args.batch_size,
            num_batches=args.num_batches,
            seed=args.seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = load_dataset(args.inp, args.labels)
    if hyper.batch_size > ds.n:
        raise UsageError(f"--batch-size {hyper.batch_size} exceeds dataset size {ds.n}")
    res = train(ds, shape, hyper)
    save_model(args.out, res.params)
    log_path = args.log or str(args.out) + ".log.csv"
    write_log(log_path, res.log)
    last = res.log[-1] if res.log else None
    summary = {"batches": len(res.log), "log": log_path}
    if last is not None:
        summary.update(final_total=last.total, final_cls=last.cls)
    _write_manifest(args.out, args, [args.inp, args.labels], summary)
    print(json.dumps(summary))


def cmd_encode(args):
    _require(args.inp, args.model)
    params = _load_encoder(args.model)
    x = load_features(args.inp)
    codes = pq_encode_many(x, params) if isinstance(params, PQCodebooks) else binarize(x, params)
    _write_matrix_csv(args.out, "c", codes.reshape(len(x), -1))
    _write_manifest(args.out, args, [args.inp, args.model], {"records": len(x)})


def cmd_embed(args):
    _require(args.inp, args.model)
    params = load_model(args.model)
    x = load_features(args.inp)
    _write_matrix_csv(args.out, "z", embed(x, params).reshape(len(x), -1))
    _write_manifest(args.out, args, [args.inp, args.model], {"records": len(x)})


def cmd_index(args):
    _require(args.inp, args.model, args.labels)
    enc = _load_encoder(args.model)
    x = load_features(args.inp)
    labels = load_labels(args.labels)[0] if args.labels else None
    if labels is not None and len(labels) != len(x):
        raise FormatError(f"{len(x)} feature rows but {len(labels)} labels")
    if isinstance(enc, PQCodebooks):
        index = CodeIndex.from_codes(pq_encode_many(x, enc), enc.shape, labels=labels)
    else:
        index = encode_database(x, enc, labels=labels)
    save_index(args.out, index)
    _write_manifest(args.out, args, [args.inp, args.model, args.labels], {"records": index.count})


def cmd_search(args):
    _require(args.inp, args.model, args.index)
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    enc = _load_encoder(args.model)
    index = load_index(args.index)
    if index.count == 0:
        raise FormatError(f"{args.index}: index is empty")
    if enc.shape != index.shape:
        raise FormatError(f"model shape {enc.shape} does not match index shape {index.shape}")
    queries = load_features(args.inp)
    codes = index.codes()
    results = []
    for qid, x in enumerate(queries):
        if isinstance(enc, PQCodebooks):
            scores = adc_scores(x, codes, enc)
        else:
            scores = score_codes(QueryEmbedding(embed(x, enc), enc.shape), codes)
        results.append((qid, rank(scores, index.ids, args.top_k)))
    write_results(args.out, results)
    _write_manifest(args.out, args, [args.inp, args.model, args.index], {"queries": len(queries)})


def cmd_eval_map(args):
    _require(args.inp, args.labels, args.index)
    results = read_results(args.inp)
    qlabels, _ = load_labels(args.labels)
    index = load_index(args.index)
    if index.labels is None:
        raise FormatError(f"{args.index}: index carries no labels")
    per_query, skipped = {}, []
    for qid in sorted(results):
        if qid >= len(qlabels):
            raise FormatError(f"query {qid} has no label in {args.labels}")
        relevant = index.ids[index.labels == qlabels[qid]]
        if len(relevant) == 0:
            skipped.append(qid)
            continue
        per_query[qid] = average_precision(results[qid], relevant)
    if not per_query:
        raise FormatError("no query has a relevant database record")
    mean_ap = float(np.mean(list(per_query.values())))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "ap"])
        for qid, ap in per_query.items():
            w.writerow([qid, repr(ap)])
    summary = {"mAP": mean_ap, "queries": len(per_query), "skipped": skipped}
    _write_manifest(args.out, args, [args.inp, args.labels, args.index], summary)
    print(json.dumps(summary))


def cmd_classify(args):
    _require(args.index, args.model, args.labels)
    params = load_model(args.model)
    index = load_index(args.index)
    if params.shape != index.shape:
        raise FormatError(f"model shape {params.shape} does not match index shape {index.shape}")
    scores = classify_codes(index.codes(), index.shape, params.W1, params.bias1)
    pred = np.argmax(scores, axis=1)
    truth = load_labels(args.labels)[0] if args.labels else index.labels
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "predicted"] + (["label"] if truth is not None else []))
        for i, rid in enumerate(index.ids):
            w.writerow([int(rid), int(pred[i])] + ([int(truth[i])] if truth is not None else []))
    summary = {"records": index.count}
    if truth is not None:
        summary["accuracy"] = float(np.mean(pred == truth)) if len(pred) else None
    _write_manifest(args.out, args, [args.index, args.model, args.labels], summary)
    print(json.dumps(summary))


def cmd_pq_train(args):
    _require(args.inp)
    shape = _shape(args)
    if args.iterations < 1:
        raise UsageError("--iterations must be >= 1")
    x = load_features(args.inp)
    if x.shape[1] % shape.M:
        raise UsageError(f"feature dimension {x.shape[1]} is not divisible by --m {shape.M}")
    cb = pq_train(x, shape, args.iterations, args.seed)
    save_codebooks(args.out, cb)
    _write_manifest(args.out, args, [args.inp], {"d": cb.d})


def cmd_pq_encode(args):
    _require(args.inp, args.model, args.labels)
    cb = load_codebooks(args.model)
    x = load_features(args.inp)
    labels = load_labels(args.labels)[0] if args.labels else None
    index = CodeIndex.from_codes(pq_encode_many(x, cb), cb.shape, labels=labels)
    save_index(args.out, index)
    _write_manifest(args.out, args, [args.inp, args.model, args.labels], {"records": index.count})


def cmd_diagnostics(args):
    _require(args.inp, args.model)
    params = load_model(args.model)
    if not 0 <= args.block < params.shape.M:
        raise UsageError(f"--block must be in [0, {params.shape.M})")
    x = load_features(args.inp)
    if len(x) == 0:
        raise FormatError(f"{args.inp}: no feature rows")
    report = structure_report(x, params, args.block)
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(args.out, args, [args.inp, args.model])
    print(json.dumps({k: report[k] for k in ("top_coordinate", "support_entropy_bits", "used_support")}))


def cmd_bench(args):
    shape = _shape(args)
    report = complexity_report(shape, n_records=args.records, seed=args.seed)
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(args.out, args, [])
    print(json.dumps(report))


def _floats(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three fractions train,db,query")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="subic", description="Supervised structured binary codes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, func, help):
        s = sub.add_parser(name, help=help)
        s.set_defaults(func=func)
        return s

    def shape_flags(s, m=4, k=16):
        s.add_argument("--m", type=int, default=m, help="number of blocks M")
        s.add_argument("--k", type=int, default=k, help="block size K")

    s = cmd("gen-data", cmd_gen_data, "generate a synthetic Gaussian-cluster dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=6200)
    s.add_argument("--d", type=int, default=32)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--spread", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=1.25)
    s.add_argument("--split", type=_floats, default=None, help="train,db,query fractions")
    s.add_argument("--seed", type=int, default=0)

    s = cmd("train", cmd_train, "train the encoder and classifier")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True, help="model checkpoint path")
    s.add_argument("--log", default=None, help="training log CSV (default <out>.log.csv)")
    shape_flags(s)
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--mu", type=float, default=1.0)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--batch-size", type=int, default=200)
    s.add_argument("--num-batches", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)

    s = cmd("encode", cmd_encode, "binary codes of features as a CSV of block indices")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)

    s = cmd("embed", cmd_embed, "real-valued query embeddings as CSV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)

    s = cmd("index", cmd_index, "encode a database into a packed index file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--model", required=True, help="model checkpoint or PQ codebooks")
    s.add_argument("--labels", default=None)
    s.add_argument("--out", required=True)

    s = cmd("search", cmd_search, "rank an index for each query")
    s.add_argument("--in", dest="inp", required=True, help="query features")
    s.add_argument("--model", required=True, help="model checkpoint or PQ codebooks")
    s.add_argument("--index", required=True)
    s.add_argument("--top-k", type=int, default=1000)
    s.add_argument("--out", required=True)

    s = cmd("eval-map", cmd_eval_map, "per-query AP and mAP of search results")
    s.add_argument("--in", dest="inp", required=True, help="search results CSV")
    s.add_argument("--labels", required=True, help="query labels")
    s.add_argument("--index", required=True, help="labelled database index")
    s.add_argument("--out", required=True)

    s = cmd("classify", cmd_classify, "classify indexed codes with the model's classifier layer")
    s.add_argument("--index", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--labels", default=None, help="ground truth (default: index labels)")
    s.add_argument("--out", required=True)

    s = cmd("pq-train", cmd_pq_train, "train product-quantization codebooks")
    s.add_argument("--in", dest="inp", required=True)
    shape_flags(s)
    s.add_argument("--iterations", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = cmd("pq-encode", cmd_pq_encode, "PQ-encode a database into a packed index file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--model", required=True, help="PQ codebooks")
    s.add_argument("--labels", default=None)
    s.add_argument("--out", required=True)

    s = cmd("diagnostics", cmd_diagnostics, "one-hot closeness and support histogram of one block")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--block", type=int, default=0)
    s.add_argument("--out", required=True)

    s = cmd("bench", cmd_bench, "scoring cost versus Hamming distance at equal bit-rate")
    shape_flags(s, 8, 256)
    s.add_argument("--records", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
