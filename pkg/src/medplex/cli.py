"""Command line entry point.

Subcommands: synth, cluster, graph, train, eval, explain, infer, sweep.
Stages talk to each other through files; every run writes a manifest with
sha256 digests of what it read and wrote. Logs go to stderr, data to files.

Exit codes: 0 ok, 1 usage, 2 bad data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from .errors import DataError, NumericError, UsageError
from . import __version__
from . import data as D
from . import evaluate as E
from . import pipeline
from .clustering import ClusterPartition, kmeans_columns, load_manual_split, save_partition
from .data import Normalizer, SynthConfig
from .graph import pairwise_class_similarity, write_multiplex
from .model import load_checkpoint, save_checkpoint
from .train import PRESETS, TrainingConfig, preset_config

log = logging.getLogger("medplex")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage -> 1
        raise UsageError(message)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError("missing file: %s" % path) from None
    except json.JSONDecodeError as exc:
        raise DataError("%s: not valid JSON (%s)" % (path, exc)) from None


def _write_manifest(path, command: str, inputs: list, outputs: list,
                    wall_s: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "wall_time_s": round(wall_s, 3),
        "inputs": {p: _sha256_file(p) for p in inputs},
        "outputs": {p: _sha256_file(p) for p in outputs},
    }
    if extra:
        manifest["extra"] = extra
    _write_json(path, manifest)


def _cohort_paths(data_dir: str) -> dict:
    return {
        "features": os.path.join(data_dir, "features.csv"),
        "embeddings": os.path.join(data_dir, "embeddings.csv"),
        "labels": os.path.join(data_dir, "labels.csv"),
    }


def _load_cohort(data_dir: str, need_labels: bool = True):
    """Read features.csv (+ optional embeddings.csv, labels.csv) from a dir.

    Row ids must agree across files, same order. Returns
    (table, embeddings, labels_or_None, list_of_input_paths).
    """
    paths = _cohort_paths(data_dir)
    if not os.path.exists(paths["features"]):
        raise DataError("no features.csv under %s" % data_dir)
    inputs = [paths["features"]]
    table = D.load_feature_csv(paths["features"])
    if os.path.exists(paths["embeddings"]):
        embeddings = D.load_embedding_csv(paths["embeddings"])
        if embeddings.row_ids != table.row_ids:
            raise DataError("embeddings.csv row ids do not match features.csv")
        inputs.append(paths["embeddings"])
    else:
        embeddings = D.empty_embeddings(table.row_ids)
    labels = None
    if need_labels:
        if not os.path.exists(paths["labels"]):
            raise DataError("no labels.csv under %s" % data_dir)
        labels, label_ids = D.load_label_csv(paths["labels"])
        if label_ids != table.row_ids:
            raise DataError("labels.csv row ids do not match features.csv")
        inputs.append(paths["labels"])
    return table, embeddings, labels, inputs


def _resolve_config(args) -> TrainingConfig:
    if getattr(args, "preset", None) and getattr(args, "config", None):
        raise UsageError("give either --preset or --config, not both")
    if getattr(args, "preset", None):
        cfg = preset_config(args.preset)
    elif getattr(args, "config", None):
        cfg = TrainingConfig.from_json_dict(_read_json(args.config))
    else:
        cfg = TrainingConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "thetas", None):
        overrides["thetas"] = tuple(_parse_floats(args.thetas, "--thetas"))
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        d = cfg.to_json_dict()
        d.update(overrides)
        cfg = TrainingConfig.from_json_dict(d)
    return cfg


def _parse_floats(text: str, flag: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError("%s expects comma-separated numbers, got %r" % (flag, text)) from None


def _parse_ints(text: str, flag: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError("%s expects comma-separated integers, got %r" % (flag, text)) from None


def _load_run(run_dir: str):
    """Read a train run directory back: config, partition map, normalizers, model."""
    cfg = TrainingConfig.from_json_dict(_read_json(os.path.join(run_dir, "resolved_config.json")))
    state, header = load_checkpoint(os.path.join(run_dir, "checkpoint.bin"))
    norms = _read_json(os.path.join(run_dir, "normalizers.json"))
    feat_norm = Normalizer.from_dict(norms["features"])
    emb_norm = Normalizer.from_dict(norms["embeddings"]) if norms.get("embeddings") else None
    partition_path = os.path.join(run_dir, "partition.json")
    if not os.path.exists(partition_path):
        raise DataError("missing file: %s" % partition_path)
    return cfg, state, header, feat_norm, emb_norm, partition_path


def _rebuild_graph(run_dir: str, data_dir: str):
    """Reassemble the training-time multiplex graph from a run + data dir."""
    from .graph import build_multiplex

    cfg, state, header, feat_norm, emb_norm, partition_path = _load_run(run_dir)
    table, embeddings, labels, inputs = _load_cohort(data_dir)
    partition = load_manual_split(partition_path, table)
    c_norm, _ = D.normalize_columns(table, feat_norm)
    if embeddings.n_cols > 0:
        if emb_norm is None:
            raise DataError("run has no embedding transform but data has embeddings")
        z_norm, _ = D.normalize_embeddings(embeddings, emb_norm)
    else:
        z_norm = embeddings
    graph = build_multiplex(
        c_norm, partition, cfg.thetas, z_norm,
        feat_normalizer=feat_norm, embed_normalizer=emb_norm,
        weighted_full=cfg.weighted_full,
    )
    if graph.n_nodes != state.dims.n_nodes:
        raise DataError(
            "data dir has %d rows, checkpoint was trained on %d"
            % (graph.n_nodes, state.dims.n_nodes)
        )
    inputs += [os.path.join(run_dir, "resolved_config.json"),
               os.path.join(run_dir, "checkpoint.bin"),
               os.path.join(run_dir, "normalizers.json"),
               partition_path]
    return cfg, state, graph, labels, table, inputs


def _cmd_synth(args) -> int:
    started = time.time()
    if args.config:
        scfg = SynthConfig.from_dict(_read_json(args.config))
        inputs = [args.config]
    else:
        scfg = SynthConfig()
        inputs = []
    if args.seed is not None:
        d = scfg.to_dict()
        d["seed"] = args.seed
        scfg = SynthConfig.from_dict(d)
    table, embeddings, labels, truth = D.generate_synthetic_cohort(scfg)
    os.makedirs(args.out, exist_ok=True)
    paths = _cohort_paths(args.out)
    D.write_feature_csv(paths["features"], table)
    outputs = [paths["features"]]
    if embeddings.n_cols > 0:
        D.write_embedding_csv(paths["embeddings"], embeddings)
        outputs.append(paths["embeddings"])
    D.write_label_csv(paths["labels"], labels, table.row_ids)
    outputs.append(paths["labels"])
    truth_path = os.path.join(args.out, "truth_types.json")
    D.write_truth_json(truth_path, truth)
    outputs.append(truth_path)
    log.info("synthetic cohort: %d rows, %d feature cols, %d classes",
             table.n_rows, table.n_cols, labels.n_classes)
    _write_manifest(os.path.join(args.out, "manifest.json"), "synth", inputs, outputs,
                    time.time() - started, extra={"synth_config": scfg.to_dict()})
    return 0


def _cmd_cluster(args) -> int:
    started = time.time()
    table, _, _, inputs = _load_cohort(args.data, need_labels=False)
    if args.manual:
        partition = load_manual_split(args.manual, table)
        inputs.append(args.manual)
        log.info("manual partition: %d types over %d columns", partition.n_types, table.n_cols)
    else:
        if args.k is None:
            raise UsageError("either --k or --manual is required")
        c_norm, _ = D.normalize_columns(table)
        partition = kmeans_columns(
            c_norm, args.k, restarts=args.restarts, max_iters=args.max_iters, seed=args.seed or 0
        )
        log.info("k-means partition: k=%d wcss=%.6f", args.k, partition.wcss)
    save_partition(args.out, partition)
    _write_manifest(args.out + ".manifest.json", "cluster", inputs, [args.out],
                    time.time() - started)
    return 0


def _cmd_graph(args) -> int:
    started = time.time()
    cfg = _resolve_config(args)
    table, embeddings, _, inputs = _load_cohort(args.data, need_labels=False)
    partition = None
    if args.partition:
        partition = load_manual_split(args.partition, table)
        inputs.append(args.partition)
    graph = pipeline.build_graph_for(table, embeddings, cfg, partition)
    os.makedirs(args.out, exist_ok=True)
    manifest = write_multiplex(args.out, graph)
    for rel in manifest["relations"]:
        log.info("relation %d: %d edges, mean degree %.2f, %d isolated",
                 rel["relation"], rel["n_edges"], rel["mean_degree"], rel["isolated_nodes"])
    outputs = [os.path.join(args.out, r["file"]) for r in manifest["relations"]]
    outputs.append(os.path.join(args.out, "multiplex.json"))
    _write_manifest(os.path.join(args.out, "manifest.json"), "graph", inputs, outputs,
                    time.time() - started, extra={"config_hash": cfg.config_hash()})
    return 0


def _cmd_train(args) -> int:
    started = time.time()
    cfg = _resolve_config(args)
    table, embeddings, labels, inputs = _load_cohort(args.data)
    partition = None
    if args.partition:
        partition = load_manual_split(args.partition, table)
        inputs.append(args.partition)
    result = pipeline.run_experiment(
        table, embeddings, labels, cfg,
        partition=partition, labeled_frac=args.labeled_frac,
    )
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    cfg_path = os.path.join(args.out, "resolved_config.json")
    _write_json(cfg_path, cfg.to_json_dict())
    outputs.append(cfg_path)

    part_path = os.path.join(args.out, "partition.json")
    save_partition(part_path, result.partition)
    outputs.append(part_path)

    norm_path = os.path.join(args.out, "normalizers.json")
    _write_json(norm_path, {
        "features": result.graph.feat_normalizer.to_dict(),
        "embeddings": result.graph.embed_normalizer.to_dict()
        if result.graph.embed_normalizer else None,
    })
    outputs.append(norm_path)

    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(ckpt_path, result.state, config_hash=cfg.config_hash())
    outputs.append(ckpt_path)

    report_path = os.path.join(args.out, "train_report.json")
    _write_json(report_path, result.report.to_json_dict())
    outputs.append(report_path)

    metrics_path = os.path.join(args.out, "metrics.json")
    _write_json(metrics_path, {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "split": "test",
        "metrics": result.report.test_metrics,
        "best_epoch": result.report.best_epoch,
        "best_val_micro": result.report.best_val_micro,
        "att_weights": result.report.att_weights,
    })
    outputs.append(metrics_path)

    tm = result.report.test_metrics or {}
    log.info("trained %d epochs (best %d), test micro %.4f macro %.4f",
             result.report.epochs_run, result.report.best_epoch,
             tm.get("micro_f1", float("nan")), tm.get("macro_f1", float("nan")))
    _write_manifest(os.path.join(args.out, "manifest.json"), "train", inputs, outputs,
                    time.time() - started, extra={"config_hash": cfg.config_hash()})
    return 0


def _cmd_eval(args) -> int:
    started = time.time()
    cfg, state, graph, labels, table, inputs = _rebuild_graph(args.run, args.data)
    masked = pipeline.assign_masks(labels, cfg, args.labeled_frac)
    split_code = {"train": D.TRAIN, "val": D.VAL, "test": D.TEST}[args.split]
    idx = masked.rows_with(split_code)
    if idx.size == 0:
        raise DataError("split %r has no rows under this config" % args.split)
    probs = pipeline.transductive_probs(state)
    pred = np.argmax(probs[idx], axis=1)
    report = E.metrics_report(pred, masked.labels[idx], masked.n_classes)
    payload = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "split": args.split,
        "metrics": report.to_json_dict(),
    }
    _write_json(args.out, payload)
    log.info("%s split: micro %.4f macro %.4f over %d rows",
             args.split, report.micro_f1, report.macro_f1, idx.size)
    _write_manifest(args.out + ".manifest.json", "eval", inputs, [args.out],
                    time.time() - started)
    return 0


def _cmd_explain(args) -> int:
    started = time.time()
    cfg, state, graph, labels, table, inputs = _rebuild_graph(args.run, args.data)
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    report = E.attention_report(state, graph.partition)
    att_path = os.path.join(args.out, "attention.json")
    _write_json(att_path, report)
    outputs.append(att_path)

    def _write_matrix(path, matrix):
        with open(path, "w") as fh:
            c = matrix.shape[0]
            fh.write(",".join("class_%d" % k for k in range(c)) + "\n")
            for row in matrix:
                fh.write(",".join("%.17g" % v for v in row) + "\n")
        outputs.append(path)

    sim_all = pairwise_class_similarity(graph.table, labels.labels)
    _write_matrix(os.path.join(args.out, "class_similarity_all.csv"), sim_all)
    for r in range(graph.partition.n_types):
        sim_r = pairwise_class_similarity(
            graph.table, labels.labels, columns=graph.partition.columns_of(r)
        )
        _write_matrix(os.path.join(args.out, "class_similarity_type%d.csv" % r), sim_r)

    top = report["ranking"][0]
    log.info("most informative relation: %d (weight %.4f, uniform %.4f)",
             top, report["weights"][top], report["uniform_weight"])
    _write_manifest(os.path.join(args.out, "manifest.json"), "explain", inputs, outputs,
                    time.time() - started)
    return 0


def _cmd_infer(args) -> int:
    started = time.time()
    cfg, state, graph, labels, table, inputs = _rebuild_graph(args.run, args.data)
    new_table = D.load_feature_csv(args.new_features)
    inputs.append(args.new_features)
    if args.new_embeddings:
        new_emb = D.load_embedding_csv(args.new_embeddings)
        if new_emb.row_ids != new_table.row_ids:
            raise DataError("new embeddings row ids do not match new features")
        inputs.append(args.new_embeddings)
    else:
        new_emb = D.empty_embeddings(new_table.row_ids)
    probs, extended = pipeline.inductive_predict(state, graph, new_table, new_emb)
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions.csv")
    c = probs.shape[1]
    with open(pred_path, "w") as fh:
        fh.write("id,predicted_class," + ",".join("prob_%d" % k for k in range(c)) + "\n")
        for i, rid in enumerate(new_table.row_ids):
            cls = int(np.argmax(probs[i]))
            fh.write("%s,%d,%s\n" % (rid, cls, ",".join("%.17g" % v for v in probs[i])))
    log.info("scored %d new rows against %d training rows",
             new_table.n_rows, graph.n_nodes)
    _write_manifest(os.path.join(args.out, "manifest.json"), "infer", inputs, [pred_path],
                    time.time() - started)
    return 0


def _cmd_sweep(args) -> int:
    started = time.time()
    cfg = _resolve_config(args)
    table, embeddings, labels, inputs = _load_cohort(args.data)
    partition = None
    if args.partition:
        partition = load_manual_split(args.partition, table)
        inputs.append(args.partition)
    values = _parse_floats(args.values, "--values")
    if not values:
        raise UsageError("--values is empty")
    seeds = _parse_ints(args.seeds, "--seeds")
    if not seeds:
        raise UsageError("--seeds is empty")
    rows = E.sweep(args.kind, values, table, embeddings, labels, cfg,
                   seeds=seeds, partition=partition)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    E.write_sweep_csv(csv_path, rows)
    summary_path = os.path.join(args.out, "summary.json")
    _write_json(summary_path, {
        "kind": args.kind,
        "config_hash": cfg.config_hash(),
        "summary": E.summarize_sweep(rows),
    })
    log.info("swept %s over %d values x %d seeds", args.kind, len(values), len(seeds))
    _write_manifest(os.path.join(args.out, "manifest.json"), "sweep", inputs,
                    [csv_path, summary_path], time.time() - started)
    return 0


def _add_config_flags(p, with_thetas: bool = True):
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--preset", help="named preset: %s" % ", ".join(sorted(PRESETS)))
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--epochs", type=int, default=None, help="override the epoch budget")
    if with_thetas:
        p.add_argument("--thetas", help="comma-separated per-relation thresholds")


def build_parser() -> _Parser:
    parser = _Parser(prog="medplex",
                     description="multiplex patient-similarity graph learning")
    parser.add_argument("--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic cohort", parents=[])
    p.add_argument("--out", required=True, help="output cohort directory")
    p.add_argument("--config", help="synthetic cohort config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("cluster", help="partition feature columns into types")
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--k", type=int, default=None, help="number of types")
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--manual", help="manual column->type JSON instead of k-means")
    p.add_argument("--out", required=True, help="partition JSON path")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("graph", help="build and export the multiplex graph")
    p.add_argument("--data", required=True)
    p.add_argument("--partition", help="partition JSON (default: k-means)")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_graph)

    p = sub.add_parser("train", help="train on a cohort")
    p.add_argument("--data", required=True)
    p.add_argument("--partition", help="partition JSON (default: k-means)")
    p.add_argument("--labeled-frac", type=float, default=None,
                   help="keep only this fraction of TRAIN rows labeled")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a trained run on one split")
    p.add_argument("--run", required=True, help="train output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--labeled-frac", type=float, default=None)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("explain", help="attention weights and class similarity maps")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("infer", help="score unseen patients against a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True, help="training cohort directory")
    p.add_argument("--new-features", required=True)
    p.add_argument("--new-embeddings", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("sweep", help="grid of runs over one hyperparameter")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=list(E.SWEEP_KINDS))
    p.add_argument("--values", required=True, help="comma-separated grid values")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--partition", help="partition JSON (default: k-means)")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_sweep)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            stream=sys.stderr,
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 1
    except DataError as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return 2
    except NumericError as exc:
        print("numeric error: %s" % exc, file=sys.stderr)
        return 3


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
