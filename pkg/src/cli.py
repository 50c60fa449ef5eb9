#!/usr/bin/env python3
"""
rbfsnt command line.

    rbfsnt train | eval | attack | detect | retrieve | export-maps | export-embeddings [flags]

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
Errors are reported on stderr as one line:
    error=<kind> exit=<code> reason=<message>
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, get_args

import numpy as np
import pandas as pd
from pydantic import ValidationError

from adversarial import AttackConfig, attack_batch, summarize_attacks, write_attack_csv
from checkpoint import checkpoint_load
from datasets import Dataset, load_idx, make_blobs
from errors import EXIT_DATA, EXIT_OK, ConfigError, DataError, RbfsntError, TrainingDiverged, UsageError
from explain_detect import TauPolicy, detection_pipeline, guided_backprop, write_pgm, write_roc_csv, write_scores_csv
from model import Classifier, ModelConfig
from rbf_head import KernelConfig, KernelKind, rbf_forward, similarity_query
from settings import (
    APP_NAME,
    DEEPFOOL_MAX_ITER,
    DEEPFOOL_OVERSHOOT,
    DEFAULT_BATCH_SIZE,
    DEFAULT_LAMBDA,
    DEFAULT_TAU_PERCENTILE,
    DEFAULT_TRACE_SAMPLES,
    DEFAULT_WARMUP_SAMPLES,
    ENTROPY_PATCH,
    VERSION,
    configure_logging,
    load_config_file,
    merge_options,
    resolve_seed,
)
from trainer import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

# ============================================================================
# OPTIONS
# ============================================================================

COMMON_DEFAULTS: Dict[str, Any] = {
    "seed": None,
    "precision": "float32",
    "threads": 1,
    "limit": None,
    "blobs": False,
    "blobs_per_class": 50,
    "blobs_classes": 3,
    "blobs_dim": 2,
    "blobs_spread": 0.02,
    "log_level": None,
}

DATA_DEFAULTS = {"images": None, "labels": None, "checkpoint": "model.rbfsnt"}

ATTACK_DEFAULTS = {
    "attack": "fgsm",
    "epsilon": 0.25,
    "step": 1.0,
    "max_iter": DEEPFOOL_MAX_ITER,
    "overshoot": DEEPFOOL_OVERSHOOT,
}

VERB_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "train": {
        "train_images": None, "train_labels": None, "test_images": None, "test_labels": None,
        "arch": "mnist_cnn", "head": "rbf", "clusters": 10, "embedding_dim": 64, "hidden": 64,
        "kernel": "quadratic", "sigma": 1.0, "metric": "full", "per_cluster_sigma": False,
        "plain_unsup": False, "dropout": 0.0,
        "epochs": 5, "batch_size": DEFAULT_BATCH_SIZE, "lr": 0.05, "weight_decay": 0.0,
        "lam": DEFAULT_LAMBDA, "optimizer": "sgd_decoupled_wd", "warmup_samples": DEFAULT_WARMUP_SAMPLES,
        "closed_form_init": False, "no_timing": False,
        "checkpoint": "model.rbfsnt", "report": None,
        "trace_cluster": None, "trace_samples": DEFAULT_TRACE_SAMPLES, "center_trace_out": None,
    },
    "eval": {**DATA_DEFAULTS, "confusion_out": None},
    "attack": {**DATA_DEFAULTS, **ATTACK_DEFAULTS, "out": "attacks.csv"},
    "detect": {
        **DATA_DEFAULTS, **ATTACK_DEFAULTS,
        "tau": None, "tau_percentile": DEFAULT_TAU_PERCENTILE, "strategy": "intensity",
        "only_successful": False, "scores_out": "scores.csv", "roc_out": "roc.csv",
    },
    "retrieve": {
        "checkpoint": "model.rbfsnt", "corpus_images": None, "corpus_labels": None,
        "query_images": None, "query_labels": None, "query_index": None, "top_n": 5, "out": "retrieval.csv",
    },
    "export-maps": {**DATA_DEFAULTS, "out_dir": "maps", "count": 10, "strategy": "intensity"},
    "export-embeddings": {**DATA_DEFAULTS, "out": "embeddings.csv", "centers_out": None},
}


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--seed", type=int, help="run seed (falls back to config, then RBFSNT_SEED, then 0)")
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--threads", type=int, help="worker threads for per-image work (default 1)")
    p.add_argument("--limit", type=int, help="use only the first N samples")
    p.add_argument("--log-level", help="DEBUG, INFO, WARNING, ...")
    p.add_argument("--blobs", action="store_true", default=None, help="use synthetic Gaussian blobs")
    p.add_argument("--blobs-per-class", type=int)
    p.add_argument("--blobs-classes", type=int)
    p.add_argument("--blobs-dim", type=int)
    p.add_argument("--blobs-spread", type=float)


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--images", help="IDX image file (.gz allowed)")
    p.add_argument("--labels", help="IDX label file (.gz allowed)")


def _add_attack(p: argparse.ArgumentParser) -> None:
    p.add_argument("--attack", choices=["fgsm", "gradient", "deepfool"])
    p.add_argument("--epsilon", type=float, help="FGSM max-norm budget")
    p.add_argument("--step", type=float, help="gradient attack L2 step")
    p.add_argument("--max-iter", type=int, help="DeepFool iterations")
    p.add_argument("--overshoot", type=float, help="DeepFool overshoot")


def build_parser() -> CliParser:
    parser = CliParser(prog=APP_NAME, description="RBF classifier heads, attacks and entropy-based attack detection")
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    for name in ("train-images", "train-labels", "test-images", "test-labels"):
        p.add_argument(f"--{name}")
    p.add_argument("--arch", choices=["mnist_cnn", "mlp"])
    p.add_argument("--head", choices=["rbf", "fc"])
    p.add_argument("--clusters", type=int)
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--kernel", choices=list(get_args(KernelKind)))
    p.add_argument("--sigma", type=float)
    p.add_argument("--metric", choices=["euclidean", "diagonal", "full"])
    p.add_argument("--per-cluster-sigma", action="store_true", default=None)
    p.add_argument("--plain-unsup", action="store_true", default=None)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lam", type=float, help="weight of the nearest-center loss")
    p.add_argument("--optimizer", choices=["sgd", "sgd_decoupled_wd"])
    p.add_argument("--warmup-samples", type=int)
    p.add_argument("--closed-form-init", action="store_true", default=None)
    p.add_argument("--no-timing", action="store_true", default=None, help="write 0 in the seconds column")
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.add_argument("--report", help="per-epoch CSV report path")
    p.add_argument("--trace-cluster", type=int, help="record per-epoch distances to this cluster center")
    p.add_argument("--trace-samples", type=int, help="training samples traced (default 20)")
    p.add_argument("--center-trace-out", help="CSV path for the center-distance trace")

    p = sub.add_parser("eval", help="accuracy, loss and confusion counts")
    _add_common(p)
    _add_data(p)
    p.add_argument("--confusion-out")

    p = sub.add_parser("attack", help="run an attack and write per-sample results")
    _add_common(p)
    _add_data(p)
    _add_attack(p)
    p.add_argument("--out")

    p = sub.add_parser("detect", help="attack, score by average local entropy, report ROC")
    _add_common(p)
    _add_data(p)
    _add_attack(p)
    p.add_argument("--tau", type=float, help="fixed threshold (default: percentile of clean scores)")
    p.add_argument("--tau-percentile", type=float)
    p.add_argument("--strategy", choices=["intensity", "cooccurrence"])
    p.add_argument("--only-successful", action="store_true", default=None)
    p.add_argument("--scores-out")
    p.add_argument("--roc-out")

    p = sub.add_parser("retrieve", help="most similar / dissimilar corpus items under the learned metric")
    _add_common(p)
    p.add_argument("--checkpoint")
    for name in ("corpus-images", "corpus-labels", "query-images", "query-labels"):
        p.add_argument(f"--{name}")
    p.add_argument("--query-index", type=int, help="retrieve for one query sample only")
    p.add_argument("--top-n", type=int)
    p.add_argument("--out")

    p = sub.add_parser("export-maps", help="grayscale and entropy maps as PGM files")
    _add_common(p)
    _add_data(p)
    p.add_argument("--out-dir")
    p.add_argument("--count", type=int)
    p.add_argument("--strategy", choices=["intensity", "cooccurrence"])

    p = sub.add_parser("export-embeddings", help="RBF-input embeddings with cluster assignments as CSV")
    _add_common(p)
    _add_data(p)
    p.add_argument("--out")
    p.add_argument("--centers-out")
    return parser


def resolve_options(args: argparse.Namespace) -> Dict[str, Any]:
    defaults = {**COMMON_DEFAULTS, **VERB_DEFAULTS[args.command]}
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    file_values = load_config_file(args.config, args.command, known=defaults)
    options = merge_options(flags, file_values, defaults)
    options["seed"] = resolve_seed(flags.get("seed"), file_values.get("seed"))
    return options


# ============================================================================
# DATA
# ============================================================================

def _blobs(opts: Dict[str, Any]) -> Tuple[Dataset, Dataset]:
    """Train/test halves of one blob draw, so both splits share class centers."""
    ds = make_blobs(2 * opts["blobs_per_class"], opts["blobs_classes"], opts["blobs_dim"],
                    opts["blobs_spread"], np.random.default_rng(opts["seed"]))
    train_set = Dataset(ds.images[0::2], ds.labels[0::2], ds.num_classes, "train")
    test_set = Dataset(ds.images[1::2], ds.labels[1::2], ds.num_classes, "test")
    return train_set, test_set


def _idx(opts: Dict[str, Any], images_key: str, labels_key: str, split: str) -> Dataset:
    if not opts.get(images_key) or not opts.get(labels_key):
        raise UsageError(f"--{images_key.replace('_', '-')} and --{labels_key.replace('_', '-')} are required (or use --blobs)")
    return load_idx(opts[images_key], opts[labels_key], split)


def load_split(opts: Dict[str, Any], images_key: str = "images", labels_key: str = "labels",
               split: str = "test") -> Dataset:
    if opts["blobs"]:
        train_set, test_set = _blobs(opts)
        dataset = train_set if split == "train" else test_set
    else:
        dataset = _idx(opts, images_key, labels_key, split)
    return dataset.subset(opts["limit"])


def _load_model(opts: Dict[str, Any]) -> Classifier:
    path = Path(opts["checkpoint"])
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return checkpoint_load(path)


def _check_compatible(model: Classifier, dataset: Dataset) -> None:
    if dataset.sample_shape != tuple(model.config.input_shape):
        raise DataError(f"data shape {dataset.sample_shape} does not match model input {tuple(model.config.input_shape)}")


# ============================================================================
# EXPORT HELPERS
# ============================================================================

def export_embeddings(model: Classifier, dataset: Dataset, path, centers_path=None) -> pd.DataFrame:
    """CSV of sample_id, label, nearest cluster, squared metric distance to it, e0..e{D-1}."""
    dim = model.backbone.output_shape[0]
    columns = ["sample_id", "label", "cluster", "distance"] + [f"e{i}" for i in range(dim)]
    embeddings = model.embed(dataset.images).astype(np.float64)
    if model.head is not None and len(dataset):
        r2 = rbf_forward(model.head, embeddings).r2.astype(np.float64)
        cluster = np.argmin(r2, axis=1)
        distance = r2[np.arange(len(dataset)), cluster]
    else:
        cluster = np.full(len(dataset), -1)
        distance = np.full(len(dataset), np.nan)

    frame = pd.DataFrame(embeddings, columns=columns[4:])
    frame.insert(0, "distance", distance)
    frame.insert(0, "cluster", cluster)
    frame.insert(0, "label", dataset.labels)
    frame.insert(0, "sample_id", np.arange(len(dataset)))
    frame = frame[columns]
    frame.to_csv(path, index=False)

    if centers_path is not None:
        if model.head is None:
            raise UsageError("--centers-out needs a model with an RBF head")
        centers = model.head.centers.data.astype(np.float64)
        cframe = pd.DataFrame(centers, columns=[f"c{i}" for i in range(centers.shape[1])])
        cframe.insert(0, "cluster", np.arange(centers.shape[0]))
        cframe.to_csv(centers_path, index=False)
    return frame


def load_centers_csv(path) -> np.ndarray:
    """Centers written by export_embeddings, ordered by cluster id."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read centers from {path}: {e}")
    if "cluster" not in frame.columns:
        raise DataError(f"{path} has no cluster column")
    frame = frame.sort_values("cluster")
    return frame[[c for c in frame.columns if c != "cluster"]].to_numpy(dtype=np.float64)


# ============================================================================
# COMMANDS
# ============================================================================

def _write_train_outputs(report, opts: Dict[str, Any]) -> None:
    if report is None:
        return
    if opts["report"]:
        report.write_csv(opts["report"])
    if opts["center_trace_out"]:
        report.write_trace_csv(opts["center_trace_out"])


def cmd_train(opts: Dict[str, Any]) -> None:
    if opts["blobs"]:
        train_set, test_set = _blobs(opts)
    else:
        train_set = _idx(opts, "train_images", "train_labels", "train")
        test_set = None
        if opts["test_images"] or opts["test_labels"]:
            test_set = _idx(opts, "test_images", "test_labels", "test")
    train_set = train_set.subset(opts["limit"])
    if test_set is not None:
        test_set = test_set.subset(opts["limit"])

    model_config = ModelConfig(
        arch=opts["arch"],
        head=opts["head"],
        input_shape=train_set.sample_shape,
        num_classes=train_set.num_classes,
        clusters=opts["clusters"],
        embedding_dim=opts["embedding_dim"],
        hidden=opts["hidden"],
        kernel=KernelConfig(kind=opts["kernel"], sigma=opts["sigma"]),
        metric_mode=opts["metric"],
        per_cluster_sigma=opts["per_cluster_sigma"],
        plain_unsup=opts["plain_unsup"],
        dropout=opts["dropout"],
        precision=opts["precision"],
    )
    train_config = TrainConfig(
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        learning_rate=opts["lr"],
        weight_decay=opts["weight_decay"],
        lam=opts["lam"],
        optimizer=opts["optimizer"],
        seed=opts["seed"],
        precision=opts["precision"],
        warmup_samples=opts["warmup_samples"],
        closed_form_init=opts["closed_form_init"],
        threads=opts["threads"],
        report_timing=not opts["no_timing"],
        trace_cluster=opts["trace_cluster"],
        trace_samples=opts["trace_samples"],
    )
    if opts["center_trace_out"] and opts["trace_cluster"] is None:
        raise UsageError("--center-trace-out needs --trace-cluster")
    model = Classifier.build(model_config, np.random.default_rng(opts["seed"]))
    try:
        result = train(model, train_set, train_config, test_set, checkpoint_path=opts["checkpoint"])
    except TrainingDiverged as e:
        # keep the epochs that did finish
        _write_train_outputs(e.report, opts)
        raise
    _write_train_outputs(result.report, opts)
    print(f"✅ Trained {len(result.report.records)} epochs; best accuracy {result.best_test_acc:.4f} "
          f"at epoch {result.best_epoch}; checkpoint {opts['checkpoint']}")


def cmd_eval(opts: Dict[str, Any]) -> None:
    model = _load_model(opts)
    dataset = load_split(opts)
    _check_compatible(model, dataset)
    result = evaluate(model, dataset, threads=opts["threads"])
    if opts["confusion_out"]:
        frame = pd.DataFrame(result.confusion, columns=[f"pred_{k}" for k in range(model.num_classes)])
        frame.insert(0, "true", np.arange(model.num_classes))
        frame.to_csv(opts["confusion_out"], index=False)
    print(f"📊 accuracy {result.accuracy:.4f}  mean loss {result.mean_loss:.4f}  samples {result.total}")


def _attack_config(opts: Dict[str, Any]) -> AttackConfig:
    return AttackConfig(attack=opts["attack"], epsilon=opts["epsilon"], step=opts["step"],
                        max_iter=opts["max_iter"], overshoot=opts["overshoot"])


def cmd_attack(opts: Dict[str, Any]) -> None:
    model = _load_model(opts)
    dataset = load_split(opts)
    _check_compatible(model, dataset)
    results, _ = attack_batch(model, dataset.images, dataset.labels, _attack_config(opts), threads=opts["threads"])
    write_attack_csv(results, opts["out"])
    summary = summarize_attacks(results)
    print(f"⚔️ {opts['attack']}: success rate {summary['success_rate']:.4f} over {summary['count']} samples "
          f"(gt conf {summary['mean_gt_conf_before']:.3f} -> {summary['mean_gt_conf_after']:.3f})")


def cmd_detect(opts: Dict[str, Any]) -> None:
    model = _load_model(opts)
    dataset = load_split(opts)
    _check_compatible(model, dataset)
    if opts["tau"] is not None:
        policy = TauPolicy(kind="fixed", value=opts["tau"])
    else:
        policy = TauPolicy(kind="percentile", percentile=opts["tau_percentile"])
    report = detection_pipeline(
        model, dataset.images, dataset.labels, _attack_config(opts), policy,
        threads=opts["threads"], only_successful=opts["only_successful"], strategy=opts["strategy"],
    )
    write_scores_csv(report, opts["scores_out"])
    write_roc_csv(report.roc, opts["roc_out"])
    summary = report.summary()
    print(f"🔍 detection: AUC {summary['auc']:.4f}  tau {summary['tau']:.4f}  "
          f"recall {summary['recall']:.3f}  precision {summary['precision']:.3f}  "
          f"Welch p {summary['welch_p']:.3g}  failed {summary['failed']}")


def cmd_retrieve(opts: Dict[str, Any]) -> None:
    model = _load_model(opts)
    if model.head is None:
        raise UsageError("retrieval needs a model with an RBF head")
    if opts["blobs"]:
        corpus, queries = _blobs(opts)
    else:
        corpus = _idx(opts, "corpus_images", "corpus_labels", "train")
        queries = _idx(opts, "query_images", "query_labels", "test")
    corpus, queries = corpus.subset(opts["limit"]), queries.subset(opts["limit"])
    _check_compatible(model, corpus)
    _check_compatible(model, queries)
    if len(corpus) == 0:
        raise DataError("retrieval corpus is empty")

    query_ids = range(len(queries)) if opts["query_index"] is None else [opts["query_index"]]
    if opts["query_index"] is not None and not 0 <= opts["query_index"] < len(queries):
        raise UsageError(f"--query-index must be in [0, {len(queries)})")
    corpus_emb = model.embed(corpus.images)
    rows = []
    for q in query_ids:
        query_emb = model.embed(queries.images[q:q + 1])[0]
        result = similarity_query(model.head, query_emb, corpus_emb, min(opts["top_n"], len(corpus)))
        for kind, ranked in (("similar", result.similar), ("dissimilar", result.dissimilar)):
            for rank, (idx, dist) in enumerate(ranked, start=1):
                rows.append({"query_id": q, "query_label": int(queries.labels[q]), "kind": kind, "rank": rank,
                             "corpus_id": idx, "corpus_label": int(corpus.labels[idx]), "distance_sq": dist})
    pd.DataFrame(rows, columns=["query_id", "query_label", "kind", "rank", "corpus_id", "corpus_label",
                                "distance_sq"]).to_csv(opts["out"], index=False)
    print(f"🔎 retrieved top {opts['top_n']} for {len(query_ids)} queries -> {opts['out']}")


def cmd_export_maps(opts: Dict[str, Any]) -> None:
    model = _load_model(opts)
    dataset = load_split(opts)
    _check_compatible(model, dataset)
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    entropy_scale = float(np.log2(ENTROPY_PATCH * ENTROPY_PATCH))
    rows = []
    for i in range(min(opts["count"], len(dataset))):
        frm = guided_backprop(model, dataset.images[i], strategy=opts["strategy"])
        write_pgm(frm.grayscale, out_dir / f"sample_{i}_gray.pgm")
        write_pgm(frm.entropy_map, out_dir / f"sample_{i}_entropy.pgm", scale=entropy_scale)
        rows.append({"sample_id": i, "label": int(dataset.labels[i]), "average_entropy": frm.average_entropy})
    pd.DataFrame(rows, columns=["sample_id", "label", "average_entropy"]).to_csv(out_dir / "maps.csv", index=False)
    print(f"🖼️ wrote {len(rows)} feature-response maps to {out_dir}")


def cmd_export_embeddings(opts: Dict[str, Any]) -> None:
    model = _load_model(opts)
    dataset = load_split(opts)
    _check_compatible(model, dataset)
    export_embeddings(model, dataset, opts["out"], opts["centers_out"])
    print(f"📤 exported {len(dataset)} embeddings -> {opts['out']}")


COMMANDS: Dict[str, Callable[[Dict[str, Any]], None]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "retrieve": cmd_retrieve,
    "export-maps": cmd_export_maps,
    "export-embeddings": cmd_export_embeddings,
}


# ============================================================================
# ENTRY POINT
# ============================================================================

def report_error(kind: str, code: int, message: str) -> None:
    reason = " ".join(str(message).split())
    print(f"error={kind} exit={code} reason={reason}", file=sys.stderr)


def run_cli(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        opts = resolve_options(args)
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    except RbfsntError as e:
        report_error(e.kind, e.exit_code, e)
        return e.exit_code

    configure_logging(opts["log_level"])
    try:
        COMMANDS[args.command](opts)
    except ValidationError as e:
        error = ConfigError(str(e))
        report_error(error.kind, error.exit_code, e)
        return error.exit_code
    except RbfsntError as e:
        report_error(e.kind, e.exit_code, e)
        return e.exit_code
    except OSError as e:
        report_error("io_error", EXIT_DATA, e)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
