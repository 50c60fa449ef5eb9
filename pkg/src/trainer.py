"""
trainer - mini-batch SGD with decoupled weight decay for CNN-RBF and plain models.

One run: k-means warm start of the RBF centers on backbone embeddings, then
per-epoch shuffled mini-batches, one evaluation per epoch, and the
best-test-accuracy state kept (and checkpointed) at the end.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from checkpoint import checkpoint_save
from datasets import Dataset, require_nonempty
from errors import ConfigError, EmptyDatasetError, NonFiniteGradientError, ShapeError, TrainingDiverged
from model import Classifier
from nn_core import Parameter, softmax_cross_entropy
from rbf_head import fit_output_weights, initialize_from_kmeans, rbf_forward
from settings import DEFAULT_BATCH_SIZE, DEFAULT_LAMBDA, DEFAULT_TRACE_SAMPLES, DEFAULT_WARMUP_SAMPLES

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["epoch", "train_loss", "sup_loss", "unsup_loss", "train_acc", "test_acc", "seconds"]
TRACE_COLUMNS = ["epoch", "sample_id", "label", "cluster", "distance_sq"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(5, ge=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, ge=1)
    learning_rate: float = Field(0.05, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    lam: float = Field(DEFAULT_LAMBDA, ge=0)
    optimizer: Literal["sgd", "sgd_decoupled_wd"] = "sgd_decoupled_wd"
    seed: int = 0
    # None trains in the model's own precision
    precision: Optional[Literal["float32", "float64"]] = None
    warmup_samples: int = Field(DEFAULT_WARMUP_SAMPLES, ge=1)
    kmeans_max_iter: int = Field(100, ge=1)
    closed_form_init: bool = False
    eval_batch_size: int = Field(256, ge=1)
    threads: int = Field(1, ge=1)
    report_timing: bool = True
    trace_cluster: Optional[int] = Field(None, ge=0)
    trace_samples: int = Field(DEFAULT_TRACE_SAMPLES, ge=1)


# ============================================================================
# OPTIMIZER
# ============================================================================

def sgd_step(
    params: Dict[str, Parameter],
    grads: Dict[str, np.ndarray],
    lr: float,
    wd: float = 0.0,
    decayed: Optional[Iterable[str]] = None,
) -> Dict[str, Parameter]:
    """
    p <- p - lr*g - lr*wd*p.

    Decay is applied directly to the parameter, not through the loss, and only
    to names in `decayed` (all parameters when None). Nothing is touched if any
    gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}; step aborted")

    decayed = set(params) if decayed is None else set(decayed)
    for name, param in params.items():
        g = grads.get(name)
        update = np.zeros_like(param.data) if g is None else lr * g
        if wd and name in decayed:
            update = update + lr * wd * param.data
        param.data = (param.data - update).astype(param.data.dtype, copy=False)
    return params


# ============================================================================
# REPORTS
# ============================================================================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    sup_loss: float
    unsup_loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TraceRecord:
    epoch: int
    sample_id: int
    label: int
    cluster: int
    distance_sq: float


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)
    center_trace: List[TraceRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=REPORT_COLUMNS)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.center_trace], columns=TRACE_COLUMNS)

    def write_trace_csv(self, path) -> None:
        self.trace_frame().to_csv(path, index=False)


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray
    total: int


@dataclass
class TrainResult:
    report: TrainReport
    best_state: Dict[str, np.ndarray]
    best_epoch: int
    best_test_acc: float


# ============================================================================
# EVALUATION
# ============================================================================

def _eval_shard(model: Classifier, images: np.ndarray, labels: np.ndarray):
    logits = model.forward(images).logits
    loss, _ = softmax_cross_entropy(logits, labels)
    confusion = np.zeros((model.num_classes, model.num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, np.argmax(logits, axis=1)), 1)
    return loss * len(labels), confusion


def evaluate(model: Classifier, dataset: Dataset, batch_size: int = 256, threads: int = 1) -> EvalResult:
    """Accuracy, mean cross-entropy and confusion counts (rows = true class)."""
    shards = list(require_nonempty(dataset, "evaluation set").batches(batch_size))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _eval_shard(model, *s), shards))
    else:
        results = [_eval_shard(model, *s) for s in shards]

    # reduce in shard order so the sum is independent of thread count
    total_loss = 0.0
    confusion = np.zeros((model.num_classes, model.num_classes), dtype=np.int64)
    for loss, conf in results:
        total_loss += loss
        confusion += conf
    n = len(dataset)
    return EvalResult(float(np.trace(confusion)) / n, total_loss / n, confusion, n)


# ============================================================================
# TRAINING
# ============================================================================

def warm_start(model: Classifier, dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> None:
    """k-means on backbone embeddings of up to warmup_samples training images."""
    if model.head is None:
        return
    n = min(config.warmup_samples, len(dataset))
    idx = np.sort(rng.permutation(len(dataset))[:n])
    embeddings = model.embed(dataset.images[idx], config.eval_batch_size)
    if n < model.head.num_clusters:
        raise EmptyDatasetError(f"warm start needs at least {model.head.num_clusters} samples, got {n}")
    initialize_from_kmeans(model.head, embeddings, rng, config.kmeans_max_iter)
    if config.closed_form_init:
        fit_output_weights(model.head, embeddings, dataset.labels[idx])
        logger.info("Output weights initialized in closed form")


def _check_precision(model: Classifier, config: TrainConfig) -> np.dtype:
    """Training precision must match the model's parameters; datasets are cast to it."""
    dtype = np.dtype(model.dtype)
    if config.precision is not None and np.dtype(config.precision) != dtype:
        raise ConfigError(f"training precision {config.precision} does not match model precision {dtype.name}")
    return dtype


def _trace_indices(model: Classifier, dataset: Dataset, config: TrainConfig) -> np.ndarray:
    if config.trace_cluster is None:
        return np.zeros(0, dtype=np.int64)
    if model.head is None:
        raise ConfigError("a center trace needs an RBF head")
    if config.trace_cluster >= model.head.num_clusters:
        raise ConfigError(f"trace_cluster {config.trace_cluster} outside [0, {model.head.num_clusters})")
    return np.arange(min(config.trace_samples, len(dataset)))


def _record_trace(
    model: Classifier, dataset: Dataset, traced: np.ndarray, config: TrainConfig, epoch: int, report: TrainReport
) -> None:
    """Squared metric distance from each traced sample to the traced center."""
    if traced.size == 0:
        return
    embeddings = model.embed(dataset.images[traced], config.eval_batch_size)
    r2 = rbf_forward(model.head, embeddings).r2[:, config.trace_cluster]
    for i, d2 in zip(traced, r2):
        report.center_trace.append(
            TraceRecord(epoch, int(i), int(dataset.labels[i]), config.trace_cluster, float(d2))
        )


def train(
    model: Classifier,
    train_set: Dataset,
    config: TrainConfig,
    test_set: Optional[Dataset] = None,
    checkpoint_path=None,
) -> TrainResult:
    dtype = _check_precision(model, config)
    train_set = require_nonempty(train_set, "training set").astype(dtype)
    if test_set is not None:
        test_set = test_set.astype(dtype)
    traced = _trace_indices(model, train_set, config)
    rng = np.random.default_rng(config.seed)
    params = model.named_parameters()
    decayed = [name for name in params if model.is_decayed(name)]
    wd = config.weight_decay if config.optimizer == "sgd_decoupled_wd" else 0.0
    if config.weight_decay and config.optimizer == "sgd":
        logger.warning("weight_decay is ignored by the plain sgd optimizer")

    warm_start(model, train_set, config, rng)

    report = TrainReport()
    _record_trace(model, train_set, traced, config, 0, report)
    best_state = model.state_dict()
    best_epoch = 0
    best_acc = -1.0

    def finish() -> None:
        model.load_state_dict(best_state)
        if checkpoint_path is not None:
            checkpoint_save(checkpoint_path, model)

    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = sup_sum = unsup_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = train_set.images[idx], train_set.labels[idx]
            breakdown, grads, fp = model.loss_and_grads(xb, yb, config.lam, training=True, rng=rng)
            if not math.isfinite(breakdown.total):
                finish()
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", report)
            try:
                sgd_step(params, grads, config.learning_rate, wd, decayed)
            except NonFiniteGradientError as e:
                finish()
                raise TrainingDiverged(f"epoch {epoch}: {e}", report)
            model.mark_updated()

            m = len(idx)
            loss_sum += breakdown.total * m
            sup_sum += breakdown.supervised * m
            unsup_sum += breakdown.unsupervised * m
            correct += int(np.sum(np.argmax(fp.logits, axis=1) == yb))

        train_acc = correct / n
        if test_set is not None and len(test_set):
            test_acc = evaluate(model, test_set, config.eval_batch_size, config.threads).accuracy
        else:
            test_acc = float("nan")
        elapsed = time.perf_counter() - started if config.report_timing else 0.0
        record = EpochRecord(epoch, loss_sum / n, sup_sum / n, unsup_sum / n, train_acc, test_acc, elapsed)
        report.records.append(record)
        _record_trace(model, train_set, traced, config, epoch, report)
        logger.info(
            f"Epoch {epoch}/{config.epochs}: loss {record.train_loss:.4f} "
            f"(sup {record.sup_loss:.4f}, unsup {record.unsup_loss:.4f}), "
            f"train acc {train_acc:.4f}, test acc {test_acc:.4f}"
        )

        selection = train_acc if math.isnan(test_acc) else test_acc
        if selection > best_acc:
            best_acc, best_epoch = selection, epoch
            best_state = model.state_dict()

    finish()
    return TrainResult(report, best_state, best_epoch, best_acc if best_epoch else float("nan"))
