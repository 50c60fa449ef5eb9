"""
explain_detect - feature-response maps, local spatial entropy and the entropy attack detector.

Score of an image = average local entropy of its grayscale guided-backprop
map. Adversarial inputs spread the response, so the detector flags an image
when its score exceeds a threshold tau.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats
from scipy.integrate import trapezoid

from adversarial import AttackConfig, AttackFailure, AttackResult, attack_batch
from errors import DataError, RbfsntError, ShapeError, UnsupportedLayerError
from nn_core import Network, ReluRule
from settings import DEFAULT_TAU_PERCENTILE, ENTROPY_PATCH, GRAY_LEVELS, REPORTED_FPRS

logger = logging.getLogger(__name__)

EntropyStrategy = Literal["intensity", "cooccurrence"]


@dataclass
class FeatureResponseMap:
    map: np.ndarray = field(repr=False)
    grayscale: np.ndarray = field(repr=False)
    entropy_map: np.ndarray = field(repr=False)
    average_entropy: float


# ============================================================================
# GUIDED BACKPROPAGATION
# ============================================================================

def _guided_stop(network: Network) -> int:
    """Index after the last conv layer, extended over the ReLUs that directly follow it."""
    last = network.last_conv_index()
    if last is None:
        raise UnsupportedLayerError("guided backpropagation needs a convolutional layer")
    stop = last + 1
    while stop < len(network.layers) and network.layers[stop].kind == "relu":
        stop += 1
    return stop


def guided_backprop(
    model,
    image: np.ndarray,
    relu_rule: ReluRule = "guided",
    patch: int = ENTROPY_PATCH,
    strategy: EntropyStrategy = "intensity",
) -> FeatureResponseMap:
    """
    Backpropagate the last conv block's own activations to the input.

    The seed gradient equals the activation A itself (objective 0.5*|A|^2);
    max-pool layers route it through the switches of this call's forward pass.
    Accepts a Network or anything with a `backbone` Network.
    """
    network: Network = getattr(model, "backbone", model)
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"guided_backprop takes one [C,H,W] image, got {image.shape}")
    stop = _guided_stop(network)
    activations, trace = network.forward(image[None], stop=stop)
    _, grad = network.backward(trace, activations, relu_rule=relu_rule)
    response = grad[0].astype(np.float64)
    gray = to_grayscale(response)
    entropy_map = local_entropy(gray, patch, strategy)
    return FeatureResponseMap(response, gray, entropy_map, average_entropy(entropy_map))


def to_grayscale(response: np.ndarray) -> np.ndarray:
    """Channel mean, then per-image min-max normalization to [0,1]; a constant map becomes zeros."""
    response = np.asarray(response, dtype=np.float64)
    if response.ndim == 2:
        gray = response
    elif response.ndim == 3 and response.shape[0] in (1, 3):
        gray = response.mean(axis=0)
    else:
        raise ShapeError(f"grayscale conversion needs a 1- or 3-channel map, got shape {response.shape}")
    low, high = gray.min(), gray.max()
    if high == low:
        return np.zeros_like(gray)
    return (gray - low) / (high - low)


# ============================================================================
# ENTROPY
# ============================================================================

def quantize(gray: np.ndarray, levels: int = GRAY_LEVELS) -> np.ndarray:
    return np.minimum((np.asarray(gray) * levels).astype(np.int64), levels - 1)


def _histogram_entropy(codes: np.ndarray) -> np.ndarray:
    """Shannon entropy (bits) of the values along the last axis, via per-element counts."""
    n = codes.shape[-1]
    counts = (codes[..., :, None] == codes[..., None, :]).sum(axis=-1)
    # -sum_levels p log p == -mean_elements log p(element)
    return 0.0 - np.mean(np.log2(counts / n), axis=-1)


def local_entropy(gray: np.ndarray, patch: int = ENTROPY_PATCH, strategy: EntropyStrategy = "intensity") -> np.ndarray:
    """
    Entropy of every non-overlapping patch x patch tile (trailing rows/cols dropped).

    intensity:    histogram of 256-level gray values in the tile
    cooccurrence: joint histogram of horizontally adjacent gray-value pairs in the tile
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ShapeError(f"local_entropy takes a 2-D map, got {gray.shape}")
    h, w = gray.shape
    if patch < 1 or patch > h or patch > w:
        raise ShapeError(f"patch {patch} does not fit a {h}x{w} map")
    hp, wp = h // patch, w // patch
    q = quantize(gray[:hp * patch, :wp * patch])
    tiles = q.reshape(hp, patch, wp, patch).transpose(0, 2, 1, 3)

    if strategy == "intensity":
        codes = tiles.reshape(hp, wp, patch * patch)
    elif strategy == "cooccurrence":
        if patch < 2:
            raise ShapeError("co-occurrence entropy needs patch >= 2")
        pairs = tiles[..., :, :-1] * GRAY_LEVELS + tiles[..., :, 1:]
        codes = pairs.reshape(hp, wp, patch * (patch - 1))
    else:
        raise ShapeError(f"unknown entropy strategy {strategy!r}")
    return _histogram_entropy(codes)


def average_entropy(entropy_map: np.ndarray) -> float:
    entropy_map = np.asarray(entropy_map)
    if entropy_map.size == 0:
        raise ShapeError("average_entropy of an empty map")
    return float(np.mean(entropy_map))


def entropy_score(model, image: np.ndarray, patch: int = ENTROPY_PATCH, strategy: EntropyStrategy = "intensity") -> float:
    return guided_backprop(model, image, patch=patch, strategy=strategy).average_entropy


# ============================================================================
# DETECTOR & ROC
# ============================================================================

def detect(score, tau: float):
    """True where the average entropy exceeds tau."""
    return np.asarray(score) > tau if np.ndim(score) else bool(score > tau)


def calibrate_threshold(clean_scores: Sequence[float], percentile: float = DEFAULT_TAU_PERCENTILE) -> float:
    """Smallest observed clean score at or above the percentile, so at most (100-p)% of clean scores exceed it."""
    clean_scores = np.asarray(clean_scores, dtype=np.float64)
    if clean_scores.size == 0:
        raise DataError("cannot calibrate a threshold without clean scores")
    return float(np.quantile(clean_scores, percentile / 100.0, method="higher"))


class TauPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["percentile", "fixed"] = "percentile"
    percentile: float = Field(DEFAULT_TAU_PERCENTILE, ge=0, le=100)
    value: Optional[float] = None

    @model_validator(mode="after")
    def _check_value(self):
        if self.kind == "fixed" and self.value is None:
            raise ValueError("a fixed tau policy needs a value")
        return self

    def resolve(self, clean_scores: Sequence[float]) -> float:
        if self.kind == "fixed":
            return float(self.value)
        return calibrate_threshold(clean_scores, self.percentile)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    detection_rates: Dict[float, float]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})


def roc_auc(clean_scores: Sequence[float], adv_scores: Sequence[float], fprs: Sequence[float] = REPORTED_FPRS) -> RocCurve:
    """
    Sweep thresholds +inf then every distinct score in descending order;
    a score counts as flagged when score >= threshold.
    """
    clean = np.sort(np.asarray(clean_scores, dtype=np.float64))
    adv = np.sort(np.asarray(adv_scores, dtype=np.float64))
    if clean.size == 0 or adv.size == 0:
        raise DataError("roc_auc needs non-empty clean and adversarial score lists")

    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([clean, adv]))[::-1]])
    fpr = (clean.size - np.searchsorted(clean, thresholds, side="left")) / clean.size
    tpr = (adv.size - np.searchsorted(adv, thresholds, side="left")) / adv.size
    auc = float(trapezoid(tpr, fpr))

    unique_fpr, last = np.unique(fpr[::-1], return_index=True)
    best_tpr = tpr[::-1][last]
    rates = {float(f): float(np.interp(f, unique_fpr, best_tpr)) for f in fprs}
    return RocCurve(thresholds, fpr, tpr, auc, rates)


# ============================================================================
# PIPELINE
# ============================================================================

@dataclass
class SampleScore:
    sample_id: int
    label: int
    clean_score: float
    adv_score: float
    clean_flag: bool
    adv_flag: bool
    attack_success: bool


@dataclass
class DetectionReport:
    samples: List[SampleScore] = field(default_factory=list)
    failures: List[AttackFailure] = field(default_factory=list)
    tau: float = float("nan")
    roc: Optional[RocCurve] = None
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    clean_mean: float = float("nan")
    adv_mean: float = float("nan")
    welch_t: float = float("nan")
    welch_p: float = float("nan")

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    def summary(self) -> Dict[str, float]:
        return {
            "samples": len(self.samples),
            "failed": len(self.failures),
            "tau": self.tau,
            "auc": self.roc.auc if self.roc else float("nan"),
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "clean_mean": self.clean_mean,
            "adv_mean": self.adv_mean,
            "welch_t": self.welch_t,
            "welch_p": self.welch_p,
            **{f"detect_at_fpr_{f:g}": r for f, r in (self.roc.detection_rates.items() if self.roc else [])},
        }


def detection_pipeline(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    attack_config: AttackConfig,
    tau_policy: Optional[TauPolicy] = None,
    threads: int = 1,
    only_successful: bool = False,
    patch: int = ENTROPY_PATCH,
    strategy: EntropyStrategy = "intensity",
    sample_ids: Optional[Sequence[int]] = None,
) -> DetectionReport:
    """Attack each image, score clean and adversarial versions, threshold and aggregate."""
    tau_policy = tau_policy or TauPolicy()
    report = DetectionReport()
    if len(images) == 0:
        return report
    # a backbone without conv layers cannot be scored at all
    _guided_stop(getattr(model, "backbone", model))

    results, report.failures = attack_batch(
        model, images, labels, attack_config, threads=threads, sample_ids=sample_ids, skip_failures=True
    )
    if not results:
        logger.warning("every attack failed; detection report is empty")
        return report

    def score_pair(result: AttackResult):
        try:
            return (entropy_score(model, result.original, patch, strategy),
                    entropy_score(model, result.adversarial, patch, strategy))
        except RbfsntError as e:
            logger.warning(f"scoring failed on sample {result.sample_id}: {e}")
            return AttackFailure(result.sample_id, "entropy", str(e))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(score_pair, results))
    else:
        outcomes = [score_pair(r) for r in results]

    report.failures += [o for o in outcomes if isinstance(o, AttackFailure)]
    kept = [(r, o) for r, o in zip(results, outcomes) if not isinstance(o, AttackFailure)]
    if not kept:
        logger.warning("every sample failed; detection report is empty")
        return report
    results = [r for r, _ in kept]
    scores = [o for _, o in kept]

    clean = np.array([s[0] for s in scores])
    adv_mask = np.array([r.success or not only_successful for r in results])
    adv = np.array([s[1] for s in scores])[adv_mask]

    report.tau = tau_policy.resolve(clean)
    for r, (c, a) in zip(results, scores):
        report.samples.append(SampleScore(
            r.sample_id, r.label, c, a, bool(detect(c, report.tau)), bool(detect(a, report.tau)), r.success
        ))

    clean_flags = detect(clean, report.tau)
    adv_flags = detect(adv, report.tau)
    report.fp = int(clean_flags.sum())
    report.tn = int(clean.size - report.fp)
    report.tp = int(adv_flags.sum())
    report.fn = int(adv.size - report.tp)
    report.clean_mean = float(clean.mean())
    if adv.size:
        report.adv_mean = float(adv.mean())
        report.roc = roc_auc(clean, adv)
    if clean.size >= 2 and adv.size >= 2:
        welch = stats.ttest_ind(adv, clean, equal_var=False, alternative="greater")
        report.welch_t, report.welch_p = float(welch.statistic), float(welch.pvalue)
    logger.info(
        f"Detection: {len(results)} samples, tau {report.tau:.4f}, "
        f"AUC {report.roc.auc if report.roc else float('nan'):.4f}, recall {report.recall:.3f}"
    )
    return report


# ============================================================================
# EXPORT
# ============================================================================

def write_scores_csv(report: DetectionReport, path) -> None:
    frame = pd.DataFrame(
        [
            {
                "sample_id": s.sample_id,
                "clean_score": s.clean_score,
                "adv_score": s.adv_score,
                "flag": int(s.adv_flag),
                "clean_flag": int(s.clean_flag),
                "attack_success": int(s.attack_success),
                "label": s.label,
            }
            for s in report.samples
        ],
        columns=["sample_id", "clean_score", "adv_score", "flag", "clean_flag", "attack_success", "label"],
    )
    frame.to_csv(path, index=False)


def write_roc_csv(roc: Optional[RocCurve], path) -> None:
    frame = roc.to_frame() if roc else pd.DataFrame(columns=["threshold", "fpr", "tpr"])
    frame.to_csv(path, index=False)


def write_pgm(image: np.ndarray, path, scale: float = 1.0) -> None:
    """Binary PGM (P5, maxval 255) of a 2-D array in [0, scale]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D array, got {image.shape}")
    pixels = np.clip(np.rint(image / scale * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
