"""
White-box attacks: FGSM, single-step gradient attack, DeepFool.

Every attack takes one image [C,H,W] in [0,1] and returns an AttackResult.
Attacks only read the model; all gradient scratch state is per call.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from errors import AttackError, ConfigError, DataError, RbfsntError
from settings import DEEPFOOL_BOUNDARY_TOL, DEEPFOOL_MAX_ITER, DEEPFOOL_OVERSHOOT, FGSM_EPSILON_STEP

logger = logging.getLogger(__name__)

ATTACK_COLUMNS = [
    "sample_id", "attack", "strength", "success", "gt_conf_before", "gt_conf_after",
    "l2", "linf", "target_conf_after", "label", "original_pred", "adversarial_pred", "iterations",
]


class DifferentiableModel(Protocol):
    num_classes: int

    def probabilities(self, x: np.ndarray) -> np.ndarray: ...

    def input_gradient(self, x: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]: ...

    def class_probability_gradient(self, x: np.ndarray, label: int) -> Tuple[np.ndarray, np.ndarray]: ...

    def logit_gradients(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...


class AttackConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    attack: Literal["fgsm", "gradient", "deepfool"] = "fgsm"
    epsilon: float = Field(0.25, ge=0)
    step: float = Field(1.0, ge=0)
    max_iter: int = Field(DEEPFOOL_MAX_ITER, ge=1)
    overshoot: float = Field(DEEPFOOL_OVERSHOOT, ge=0)

    @property
    def strength(self) -> float:
        if self.attack == "fgsm":
            return self.epsilon
        if self.attack == "gradient":
            return self.step
        return self.overshoot


@dataclass
class AttackResult:
    attack: str
    strength: float
    original: np.ndarray = field(repr=False)
    perturbation: np.ndarray = field(repr=False)
    adversarial: np.ndarray = field(repr=False)
    label: int
    original_pred: int
    adversarial_pred: int
    gt_conf_before: float
    gt_conf_after: float
    target_conf_after: float
    success: bool
    iterations: int
    sample_id: int = -1

    @property
    def delta(self) -> np.ndarray:
        """Perturbation actually applied, after clipping."""
        return self.adversarial - self.original

    @property
    def l2(self) -> float:
        return float(np.linalg.norm(self.delta.ravel()))

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0


@dataclass
class AttackFailure:
    sample_id: int
    attack: str
    reason: str


def _check_inputs(model, image: np.ndarray, label: int) -> np.ndarray:
    if not hasattr(model, "input_gradient"):
        raise AttackError(f"{type(model).__name__} does not provide input gradients")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DataError(f"attacks take one [C,H,W] image, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise DataError("image values must lie in [0, 1]")
    if not 0 <= label < model.num_classes:
        raise DataError(f"label {label} outside [0, {model.num_classes})")
    return image


def _result(model, attack: str, strength: float, image, label: int, eta, iterations: int) -> AttackResult:
    adversarial = np.clip(image + eta, 0.0, 1.0)
    probs = model.probabilities(np.stack([image, adversarial]))
    original_pred = int(np.argmax(probs[0]))
    adversarial_pred = int(np.argmax(probs[1]))
    return AttackResult(
        attack=attack,
        strength=strength,
        original=image,
        perturbation=eta,
        adversarial=adversarial,
        label=label,
        original_pred=original_pred,
        adversarial_pred=adversarial_pred,
        gt_conf_before=float(probs[0, label]),
        gt_conf_after=float(probs[1, label]),
        target_conf_after=float(probs[1, adversarial_pred]),
        success=adversarial_pred != label,
        iterations=iterations,
    )


# ============================================================================
# ATTACKS
# ============================================================================

def fgsm(model: DifferentiableModel, image: np.ndarray, label: int, epsilon: float) -> AttackResult:
    """eta = epsilon * sign(d loss / d image), clipped once at the end."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    image = _check_inputs(model, image, label)
    _, grad = model.input_gradient(image[None], np.array([label]))
    eta = epsilon * np.sign(grad[0].astype(np.float64))
    return _result(model, "fgsm", epsilon, image, label, eta, 1)


def gradient_attack(model: DifferentiableModel, image: np.ndarray, label: int, step: float) -> AttackResult:
    """One step of length `step` down the L2-normalized gradient of the ground-truth probability."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    image = _check_inputs(model, image, label)
    _, grad = model.class_probability_gradient(image[None], label)
    grad = grad[0].astype(np.float64)
    norm = np.linalg.norm(grad.ravel())
    if norm == 0 or step == 0:
        if norm == 0:
            logger.debug("gradient attack: zero gradient, image left unchanged")
        eta = np.zeros_like(image)
    else:
        eta = -step * grad / norm
    return _result(model, "gradient", step, image, label, eta, 1)


def deepfool(
    model: DifferentiableModel,
    image: np.ndarray,
    label: Optional[int] = None,
    max_iter: int = DEEPFOOL_MAX_ITER,
    overshoot: float = DEEPFOOL_OVERSHOOT,
) -> AttackResult:
    """
    Iterative minimal projection onto the nearest linearized class boundary.

    The label defaults to the clean prediction. Each iterate is clipped to
    [0,1]; the overshoot scales the accumulated perturbation.
    """
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    if overshoot < 0:
        raise ConfigError(f"overshoot must be >= 0, got {overshoot}")
    image = np.asarray(image, dtype=np.float64)
    if label is None:
        label = int(np.argmax(model.probabilities(image[None])[0]))
    image = _check_inputs(model, image, label)

    r_total = np.zeros_like(image)
    current = image
    iterations = 0
    while iterations < max_iter:
        logits, jacobian = model.logit_gradients(current[None])
        if int(np.argmax(logits)) != label:
            break
        best_dist, best_step = np.inf, None
        for k in range(model.num_classes):
            if k == label:
                continue
            w_k = jacobian[k] - jacobian[label]
            f_k = logits[k] - logits[label]
            w_norm = np.linalg.norm(w_k.ravel())
            if w_norm == 0:
                continue
            dist = abs(f_k) / w_norm
            if dist < best_dist:
                best_dist, best_step = dist, (abs(f_k) / (w_norm * w_norm)) * w_k
        if best_step is None:
            logger.debug("deepfool: all boundary gradients vanish, stopping")
            break
        if best_dist <= DEEPFOOL_BOUNDARY_TOL:
            # on the boundary tie; further steps would not move the iterate
            break
        r_total = r_total + best_step
        iterations += 1
        current = np.clip(image + (1.0 + overshoot) * r_total, 0.0, 1.0)

    return _result(model, "deepfool", overshoot, image, label, (1.0 + overshoot) * r_total, iterations)


def minimal_fgsm(
    model: DifferentiableModel,
    image: np.ndarray,
    label: int,
    epsilons: Optional[Sequence[float]] = None,
) -> Optional[AttackResult]:
    """Smallest epsilon on the grid whose FGSM step flips the prediction; None when none does."""
    image = _check_inputs(model, image, label)
    if epsilons is None:
        epsilons = np.arange(1, int(round(1.0 / FGSM_EPSILON_STEP)) + 1) * FGSM_EPSILON_STEP
    _, grad = model.input_gradient(image[None], np.array([label]))
    direction = np.sign(grad[0].astype(np.float64))
    for epsilon in sorted(epsilons):
        if epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
        result = _result(model, "fgsm", float(epsilon), image, label, epsilon * direction, 1)
        if result.success:
            return result
    return None


def paired_l2_comparison(
    model: DifferentiableModel,
    images: np.ndarray,
    labels: np.ndarray,
    max_iter: int = DEEPFOOL_MAX_ITER,
    overshoot: float = DEEPFOOL_OVERSHOOT,
    epsilons: Optional[Sequence[float]] = None,
) -> pd.DataFrame:
    """
    DeepFool against the smallest flipping FGSM step, sample by sample.

    A row counts as a DeepFool win only when both attacks flip the sample
    and DeepFool's applied perturbation has the smaller L2 norm.
    """
    rows = []
    for i, (image, label) in enumerate(zip(images, labels)):
        df = deepfool(model, image, int(label), max_iter, overshoot)
        fg = minimal_fgsm(model, image, int(label), epsilons)
        fgsm_l2 = fg.l2 if fg is not None else float("nan")
        rows.append({
            "sample_id": i,
            "label": int(label),
            "deepfool_success": df.success,
            "deepfool_l2": df.l2,
            "deepfool_iterations": df.iterations,
            "fgsm_success": fg is not None,
            "fgsm_epsilon": fg.strength if fg is not None else float("nan"),
            "fgsm_l2": fgsm_l2,
            "deepfool_smaller": bool(df.success and fg is not None and df.l2 < fgsm_l2),
        })
    return pd.DataFrame(rows, columns=[
        "sample_id", "label", "deepfool_success", "deepfool_l2", "deepfool_iterations",
        "fgsm_success", "fgsm_epsilon", "fgsm_l2", "deepfool_smaller",
    ])


def run_attack(model: DifferentiableModel, image: np.ndarray, label: int, config: AttackConfig) -> AttackResult:
    if config.attack == "fgsm":
        return fgsm(model, image, label, config.epsilon)
    if config.attack == "gradient":
        return gradient_attack(model, image, label, config.step)
    return deepfool(model, image, label, config.max_iter, config.overshoot)


# ============================================================================
# BATCHES
# ============================================================================

def attack_batch(
    model: DifferentiableModel,
    images: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
    threads: int = 1,
    sample_ids: Optional[Sequence[int]] = None,
    skip_failures: bool = False,
) -> Tuple[List[AttackResult], List[AttackFailure]]:
    """Attack every image; results keep input order regardless of thread count."""
    ids = list(range(len(images))) if sample_ids is None else list(sample_ids)

    def one(i: int):
        try:
            result = run_attack(model, images[i], int(labels[i]), config)
            result.sample_id = ids[i]
            return result
        except RbfsntError as e:
            if not skip_failures:
                raise
            logger.warning(f"{config.attack} attack failed on sample {ids[i]}: {e}")
            return AttackFailure(ids[i], config.attack, str(e))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, range(len(images))))
    else:
        outcomes = [one(i) for i in range(len(images))]
    results = [o for o in outcomes if isinstance(o, AttackResult)]
    failures = [o for o in outcomes if isinstance(o, AttackFailure)]
    logger.debug(f"{config.attack}: {len(results)} attacked, {len(failures)} failed")
    return results, failures


def summarize_attacks(results: Sequence[AttackResult]) -> Dict[str, float]:
    """Success rate plus mean confidences; target-class confidence is averaged over successes only."""
    if not results:
        return {"count": 0, "success_rate": float("nan"), "mean_gt_conf_before": float("nan"),
                "mean_gt_conf_after": float("nan"), "mean_target_conf_after": float("nan"),
                "mean_l2": float("nan"), "mean_linf": float("nan")}
    successes = [r for r in results if r.success]
    return {
        "count": len(results),
        "success_rate": len(successes) / len(results),
        "mean_gt_conf_before": float(np.mean([r.gt_conf_before for r in results])),
        "mean_gt_conf_after": float(np.mean([r.gt_conf_after for r in results])),
        "mean_target_conf_after": float(np.mean([r.target_conf_after for r in successes])) if successes else float("nan"),
        "mean_l2": float(np.mean([r.l2 for r in results])),
        "mean_linf": float(np.mean([r.linf for r in results])),
    }


def attacks_frame(results: Sequence[AttackResult]) -> pd.DataFrame:
    rows = [
        {
            "sample_id": r.sample_id,
            "attack": r.attack,
            "strength": r.strength,
            "success": int(r.success),
            "gt_conf_before": r.gt_conf_before,
            "gt_conf_after": r.gt_conf_after,
            "l2": r.l2,
            "linf": r.linf,
            "target_conf_after": r.target_conf_after,
            "label": r.label,
            "original_pred": r.original_pred,
            "adversarial_pred": r.adversarial_pred,
            "iterations": r.iterations,
        }
        for r in results
    ]
    return pd.DataFrame(rows, columns=ATTACK_COLUMNS)


def write_attack_csv(results: Sequence[AttackResult], path) -> None:
    attacks_frame(results).to_csv(path, index=False)
