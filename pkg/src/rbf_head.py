"""
rbf_head - radial basis function classifier head for convolutional embeddings.

Forward path:  r2[n,j] = (x_n - c_j)^T R (x_n - c_j)
               h[n,j]  = kernel(r2[n,j]; sigma)
               y[n,k]  = sum_j w[j,k] * h[n,j] + w0[k]

The metric is kept positive definite by construction, R = A^T A + eps*I
(full mode) or R = diag(a^2) + eps*I (diagonal mode); euclidean mode uses R = I.
A starts at the identity, so training begins in Euclidean space.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import cdist
from scipy.special import expit

from errors import ConfigError, NumericError, ShapeError, StaleCacheError
from nn_core import Parameter, glorot_uniform, one_hot, softmax_cross_entropy
from settings import METRIC_EPSILON

logger = logging.getLogger(__name__)

MetricMode = Literal["euclidean", "diagonal", "full"]
KernelKind = Literal["linear", "gaussian", "thin_plate", "logistic", "inv_power", "power", "dsp", "quadratic"]

# kernels whose value does not depend on sigma
SIGMA_FREE_KERNELS = ("linear", "thin_plate")


class KernelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: KernelKind = "quadratic"
    sigma: float = Field(1.0, gt=0)
    alpha: float = 0.5
    beta: float = 0.5
    r0: float = 0.0

    @model_validator(mode="after")
    def _check_shape_params(self):
        if self.kind == "inv_power" and self.alpha <= 0:
            raise ValueError("inv_power kernel needs alpha > 0")
        if self.kind == "power" and not 0 < self.beta < 1:
            raise ValueError("power kernel needs 0 < beta < 1")
        return self


# ============================================================================
# KERNELS
# ============================================================================

def _check_sigma(sigma) -> np.ndarray:
    sigma = np.asarray(sigma)
    if np.any(sigma <= 0):
        raise NumericError("kernel width sigma must be positive")
    return sigma


def kernel_eval(r2, config: KernelConfig, sigma=None) -> np.ndarray:
    """Activation h for squared distance r2 (sigma defaults to config.sigma)."""
    r2 = np.asarray(r2)
    if np.any(r2 < 0):
        raise NumericError("squared distance must be non-negative")
    s = _check_sigma(config.sigma if sigma is None else sigma)
    s2 = s * s
    kind = config.kind

    if kind == "linear":
        return np.sqrt(r2)
    if kind == "gaussian":
        return np.exp(-r2 / (2 * s2))
    if kind == "thin_plate":
        # r^2 ln r = 0.5 r^2 ln r^2, with the r -> 0 limit of 0
        safe = np.where(r2 > 0, r2, 1.0)
        return np.where(r2 > 0, 0.5 * r2 * np.log(safe), 0.0)
    if kind == "logistic":
        return expit(-(r2 - config.r0 ** 2) / s2)
    if kind == "inv_power":
        return (r2 + s2) ** (-config.alpha)
    if kind == "power":
        return (r2 + s2) ** config.beta
    if kind == "dsp":
        return 1.0 / (1.0 + r2 / s2)
    return 1.0 - r2 / s2


def kernel_derivatives(r2, config: KernelConfig, sigma=None) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (dh/dr2, dh/dsigma), elementwise."""
    r2 = np.asarray(r2)
    s = _check_sigma(config.sigma if sigma is None else sigma)
    s2 = s * s
    kind = config.kind
    zeros = np.zeros(np.broadcast(r2, s).shape, dtype=np.result_type(r2, s))

    if kind == "linear":
        safe = np.where(r2 > 0, r2, 1.0)
        return np.where(r2 > 0, 0.5 / np.sqrt(safe), 0.0) + zeros, zeros
    if kind == "thin_plate":
        safe = np.where(r2 > 0, r2, 1.0)
        return np.where(r2 > 0, 0.5 * (np.log(safe) + 1.0), 0.0) + zeros, zeros
    if kind == "gaussian":
        h = np.exp(-r2 / (2 * s2))
        return -h / (2 * s2), h * r2 / (s2 * s)
    if kind == "logistic":
        u = (r2 - config.r0 ** 2) / s2
        h = expit(-u)
        slope = h * (1.0 - h)
        return -slope / s2, 2.0 * slope * u / s
    if kind == "inv_power":
        base = (r2 + s2) ** (-config.alpha - 1.0)
        return -config.alpha * base, -2.0 * config.alpha * s * base
    if kind == "power":
        base = (r2 + s2) ** (config.beta - 1.0)
        return config.beta * base, 2.0 * config.beta * s * base
    if kind == "dsp":
        h = 1.0 / (1.0 + r2 / s2)
        return -h * h / s2, 2.0 * h * h * r2 / (s2 * s)
    return -1.0 / s2 + zeros, 2.0 * r2 / (s2 * s)


# ============================================================================
# HEAD
# ============================================================================

class RbfHead:
    """Cluster centers, metric factor, kernel width and output layer."""

    def __init__(
        self,
        num_clusters: int,
        dim: int,
        num_classes: int,
        kernel: Optional[KernelConfig] = None,
        metric_mode: MetricMode = "full",
        per_cluster_sigma: bool = False,
        plain_unsup: bool = False,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if num_clusters < 1 or dim < 1 or num_classes < 2:
            raise ShapeError(f"invalid head sizes: clusters={num_clusters}, dim={dim}, classes={num_classes}")
        if metric_mode not in ("euclidean", "diagonal", "full"):
            raise ConfigError(f"unknown metric mode {metric_mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel = kernel or KernelConfig()
        self.metric_mode = metric_mode
        self.per_cluster_sigma = per_cluster_sigma
        self.plain_unsup = plain_unsup
        self.epsilon = METRIC_EPSILON
        self.dtype = np.dtype(dtype)
        self.version = 0

        self.centers = Parameter("centers", rng.normal(0.0, 1.0, (num_clusters, dim)).astype(dtype))
        if metric_mode == "full":
            self.metric: Optional[Parameter] = Parameter("metric", np.eye(dim, dtype=dtype))
        elif metric_mode == "diagonal":
            self.metric = Parameter("metric", np.ones(dim, dtype=dtype))
        else:
            self.metric = None
        sigma_shape = (num_clusters,) if per_cluster_sigma else (1,)
        self.sigma = Parameter("sigma", np.full(sigma_shape, self.kernel.sigma, dtype=dtype))
        self.weights = Parameter(
            "weights", glorot_uniform((num_clusters, num_classes), num_clusters, num_classes, rng, dtype)
        )
        self.bias = Parameter("bias", np.zeros(num_classes, dtype=dtype))

    @property
    def num_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def named_parameters(self) -> Dict[str, Parameter]:
        params = {"centers": self.centers, "sigma": self.sigma, "weights": self.weights, "bias": self.bias}
        if self.metric is not None:
            params["metric"] = self.metric
        return params

    def mark_updated(self) -> None:
        self.version += 1

    def config(self) -> Dict:
        return {
            "num_clusters": self.num_clusters,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "kernel": self.kernel.model_dump(),
            "metric_mode": self.metric_mode,
            "per_cluster_sigma": self.per_cluster_sigma,
            "plain_unsup": self.plain_unsup,
        }

    @classmethod
    def from_config(cls, config: Dict, dtype) -> "RbfHead":
        return cls(
            num_clusters=config["num_clusters"],
            dim=config["dim"],
            num_classes=config["num_classes"],
            kernel=KernelConfig(**config["kernel"]),
            metric_mode=config["metric_mode"],
            per_cluster_sigma=config["per_cluster_sigma"],
            plain_unsup=config.get("plain_unsup", False),
            dtype=dtype,
        )

    def sigma_per_cluster(self) -> np.ndarray:
        return np.broadcast_to(self.sigma.data, (self.num_clusters,))


def metric_matrix(head: RbfHead) -> np.ndarray:
    """Effective R as a dense D x D matrix."""
    d = head.dim
    if head.metric_mode == "euclidean":
        return np.eye(d)
    a = head.metric.data.astype(np.float64)
    if head.metric_mode == "diagonal":
        return np.diag(a * a + head.epsilon)
    return a.T @ a + head.epsilon * np.eye(d)


def _metric_sq(diff: np.ndarray, head: RbfHead, euclidean: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Squared metric norm over the last axis; returns (r2, A @ diff or None)."""
    if euclidean or head.metric_mode == "euclidean":
        return np.sum(diff * diff, axis=-1), None
    a = head.metric.data
    if head.metric_mode == "diagonal":
        return np.sum(diff * diff * (a * a + head.epsilon), axis=-1), None
    z = diff @ a.T
    return np.sum(z * z, axis=-1) + head.epsilon * np.sum(diff * diff, axis=-1), z


def _metric_sq_backward(
    grad_r2: np.ndarray,
    diff: np.ndarray,
    z: Optional[np.ndarray],
    head: RbfHead,
    euclidean: bool = False,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Returns (grad w.r.t. diff, grad w.r.t. the metric factor or None)."""
    g = grad_r2[..., None]
    if euclidean or head.metric_mode == "euclidean":
        return 2.0 * g * diff, None
    a = head.metric.data
    d = diff.shape[-1]
    if head.metric_mode == "diagonal":
        grad_diff = 2.0 * g * diff * (a * a + head.epsilon)
        grad_a = 2.0 * a * np.sum((g * diff * diff).reshape(-1, d), axis=0)
        return grad_diff, grad_a
    grad_diff = 2.0 * g * (z @ a + head.epsilon * diff)
    grad_a = 2.0 * (g * z).reshape(-1, d).T @ diff.reshape(-1, d)
    return grad_diff, grad_a


def metric_distance_sq(x: np.ndarray, center: np.ndarray, head: RbfHead) -> float:
    """Squared distance between one embedding and one center under the head's metric."""
    x = np.asarray(x)
    center = np.asarray(center)
    if x.shape != (head.dim,) or center.shape != (head.dim,):
        raise ShapeError(f"expected vectors of dimension {head.dim}, got {x.shape} and {center.shape}")
    r2, _ = _metric_sq((x - center).astype(np.float64), head)
    return float(max(r2, 0.0))


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

@dataclass
class RbfForward:
    activations: np.ndarray
    logits: np.ndarray
    r2: np.ndarray
    diff: np.ndarray = field(repr=False)
    z: Optional[np.ndarray] = field(repr=False)
    version: int = 0


def _check_batch(head: RbfHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=head.dtype)
    if x.ndim != 2 or x.shape[1] != head.dim:
        raise ShapeError(f"RBF head expects [N,{head.dim}] embeddings, got {x.shape}")
    return x


def rbf_forward(head: RbfHead, x: np.ndarray) -> RbfForward:
    x = _check_batch(head, x)
    diff = x[:, None, :] - head.centers.data[None, :, :]
    r2, z = _metric_sq(diff, head)
    r2 = np.maximum(r2, 0)
    h = kernel_eval(r2, head.kernel, head.sigma_per_cluster()).astype(head.dtype, copy=False)
    logits = h @ head.weights.data + head.bias.data
    return RbfForward(h, logits, r2, diff, z, head.version)


def rbf_backward(
    head: RbfHead,
    fwd: Optional[RbfForward],
    grad_logits: np.ndarray,
    grad_r2_extra: Optional[np.ndarray] = None,
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Gradients for weights, bias, centers, metric and sigma, plus the input gradient."""
    if fwd is None:
        raise StaleCacheError("rbf_backward called before rbf_forward")
    if fwd.version != head.version:
        raise StaleCacheError("RBF forward cache predates a parameter update")

    h = fwd.activations
    grads: Dict[str, np.ndarray] = {
        "weights": h.T @ grad_logits,
        "bias": grad_logits.sum(axis=0),
    }
    grad_h = grad_logits @ head.weights.data.T
    dh_dr2, dh_dsigma = kernel_derivatives(fwd.r2, head.kernel, head.sigma_per_cluster())
    grad_r2 = grad_h * dh_dr2
    if grad_r2_extra is not None:
        grad_r2 = grad_r2 + grad_r2_extra

    sigma_grad = np.sum(grad_h * dh_dsigma, axis=0)
    grads["sigma"] = sigma_grad if head.per_cluster_sigma else np.array([sigma_grad.sum()])

    grad_diff, grad_metric = _metric_sq_backward(grad_r2, fwd.diff, fwd.z, head)
    grads["centers"] = -grad_diff.sum(axis=0)
    if grad_metric is not None:
        grads["metric"] = grad_metric
    grad_x = grad_diff.sum(axis=1)
    grads = {k: np.asarray(v, dtype=head.dtype) for k, v in grads.items()}
    return grads, grad_x.astype(head.dtype, copy=False)


# ============================================================================
# LOSSES
# ============================================================================

@dataclass
class LossBreakdown:
    total: float
    supervised: float
    unsupervised: float


def _nearest(r2: np.ndarray) -> np.ndarray:
    return np.argmin(r2, axis=1)


def unsupervised_loss(head: RbfHead, x: np.ndarray, plain: Optional[bool] = None) -> float:
    """Mean over the batch of the squared distance to the nearest center."""
    plain = head.plain_unsup if plain is None else plain
    x = _check_batch(head, x)
    diff = x[:, None, :] - head.centers.data[None, :, :]
    r2, _ = _metric_sq(diff, head, euclidean=plain)
    return float(np.mean(np.min(r2, axis=1)))


def combined_loss_and_grads(
    head: RbfHead,
    x: np.ndarray,
    labels: np.ndarray,
    lam: float,
    plain: Optional[bool] = None,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray], np.ndarray, RbfForward]:
    """Supervised cross-entropy plus lam times the nearest-center loss, with all gradients."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    plain = head.plain_unsup if plain is None else plain
    fwd = rbf_forward(head, x)
    sup, grad_logits = softmax_cross_entropy(fwd.logits, labels)
    n = fwd.r2.shape[0]

    extra = None
    plain_diff = None
    if plain:
        r2_plain = np.sum(fwd.diff * fwd.diff, axis=-1)
        nearest = _nearest(r2_plain)
        unsup = float(np.mean(r2_plain[np.arange(n), nearest]))
        plain_diff = fwd.diff[np.arange(n), nearest]
    else:
        nearest = _nearest(fwd.r2)
        unsup = float(np.mean(fwd.r2[np.arange(n), nearest]))
        if lam > 0:
            extra = np.zeros_like(fwd.r2)
            extra[np.arange(n), nearest] = lam / n

    grads, grad_x = rbf_backward(head, fwd, grad_logits, extra)
    if plain and lam > 0:
        g = (2.0 * lam / n) * plain_diff
        grad_x = grad_x + g.astype(head.dtype)
        center_grad = np.zeros_like(grads["centers"])
        np.add.at(center_grad, nearest, -g.astype(head.dtype))
        grads["centers"] = grads["centers"] + center_grad
    return LossBreakdown(sup + lam * unsup, sup, unsup), grads, grad_x, fwd


def combined_loss(head: RbfHead, x: np.ndarray, labels: np.ndarray, lam: float) -> float:
    breakdown, _, _, _ = combined_loss_and_grads(head, x, labels, lam)
    return breakdown.total


# ============================================================================
# INITIALIZATION
# ============================================================================

@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    loss: float
    history: List[float]
    iterations: int


def kmeans_init(
    embeddings: np.ndarray,
    num_clusters: int,
    rng: np.random.Generator,
    max_iter: int = 100,
) -> KMeansResult:
    """
    Lloyd's algorithm from C distinct random samples.

    An empty cluster takes the sample farthest from its assigned center
    (from a cluster with more than one member), so the loss never increases.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    m = x.shape[0]
    if not 1 <= num_clusters <= m:
        raise ShapeError(f"k-means needs 1 <= C <= M, got C={num_clusters}, M={m}")

    centers = x[rng.choice(m, size=num_clusters, replace=False)].copy()
    assignments = np.full(m, -1, dtype=np.int64)
    history: List[float] = []
    iteration = 0
    for iteration in range(1, max_iter + 1):
        d2 = cdist(x, centers, "sqeuclidean")
        new_assignments = np.argmin(d2, axis=1)

        counts = np.bincount(new_assignments, minlength=num_clusters)
        for j in np.flatnonzero(counts == 0):
            own = d2[np.arange(m), new_assignments]
            movable = counts[new_assignments] > 1
            far = int(np.argmax(np.where(movable, own, -1.0)))
            counts[new_assignments[far]] -= 1
            new_assignments[far] = j
            counts[j] = 1
            centers[j] = x[far]
            d2[:, j] = np.sum((x - centers[j]) ** 2, axis=1)

        for j in range(num_clusters):
            centers[j] = x[new_assignments == j].mean(axis=0)
        loss = float(np.sum((x - centers[new_assignments]) ** 2))
        history.append(loss)
        logger.debug(f"k-means iteration {iteration}: loss {loss:.6g}")

        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments

    return KMeansResult(centers, new_assignments, history[-1], history, iteration)


def init_sigma(distances_sq: np.ndarray) -> float:
    """Root-mean of sample-to-center distances; 1.0 when every distance is zero."""
    value = float(np.sqrt(np.mean(distances_sq))) if np.size(distances_sq) else 0.0
    return value if value > 0 else 1.0


def initialize_from_kmeans(
    head: RbfHead,
    embeddings: np.ndarray,
    rng: np.random.Generator,
    max_iter: int = 100,
) -> KMeansResult:
    """Warm start: centers from k-means, metric reset to identity, sigma from the spread."""
    result = kmeans_init(embeddings, head.num_clusters, rng, max_iter)
    x = np.asarray(embeddings, dtype=np.float64)
    d2 = np.sum((x - result.centers[result.assignments]) ** 2, axis=1)

    head.centers.data = result.centers.astype(head.dtype)
    if head.metric_mode == "full":
        head.metric.data = np.eye(head.dim, dtype=head.dtype)
    elif head.metric_mode == "diagonal":
        head.metric.data = np.ones(head.dim, dtype=head.dtype)

    shared = init_sigma(d2)
    if head.per_cluster_sigma:
        # empty or zero-spread clusters fall back to the shared spread
        sigma = np.full(head.num_clusters, shared)
        for j in range(head.num_clusters):
            member_d2 = d2[result.assignments == j]
            if member_d2.size and np.any(member_d2 > 0):
                sigma[j] = init_sigma(member_d2)
    else:
        sigma = np.array([shared])
    head.sigma.data = sigma.astype(head.dtype)
    head.mark_updated()
    logger.info(f"k-means warm start: {result.iterations} iterations, loss {result.loss:.6g}, sigma {shared:.4g}")
    return result


def solve_output_weights(h: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """Ridge-regularized pseudo-inverse solution W = (H^T H + alpha I)^-1 H^T Y."""
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if h.ndim != 2 or y.ndim != 2 or h.shape[0] != y.shape[0]:
        raise ShapeError(f"H {h.shape} and Y {y.shape} must share the sample axis")
    gram = h.T @ h + alpha * np.eye(h.shape[1])
    rhs = h.T @ y
    try:
        return scipy.linalg.solve(gram, rhs, assume_a="pos")
    except scipy.linalg.LinAlgError:
        logger.warning("normal equations not positive definite; falling back to least squares")
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]


def fit_output_weights(head: RbfHead, embeddings: np.ndarray, labels: np.ndarray, alpha: float = 1e-8) -> np.ndarray:
    """Closed-form output weights on the activation matrix; biases are zeroed."""
    h = rbf_forward(head, embeddings).activations
    w = solve_output_weights(h, one_hot(labels, head.num_classes), alpha)
    head.weights.data = w.astype(head.dtype)
    head.bias.data = np.zeros_like(head.bias.data)
    head.mark_updated()
    return w


# ============================================================================
# RETRIEVAL & INTERPRETATION
# ============================================================================

@dataclass
class SimilarityResult:
    similar: List[Tuple[int, float]]
    dissimilar: List[Tuple[int, float]]


def similarity_query(head: RbfHead, query: np.ndarray, corpus: np.ndarray, top_n: int) -> SimilarityResult:
    """Rank corpus items by learned-metric distance to the query; ties go to the lower index."""
    corpus = np.asarray(corpus, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ShapeError("similarity query needs a non-empty [M,D] corpus")
    if query.shape != (corpus.shape[1],) or corpus.shape[1] != head.dim:
        raise ShapeError(f"query {query.shape} and corpus {corpus.shape} must match head dimension {head.dim}")
    if not 1 <= top_n <= corpus.shape[0]:
        raise ConfigError(f"top_n must be in [1, {corpus.shape[0]}], got {top_n}")

    r2, _ = _metric_sq(corpus - query, head)
    r2 = np.maximum(r2, 0.0)
    index = np.arange(corpus.shape[0])
    ascending = np.lexsort((index, r2))[:top_n]
    descending = np.lexsort((index, -r2))[:top_n]
    return SimilarityResult(
        similar=[(int(i), float(r2[i])) for i in ascending],
        dissimilar=[(int(i), float(r2[i])) for i in descending],
    )


def cluster_contributions(head: RbfHead, x: np.ndarray) -> np.ndarray:
    """contribution[j,k] = h_j(x) * w[j,k]; column sums plus bias give the logits."""
    fwd = rbf_forward(head, np.asarray(x).reshape(1, -1))
    return fwd.activations[0][:, None] * head.weights.data


def top_clusters(head: RbfHead, x: np.ndarray, k: int = 3, class_index: Optional[int] = None) -> List[Dict]:
    """Clusters ranked by contribution to one class (the predicted one by default)."""
    fwd = rbf_forward(head, np.asarray(x).reshape(1, -1))
    contributions = fwd.activations[0][:, None] * head.weights.data
    target = int(np.argmax(fwd.logits[0])) if class_index is None else class_index
    order = np.lexsort((np.arange(head.num_clusters), -contributions[:, target]))[:k]
    return [
        {
            "cluster": int(j),
            "class": target,
            "contribution": float(contributions[j, target]),
            "distance_sq": float(fwd.r2[0, j]),
        }
        for j in order
    ]
