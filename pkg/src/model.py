"""
Classifier = convolutional (or MLP) backbone + RBF head.

The backbone ends in the embedding layer (a fully connected layer without an
activation). With head="fc" the backbone instead ends in a K-way fully
connected layer and there is no RBF head.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import ShapeError
from nn_core import LayerSpec, Network, NetworkTrace, Parameter, as_dtype, softmax, softmax_cross_entropy
from rbf_head import (
    KernelConfig,
    LossBreakdown,
    MetricMode,
    RbfForward,
    RbfHead,
    combined_loss_and_grads,
    rbf_backward,
    rbf_forward,
)

logger = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    arch: Literal["mnist_cnn", "mlp"] = "mnist_cnn"
    head: Literal["rbf", "fc"] = "rbf"
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    num_classes: int = Field(10, ge=2)
    clusters: int = Field(10, ge=1)
    embedding_dim: int = Field(64, ge=1)
    hidden: int = Field(64, ge=1)
    conv_channels: Tuple[int, int] = (16, 32)
    kernel: KernelConfig = KernelConfig()
    metric_mode: MetricMode = "full"
    per_cluster_sigma: bool = False
    plain_unsup: bool = False
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    precision: Literal["float32", "float64"] = "float32"


def backbone_specs(config: ModelConfig) -> List[LayerSpec]:
    """Layer list for the backbone; ends in the embedding (or K-way) fully connected layer."""
    if config.arch == "mnist_cnn":
        c1, c2 = config.conv_channels
        specs = [
            LayerSpec(kind="conv2d", kernel_size=3, padding=1, out_channels=c1),
            LayerSpec(kind="relu"),
            LayerSpec(kind="maxpool2d", kernel_size=2),
            LayerSpec(kind="conv2d", kernel_size=3, padding=1, out_channels=c2),
            LayerSpec(kind="relu"),
            LayerSpec(kind="maxpool2d", kernel_size=2),
            LayerSpec(kind="global_avg_pool"),
        ]
    else:
        specs = [
            LayerSpec(kind="flatten"),
            LayerSpec(kind="fully_connected", out_features=config.hidden),
            LayerSpec(kind="relu"),
        ]
    if config.dropout > 0:
        specs.append(LayerSpec(kind="dropout", p=config.dropout))
    specs.append(LayerSpec(kind="fully_connected", out_features=config.embedding_dim))
    if config.head == "fc":
        specs.append(LayerSpec(kind="fully_connected", out_features=config.num_classes))
    return specs


@dataclass
class ForwardPass:
    """Everything one forward call produced; hand it back to backward."""
    logits: np.ndarray
    embeddings: np.ndarray
    trace: NetworkTrace
    rbf: Optional[RbfForward] = None


class Classifier:
    def __init__(self, config: ModelConfig, backbone: Network, head: Optional[RbfHead]):
        self.config = config
        self.backbone = backbone
        self.head = head

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "Classifier":
        backbone = Network.build(backbone_specs(config), config.input_shape, rng, config.precision)
        head = None
        if config.head == "rbf":
            head = RbfHead(
                num_clusters=config.clusters,
                dim=config.embedding_dim,
                num_classes=config.num_classes,
                kernel=config.kernel,
                metric_mode=config.metric_mode,
                per_cluster_sigma=config.per_cluster_sigma,
                plain_unsup=config.plain_unsup,
                rng=rng,
                dtype=as_dtype(config.precision),
            )
        logger.debug(f"Built {config.arch} classifier with {config.head} head")
        return cls(config, backbone, head)

    @classmethod
    def from_meta(cls, meta: Dict) -> "Classifier":
        config = ModelConfig(**meta["model"])
        model = cls.build(config, np.random.default_rng(0))
        stored = [LayerSpec(**spec) for spec in meta["layers"]]
        if stored != model.backbone.specs:
            raise ValueError("stored layer specs do not match the model configuration")
        return model

    def meta(self) -> Dict:
        return {
            "model": self.config.model_dump(mode="json"),
            "layers": [spec.model_dump(mode="json") for spec in self.backbone.specs],
        }

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dtype(self) -> np.dtype:
        return self.backbone.dtype

    @property
    def version(self) -> Tuple[int, int]:
        return self.backbone.version, self.head.version if self.head else 0

    # ------------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------------

    def named_parameters(self) -> Dict[str, Parameter]:
        params = {f"backbone.{k}": p for k, p in self.backbone.named_parameters().items()}
        if self.head is not None:
            params.update({f"head.{k}": p for k, p in self.head.named_parameters().items()})
        return params

    @staticmethod
    def is_decayed(name: str) -> bool:
        """Weight decay applies to weight tensors only."""
        return name.endswith(".weight") or name == "head.weights"

    def mark_updated(self) -> None:
        self.backbone.mark_updated()
        if self.head is not None:
            self.head.mark_updated()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, param in params.items():
            if name not in state:
                raise ShapeError(f"state is missing {name}")
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError(f"{name} has shape {value.shape}, expected {param.shape}")
            param.data = value.astype(param.data.dtype, copy=True)
        self.mark_updated()

    # ------------------------------------------------------------------------
    # Passes
    # ------------------------------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False, rng: Optional[np.random.Generator] = None) -> ForwardPass:
        out, trace = self.backbone.forward(x, training, rng)
        if self.head is None:
            return ForwardPass(out, out, trace)
        fwd = rbf_forward(self.head, out)
        return ForwardPass(fwd.logits, out, trace, fwd)

    def backward(self, fp: ForwardPass, grad_logits: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """Returns (parameter gradients by name, gradient w.r.t. the input batch)."""
        grads: Dict[str, np.ndarray] = {}
        grad = grad_logits
        if self.head is not None:
            head_grads, grad = rbf_backward(self.head, fp.rbf, grad_logits)
            grads.update({f"head.{k}": g for k, g in head_grads.items()})
        net_grads, grad_input = self.backbone.backward(fp.trace, grad)
        grads.update({f"backbone.{k}": g for k, g in net_grads.items()})
        return grads, grad_input

    def loss_and_grads(
        self,
        x: np.ndarray,
        labels: np.ndarray,
        lam: float,
        training: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[LossBreakdown, Dict[str, np.ndarray], ForwardPass]:
        """Combined loss (cross-entropy + lam * nearest-center term) and gradients for every parameter."""
        embeddings, trace = self.backbone.forward(x, training, rng)
        if self.head is None:
            sup, grad_logits = softmax_cross_entropy(embeddings, labels)
            net_grads, _ = self.backbone.backward(trace, grad_logits)
            grads = {f"backbone.{k}": g for k, g in net_grads.items()}
            return LossBreakdown(sup, sup, 0.0), grads, ForwardPass(embeddings, embeddings, trace)

        breakdown, head_grads, grad_x, fwd = combined_loss_and_grads(self.head, embeddings, labels, lam)
        net_grads, _ = self.backbone.backward(trace, grad_x)
        grads = {f"head.{k}": g for k, g in head_grads.items()}
        grads.update({f"backbone.{k}": g for k, g in net_grads.items()})
        return breakdown, grads, ForwardPass(fwd.logits, embeddings, trace, fwd)

    # ------------------------------------------------------------------------
    # Inference
    # ------------------------------------------------------------------------

    @staticmethod
    def _batched(x: np.ndarray, batch_size: int, fn) -> np.ndarray:
        return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])

    def logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        if x.shape[0] == 0:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return self._batched(x, batch_size, lambda b: self.forward(b).logits)

    def embed(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inputs to the RBF head (or the backbone output for an fc head)."""
        if x.shape[0] == 0:
            return np.zeros((0, self.backbone.output_shape[0]), dtype=self.dtype)
        return self._batched(x, batch_size, lambda b: self.forward(b).embeddings)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return np.argmax(self.logits(x, batch_size), axis=1)

    def probabilities(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return softmax(self.logits(x, batch_size).astype(np.float64))

    # ------------------------------------------------------------------------
    # Input gradients (attacks)
    # ------------------------------------------------------------------------

    def input_gradient(self, x: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
        """Cross-entropy loss and its gradient w.r.t. the input batch."""
        fp = self.forward(x)
        loss, grad_logits = softmax_cross_entropy(fp.logits, labels)
        _, grad_input = self.backward(fp, grad_logits)
        return loss, grad_input

    def class_probability_gradient(self, x: np.ndarray, label: int) -> Tuple[np.ndarray, np.ndarray]:
        """Softmax probabilities of one image and the gradient of p[label] w.r.t. the image."""
        fp = self.forward(x)
        p = softmax(fp.logits.astype(np.float64))[0]
        grad_logits = -p[label] * p
        grad_logits[label] += p[label]
        _, grad_input = self.backward(fp, grad_logits[None, :].astype(self.dtype))
        return p, grad_input

    def logit_gradients(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Logits of one image [1,C,H,W] and the Jacobian d logit_k / d image, shape [K,C,H,W]."""
        if x.shape[0] != 1:
            raise ShapeError(f"logit_gradients takes a single image, got batch of {x.shape[0]}")
        fp = self.forward(x)
        jacobian = np.empty((self.num_classes,) + x.shape[1:], dtype=np.float64)
        for k in range(self.num_classes):
            seed = np.zeros((1, self.num_classes), dtype=self.dtype)
            seed[0, k] = 1
            _, grad_input = self.backward(fp, seed)
            jacobian[k] = grad_input[0]
        return fp.logits[0].astype(np.float64), jacobian
