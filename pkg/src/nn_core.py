"""
nn_core - dense tensor layers with exact forward/backward passes.

Tensors are numpy arrays in NCHW layout. Trainable tensors are wrapped in
Parameter so they can carry a same-shape gradient buffer. Nothing computed
during a pass is stored on a layer: every forward returns a per-call trace and
backward consumes it, so one trained Network can serve concurrent callers.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp, softmax as _softmax

from errors import NonFiniteError, ShapeError, StaleCacheError, UnsupportedLayerError
from settings import GRADCHECK_STEP

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}

LayerKind = Literal[
    "conv2d", "maxpool2d", "avgpool2d", "fully_connected",
    "relu", "dropout", "flatten", "global_avg_pool",
]
ReluRule = Literal["plain", "guided"]


def as_dtype(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ShapeError(f"unknown precision {precision!r}; use one of {sorted(DTYPES)}")


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")


@dataclass
class Parameter:
    """A trainable tensor and its optional gradient buffer."""
    name: str
    data: np.ndarray
    grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def set_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient for {self.name} has shape {grad.shape}, expected {self.data.shape}")
        self.grad = grad


def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ============================================================================
# FUNCTIONAL OPS
# ============================================================================

@dataclass
class ConvCache:
    input_shape: Tuple[int, ...]
    windows: np.ndarray
    weights: np.ndarray
    stride: int
    padding: int


def conv2d_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> Tuple[np.ndarray, ConvCache]:
    """Cross-correlate x[N,C,H,W] with weights[F,C,kH,kW]; zero padding."""
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weights, got {x.shape} and {weights.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weights.shape
    if c != cw:
        raise ShapeError(f"conv2d input has {c} channels, weights expect {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias shape {bias.shape}, expected ({f},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    check_finite(x)

    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} exceeds padded input {x.shape[2]}x{x.shape[3]}")

    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out), ConvCache((n, c, h, w), windows, weights, stride, padding)


def conv2d_backward(grad_out: np.ndarray, cache: Optional[ConvCache]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_weights, grad_bias)."""
    if cache is None:
        raise StaleCacheError("conv2d_backward called before conv2d_forward")
    n, c, h, w = cache.input_shape
    f, _, kh, kw = cache.weights.shape
    ho, wo = cache.windows.shape[2:4]
    if grad_out.shape != (n, f, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(n, f, ho, wo)}")

    grad_w = np.tensordot(grad_out, cache.windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))

    grad_windows = np.tensordot(grad_out, cache.weights, axes=([1], [0]))  # N,Ho,Wo,C,kH,kW
    p, s = cache.padding, cache.stride
    grad_padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                grad_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = grad_padded[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(grad_x), grad_w.astype(grad_out.dtype, copy=False), grad_b


def pool2d_forward(
    x: np.ndarray,
    kind: Literal["max", "avg"],
    k: int,
    stride: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pool x[N,C,H,W] over k x k windows.

    Returns (output, switches). For max pooling, switches hold the linear index
    (row * W + col) of each window's maximum within its input plane; ties go to
    the lowest index. Average pooling returns empty switches.
    """
    stride = stride or k
    if k < 1 or stride < 1:
        raise ShapeError(f"pooling needs k >= 1 and stride >= 1, got {k}, {stride}")
    if x.ndim != 4:
        raise ShapeError(f"pooling expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds input {h}x{w}")

    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2:4]
    if kind == "avg":
        return windows.mean(axis=(-2, -1)).astype(x.dtype, copy=False), np.empty((0,), dtype=np.int64)
    if kind != "max":
        raise ShapeError(f"unknown pooling kind {kind!r}")

    flat = windows.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    return out, (rows * w + cols).astype(np.int64)


def pool2d_backward(
    grad_out: np.ndarray,
    kind: Literal["max", "avg"],
    switches: np.ndarray,
    input_shape: Tuple[int, ...],
    k: int,
    stride: Optional[int] = None,
) -> np.ndarray:
    stride = stride or k
    n, c, h, w = input_shape
    ho, wo = grad_out.shape[2:4]
    if kind == "max":
        if switches.shape != grad_out.shape:
            raise StaleCacheError("max-pool switches do not match grad_out; run forward first")
        plane = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1, 1)
        flat = np.bincount((switches + plane).ravel(), weights=grad_out.ravel(), minlength=n * c * h * w)
        return flat.reshape(n, c, h, w).astype(grad_out.dtype)

    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    share = grad_out / (k * k)
    for i in range(k):
        for j in range(k):
            grad_x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += share
    return grad_x


def fully_connected_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"fully_connected shapes {x.shape} @ {weights.shape} do not agree")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"fully_connected bias shape {bias.shape}, expected ({weights.shape[1]},)")
    return x @ weights + bias


def fully_connected_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Returns (grad_input, grad_weights, grad_bias)."""
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray, rule: ReluRule = "plain") -> np.ndarray:
    """Gate by the forward input; the guided rule also drops negative upstream gradient."""
    gate = x > 0
    if rule == "guided":
        gate = gate & (grad_out > 0)
    return grad_out * gate


def dropout(
    x: np.ndarray,
    p: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout. Returns (output, scale mask or None when inactive)."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax(logits, axis=-1)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy of softmax(logits) against one-hot labels.

    Integer class ids are accepted as well and converted to one-hot.
    Returns (loss, grad_logits) with grad = (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ShapeError(f"softmax cross-entropy needs at least 2 classes, got {k}")
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = one_hot(labels, k, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ShapeError("labels must be valid one-hot rows")

    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - np.sum(logits * labels, axis=1)))
    grad = (softmax(logits) - labels) / n
    return loss, grad.astype(logits.dtype, copy=False)


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = GRADCHECK_STEP) -> np.ndarray:
    """Central finite differences of scalar f at x (x is restored afterwards)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    while not it.finished:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + h
        f_plus = f(x)
        x[idx] = original - h
        f_minus = f(x)
        x[idx] = original
        grad[idx] = (f_plus - f_minus) / (2 * h)
        it.iternext()
    return grad


# ============================================================================
# LAYERS
# ============================================================================

class LayerSpec(BaseModel):
    """Declarative description of one layer; channel/feature inputs are inferred at build time."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LayerKind
    kernel_size: int = Field(3, ge=1)
    stride: Optional[int] = Field(None, ge=1)
    padding: int = Field(0, ge=0)
    out_channels: Optional[int] = Field(None, ge=1)
    out_features: Optional[int] = Field(None, ge=1)
    p: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_required(self):
        if self.kind == "conv2d" and self.out_channels is None:
            raise ValueError("conv2d needs out_channels")
        if self.kind == "fully_connected" and self.out_features is None:
            raise ValueError("fully_connected needs out_features")
        return self

    @property
    def effective_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        return self.kernel_size if self.kind in ("maxpool2d", "avgpool2d") else 1


class Layer:
    """Base layer: stateless between calls apart from its parameters."""
    guided_rule = True

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.input_shape: Tuple[int, ...] = ()
        self.output_shape: Tuple[int, ...] = ()

    @property
    def kind(self) -> str:
        return self.spec.kind

    def build(self, input_shape: Tuple[int, ...], rng: np.random.Generator, dtype) -> Tuple[int, ...]:
        self.input_shape = tuple(input_shape)
        self.output_shape = self.infer_shape(self.input_shape)
        return self.output_shape

    def infer_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x, training: bool, rng) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, cache: Any, rule: ReluRule) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError


class Conv2D(Layer):
    def infer_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"conv2d needs [C,H,W] input, got {input_shape}")
        c, h, w = input_shape
        k, s, p = self.spec.kernel_size, self.spec.effective_stride, self.spec.padding
        if k > h + 2 * p or k > w + 2 * p:
            raise ShapeError(f"conv2d kernel {k} exceeds padded input {h}x{w} (padding {p})")
        return (self.spec.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def build(self, input_shape, rng, dtype):
        shape = super().build(input_shape, rng, dtype)
        c, k, f = input_shape[0], self.spec.kernel_size, self.spec.out_channels
        self.weight = Parameter("weight", glorot_uniform((f, c, k, k), c * k * k, f * k * k, rng, dtype))
        self.bias = Parameter("bias", np.zeros(f, dtype=dtype))
        return shape

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training, rng):
        return conv2d_forward(x, self.weight.data, self.bias.data, self.spec.effective_stride, self.spec.padding)

    def backward(self, grad, cache, rule):
        gx, gw, gb = conv2d_backward(grad, cache)
        return gx, {"weight": gw, "bias": gb}


class Pool2D(Layer):
    def __init__(self, spec: LayerSpec):
        super().__init__(spec)
        self.mode = "max" if spec.kind == "maxpool2d" else "avg"

    def infer_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"pooling needs [C,H,W] input, got {input_shape}")
        c, h, w = input_shape
        k, s = self.spec.kernel_size, self.spec.effective_stride
        if k > h or k > w:
            raise ShapeError(f"pool window {k} exceeds input {h}x{w}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x, training, rng):
        out, switches = pool2d_forward(x, self.mode, self.spec.kernel_size, self.spec.effective_stride)
        return out, (x.shape, switches)

    def backward(self, grad, cache, rule):
        input_shape, switches = cache
        gx = pool2d_backward(grad, self.mode, switches, input_shape, self.spec.kernel_size, self.spec.effective_stride)
        return gx, {}


class FullyConnected(Layer):
    def infer_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeError(f"fully_connected needs flat [D] input, got {input_shape}; add a flatten layer")
        return (self.spec.out_features,)

    def build(self, input_shape, rng, dtype):
        shape = super().build(input_shape, rng, dtype)
        d, k = input_shape[0], self.spec.out_features
        self.weight = Parameter("weight", glorot_uniform((d, k), d, k, rng, dtype))
        self.bias = Parameter("bias", np.zeros(k, dtype=dtype))
        return shape

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training, rng):
        return fully_connected_forward(x, self.weight.data, self.bias.data), x

    def backward(self, grad, cache, rule):
        gx, gw, gb = fully_connected_backward(grad, cache, self.weight.data)
        return gx, {"weight": gw, "bias": gb}


class ReLU(Layer):
    def forward(self, x, training, rng):
        return relu(x), x

    def backward(self, grad, cache, rule):
        return relu_backward(grad, cache, rule), {}


class Dropout(Layer):
    guided_rule = False

    def forward(self, x, training, rng):
        return dropout(x, self.spec.p, training, rng)

    def backward(self, grad, cache, rule):
        return (grad if cache is None else grad * cache), {}


class Flatten(Layer):
    def infer_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, rule):
        return grad.reshape(cache), {}


class GlobalAvgPool(Layer):
    def infer_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"global_avg_pool needs [C,H,W] input, got {input_shape}")
        return (input_shape[0],)

    def forward(self, x, training, rng):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, grad, cache, rule):
        n, c, h, w = cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), cache).copy(), {}


LAYER_TYPES = {
    "conv2d": Conv2D,
    "maxpool2d": Pool2D,
    "avgpool2d": Pool2D,
    "fully_connected": FullyConnected,
    "relu": ReLU,
    "dropout": Dropout,
    "flatten": Flatten,
    "global_avg_pool": GlobalAvgPool,
}


# ============================================================================
# NETWORK
# ============================================================================

@dataclass
class NetworkTrace:
    """Per-call record of a forward pass: inputs to every layer, caches and switches."""
    version: int
    input_shape: Tuple[int, ...]
    kinds: List[str] = field(default_factory=list)
    caches: List[Any] = field(default_factory=list)
    activations: List[np.ndarray] = field(default_factory=list)

    @property
    def switches(self) -> Dict[int, np.ndarray]:
        """Max-pool argmax indices keyed by layer position."""
        return {i: self.caches[i][1] for i, kind in enumerate(self.kinds) if kind == "maxpool2d"}


class Network:
    """Ordered layer stack with parameters theta."""

    def __init__(self, layers: Sequence[Layer], input_shape: Tuple[int, ...], dtype):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.version = 0

    @classmethod
    def build(
        cls,
        specs: Sequence[LayerSpec],
        input_shape: Tuple[int, ...],
        rng: np.random.Generator,
        precision: str = "float32",
    ) -> "Network":
        dtype = as_dtype(precision)
        layers = []
        shape = tuple(input_shape)
        for spec in specs:
            layer = LAYER_TYPES[spec.kind](spec)
            shape = layer.build(shape, rng, dtype)
            layers.append(layer)
        logger.debug(f"Built network with {len(layers)} layers, output shape {shape}")
        return cls(layers, input_shape, dtype)

    @property
    def specs(self) -> List[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.layers[-1].output_shape if self.layers else self.input_shape

    def named_parameters(self) -> Dict[str, Parameter]:
        return {
            f"layers.{i}.{p.name}": p
            for i, layer in enumerate(self.layers)
            for p in layer.parameters()
        }

    def mark_updated(self) -> None:
        """Invalidate every outstanding trace; call after mutating any parameter."""
        self.version += 1

    def last_conv_index(self) -> Optional[int]:
        for i in range(len(self.layers) - 1, -1, -1):
            if self.layers[i].kind == "conv2d":
                return i
        return None

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        stop: Optional[int] = None,
    ) -> Tuple[np.ndarray, NetworkTrace]:
        """Run layers [0, stop) (all by default)."""
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match network input {self.input_shape}")
        x = np.asarray(x, dtype=self.dtype)
        check_finite(x)
        trace = NetworkTrace(version=self.version, input_shape=x.shape)
        for layer in self.layers[:stop]:
            trace.activations.append(x)
            x, cache = layer.forward(x, training, rng)
            trace.kinds.append(layer.kind)
            trace.caches.append(cache)
        return x, trace

    def backward(
        self,
        trace: Optional[NetworkTrace],
        grad_out: np.ndarray,
        relu_rule: ReluRule = "plain",
    ) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """Returns (parameter gradients by name, gradient w.r.t. the input)."""
        if trace is None:
            raise StaleCacheError("backward called before forward")
        if trace.version != self.version:
            raise StaleCacheError("forward trace predates a parameter update; run forward again")

        grads: Dict[str, np.ndarray] = {}
        grad = np.asarray(grad_out, dtype=self.dtype)
        for i in range(len(trace.caches) - 1, -1, -1):
            layer = self.layers[i]
            if relu_rule == "guided" and not layer.guided_rule:
                raise UnsupportedLayerError(f"layer {i} ({layer.kind}) has no guided backpropagation rule")
            grad, layer_grads = layer.backward(grad, trace.caches[i], relu_rule)
            for name, g in layer_grads.items():
                grads[f"layers.{i}.{name}"] = g
        return grads, grad
