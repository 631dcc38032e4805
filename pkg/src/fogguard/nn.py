"""Dense neural-network primitives: layers, losses, Adam, gradient checking.

Everything works on numpy arrays. A batch is a 2-D array with one sample per
row; single vectors are accepted wherever a batch is.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "softmax")
_ACTIVATION_TAGS = {"identity": 0, "relu": 1, "softmax": 2}
_TAG_ACTIVATIONS = {v: k for k, v in _ACTIVATION_TAGS.items()}

WEIGHTS_MAGIC = b"DFGW"
WEIGHTS_VERSION = 1


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2:
            raise ShapeError("weights must be a matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match {self.weights.shape[0]} rows"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "softmax":
        return softmax(z)
    return z


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, layer expects {layer.in_dim}")
    return activate(x @ layer.weights.T + layer.bias, layer.activation)


def dense_backward(layer: DenseLayer, x: np.ndarray, out: np.ndarray, grad_out: np.ndarray):
    """Backprop through one layer given its input, its output and dL/d(output).

    Returns ``(grad_input, grad_weights, grad_bias)``. Softmax layers are not
    differentiated here; the loss folds softmax into its gradient.
    """
    if layer.activation == "relu":
        grad_z = grad_out * (out > 0)
    elif layer.activation == "identity":
        grad_z = grad_out
    else:
        raise ValueError("backprop through a softmax layer is handled by the loss")
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_z)
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_in = grad_z @ layer.weights
    return grad_in, grad_w, grad_b


def he_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float32) -> DenseLayer:
    limit = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
    return DenseLayer(w, np.zeros(fan_out, dtype=dtype), "relu")


# -- losses -----------------------------------------------------------------


@dataclass
class LossSpec:
    kind: str = "cross_entropy"
    class_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "weighted_cross_entropy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        weighted = self.kind == "weighted_cross_entropy"
        if weighted != (self.class_weights is not None):
            raise ValueError("class_weights must be given exactly when the loss is weighted")
        if weighted:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights <= 0):
                raise ValueError("class weights must be positive")


def loss_and_grad(spec: LossSpec, logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy for a single sample; gradient is w.r.t. the logits."""
    logits = np.asarray(logits)
    k = logits.shape[-1]
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    loss, grad = batch_loss_and_grad(spec, logits[None, :], np.array([label]))
    return loss, grad[0]


def batch_loss_and_grad(spec: LossSpec, logits: np.ndarray, labels: np.ndarray):
    """Mean (optionally class-weighted) cross-entropy over a batch of logits."""
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    per_sample = log_z - shifted[rows, labels]
    probs = np.exp(shifted - log_z[:, None])
    probs[rows, labels] -= 1.0
    if spec.class_weights is not None:
        w = spec.class_weights[labels].astype(logits.dtype)
        per_sample = per_sample * w
        probs *= w[:, None]
    return float(per_sample.sum() / n), probs / n


# -- optimizer --------------------------------------------------------------


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    batch_size: int = 1024

    def __post_init__(self):
        if self.kind != "adam":
            raise ValueError("only the adam optimizer is supported")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class Adam:
    spec: OptimizerSpec = field(default_factory=OptimizerSpec)
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> Sequence[np.ndarray]:
        """Apply one bias-corrected Adam update to ``params`` in place."""
        if len(params) != len(grads):
            raise ShapeError("parameter and gradient lists differ in length")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        s = self.spec
        self.step_count += 1
        t = self.step_count
        corr1 = 1.0 - s.beta1**t
        corr2 = 1.0 - s.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p -= (s.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + s.epsilon)).astype(p.dtype)
        return params


# -- plain sequential network ------------------------------------------------


class MLP:
    """A plain stack of dense layers with a softmax cross-entropy head."""

    def __init__(self, layers: list[DenseLayer], loss: Optional[LossSpec] = None):
        self.layers = layers
        self.loss_spec = loss or LossSpec()

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int = 0, dtype=np.float32) -> "MLP":
        rng = np.random.default_rng(seed)
        layers = [he_uniform(rng, o, i, dtype) for i, o in zip(sizes[:-1], sizes[1:])]
        layers[-1].activation = "identity"
        return cls(layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = dense_forward(layer, x)
        return x

    def loss(self, x, y) -> float:
        return batch_loss_and_grad(self.loss_spec, np.atleast_2d(self.forward(x)), np.atleast_1d(y))[0]

    def loss_and_grads(self, x, y):
        acts = [np.atleast_2d(x)]
        for layer in self.layers:
            acts.append(dense_forward(layer, acts[-1]))
        loss, g = batch_loss_and_grad(self.loss_spec, acts[-1], np.atleast_1d(y))
        grads = []
        for layer, a_in, a_out in zip(reversed(self.layers), reversed(acts[:-1]), reversed(acts[1:])):
            g, gw, gb = dense_backward(layer, a_in, a_out, g)
            grads = [gw, gb] + grads
        return loss, grads


def grad_check(network, x, y, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``network`` needs ``parameters()``, ``loss(x, y)`` and ``loss_and_grads(x, y)``;
    parameters should be float64 for a meaningful answer.
    """
    _, analytic = network.loss_and_grads(x, y)
    worst = 0.0
    for p, g in zip(network.parameters(), analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = network.loss(x, y)
            flat[i] = orig - epsilon
            down = network.loss(x, y)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = gflat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def numeric_gradient(fn: Callable[[], float], param: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    flat = param.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = fn()
        flat[i] = orig - epsilon
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * epsilon)
    return out.reshape(param.shape)


# -- persistence ------------------------------------------------------------


def save_weights(path, layers: Sequence[DenseLayer]) -> None:
    chunks = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(layers))]
    for layer in layers:
        rows, cols = layer.weights.shape
        chunks.append(struct.pack("<IIB", rows, cols, _ACTIVATION_TAGS[layer.activation]))
        chunks.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> list[DenseLayer]:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weight file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weight format version {version}")
    off = 12
    layers = []
    for _ in range(count):
        rows, cols, tag = struct.unpack_from("<IIB", buf, off)
        off += 9
        w = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += 4 * rows * cols
        b = np.frombuffer(buf, dtype="<f4", count=rows, offset=off)
        off += 4 * rows
        layers.append(DenseLayer(w.astype(np.float32), b.astype(np.float32), _TAG_ACTIVATIONS[tag]))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return layers
